//! Seeded synthetic classification tasks.
//!
//! A task is a set of Gaussian blobs: one center per class, samples drawn
//! as `center + noise * N(0, I)`. Fine-tuning experiments pair a target
//! task with a *related* source task — the same centers nudged by a small
//! jitter and sampled with a different spread — so a network pretrained on
//! the source starts with useful early-layer features, which is exactly
//! the regime where freezing those layers is supposed to be cheap.
//!
//! All randomness flows through the caller's RNG, and every draw consumes
//! a fixed number of RNG words, so a given seed yields bit-identical data
//! no matter which engine features are switched on around it.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use rand::RngExt;

/// One standard-normal draw via the Box–Muller transform. Consumes exactly
/// two uniform draws, keeping RNG streams aligned across runs.
pub fn standard_normal(rng: &mut impl rand::Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1]: keeps ln finite
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// A labelled sample set: row `r` of `inputs` belongs to class `labels[r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` rows, used as a fixed probe set for representation
    /// checkpoints.
    pub fn prefix(&self, n: usize) -> Result<Dataset> {
        if n == 0 || n > self.len() {
            return Err(Error::invalid(format!(
                "cannot take a {n}-row prefix of a {}-row dataset",
                self.len()
            )));
        }
        let rows = (0..n).map(|r| self.inputs.row(r).to_vec()).collect();
        Ok(Dataset {
            inputs: Matrix::from_rows(rows)?,
            labels: self.labels[..n].to_vec(),
        })
    }
}

/// A Gaussian-blob classification task: one center per class.
#[derive(Debug, Clone)]
pub struct BlobTask {
    centers: Vec<Vec<f64>>,
    noise: f64,
}

impl BlobTask {
    /// Fresh task with `classes` centers drawn from `scale * N(0, I)` in
    /// `features` dimensions.
    pub fn new(
        classes: usize,
        features: usize,
        scale: f64,
        noise: f64,
        rng: &mut impl rand::Rng,
    ) -> Result<BlobTask> {
        if classes < 2 || features == 0 {
            return Err(Error::invalid("a task needs >= 2 classes and >= 1 feature"));
        }
        if !(noise >= 0.0 && noise.is_finite() && scale.is_finite()) {
            return Err(Error::invalid("blob noise and scale must be finite, noise >= 0"));
        }
        let centers = (0..classes)
            .map(|_| (0..features).map(|_| scale * standard_normal(rng)).collect())
            .collect();
        Ok(BlobTask { centers, noise })
    }

    /// A related task: the same centers nudged by `jitter * N(0, I)`, with
    /// its own sample spread. `jitter = 0` keeps the geometry identical.
    pub fn related(&self, jitter: f64, noise: f64, rng: &mut impl rand::Rng) -> Result<BlobTask> {
        if !(jitter >= 0.0 && jitter.is_finite() && noise >= 0.0 && noise.is_finite()) {
            return Err(Error::invalid("jitter and noise must be finite and >= 0"));
        }
        let centers = self
            .centers
            .iter()
            .map(|c| c.iter().map(|&v| v + jitter * standard_normal(rng)).collect())
            .collect();
        Ok(BlobTask { centers, noise })
    }

    pub fn classes(&self) -> usize {
        self.centers.len()
    }

    pub fn features(&self) -> usize {
        self.centers[0].len()
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    /// Draws `n` samples with uniformly random labels.
    pub fn sample(&self, n: usize, rng: &mut impl rand::Rng) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::invalid("cannot sample an empty dataset"));
        }
        let mut labels = Vec::with_capacity(n);
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let label = rng.random_range(0..self.classes());
            let row = self.centers[label]
                .iter()
                .map(|&c| c + self.noise * standard_normal(rng))
                .collect();
            labels.push(label);
            rows.push(row);
        }
        Ok(Dataset {
            inputs: Matrix::from_rows(rows)?,
            labels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn seeded_generation_is_reproducible() {
        let gen = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let task = BlobTask::new(4, 16, 1.0, 0.35, &mut rng).unwrap();
            task.sample(64, &mut rng).unwrap()
        };
        let a = gen(7);
        assert_eq!(a, gen(7), "same seed, same bytes");
        assert_ne!(a, gen(8), "different seed, different data");
    }

    #[test]
    fn normal_draws_have_unit_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean} too far from 0");
        assert!((var - 1.0).abs() < 0.03, "variance {var} too far from 1");
        assert!(draws.iter().all(|d| d.is_finite()));
    }

    #[test]
    fn samples_cluster_around_their_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let task = BlobTask::new(3, 8, 2.0, 0.05, &mut rng).unwrap();
        let data = task.sample(600, &mut rng).unwrap();
        for r in 0..data.len() {
            let center = &task.centers()[data.labels[r]];
            let d2: f64 = data
                .inputs
                .row(r)
                .iter()
                .zip(center)
                .map(|(x, c)| (x - c).powi(2))
                .sum();
            // 8 coordinates at sigma 0.05: staying within 0.5 of the center
            // leaves ~10 sigma of slack per coordinate.
            assert!(d2.sqrt() < 0.5, "sample {r} strayed {} from its blob", d2.sqrt());
        }
        let seen: std::collections::BTreeSet<_> = data.labels.iter().copied().collect();
        assert_eq!(seen.len(), 3, "every class should appear in 600 draws");
    }

    #[test]
    fn related_task_keeps_the_geometry_at_zero_jitter() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let task = BlobTask::new(4, 10, 1.0, 0.3, &mut rng).unwrap();
        let same = task.related(0.0, 0.5, &mut rng).unwrap();
        assert_eq!(task.centers(), same.centers());

        let moved = task.related(0.2, 0.5, &mut rng).unwrap();
        for (a, b) in task.centers().iter().zip(moved.centers()) {
            let shift: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!(shift > 0.0 && shift < 0.2 * 10.0, "jitter moved a center by {shift}");
        }
    }

    #[test]
    fn prefix_takes_the_first_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let task = BlobTask::new(2, 4, 1.0, 0.1, &mut rng).unwrap();
        let data = task.sample(10, &mut rng).unwrap();
        let probe = data.prefix(4).unwrap();
        assert_eq!(probe.len(), 4);
        assert_eq!(probe.labels, data.labels[..4]);
        assert_eq!(probe.inputs.row(3), data.inputs.row(3));
        assert!(data.prefix(0).is_err());
        assert!(data.prefix(11).is_err());
    }

    #[test]
    fn degenerate_tasks_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(BlobTask::new(1, 4, 1.0, 0.1, &mut rng).is_err());
        assert!(BlobTask::new(3, 0, 1.0, 0.1, &mut rng).is_err());
        assert!(BlobTask::new(3, 4, 1.0, -0.1, &mut rng).is_err());
        let task = BlobTask::new(3, 4, 1.0, 0.1, &mut rng).unwrap();
        assert!(task.sample(0, &mut rng).is_err());
        assert!(task.related(-1.0, 0.1, &mut rng).is_err());
    }
}
