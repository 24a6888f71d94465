//! Representation similarity between layers of two checkpoints.
//!
//! Given two activation matrices (rows = the same probe samples, columns =
//! neurons), the score is computed in two stages:
//!
//! 1. **Subspace extraction.** Each matrix is column-centered and reduced by
//!    SVD to the smallest leading subspace that explains at least
//!    `variance_keep` of the total squared singular-value mass. This strips
//!    noise directions so the comparison sees what the layer actually
//!    represents.
//! 2. **Canonical correlation.** The kept subspaces are compared by CCA,
//!    which is invariant to any invertible linear map of either side. The
//!    score is the mean canonical correlation, in `[0, 1]`.
//!
//! A layer whose representation matches the fully converged reference run
//! (score at or above a threshold, conventionally 0.9) has stopped learning
//! in any way that matters, which makes this an after-the-fact oracle for
//! the freezing schedule: [`ideal_boundary`] reports how deep the converged
//! prefix runs, and [`ideal_schedule`] maps that over a whole run.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use nalgebra::DMatrix;

/// Relative cutoff under which a singular value counts as numerical noise.
const RANK_TOLERANCE: f64 = 1e-10;

/// Column-centers `m` and returns the orthonormal basis (left singular
/// vectors) of the smallest leading subspace holding `variance_keep` of the
/// squared singular-value mass.
fn kept_subspace(m: &Matrix, variance_keep: f64, context: &str) -> Result<DMatrix<f64>> {
    if m.rows() < 2 {
        return Err(Error::invalid(format!(
            "{context}: need at least 2 samples to compare representations, got {}",
            m.rows()
        )));
    }
    let mut centered = DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
    for mut col in centered.column_iter_mut() {
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        col.add_scalar_mut(-mean);
    }
    let svd = centered.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let sigma = svd.singular_values; // descending in this backend
    let sigma_max = sigma[0];
    if !(sigma_max > 0.0) || !sigma_max.is_finite() {
        return Err(Error::invalid(format!(
            "{context}: representation has numerical rank zero"
        )));
    }
    let rank = sigma.iter().filter(|&&s| s >= RANK_TOLERANCE * sigma_max).count();
    let total: f64 = sigma.iter().take(rank).map(|s| s * s).sum();
    let mut kept = 0;
    let mut mass = 0.0;
    while kept < rank && mass < variance_keep * total {
        mass += sigma[kept] * sigma[kept];
        kept += 1;
    }
    Ok(u.columns(0, kept.max(1)).into_owned())
}

/// Canonical correlations between the kept subspaces of `a` and `b`, sorted
/// descending and clamped into `[0, 1]`. Both matrices must cover the same
/// probe samples (equal row counts); neuron counts may differ.
pub fn canonical_correlations(a: &Matrix, b: &Matrix, variance_keep: f64) -> Result<Vec<f64>> {
    if a.rows() != b.rows() {
        return Err(Error::shape("canonical_correlations sample count", a.rows(), b.rows()));
    }
    if !(variance_keep > 0.0 && variance_keep <= 1.0) {
        return Err(Error::invalid(format!(
            "variance_keep must lie in (0, 1], got {variance_keep}"
        )));
    }
    let ua = kept_subspace(a, variance_keep, "first representation")?;
    let ub = kept_subspace(b, variance_keep, "second representation")?;
    // Columns of ua/ub are orthonormal, so the canonical correlations of the
    // two column spaces are exactly the singular values of ua' * ub.
    let cross = ua.transpose() * ub;
    let mut correlations: Vec<f64> = cross
        .svd(false, false)
        .singular_values
        .iter()
        .map(|s| s.clamp(0.0, 1.0))
        .collect();
    correlations.sort_by(|x, y| y.partial_cmp(x).unwrap());
    Ok(correlations)
}

/// Mean canonical correlation between the kept subspaces of `a` and `b`.
/// `1.0` means the layers represent the probe set identically up to an
/// invertible linear map; values near `0` mean unrelated representations.
pub fn svcca_score(a: &Matrix, b: &Matrix, variance_keep: f64) -> Result<f64> {
    let correlations = canonical_correlations(a, b, variance_keep)?;
    Ok(correlations.iter().sum::<f64>() / correlations.len() as f64)
}

/// How deep the converged prefix runs: the maximal `l` such that every layer
/// `i < l` scores at least `threshold` against the reference run's matching
/// layer. Stops at the first unconverged layer, mirroring how freezing only
/// ever claims a prefix.
pub fn ideal_boundary(
    current: &[Matrix],
    reference: &[Matrix],
    threshold: f64,
    variance_keep: f64,
) -> Result<usize> {
    if current.len() != reference.len() {
        return Err(Error::shape("ideal_boundary layer count", reference.len(), current.len()));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid(format!(
            "convergence threshold must lie in (0, 1], got {threshold}"
        )));
    }
    let mut boundary = 0;
    for (cur, fin) in current.iter().zip(reference) {
        if svcca_score(cur, fin, variance_keep)? >= threshold {
            boundary += 1;
        } else {
            break;
        }
    }
    Ok(boundary)
}

/// [`ideal_boundary`] applied to every checkpoint of a run, yielding the
/// hindsight freezing schedule an oracle would have chosen.
pub fn ideal_schedule(
    checkpoints: &[Vec<Matrix>],
    reference: &[Matrix],
    threshold: f64,
    variance_keep: f64,
) -> Result<Vec<usize>> {
    checkpoints
        .iter()
        .map(|ckpt| ideal_boundary(ckpt, reference, threshold, variance_keep))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn identical_representations_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = gaussian(200, 8, &mut rng);
        let score = svcca_score(&a, &a, 0.99).unwrap();
        assert!((score - 1.0).abs() < 1e-9, "self-score was {score}");
    }

    #[test]
    fn unrelated_representations_score_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = gaussian(500, 5, &mut rng);
        let b = gaussian(500, 5, &mut rng);
        let score = svcca_score(&a, &b, 0.99).unwrap();
        assert!(score < 0.3, "independent noise scored {score}");
    }

    #[test]
    fn zero_matrix_is_rejected() {
        let z = Matrix::zeros(50, 4);
        assert!(svcca_score(&z, &z, 0.99).is_err());
    }

    #[test]
    fn mismatched_sample_counts_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = gaussian(100, 4, &mut rng);
        let b = gaussian(101, 4, &mut rng);
        assert!(svcca_score(&a, &b, 0.99).is_err());
    }

    #[test]
    fn variance_keep_bounds_are_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = gaussian(50, 3, &mut rng);
        assert!(svcca_score(&a, &a, 0.0).is_err());
        assert!(svcca_score(&a, &a, 1.5).is_err());
        assert!(svcca_score(&a, &a, 1.0).is_ok());
    }

    #[test]
    fn dominant_direction_survives_truncation() {
        // One strong shared signal plus per-matrix noise that is orders of
        // magnitude weaker. A tight variance budget keeps only the shared
        // direction (score ~1); keeping everything dilutes the score with
        // an uncorrelated second direction (score ~0.5).
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let n = 300;
        let signal: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let build = |rng: &mut ChaCha8Rng| {
            let mut data = Vec::with_capacity(n * 2);
            for s in &signal {
                data.push(*s * 10.0);
                data.push(rng.random_range(-0.01..0.01));
            }
            Matrix::new(n, 2, data).unwrap()
        };
        let a = build(&mut rng);
        let b = build(&mut rng);
        let truncated = svcca_score(&a, &b, 0.9).unwrap();
        let full = svcca_score(&a, &b, 1.0).unwrap();
        assert!(truncated > 0.999, "shared dominant direction scored {truncated}");
        assert!((full - 0.5).abs() < 0.05, "full-rank score was {full}");
    }

    #[test]
    fn schedule_reports_the_converged_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let reference: Vec<Matrix> = (0..4).map(|_| gaussian(200, 6, &mut rng)).collect();
        let noise: Vec<Matrix> = (0..4).map(|_| gaussian(200, 6, &mut rng)).collect();
        // Checkpoints converge front-to-back: 0, 2, then all 4 layers match.
        let checkpoints: Vec<Vec<Matrix>> = [0usize, 2, 4]
            .iter()
            .map(|&converged| {
                (0..4)
                    .map(|l| if l < converged { reference[l].clone() } else { noise[l].clone() })
                    .collect()
            })
            .collect();
        let schedule = ideal_schedule(&checkpoints, &reference, 0.9, 0.99).unwrap();
        assert_eq!(schedule, vec![0, 2, 4]);
    }

    #[test]
    fn boundary_stops_at_the_first_unconverged_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let reference: Vec<Matrix> = (0..3).map(|_| gaussian(200, 6, &mut rng)).collect();
        // Layer 1 unconverged even though layer 2 matches: prefix must stop.
        let current = vec![
            reference[0].clone(),
            gaussian(200, 6, &mut rng),
            reference[2].clone(),
        ];
        let boundary = ideal_boundary(&current, &reference, 0.9, 0.99).unwrap();
        assert_eq!(boundary, 1);
    }
}
