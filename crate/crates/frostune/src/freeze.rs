//! Online decision rule for freezing converged layers.
//!
//! Between evaluation intervals the trainer accumulates every layer's
//! gradients into a [`GradWindow`]. At each tick the window yields one norm
//! per active layer, and the *relative change* of that norm against the
//! previous interval,
//!
//! ```text
//! eta_l = |  ||delta_{T-1}||  -  ||delta_T||  |  /  ||delta_{T-1}||
//! ```
//!
//! measures how fast layer `l` is still moving. Layers are only ever frozen
//! as a prefix: walking front-to-back, a layer freezes while its `eta` lies
//! strictly below the configured percentile of all active layers' values,
//! and the walk stops at the first layer that fails. A layer that fails once
//! can freeze at a later tick; a frozen layer never thaws.
//!
//! Two guard rails keep the rule sane: with fewer than two active layers the
//! test is skipped outright, and because the threshold is drawn from the
//! same values it gates, at least one active layer always survives a tick.

use crate::error::{Error, Result};
use crate::nn::GradientSet;
use std::collections::BTreeMap;

/// How the decision threshold is read off the sorted `eta` values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PercentileMethod {
    /// Interpolates between order statistics (rank `(len-1) * n / 100`).
    /// The default, and the variant all worked examples assume.
    LinearInterpolation,
    /// Smallest value whose rank covers `n` percent of the sample.
    NearestRank,
}

/// `n`-th percentile of `values` (unsorted input, `0 < n < 100`).
pub fn percentile(values: &[f64], n: f64, method: PercentileMethod) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty sample"));
    }
    if !(0.0..100.0).contains(&n) || n == 0.0 {
        return Err(Error::invalid(format!("percentile rank {n} outside (0, 100)")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("percentile over non-finite values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(match method {
        PercentileMethod::LinearInterpolation => {
            let rank = (sorted.len() - 1) as f64 * n / 100.0;
            let lo = rank.floor() as usize;
            let hi = rank.ceil() as usize;
            let frac = rank - lo as f64;
            sorted[lo] + frac * (sorted[hi] - sorted[lo])
        }
        PercentileMethod::NearestRank => {
            let idx = ((n / 100.0 * sorted.len() as f64).ceil() as usize).max(1) - 1;
            sorted[idx.min(sorted.len() - 1)]
        }
    })
}

/// Relative change between two successive accumulated-gradient norms. A zero
/// previous norm means the layer already stopped moving entirely, which we
/// score as maximally quiescent.
pub fn eta(prev_norm: f64, current_norm: f64) -> f64 {
    if prev_norm == 0.0 {
        0.0
    } else {
        (prev_norm - current_norm).abs() / prev_norm
    }
}

/// Accumulated gradients for the current interval plus the norms of the
/// previous one. Layer indices are absolute model indices.
#[derive(Debug, Clone)]
pub struct GradWindow {
    include_bias: bool,
    deltas: BTreeMap<usize, Vec<f64>>,
    previous_norms: Option<BTreeMap<usize, f64>>,
}

impl GradWindow {
    /// `include_bias` controls whether bias gradients join the per-layer
    /// flattened vector (they do by default; they are part of the layer).
    pub fn new(include_bias: bool) -> Self {
        GradWindow {
            include_bias,
            deltas: BTreeMap::new(),
            previous_norms: None,
        }
    }

    /// Elementwise-adds one step's gradients into the window. Every call in
    /// an interval must cover the same set of active layers.
    pub fn accumulate(&mut self, grads: &GradientSet) -> Result<()> {
        if self.deltas.is_empty() {
            for (j, g) in grads.active() {
                self.deltas.insert(j, flatten(g, self.include_bias));
            }
            return Ok(());
        }
        let incoming: Vec<usize> = grads.active().map(|(j, _)| j).collect();
        let stored: Vec<usize> = self.deltas.keys().copied().collect();
        if incoming != stored {
            return Err(Error::invalid(format!(
                "gradient layer set changed mid-interval: window has {stored:?}, step has {incoming:?}"
            )));
        }
        for (j, g) in grads.active() {
            let delta = self.deltas.get_mut(&j).expect("validated above");
            let flat = flatten(g, self.include_bias);
            if flat.len() != delta.len() {
                return Err(Error::shape("GradWindow::accumulate", delta.len(), flat.len()));
            }
            for (d, v) in delta.iter_mut().zip(flat) {
                *d += v;
            }
        }
        Ok(())
    }

    /// Layers currently tracked by the window.
    pub fn layers(&self) -> Vec<usize> {
        self.deltas.keys().copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    fn current_norms(&self) -> BTreeMap<usize, f64> {
        self.deltas
            .iter()
            .map(|(&j, d)| (j, l2_norm(d)))
            .collect()
    }
}

fn flatten(g: &crate::nn::LayerGrads, include_bias: bool) -> Vec<f64> {
    let mut flat = g.weights.data().to_vec();
    if include_bias {
        flat.extend_from_slice(&g.bias);
    }
    flat
}

fn l2_norm(v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for x in v {
        acc += x * x;
    }
    acc.sqrt()
}

/// Where the frozen prefix currently ends, plus the decision configuration.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FreezeState {
    frozen_boundary: usize,
    total_layers: usize,
    percentile_n: f64,
    method: PercentileMethod,
    /// `(interval, boundary_after)` per tick; the run's freezing schedule.
    history: Vec<(u64, usize)>,
    interval: u64,
}

impl FreezeState {
    pub fn new(total_layers: usize, percentile_n: f64, method: PercentileMethod) -> Result<Self> {
        if total_layers == 0 {
            return Err(Error::invalid("freeze state over zero layers"));
        }
        if !(percentile_n > 0.0 && percentile_n < 100.0) {
            return Err(Error::invalid(format!(
                "percentile rank must lie in (0, 100), got {percentile_n}"
            )));
        }
        Ok(FreezeState {
            frozen_boundary: 0,
            total_layers,
            percentile_n,
            method,
            history: Vec::new(),
            interval: 0,
        })
    }

    pub fn frozen_boundary(&self) -> usize {
        self.frozen_boundary
    }

    pub fn total_layers(&self) -> usize {
        self.total_layers
    }

    pub fn active_layers(&self) -> usize {
        self.total_layers - self.frozen_boundary
    }

    pub fn history(&self) -> &[(u64, usize)] {
        &self.history
    }
}

/// Applies the percentile rule to one interval's `eta` values (ordered by
/// layer, shallowest first) and returns the advanced state. Pure: the input
/// state is unchanged, and equal inputs give equal outputs.
pub fn decide(state: &FreezeState, etas: &[f64]) -> Result<FreezeState> {
    if etas.is_empty() {
        return Err(Error::invalid("freeze decision over an empty eta set"));
    }
    if etas.len() != state.active_layers() {
        return Err(Error::invalid(format!(
            "expected one eta per active layer ({}), got {}",
            state.active_layers(),
            etas.len()
        )));
    }
    let mut next = state.clone();
    if etas.len() < 2 {
        // A meaningful percentile needs at least two samples, and the last
        // trainable layer is never frozen automatically.
        return Ok(next);
    }
    let threshold = percentile(etas, state.percentile_n, state.method)?;
    let mut frozen = 0;
    for &e in etas {
        if e < threshold {
            frozen += 1;
        } else {
            break;
        }
    }
    next.frozen_boundary += frozen;
    debug_assert!(next.frozen_boundary < next.total_layers);
    Ok(next)
}

/// What one evaluation-interval tick concluded.
#[derive(Debug, Clone)]
pub struct TickOutcome {
    pub interval: u64,
    pub boundary_before: usize,
    pub boundary_after: usize,
    /// `None` on the very first tick, which only records norms.
    pub etas: Option<Vec<(usize, f64)>>,
    pub threshold: Option<f64>,
}

/// Closes the current interval: converts the window into per-layer norms,
/// scores `eta` against the previous interval, applies [`decide`], and rolls
/// the window forward. The first tick of a run records norms and decides
/// nothing, since `eta` needs two intervals.
pub fn interval_tick(state: &mut FreezeState, window: &mut GradWindow) -> Result<TickOutcome> {
    if window.is_empty() {
        return Err(Error::invalid("interval tick on an empty gradient window"));
    }
    let current = window.current_norms();
    let boundary_before = state.frozen_boundary;
    state.interval += 1;
    let interval = state.interval;

    let outcome = match window.previous_norms.take() {
        None => TickOutcome {
            interval,
            boundary_before,
            boundary_after: boundary_before,
            etas: None,
            threshold: None,
        },
        Some(previous) => {
            let mut etas = Vec::with_capacity(current.len());
            for (&j, &norm) in &current {
                let prev = *previous.get(&j).ok_or_else(|| {
                    Error::invalid(format!("no previous norm for layer {j}; window out of sync"))
                })?;
                etas.push((j, eta(prev, norm)));
            }
            let values: Vec<f64> = etas.iter().map(|&(_, e)| e).collect();
            let threshold = if values.len() >= 2 {
                Some(percentile(&values, state.percentile_n, state.method)?)
            } else {
                None
            };
            let next = decide(state, &values)?;
            state.frozen_boundary = next.frozen_boundary;
            TickOutcome {
                interval,
                boundary_before,
                boundary_after: state.frozen_boundary,
                etas: Some(etas),
                threshold,
            }
        }
    };

    state.history.push((interval, state.frozen_boundary));
    // Roll: current norms become the baseline, restricted to layers that are
    // still active after the decision; accumulation starts fresh.
    window.previous_norms = Some(
        current
            .into_iter()
            .filter(|&(j, _)| j >= state.frozen_boundary)
            .collect(),
    );
    window.deltas.clear();
    Ok(outcome)
}
