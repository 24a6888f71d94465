//! Analytic simulator for data-parallel fine-tuning under layer freezing.
//!
//! Nothing here launches processes: the module evaluates closed-form models
//! of one training iteration and plans how to repack a cluster as freezing
//! shrinks the gradient and activation footprint.
//!
//! * Communication: ring-allreduce over `k` gradient buckets,
//!   `t = k * (alpha*(p-1) + 2*b*(p-1)/(p*BW))`, overlapped with compute so
//!   an iteration costs `max(T_comp, T_comm)`.
//! * Memory: `weights + active*grad_bytes + batch*active*activation_bytes`
//!   per worker, plus an optional per-sample fixed term (see
//!   [`ModelProfile::fixed_bytes_per_sample`]).
//! * Planning: [`plan_efficiency`] sheds workers while preserving the total
//!   effective batch (cheapest), [`plan_performance`] keeps every worker and
//!   grows the per-worker batch (fastest), and [`plan_full`] is the
//!   no-repacking baseline.

use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// The cluster being simulated.
#[derive(Debug, Clone)]
pub struct ClusterConfig {
    /// Worker count `p`.
    pub workers: usize,
    /// Interconnect bandwidth in bytes/second.
    pub bandwidth: f64,
    /// Latency cost per message, in seconds.
    pub latency: f64,
    /// Currency charged per worker-second.
    pub cost_rate: f64,
    /// Per-worker memory budget in bytes.
    pub worker_memory: u64,
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers < 1 {
            return Err(Error::invalid("cluster needs at least one worker"));
        }
        if !(self.bandwidth > 0.0) {
            return Err(Error::invalid(format!("bandwidth must be positive, got {}", self.bandwidth)));
        }
        if self.latency < 0.0 || self.cost_rate < 0.0 {
            return Err(Error::invalid("latency and cost rate must be nonnegative"));
        }
        Ok(())
    }
}

/// Per-iteration compute time as a function of active layers and batch.
#[derive(Debug, Clone)]
pub enum ComputeTimeModel {
    /// Proportional to work: `flops_per_sample_layer * active * batch *
    /// seconds_per_flop`.
    PerSampleLayerFlops { flops_per_sample_layer: f64, seconds_per_flop: f64 },
    /// Exact measurements keyed by `(active_layers, per_worker_batch)`.
    /// Missing entries are an error, never an extrapolation.
    Measured(BTreeMap<(usize, u64), f64>),
}

impl ComputeTimeModel {
    pub fn t_comp(&self, active_layers: usize, per_worker_batch: u64) -> Result<f64> {
        match self {
            ComputeTimeModel::PerSampleLayerFlops { flops_per_sample_layer, seconds_per_flop } => {
                Ok(flops_per_sample_layer
                    * active_layers as f64
                    * per_worker_batch as f64
                    * seconds_per_flop)
            }
            ComputeTimeModel::Measured(table) => {
                table.get(&(active_layers, per_worker_batch)).copied().ok_or_else(|| {
                    Error::invalid(format!(
                        "no measured compute time for {active_layers} active layers at per-worker batch {per_worker_batch}"
                    ))
                })
            }
        }
    }
}

/// How the last (usually partial) gradient bucket is charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BucketTiming {
    /// Every one of the `k` buckets is charged at the full bucket size —
    /// the communication formula taken verbatim.
    #[default]
    AllFullSize,
    /// The final bucket is charged at its true remainder size.
    ExactLastBucket,
}

/// Size and cost structure of the model being trained.
#[derive(Debug, Clone)]
pub struct ModelProfile {
    /// Total freezable layers (boundary ranges over `0..=total_layers`).
    pub total_layers: usize,
    /// Bytes of model weights resident on every worker regardless of freezing.
    pub weight_bytes: u64,
    /// Gradient bytes per active layer (also the bytes communicated for it).
    pub grad_bytes_per_layer: u64,
    /// Activation bytes per sample per active layer.
    pub activation_bytes_per_sample_layer: u64,
    /// Extra bytes per sample independent of depth (inputs, labels, copy
    /// buffers). Zero gives the pure three-term memory model; nonzero lets a
    /// profile match hardware where batch growth is sublinear in freed depth.
    pub fixed_bytes_per_sample: u64,
    /// Allreduce bucket size `b` in bytes.
    pub bucket_bytes: u64,
    /// Charge model for the last bucket.
    pub bucket_timing: BucketTiming,
    pub compute: ComputeTimeModel,
}

impl ModelProfile {
    pub fn validate(&self) -> Result<()> {
        if self.total_layers == 0 {
            return Err(Error::invalid("profile needs at least one layer"));
        }
        if self.bucket_bytes == 0 {
            return Err(Error::invalid("bucket size must be positive"));
        }
        Ok(())
    }
}

/// Gradient bucketing after freezing: frozen layers' bytes leave the tail
/// first, then `k = ceil(remaining/b)` with the remainder in the last bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Buckets {
    pub count: u64,
    pub bucket_bytes: u64,
    pub last_bucket_bytes: u64,
}

pub fn buckets_at(profile: &ModelProfile, freeze_boundary: usize) -> Result<Buckets> {
    profile.validate()?;
    if freeze_boundary > profile.total_layers {
        return Err(Error::invalid(format!(
            "freeze boundary {freeze_boundary} exceeds {} layers",
            profile.total_layers
        )));
    }
    let active = (profile.total_layers - freeze_boundary) as u64;
    let remaining = active * profile.grad_bytes_per_layer;
    if remaining == 0 {
        return Ok(Buckets { count: 0, bucket_bytes: profile.bucket_bytes, last_bucket_bytes: 0 });
    }
    let count = remaining.div_ceil(profile.bucket_bytes);
    let last = remaining - (count - 1) * profile.bucket_bytes;
    Ok(Buckets { count, bucket_bytes: profile.bucket_bytes, last_bucket_bytes: last })
}

/// Ring-allreduce time for `k` buckets of `bucket_bytes` over `workers`
/// machines: `k * (latency*(p-1) + 2*bytes*(p-1)/(p*BW))`. Zero for a single
/// worker: there is nothing to exchange.
pub fn t_comm(k: u64, bucket_bytes: f64, workers: usize, bandwidth: f64, latency: f64) -> f64 {
    if workers <= 1 {
        return 0.0;
    }
    let p = workers as f64;
    k as f64 * (latency * (p - 1.0) + 2.0 * bucket_bytes * (p - 1.0) / (p * bandwidth))
}

/// Communication time for a bucket layout, honoring the tail-charge model.
pub fn t_comm_buckets(
    buckets: Buckets,
    workers: usize,
    bandwidth: f64,
    latency: f64,
    timing: BucketTiming,
) -> f64 {
    match timing {
        BucketTiming::AllFullSize => {
            t_comm(buckets.count, buckets.bucket_bytes as f64, workers, bandwidth, latency)
        }
        BucketTiming::ExactLastBucket => {
            if buckets.count == 0 {
                return 0.0;
            }
            t_comm(buckets.count - 1, buckets.bucket_bytes as f64, workers, bandwidth, latency)
                + t_comm(1, buckets.last_bucket_bytes as f64, workers, bandwidth, latency)
        }
    }
}

/// Iterations needed to cover `n` samples at total batch `total_batch`.
pub fn iterations(n: u64, total_batch: u64) -> Result<u64> {
    if total_batch == 0 {
        return Err(Error::invalid("total batch size must be at least 1"));
    }
    Ok(n.div_ceil(total_batch))
}

/// One epoch's wall time: every iteration costs the slower of compute and
/// communication, since the two overlap.
pub fn epoch_time(n: u64, total_batch: u64, t_comp: f64, t_comm: f64) -> Result<f64> {
    Ok(iterations(n, total_batch)? as f64 * t_comp.max(t_comm))
}

/// Per-worker bytes needed to train with `active_layers` unfrozen at the
/// given batch: resident weights, per-layer gradients, and per-sample
/// per-layer activations (plus the optional per-sample fixed term).
pub fn memory_required(active_layers: usize, per_worker_batch: u64, profile: &ModelProfile) -> u64 {
    let active = active_layers as u64;
    profile.weight_bytes
        + active * profile.grad_bytes_per_layer
        + per_worker_batch * active * profile.activation_bytes_per_sample_layer
        + per_worker_batch * profile.fixed_bytes_per_sample
}

/// Largest per-worker batch that fits the memory budget with
/// `active_layers` unfrozen. `Ok(None)` means unbounded (no per-sample cost).
pub fn max_batch(active_layers: usize, budget: u64, profile: &ModelProfile) -> Result<Option<u64>> {
    let fixed = memory_required(active_layers, 0, profile);
    if fixed > budget {
        return Err(Error::Infeasible(format!(
            "weights and gradients alone need {fixed} bytes, budget is {budget}"
        )));
    }
    let per_sample = active_layers as u64 * profile.activation_bytes_per_sample_layer
        + profile.fixed_bytes_per_sample;
    if per_sample == 0 {
        return Ok(None);
    }
    Ok(Some((budget - fixed) / per_sample))
}

/// Repacking strategy of a [`PackingPlan`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanMode {
    Full,
    Efficiency,
    Performance,
}

impl std::fmt::Display for PlanMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            PlanMode::Full => "full",
            PlanMode::Efficiency => "efficiency",
            PlanMode::Performance => "performance",
        };
        f.write_str(name)
    }
}

/// A fully evaluated cluster configuration for one freezing state.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PackingPlan {
    pub mode: PlanMode,
    pub freeze_boundary: usize,
    /// Workers actually used (`p'`).
    pub workers: usize,
    pub per_worker_batch: u64,
    pub total_batch: u64,
    pub iterations: u64,
    pub t_comp: f64,
    pub t_comm: f64,
    /// `max(t_comp, t_comm)`: compute and communication overlap.
    pub iteration_time: f64,
    pub epoch_time: f64,
    /// `epoch_time * workers * cost_rate`.
    pub epoch_cost: f64,
}

struct PlanInputs<'a> {
    cluster: &'a ClusterConfig,
    profile: &'a ModelProfile,
    n: u64,
    boundary: usize,
}

fn evaluate(
    inputs: &PlanInputs,
    mode: PlanMode,
    workers: usize,
    per_worker_batch: u64,
    total_batch: u64,
) -> Result<PackingPlan> {
    let active = inputs.profile.total_layers - inputs.boundary;
    if memory_required(active, per_worker_batch, inputs.profile) > inputs.cluster.worker_memory {
        return Err(Error::Infeasible(format!(
            "per-worker batch {per_worker_batch} with {active} active layers exceeds worker memory"
        )));
    }
    let t_comp = inputs.profile.compute.t_comp(active, per_worker_batch)?;
    let buckets = buckets_at(inputs.profile, inputs.boundary)?;
    let t_comm = t_comm_buckets(
        buckets,
        workers,
        inputs.cluster.bandwidth,
        inputs.cluster.latency,
        inputs.profile.bucket_timing,
    );
    let iterations = iterations(inputs.n, total_batch)?;
    let iteration_time = t_comp.max(t_comm);
    let epoch_time = iterations as f64 * iteration_time;
    Ok(PackingPlan {
        mode,
        freeze_boundary: inputs.boundary,
        workers,
        per_worker_batch,
        total_batch,
        iterations,
        t_comp,
        t_comm,
        iteration_time,
        epoch_time,
        epoch_cost: epoch_time * workers as f64 * inputs.cluster.cost_rate,
    })
}

fn check_inputs(inputs: &PlanInputs, initial_per_worker: u64) -> Result<()> {
    inputs.cluster.validate()?;
    inputs.profile.validate()?;
    if inputs.boundary > inputs.profile.total_layers {
        return Err(Error::invalid(format!(
            "freeze boundary {} exceeds {} layers",
            inputs.boundary, inputs.profile.total_layers
        )));
    }
    if initial_per_worker == 0 {
        return Err(Error::invalid("initial per-worker batch must be at least 1"));
    }
    if inputs.n == 0 {
        return Err(Error::invalid("dataset must contain at least one sample"));
    }
    let full_max = max_batch(inputs.profile.total_layers, inputs.cluster.worker_memory, inputs.profile)?;
    if let Some(limit) = full_max {
        if initial_per_worker > limit {
            return Err(Error::Infeasible(format!(
                "initial per-worker batch {initial_per_worker} exceeds the full-network memory maximum {limit}"
            )));
        }
    }
    Ok(())
}

/// The no-repacking baseline: the initial `p` workers and `b0` per worker,
/// re-costed at the given freeze boundary.
pub fn plan_full(
    freeze_boundary: usize,
    cluster: &ClusterConfig,
    profile: &ModelProfile,
    n: u64,
    initial_per_worker: u64,
) -> Result<PackingPlan> {
    let inputs = PlanInputs { cluster, profile, n, boundary: freeze_boundary };
    check_inputs(&inputs, initial_per_worker)?;
    let total = initial_per_worker * cluster.workers as u64;
    evaluate(&inputs, PlanMode::Full, cluster.workers, initial_per_worker, total)
}

/// Packs the unchanged total batch `b0 * p` onto the fewest workers whose
/// memory now holds it: cost goes down, the iteration count stays put.
///
/// The boundary-zero plan equals [`plan_full`] when `b0` is the full-network
/// memory maximum (the normal calling convention); slack memory at the start
/// would let even the unfrozen network shed workers.
pub fn plan_efficiency(
    freeze_boundary: usize,
    cluster: &ClusterConfig,
    profile: &ModelProfile,
    n: u64,
    initial_per_worker: u64,
) -> Result<PackingPlan> {
    let inputs = PlanInputs { cluster, profile, n, boundary: freeze_boundary };
    check_inputs(&inputs, initial_per_worker)?;
    let active = profile.total_layers - freeze_boundary;
    let total = initial_per_worker * cluster.workers as u64;
    let batch_limit = match max_batch(active, cluster.worker_memory, profile)? {
        None => total, // unbounded memory: one worker holds everything
        Some(0) => {
            return Err(Error::Infeasible(
                "not even a single sample fits per worker at this boundary".into(),
            ))
        }
        Some(limit) => limit.min(total),
    };
    let workers = total.div_ceil(batch_limit).max(1) as usize;
    let per_worker = total.div_ceil(workers as u64);
    evaluate(&inputs, PlanMode::Efficiency, workers, per_worker, total)
}

/// Keeps all `p` workers and raises the per-worker batch to the memory
/// maximum (optionally capped by a total-batch ceiling): wall time goes
/// down, every worker keeps billing.
pub fn plan_performance(
    freeze_boundary: usize,
    cluster: &ClusterConfig,
    profile: &ModelProfile,
    n: u64,
    initial_per_worker: u64,
    max_total_batch: Option<u64>,
) -> Result<PackingPlan> {
    let inputs = PlanInputs { cluster, profile, n, boundary: freeze_boundary };
    check_inputs(&inputs, initial_per_worker)?;
    let initial_total = initial_per_worker * cluster.workers as u64;
    if let Some(cap) = max_total_batch {
        if cap < initial_total {
            return Err(Error::invalid(format!(
                "total-batch cap {cap} is below the initial total batch {initial_total}"
            )));
        }
    }
    let active = profile.total_layers - freeze_boundary;
    let memory_limit = max_batch(active, cluster.worker_memory, profile)?;
    let cap_limit = max_total_batch.map(|cap| cap / cluster.workers as u64);
    let per_worker = match (memory_limit, cap_limit) {
        (Some(m), Some(c)) => m.min(c),
        (Some(m), None) => m,
        (None, Some(c)) => c,
        (None, None) => {
            return Err(Error::Infeasible(
                "per-worker batch is unbounded (no per-sample memory cost); set a total-batch cap"
                    .into(),
            ))
        }
    };
    let total = per_worker * cluster.workers as u64;
    evaluate(&inputs, PlanMode::Performance, cluster.workers, per_worker, total)
}

/// Head-to-head report between the two repacking strategies.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Comparison {
    /// Efficiency epoch time over Performance epoch time (how much faster
    /// the fast plan is).
    pub time_ratio: f64,
    /// Performance epoch cost over Efficiency epoch cost (how much cheaper
    /// the cheap plan is).
    pub cost_ratio: f64,
    pub faster: PlanMode,
    pub cheaper: PlanMode,
}

pub fn compare(efficiency: &PackingPlan, performance: &PackingPlan) -> Comparison {
    Comparison {
        time_ratio: efficiency.epoch_time / performance.epoch_time,
        cost_ratio: performance.epoch_cost / efficiency.epoch_cost,
        faster: if performance.epoch_time <= efficiency.epoch_time {
            PlanMode::Performance
        } else {
            PlanMode::Efficiency
        },
        cheaper: if efficiency.epoch_cost <= performance.epoch_cost {
            PlanMode::Efficiency
        } else {
            PlanMode::Performance
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_profile() -> ModelProfile {
        ModelProfile {
            total_layers: 4,
            weight_bytes: 1000,
            grad_bytes_per_layer: 400,
            activation_bytes_per_sample_layer: 10,
            fixed_bytes_per_sample: 0,
            bucket_bytes: 300,
            bucket_timing: BucketTiming::AllFullSize,
            compute: ComputeTimeModel::PerSampleLayerFlops {
                flops_per_sample_layer: 1.0,
                seconds_per_flop: 1e-3,
            },
        }
    }

    #[test]
    fn single_worker_never_communicates() {
        assert_eq!(t_comm(5, 1e9, 1, 1.0, 10.0), 0.0);
    }

    #[test]
    fn communication_formula_hand_check() {
        // 2 buckets of 1 MB over 4 workers at 1 GB/s with 1 ms latency:
        // 2 * (3e-3 + 2*1e6*3 / 4e9) = 2 * 4.5e-3 = 9 ms.
        let t = t_comm(2, 1e6, 4, 1e9, 1e-3);
        assert!((t - 0.009).abs() < 1e-15, "got {t}");
    }

    #[test]
    fn communication_is_linear_in_bucket_count() {
        let one = t_comm(3, 5e5, 8, 2e9, 2e-4);
        let two = t_comm(6, 5e5, 8, 2e9, 2e-4);
        assert_eq!(two, 2.0 * one);
    }

    #[test]
    fn freezing_reshapes_buckets_from_the_tail() {
        let profile = flat_profile();
        // 4 layers * 400 B = 1600 B at bucket 300: k = 6, last = 100.
        let full = buckets_at(&profile, 0).unwrap();
        assert_eq!((full.count, full.last_bucket_bytes), (6, 100));
        // Freeze 3: 400 B left -> k = 2, last = 100.
        let deep = buckets_at(&profile, 3).unwrap();
        assert_eq!((deep.count, deep.last_bucket_bytes), (2, 100));
        // Freeze all: nothing to send.
        let all = buckets_at(&profile, 4).unwrap();
        assert_eq!(all.count, 0);
        assert_eq!(
            t_comm_buckets(all, 8, 1e9, 1e-3, BucketTiming::ExactLastBucket),
            0.0
        );
    }

    #[test]
    fn exact_tail_charge_is_cheaper_than_uniform() {
        let profile = flat_profile();
        let buckets = buckets_at(&profile, 0).unwrap();
        let uniform = t_comm_buckets(buckets, 4, 1e9, 0.0, BucketTiming::AllFullSize);
        let exact = t_comm_buckets(buckets, 4, 1e9, 0.0, BucketTiming::ExactLastBucket);
        assert!(exact < uniform, "partial last bucket must cost less than a full one");
        // And they agree when the tail happens to be full-size.
        let even = Buckets { count: 2, bucket_bytes: 300, last_bucket_bytes: 300 };
        assert_eq!(
            t_comm_buckets(even, 4, 1e9, 1e-3, BucketTiming::AllFullSize),
            t_comm_buckets(even, 4, 1e9, 1e-3, BucketTiming::ExactLastBucket)
        );
    }

    #[test]
    fn iteration_count_uses_ceiling_division() {
        assert_eq!(iterations(120_000, 3456).unwrap(), 35);
        assert_eq!(iterations(120_000, 384).unwrap(), 313);
        assert_eq!(iterations(10, 10).unwrap(), 1);
        assert!(iterations(10, 0).is_err());
    }

    #[test]
    fn epoch_time_is_iterations_times_slowest_of_the_overlap() {
        let t = epoch_time(1000, 100, 2.0, 0.5).unwrap();
        assert_eq!(t, 20.0, "compute-bound");
        let t = epoch_time(1000, 100, 0.5, 2.0).unwrap();
        assert_eq!(t, 20.0, "communication-bound");
    }

    #[test]
    fn memory_model_terms() {
        let profile = flat_profile();
        assert_eq!(memory_required(0, 7, &profile), 1000, "weights only at zero active layers");
        let base = memory_required(3, 10, &profile);
        let doubled = memory_required(3, 20, &profile);
        assert_eq!(doubled - base, 10 * 3 * 10, "batch growth adds batch*layers*act bytes");
        // Largest batch: (budget - 1000 - 3*400) / (3*10).
        assert_eq!(max_batch(3, 2800, &profile).unwrap(), Some(20));
        assert!(max_batch(4, 1000, &profile).is_err(), "weights+grads alone overflow");
        // No per-sample cost at zero active layers: unbounded.
        assert_eq!(max_batch(0, 2000, &profile).unwrap(), None);
    }

    #[test]
    fn boundary_zero_plans_coincide_when_memory_is_tight() {
        // Budget sized so the full network fits batch 5 exactly.
        let profile = flat_profile();
        let budget = memory_required(4, 5, &profile);
        let cluster = ClusterConfig {
            workers: 6,
            bandwidth: 1e9,
            latency: 1e-4,
            cost_rate: 2.0,
            worker_memory: budget,
        };
        let n = 600;
        let full = plan_full(0, &cluster, &profile, n, 5).unwrap();
        let eff = plan_efficiency(0, &cluster, &profile, n, 5).unwrap();
        let perf = plan_performance(0, &cluster, &profile, n, 5, Some(30)).unwrap();
        for plan in [&eff, &perf] {
            assert_eq!(plan.workers, full.workers);
            assert_eq!(plan.per_worker_batch, full.per_worker_batch);
            assert_eq!(plan.total_batch, full.total_batch);
            assert_eq!(plan.iterations, full.iterations);
            assert_eq!(plan.epoch_time, full.epoch_time);
            assert_eq!(plan.epoch_cost, full.epoch_cost);
        }
    }

    #[test]
    fn infeasible_plans_are_loud() {
        let profile = flat_profile();
        let cluster = ClusterConfig {
            workers: 2,
            bandwidth: 1e9,
            latency: 0.0,
            cost_rate: 1.0,
            worker_memory: memory_required(4, 2, &profile),
        };
        // Asking for more initial batch than the full network fits.
        assert!(matches!(
            plan_full(0, &cluster, &profile, 100, 50),
            Err(Error::Infeasible(_))
        ));
        // A cap below the initial total batch contradicts the request.
        assert!(plan_performance(0, &cluster, &profile, 100, 2, Some(3)).is_err());
    }

    #[test]
    fn comparison_reports_ratios_and_winners() {
        let profile = flat_profile();
        let budget = memory_required(4, 4, &profile);
        let cluster = ClusterConfig {
            workers: 8,
            bandwidth: 1e12,
            latency: 0.0,
            cost_rate: 1.0,
            worker_memory: budget,
        };
        let eff = plan_efficiency(3, &cluster, &profile, 4096, 4).unwrap();
        let perf = plan_performance(3, &cluster, &profile, 4096, 4, None).unwrap();
        let report = compare(&eff, &perf);
        assert!(report.time_ratio >= 1.0, "efficiency should not be faster");
        assert!(report.cost_ratio >= 1.0, "performance should not be cheaper");
        assert_eq!(report.faster, PlanMode::Performance);
        assert_eq!(report.cheaper, PlanMode::Efficiency);
        let self_report = compare(&eff, &eff);
        assert_eq!(self_report.time_ratio, 1.0);
        assert_eq!(self_report.cost_ratio, 1.0);
    }
}
