//! Cluster scenario files and packing-strategy sweeps.
//!
//! A scenario file describes one cluster and one model profile in the same
//! flat `key = value` format as run configs, then lists the freezing
//! boundaries to sweep. Running it evaluates, at every boundary, the
//! keep-the-batch baseline and both repacking strategies — fewest workers
//! at the same total batch (cheap) and biggest batch on all workers (fast)
//! — and reports the head-to-head ratios.

use crate::distsim::{
    compare, plan_efficiency, plan_full, plan_performance, BucketTiming, ClusterConfig,
    Comparison, ComputeTimeModel, ModelProfile, PackingPlan,
};
use crate::error::{Error, Result};
use crate::harness::config::{apply_overrides, parse_key_values};
use std::collections::BTreeMap;

/// A parsed scenario: cluster, model profile, and the sweep to run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub cluster: ClusterConfig,
    pub profile: ModelProfile,
    /// Samples per epoch.
    pub samples: u64,
    /// Per-worker batch the cluster was sized for with nothing frozen.
    pub initial_per_worker: u64,
    /// Optional ceiling on the total batch (statistical-efficiency guard).
    pub max_total_batch: Option<u64>,
    /// Freezing boundaries to evaluate.
    pub boundaries: Vec<usize>,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::invalid(format!("scenario key `{key}`: cannot parse `{value}`: {e}")))
}

fn require<T>(slot: Option<T>, key: &str) -> Result<T> {
    slot.ok_or_else(|| Error::invalid(format!("scenario is missing required key `{key}`")))
}

/// Byte and sample quantities accept scientific notation (`16.2e9`) as well
/// as plain integers, as long as the value is a nonnegative whole number.
fn parse_count(key: &str, value: &str) -> Result<u64> {
    if let Ok(v) = value.parse::<u64>() {
        return Ok(v);
    }
    let f: f64 = parse(key, value)?;
    if f < 0.0 || f > u64::MAX as f64 || f.fract().abs() > 1e-6 * f.abs().max(1.0) {
        return Err(Error::invalid(format!(
            "scenario key `{key}`: `{value}` is not a nonnegative whole number"
        )));
    }
    Ok(f.round() as u64)
}

impl Scenario {
    /// Parses a scenario file's text plus `--set` overrides.
    pub fn from_text(text: &str, path: &str, overrides: &[String]) -> Result<Scenario> {
        let mut pairs = parse_key_values(text, path)?;
        apply_overrides(&mut pairs, overrides)?;
        Scenario::from_pairs(&pairs)
    }

    /// Builds a scenario from raw pairs. All cluster and profile keys are
    /// required; unknown keys are rejected by name.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Scenario> {
        let mut workers: Option<usize> = None;
        let mut bandwidth: Option<f64> = None;
        let mut latency: Option<f64> = None;
        let mut cost_rate: Option<f64> = None;
        let mut worker_memory: Option<u64> = None;
        let mut total_layers: Option<usize> = None;
        let mut weight_bytes: Option<u64> = None;
        let mut grad_bytes: Option<u64> = None;
        let mut act_bytes: Option<u64> = None;
        let mut fixed_bytes: u64 = 0;
        let mut bucket_bytes: Option<u64> = None;
        let mut bucket_timing = BucketTiming::AllFullSize;
        let mut tcomp_mode: Option<String> = None;
        let mut flops_per_sample_layer: Option<f64> = None;
        let mut seconds_per_flop: Option<f64> = None;
        let mut measured: BTreeMap<(usize, u64), f64> = BTreeMap::new();
        let mut samples: Option<u64> = None;
        let mut initial: Option<u64> = None;
        let mut max_total: Option<u64> = None;
        let mut boundaries: Option<Vec<usize>> = None;

        for (key, value) in pairs {
            // Measured compute entries are keyed by their operating point:
            // `tcomp.measured.<active_layers>.<per_worker_batch> = seconds`.
            if let Some(rest) = key.strip_prefix("tcomp.measured.") {
                let Some((active, batch)) = rest.split_once('.') else {
                    return Err(Error::invalid(format!(
                        "`{key}` must look like tcomp.measured.<active>.<batch>"
                    )));
                };
                measured.insert(
                    (parse::<usize>(key, active)?, parse::<u64>(key, batch)?),
                    parse::<f64>(key, value)?,
                );
                continue;
            }
            match key.as_str() {
                "cluster.workers" => workers = Some(parse(key, value)?),
                "cluster.bandwidth" => bandwidth = Some(parse(key, value)?),
                "cluster.latency_s" => latency = Some(parse(key, value)?),
                "cluster.cost_rate" => cost_rate = Some(parse(key, value)?),
                "cluster.worker_memory" => worker_memory = Some(parse_count(key, value)?),
                "model.total_layers" => total_layers = Some(parse(key, value)?),
                "model.weight_bytes" => weight_bytes = Some(parse_count(key, value)?),
                "model.grad_bytes_per_layer" => grad_bytes = Some(parse_count(key, value)?),
                "model.activation_bytes_per_sample_layer" => act_bytes = Some(parse_count(key, value)?),
                "model.fixed_bytes_per_sample" => fixed_bytes = parse_count(key, value)?,
                "model.bucket_bytes" => bucket_bytes = Some(parse_count(key, value)?),
                "model.bucket_timing" => {
                    bucket_timing = match value.as_str() {
                        "all_full" => BucketTiming::AllFullSize,
                        "exact_last" => BucketTiming::ExactLastBucket,
                        other => {
                            return Err(Error::invalid(format!(
                                "model.bucket_timing `{other}` is not all_full|exact_last"
                            )))
                        }
                    }
                }
                "tcomp.mode" => tcomp_mode = Some(value.clone()),
                "tcomp.flops_per_sample_layer" => {
                    flops_per_sample_layer = Some(parse(key, value)?)
                }
                "tcomp.seconds_per_flop" => seconds_per_flop = Some(parse(key, value)?),
                "data.samples" => samples = Some(parse_count(key, value)?),
                "batch.initial_per_worker" => initial = Some(parse_count(key, value)?),
                "batch.max_total" => max_total = Some(parse_count(key, value)?),
                "sweep.boundaries" => {
                    let mut list = Vec::new();
                    for part in value.split(',').filter(|p| !p.trim().is_empty()) {
                        list.push(parse::<usize>(key, part.trim())?);
                    }
                    boundaries = Some(list);
                }
                unknown => {
                    return Err(Error::invalid(format!("unknown scenario key `{unknown}`")));
                }
            }
        }

        let compute = match require(tcomp_mode, "tcomp.mode")?.as_str() {
            "flops" => ComputeTimeModel::PerSampleLayerFlops {
                flops_per_sample_layer: require(
                    flops_per_sample_layer,
                    "tcomp.flops_per_sample_layer",
                )?,
                seconds_per_flop: require(seconds_per_flop, "tcomp.seconds_per_flop")?,
            },
            "measured" => {
                if measured.is_empty() {
                    return Err(Error::invalid(
                        "tcomp.mode = measured needs at least one tcomp.measured.<active>.<batch> entry",
                    ));
                }
                ComputeTimeModel::Measured(measured)
            }
            other => {
                return Err(Error::invalid(format!(
                    "tcomp.mode `{other}` is not flops|measured"
                )))
            }
        };

        let scenario = Scenario {
            cluster: ClusterConfig {
                workers: require(workers, "cluster.workers")?,
                bandwidth: require(bandwidth, "cluster.bandwidth")?,
                latency: require(latency, "cluster.latency_s")?,
                cost_rate: require(cost_rate, "cluster.cost_rate")?,
                worker_memory: require(worker_memory, "cluster.worker_memory")?,
            },
            profile: ModelProfile {
                total_layers: require(total_layers, "model.total_layers")?,
                weight_bytes: require(weight_bytes, "model.weight_bytes")?,
                grad_bytes_per_layer: require(grad_bytes, "model.grad_bytes_per_layer")?,
                activation_bytes_per_sample_layer: require(
                    act_bytes,
                    "model.activation_bytes_per_sample_layer",
                )?,
                fixed_bytes_per_sample: fixed_bytes,
                bucket_bytes: require(bucket_bytes, "model.bucket_bytes")?,
                bucket_timing,
                compute,
            },
            samples: require(samples, "data.samples")?,
            initial_per_worker: require(initial, "batch.initial_per_worker")?,
            max_total_batch: max_total,
            boundaries: require(boundaries, "sweep.boundaries")?,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<()> {
        self.cluster.validate()?;
        self.profile.validate()?;
        if self.samples == 0 || self.initial_per_worker == 0 {
            return Err(Error::invalid(
                "data.samples and batch.initial_per_worker must be positive",
            ));
        }
        if self.boundaries.is_empty() {
            return Err(Error::invalid("sweep.boundaries lists no boundaries"));
        }
        for &b in &self.boundaries {
            if b >= self.profile.total_layers {
                return Err(Error::invalid(format!(
                    "sweep boundary {b} would freeze the whole {}-layer model",
                    self.profile.total_layers
                )));
            }
        }
        Ok(())
    }
}

/// One boundary's evaluation: the baseline and both repacking strategies.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BoundaryOutcome {
    pub boundary: usize,
    pub full: PackingPlan,
    pub efficiency: PackingPlan,
    pub performance: PackingPlan,
    pub comparison: Comparison,
}

/// Evaluates every boundary in the sweep.
pub fn run_scenario(scenario: &Scenario) -> Result<Vec<BoundaryOutcome>> {
    let mut outcomes = Vec::with_capacity(scenario.boundaries.len());
    for &boundary in &scenario.boundaries {
        let full = plan_full(
            boundary,
            &scenario.cluster,
            &scenario.profile,
            scenario.samples,
            scenario.initial_per_worker,
        )?;
        let efficiency = plan_efficiency(
            boundary,
            &scenario.cluster,
            &scenario.profile,
            scenario.samples,
            scenario.initial_per_worker,
        )?;
        let performance = plan_performance(
            boundary,
            &scenario.cluster,
            &scenario.profile,
            scenario.samples,
            scenario.initial_per_worker,
            scenario.max_total_batch,
        )?;
        let comparison = compare(&efficiency, &performance);
        outcomes.push(BoundaryOutcome { boundary, full, efficiency, performance, comparison });
    }
    Ok(outcomes)
}

/// Renders the sweep as CSV: three plan rows per boundary.
pub fn scenario_csv(outcomes: &[BoundaryOutcome]) -> String {
    let mut out = String::from(
        "boundary,mode,workers,per_worker_batch,total_batch,iterations,t_comp,t_comm,iteration_time,epoch_time,epoch_cost\n",
    );
    for o in outcomes {
        for plan in [&o.full, &o.efficiency, &o.performance] {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                o.boundary,
                plan.mode,
                plan.workers,
                plan.per_worker_batch,
                plan.total_batch,
                plan.iterations,
                plan.t_comp,
                plan.t_comm,
                plan.iteration_time,
                plan.epoch_time,
                plan.epoch_cost,
            ));
        }
    }
    out
}
