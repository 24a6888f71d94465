//! Independent oracles shared by the integration and acceptance suites.
//!
//! Everything in here is written from the definitions, not from the library
//! internals: a straight-line network evaluator, a central-finite-difference
//! gradient probe, a covariance-whitening CCA, and brute-force searches for
//! the packing planners. The point is that a bug in the library cannot hide
//! in its own oracle.

#![allow(dead_code)] // each integration test binary uses its own subset

use frostune::{Activation, Matrix, Model};

/// Straight-line re-evaluation of the network: raw loops, no traces, no
/// partial passes. Accumulation order matches the engine's documented
/// bias-first, left-to-right convention, so agreement must be exact.
pub fn reference_logits(model: &Model, input: &Matrix) -> Matrix {
    let mut rows: Vec<Vec<f64>> = (0..input.rows()).map(|r| input.row(r).to_vec()).collect();
    let all_layers: Vec<_> = model.layers().iter().chain(std::iter::once(model.head())).collect();
    for layer in all_layers {
        for row in rows.iter_mut() {
            let mut next = Vec::with_capacity(layer.out_dim());
            for o in 0..layer.out_dim() {
                let mut acc = layer.bias[o];
                for i in 0..layer.in_dim() {
                    acc += layer.weights.get(o, i) * row[i];
                }
                next.push(match layer.activation {
                    Activation::Identity => acc,
                    Activation::Relu => acc.max(0.0),
                    Activation::Tanh => acc.tanh(),
                });
            }
            *row = next;
        }
    }
    Matrix::from_rows(rows).unwrap()
}

/// Mean softmax cross-entropy computed from its definition.
pub fn reference_loss(logits: &Matrix, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        total += sum.ln() - (row[labels[r]] - max);
    }
    total / logits.rows() as f64
}

/// Central finite difference of the training loss with respect to one
/// parameter, probed by mutating the model in place and restoring it.
pub fn fd_grad(
    model: &mut Model,
    input: &Matrix,
    labels: &[usize],
    param: ParamRef,
    h: f64,
) -> f64 {
    let loss_at = |m: &Model| {
        let trace = frostune::nn::forward(m, input, 0).unwrap();
        frostune::nn::loss_grad(trace.logits(), labels).unwrap().0
    };
    let original = read_param(model, param);
    write_param(model, param, original + h);
    let plus = loss_at(model);
    write_param(model, param, original - h);
    let minus = loss_at(model);
    write_param(model, param, original);
    (plus - minus) / (2.0 * h)
}

/// Addresses one scalar parameter inside a model.
#[derive(Debug, Clone, Copy)]
pub enum ParamRef {
    Weight { layer: Option<usize>, row: usize, col: usize },
    Bias { layer: Option<usize>, index: usize },
}

pub fn read_param(model: &Model, p: ParamRef) -> f64 {
    match p {
        ParamRef::Weight { layer, row, col } => match layer {
            Some(j) => model.layers()[j].weights.get(row, col),
            None => model.head().weights.get(row, col),
        },
        ParamRef::Bias { layer, index } => match layer {
            Some(j) => model.layers()[j].bias[index],
            None => model.head().bias[index],
        },
    }
}

pub fn write_param(model: &mut Model, p: ParamRef, v: f64) {
    match p {
        ParamRef::Weight { layer, row, col } => match layer {
            Some(j) => model.layer_mut(j).weights.set(row, col, v),
            None => model.head_mut().weights.set(row, col, v),
        },
        ParamRef::Bias { layer, index } => match layer {
            Some(j) => model.layer_mut(j).bias[index] = v,
            None => model.head_mut().bias[index] = v,
        },
    }
}

/// Every parameter address of the unfrozen part of a model, in a stable
/// order: body layers from `first_layer` upward, then the head.
pub fn params_from(model: &Model, first_layer: usize) -> Vec<ParamRef> {
    let mut out = Vec::new();
    for (j, layer) in model.layers().iter().enumerate().skip(first_layer) {
        for row in 0..layer.out_dim() {
            for col in 0..layer.in_dim() {
                out.push(ParamRef::Weight { layer: Some(j), row, col });
            }
        }
        for index in 0..layer.out_dim() {
            out.push(ParamRef::Bias { layer: Some(j), index });
        }
    }
    let head = model.head();
    for row in 0..head.out_dim() {
        for col in 0..head.in_dim() {
            out.push(ParamRef::Weight { layer: None, row, col });
        }
    }
    for index in 0..head.out_dim() {
        out.push(ParamRef::Bias { layer: None, index });
    }
    out
}

/// Relative disagreement between an analytic and a finite-difference value,
/// guarded against division by a vanishing scale.
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    let scale = analytic.abs().max(fd.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (analytic - fd).abs() / scale
    }
}

/// Canonical correlations computed the classical way: whiten each side by
/// the inverse square root of its covariance and read the singular values of
/// the whitened cross-covariance. Assumes full-rank, well-conditioned
/// inputs; returns the correlations sorted descending.
pub fn whitening_cca(a: &Matrix, b: &Matrix) -> Vec<f64> {
    use nalgebra::DMatrix;
    assert_eq!(a.rows(), b.rows(), "oracle needs matched samples");

    let center = |m: &Matrix| -> DMatrix<f64> {
        let mut d = DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
        for mut col in d.column_iter_mut() {
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            col.add_scalar_mut(-mean);
        }
        d
    };
    let inv_sqrt = |s: DMatrix<f64>| -> DMatrix<f64> {
        let eig = nalgebra::SymmetricEigen::new(s);
        let mut scaled = eig.eigenvectors.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            let lambda = eig.eigenvalues[j];
            assert!(lambda > 1e-12, "oracle requires full-rank covariance, eigenvalue {lambda}");
            col *= 1.0 / lambda.sqrt();
        }
        &scaled * eig.eigenvectors.transpose()
    };

    let ca = center(a);
    let cb = center(b);
    let s_aa = ca.transpose() * &ca;
    let s_bb = cb.transpose() * &cb;
    let s_ab = ca.transpose() * &cb;
    let whitened = inv_sqrt(s_aa) * s_ab * inv_sqrt(s_bb);
    let mut corr: Vec<f64> = whitened.svd(false, false).singular_values.iter().copied().collect();
    corr.sort_by(|x, y| y.partial_cmp(x).unwrap());
    corr
}

use frostune::distsim::{BucketTiming, ClusterConfig, ComputeTimeModel, ModelProfile};
use rand::RngExt;

/// One randomized planning problem in the provable regime: power-of-two
/// packing shapes, a dataset divisible by every batch the planners can pick,
/// and a compute rate scaled so iterations stay compute-bound. Inside this
/// regime the packing planners are exactly optimal and the cost/time
/// dominance between them is a theorem; outside it (latency-dominated
/// communication, ragged ceilings) counterexamples exist.
pub struct PackingScenario {
    pub cluster: ClusterConfig,
    pub profile: ModelProfile,
    pub n: u64,
    pub b0: u64,
    pub boundary: usize,
    pub cap: Option<u64>,
    /// seconds per unit of (active-layer x sample) work, for the oracle.
    pub rate: f64,
}

pub fn constrained_scenario(rng: &mut impl rand::Rng) -> PackingScenario {
    let total_layers = rng.random_range(2usize..=12);
    let boundary = rng.random_range(1usize..total_layers);
    let active = total_layers - boundary;

    let b0 = 1u64 << rng.random_range(0u32..=3);
    // Smallest power of two making the full network feasible at batch b0.
    let mut d_min = 0u32;
    while (active as u64) << d_min < total_layers as u64 {
        d_min += 1;
    }
    let d = rng.random_range(d_min..=d_min + 3);
    let bs_max = b0 << d;

    // Gradient bytes small enough that batch b0 still fits unfrozen.
    let g_limit = (active as u64 * bs_max - total_layers as u64 * b0)
        / (total_layers - active) as u64;
    let grad_bytes = if g_limit == 0 { 0 } else { rng.random_range(0..=g_limit) };
    let weight_bytes = rng.random_range(0u64..10_000);
    // Budget makes the max batch at this boundary exactly bs_max.
    let worker_memory = weight_bytes + active as u64 * grad_bytes + active as u64 * bs_max;

    let workers = 1usize << rng.random_range(0u32..=4);
    let bucket_bytes = rng.random_range(1_000u64..1_000_000);
    let bandwidth = rng.random_range(1e6f64..1e9);
    let latency = rng.random_range(0.0f64..1e-3);

    // Scale compute so even the unfrozen network at batch b0 out-lasts the
    // largest communication the scenario can produce: every plan the
    // planners or the oracle evaluate is compute-bound.
    let full_bytes = total_layers as u64 * grad_bytes;
    let k_full = full_bytes.div_ceil(bucket_bytes);
    let p = workers as f64;
    let t_comm_full = if workers > 1 {
        k_full as f64 * (latency * (p - 1.0) + 2.0 * bucket_bytes as f64 * (p - 1.0) / (p * bandwidth))
    } else {
        0.0
    };
    let rate = (1.0 + rng.random_range(0.0f64..1.0)) * (t_comm_full + 1e-6) / b0 as f64;

    let n = rng.random_range(1u64..=40) * workers as u64 * bs_max;
    let cap = if rng.random_bool(0.5) {
        None
    } else {
        Some(workers as u64 * (b0 << rng.random_range(0u32..=d)))
    };

    PackingScenario {
        cluster: ClusterConfig {
            workers,
            bandwidth,
            latency,
            cost_rate: rng.random_range(0.1f64..10.0),
            worker_memory,
        },
        profile: ModelProfile {
            total_layers,
            weight_bytes,
            grad_bytes_per_layer: grad_bytes,
            activation_bytes_per_sample_layer: 1,
            fixed_bytes_per_sample: 0,
            bucket_bytes,
            bucket_timing: BucketTiming::AllFullSize,
            compute: ComputeTimeModel::PerSampleLayerFlops {
                flops_per_sample_layer: 1.0,
                seconds_per_flop: rate / active as f64,
            },
        },
        n,
        b0,
        boundary,
        cap,
        rate,
    }
}

/// Raw arithmetic evaluation of one `(workers, per_worker_batch)` cell:
/// ceiling-division iterations times the slower of compute and allreduce,
/// written out from the formulas with no library calls.
fn oracle_eval(scn: &PackingScenario, workers: u64, per_worker_batch: u64, total_batch: u64) -> (f64, f64) {
    let active = (scn.profile.total_layers - scn.boundary) as u64;
    let t_comp = scn.rate * per_worker_batch as f64;
    let bytes = active * scn.profile.grad_bytes_per_layer;
    let k = if bytes == 0 { 0 } else { (bytes + scn.profile.bucket_bytes - 1) / scn.profile.bucket_bytes };
    let t_comm = if workers <= 1 {
        0.0
    } else {
        let p = workers as f64;
        k as f64
            * (scn.cluster.latency * (p - 1.0)
                + 2.0 * scn.profile.bucket_bytes as f64 * (p - 1.0) / (p * scn.cluster.bandwidth))
    };
    let iters = (scn.n + total_batch - 1) / total_batch;
    let epoch_time = iters as f64 * t_comp.max(t_comm);
    let epoch_cost = epoch_time * workers as f64 * scn.cluster.cost_rate;
    (epoch_time, epoch_cost)
}

fn oracle_fits(scn: &PackingScenario, per_worker_batch: u64) -> bool {
    let active = (scn.profile.total_layers - scn.boundary) as u64;
    let needed = scn.profile.weight_bytes
        + active * scn.profile.grad_bytes_per_layer
        + per_worker_batch * active;
    needed <= scn.cluster.worker_memory
}

/// Cheapest epoch cost over every worker count that can hold the preserved
/// total batch in memory.
pub fn brute_force_efficiency_cost(scn: &PackingScenario) -> f64 {
    let total = scn.b0 * scn.cluster.workers as u64;
    let mut best = f64::INFINITY;
    for workers in 1..=scn.cluster.workers as u64 {
        let per_worker = (total + workers - 1) / workers;
        if !oracle_fits(scn, per_worker) {
            continue;
        }
        let (_, cost) = oracle_eval(scn, workers, per_worker, total);
        best = best.min(cost);
    }
    best
}

/// Fastest epoch time over every per-worker batch that fits memory and the
/// optional total-batch cap, with all workers in use.
pub fn brute_force_performance_time(scn: &PackingScenario) -> f64 {
    let workers = scn.cluster.workers as u64;
    let mut limit = u64::MAX;
    if let Some(cap) = scn.cap {
        limit = limit.min(cap / workers);
    }
    let mut best = f64::INFINITY;
    for per_worker in 1..=limit.min(1 << 20) {
        if !oracle_fits(scn, per_worker) {
            break; // memory need grows with batch: nothing larger fits
        }
        let (time, _) = oracle_eval(scn, workers, per_worker, per_worker * workers);
        best = best.min(time);
    }
    best
}
