//! The fine-tuning loop: pretraining, freezing, caching, and accounting.
//!
//! A run proceeds in two phases. *Pretraining* fits the network to a
//! related source task with plain SGD; it stands in for downloading a
//! published checkpoint and is excluded from all cost accounting.
//! *Fine-tuning* then trains on the target task for a fixed number of
//! epochs, each split into contiguous evaluation intervals. At every
//! interval boundary the engine evaluates held-out accuracy, lets the
//! configured freezing policy move the frozen boundary, snapshots probe
//! activations for the representation oracle, and emits one report row.
//!
//! Two invariants drive the design:
//!
//! * **Seed determinism.** All randomness comes from one seeded generator,
//!   consumed in a fixed order (task, data, model, per-epoch shuffles).
//!   Freezing and caching decisions never touch the generator, so toggling
//!   them cannot change what any iteration trains on.
//! * **Transparent caching.** Reading frozen-prefix activations back from
//!   the cache must reproduce the full forward pass bit for bit. Each
//!   sample in a batch is normalised to its activation at the current
//!   boundary — taken from its record when current, lifted from a
//!   shallower record, or recomputed from the raw input — and the batch
//!   then runs once from the boundary. Frozen layers compute identically
//!   either way, so cached and uncached runs step through identical
//!   weights.
//!
//! Costs are modelled, not measured: flops follow the per-layer counts
//! from the network engine, and simulated time charges flops at a
//! configured rate, wrapped in the pipelined step-time model whenever the
//! cache is actively in use. Held-out evaluation and probe forwards are
//! measurement, not training, and are excluded.

use crate::cache::{
    should_cache, step_time, write_record_dump, CacheConfig, CacheManager, CacheRecord,
    CacheStats, RECORD_HEADER_LEN,
};
use crate::error::{Error, Result};
use crate::freeze::{interval_tick, FreezeState, GradWindow};
use crate::harness::config::{lr_at, FreezeMode, RunConfig};
use crate::harness::data::{BlobTask, Dataset};
use crate::harness::report::{
    checkpoint_file, IntervalRecord, RunReport, RunSummary, SvccaRecord,
};
use crate::matrix::Matrix;
use crate::nn::{
    backward, flop_count, forward, forward_between, loss_grad, sgd_step, span_forward_flops,
    Model,
};
use crate::svcca::ideal_boundary;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

/// Everything a training run returns to callers.
#[derive(Debug)]
pub struct TrainOutput {
    pub model: Model,
    pub report: RunReport,
    /// Probe activations at the end of each interval, one matrix per
    /// hidden layer. Empty when representation checkpoints are disabled.
    pub checkpoints: Vec<Vec<Matrix>>,
}

/// Fraction of `data` whose argmax logit matches its label.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("cannot measure accuracy on an empty dataset"));
    }
    let trace = forward(model, &data.inputs, 0)?;
    let logits = trace.logits();
    let mut correct = 0usize;
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let mut best = 0;
        for (c, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = c;
            }
        }
        if best == data.labels[r] {
            correct += 1;
        }
    }
    Ok(correct as f64 / logits.rows() as f64)
}

fn gather(data: &Dataset, indices: &[usize]) -> Result<(Matrix, Vec<usize>)> {
    let rows = indices.iter().map(|&i| data.inputs.row(i).to_vec()).collect();
    let labels = indices.iter().map(|&i| data.labels[i]).collect();
    Ok((Matrix::from_rows(rows)?, labels))
}

fn stats_of(cache: &Option<CacheManager>) -> CacheStats {
    cache.as_ref().map(|c| c.stats()).unwrap_or_default()
}

/// Runs one experiment. When `out_dir` is given, per-interval activation
/// dumps land under `out_dir/checkpoints/` and a cache without an explicit
/// directory spills under `out_dir/cache/`.
pub fn train(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Fixed draw order: target task, source task, source data, target
    // train/test data, then model weights.
    let target = BlobTask::new(cfg.classes, cfg.features, cfg.center_scale, cfg.noise, &mut rng)?;
    let source = target.related(cfg.pretrain_center_jitter, cfg.pretrain_noise, &mut rng)?;
    let pretrain_set = if cfg.pretrain_epochs > 0 && cfg.pretrain_samples > 0 {
        Some(source.sample(cfg.pretrain_samples, &mut rng)?)
    } else {
        None
    };
    let train_set = target.sample(cfg.train_samples, &mut rng)?;
    let test_set = target.sample(cfg.test_samples, &mut rng)?;
    let probe = test_set.prefix(cfg.svcca_probe_samples.min(test_set.len()))?;

    let hidden = vec![cfg.width; cfg.hidden_layers];
    let mut model = Model::random(cfg.features, &hidden, cfg.classes, cfg.activation, &mut rng)?;
    let depth = model.depth();

    // Pretraining: plain SGD on the source task, outside all accounting.
    if let Some(pre) = &pretrain_set {
        for _ in 0..cfg.pretrain_epochs {
            let mut order: Vec<usize> = (0..pre.len()).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch) {
                let (inputs, labels) = gather(pre, chunk)?;
                let trace = forward(&model, &inputs, 0)?;
                let (_, dlogits) = loss_grad(trace.logits(), &labels)?;
                let grads = backward(&model, &trace, &dlogits, 0)?;
                sgd_step(&mut model, &grads, cfg.pretrain_lr)?;
            }
        }
    }

    let cache = if cfg.cache_enabled {
        let dir = match (&cfg.cache_dir, out_dir) {
            (Some(d), _) => d.clone(),
            (None, Some(o)) => o.join("cache"),
            (None, None) => {
                return Err(Error::invalid(
                    "cache.enabled requires cache.dir or an output directory",
                ))
            }
        };
        let config = CacheConfig {
            memory_capacity: cfg.cache_memory_mb * 1_000_000,
            disk_capacity: cfg.cache_disk_mb * 1_000_000,
            disk_read_bw: cfg.cache_read_mb_s * 1e6,
            disk_write_bw: cfg.cache_write_mb_s * 1e6,
            directory: dir,
        };
        Some(CacheManager::new(config, &hidden)?)
    } else {
        None
    };

    let checkpoint_dir = match (cfg.svcca_enabled, out_dir) {
        (true, Some(o)) => {
            let d = o.join("checkpoints");
            // A rerun into the same directory must not inherit dumps from a
            // longer previous run.
            if d.exists() {
                std::fs::remove_dir_all(&d)?;
            }
            std::fs::create_dir_all(&d)?;
            Some(d)
        }
        _ => None,
    };

    let mut boundary = match &cfg.freeze_mode {
        FreezeMode::Static(prefix) => *prefix,
        _ => 0,
    };
    let mut freeze_state = FreezeState::new(depth, cfg.percentile, cfg.percentile_method)?;
    let mut window = GradWindow::new(cfg.include_bias);
    let mut schedule: Vec<(u64, usize)> = vec![(0, boundary)];
    let mut scheduled_idx = 0usize;
    if boundary > 0 {
        if let Some(c) = &cache {
            c.advance_boundary(boundary)?;
        }
    }

    let iters_per_epoch = cfg.train_samples.div_ceil(cfg.batch);
    let total_iters = (cfg.epochs * iters_per_epoch) as u64;
    let mut global_iter = 0u64;
    let mut global_interval = 0u64;

    let mut intervals: Vec<IntervalRecord> = Vec::new();
    let mut checkpoints: Vec<Vec<Matrix>> = Vec::new();
    let mut online_after: Vec<usize> = Vec::new();
    let mut baseline_forward = 0u64;
    let mut baseline_backward = 0u64;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        if let Some(c) = &cache {
            c.register_shuffle(epoch as u64, order.clone())?;
        }

        // Cache only in epochs where re-reading a batch beats recomputing
        // the frozen prefix; judged pessimistically at disk bandwidth.
        let epoch_caching = cache.is_some() && boundary > 0 && {
            let full = flop_count(&model, cfg.batch, boundary, 0)?;
            let resumed = flop_count(&model, cfg.batch, boundary, boundary)?;
            let prefix_secs = (full.forward - resumed.forward) as f64 * cfg.seconds_per_flop;
            let record_bytes = (RECORD_HEADER_LEN + 8 * cfg.width) as f64;
            let read_secs = cfg.batch as f64 * record_bytes / (cfg.cache_read_mb_s * 1e6);
            should_cache(boundary, prefix_secs / boundary as f64, read_secs)
        };

        for k in 0..cfg.intervals_per_epoch {
            global_interval += 1;
            if let FreezeMode::Scheduled(entries) = &cfg.freeze_mode {
                while scheduled_idx < entries.len() && entries[scheduled_idx].0 <= global_interval
                {
                    let next = entries[scheduled_idx].1;
                    scheduled_idx += 1;
                    if next != boundary {
                        boundary = next;
                        schedule.push((global_interval, boundary));
                        if let Some(c) = &cache {
                            c.advance_boundary(boundary)?;
                        }
                    }
                }
            }
            let boundary_during = boundary;

            let chunk_start = k * iters_per_epoch / cfg.intervals_per_epoch;
            let chunk_end = (k + 1) * iters_per_epoch / cfg.intervals_per_epoch;
            let interval_start_stats = stats_of(&cache);
            let mut loss_sum = 0.0;
            let mut interval_forward = 0u64;
            let mut interval_backward = 0u64;
            let mut interval_seconds = 0.0;

            for it in chunk_start..chunk_end {
                let lo = it * cfg.batch;
                let hi = ((it + 1) * cfg.batch).min(train_set.len());
                let positions: Vec<usize> = (lo..hi).collect();
                let originals: Vec<usize> = positions.iter().map(|&p| order[p]).collect();
                let rows = positions.len();
                let before = stats_of(&cache);

                // Normalisation phase: bring every sample to its activation
                // at the boundary. Current records pass through; shallower
                // ones (the read evicts them but still returns the data) are
                // lifted in per-depth groups; missing samples recompute from
                // the raw input. Anything lifted or recomputed is written
                // back so the next epoch reads it directly.
                let (trace, forward_flops) = if epoch_caching {
                    let c = cache.as_ref().unwrap();
                    let mut at_boundary: Vec<Option<Vec<f64>>> = vec![None; rows];
                    let mut by_depth: BTreeMap<usize, Vec<(usize, Vec<f64>)>> = BTreeMap::new();
                    for (i, &p) in positions.iter().enumerate() {
                        match c.read(epoch as u64, p)? {
                            Some(r) if r.depth as usize == boundary => {
                                at_boundary[i] = Some(r.values);
                            }
                            Some(r) => by_depth
                                .entry(r.depth as usize)
                                .or_default()
                                .push((i, r.values)),
                            None => by_depth
                                .entry(0)
                                .or_default()
                                .push((i, train_set.inputs.row(originals[i]).to_vec())),
                        }
                    }
                    let mut extra_forward = 0u64;
                    let mut refreshed: Vec<usize> = Vec::new();
                    for (from, group) in by_depth {
                        let idx: Vec<usize> = group.iter().map(|(i, _)| *i).collect();
                        let stacked =
                            Matrix::from_rows(group.into_iter().map(|(_, v)| v).collect())?;
                        let lifted = forward_between(&model, &stacked, from, boundary)?;
                        extra_forward += span_forward_flops(&model, idx.len(), from, boundary)?;
                        for (g, &i) in idx.iter().enumerate() {
                            at_boundary[i] = Some(lifted.row(g).to_vec());
                        }
                        refreshed.extend(idx);
                    }
                    let stacked: Option<Vec<Vec<f64>>> = at_boundary.into_iter().collect();
                    let bmatrix = Matrix::from_rows(stacked.expect("all rows normalised"))?;
                    for &i in &refreshed {
                        c.write(epoch as u64, positions[i], bmatrix.row(i).to_vec())?;
                    }
                    let main = flop_count(&model, rows, boundary, boundary)?;
                    (forward(&model, &bmatrix, boundary)?, main.forward + extra_forward)
                } else {
                    let (inputs, _) = gather(&train_set, &originals)?;
                    let main = flop_count(&model, rows, boundary, 0)?;
                    (forward(&model, &inputs, 0)?, main.forward)
                };

                let labels: Vec<usize> =
                    originals.iter().map(|&i| train_set.labels[i]).collect();
                let (loss, dlogits) = loss_grad(trace.logits(), &labels)?;
                let grads = backward(&model, &trace, &dlogits, boundary)?;
                if matches!(cfg.freeze_mode, FreezeMode::Auto) {
                    window.accumulate(&grads)?;
                }
                sgd_step(
                    &mut model,
                    &grads,
                    lr_at(cfg.lr_schedule, global_iter, total_iters, cfg.lr),
                )?;
                global_iter += 1;
                loss_sum += loss;

                let backward_flops = flop_count(&model, rows, boundary, 0)?.backward;
                let base = flop_count(&model, rows, 0, 0)?;
                interval_forward += forward_flops;
                interval_backward += backward_flops;
                baseline_forward += base.forward;
                baseline_backward += base.backward;
                let train_seconds =
                    (forward_flops + backward_flops) as f64 * cfg.seconds_per_flop;
                interval_seconds += if epoch_caching {
                    let after = stats_of(&cache);
                    step_time(
                        train_seconds,
                        after.disk_bytes_read - before.disk_bytes_read,
                        after.disk_bytes_written - before.disk_bytes_written,
                        cfg.cache_read_mb_s * 1e6,
                        cfg.cache_write_mb_s * 1e6,
                    )
                } else {
                    train_seconds
                };
            }

            // Measurement happens on the state the interval produced; the
            // freezing decision then applies to the next interval.
            let eval_accuracy = accuracy(&model, &test_set)?;
            if matches!(cfg.freeze_mode, FreezeMode::Auto) {
                let outcome = interval_tick(&mut freeze_state, &mut window)?;
                if outcome.boundary_after != boundary {
                    boundary = outcome.boundary_after;
                    schedule.push((global_interval, boundary));
                    if let Some(c) = &cache {
                        c.advance_boundary(boundary)?;
                    }
                }
            }
            online_after.push(boundary);

            if cfg.svcca_enabled {
                let trace = forward(&model, &probe.inputs, 0)?;
                let layers: Vec<Matrix> = trace.outputs()[..depth].to_vec();
                if let Some(dir) = &checkpoint_dir {
                    for (l, acts) in layers.iter().enumerate() {
                        let records: Vec<CacheRecord> = (0..acts.rows())
                            .map(|r| CacheRecord {
                                original_index: r as u64,
                                depth: (l + 1) as u16,
                                values: acts.row(r).to_vec(),
                            })
                            .collect();
                        let path = dir.join(checkpoint_file(global_interval, l + 1));
                        write_record_dump(&path, &records)?;
                    }
                }
                checkpoints.push(layers);
            }

            let now = stats_of(&cache);
            let iters_in_interval = (chunk_end - chunk_start) as f64;
            intervals.push(IntervalRecord {
                interval: global_interval,
                frozen_boundary: boundary_during,
                train_loss: loss_sum / iters_in_interval,
                eval_accuracy,
                forward_flops: interval_forward,
                backward_flops: interval_backward,
                cache_hits: now.hits - interval_start_stats.hits,
                cache_writes: (now.writes_memory + now.writes_disk)
                    - (interval_start_stats.writes_memory + interval_start_stats.writes_disk),
                simulated_seconds: interval_seconds,
            });
        }
    }

    // Hindsight oracle: score every checkpoint against the final one.
    let mut svcca_rows = Vec::new();
    if let Some(reference) = checkpoints.last() {
        for (i, checkpoint) in checkpoints.iter().enumerate() {
            svcca_rows.push(SvccaRecord {
                interval: intervals[i].interval,
                online_boundary: online_after[i],
                ideal_boundary: ideal_boundary(
                    checkpoint,
                    reference,
                    cfg.svcca_threshold,
                    cfg.svcca_variance_keep,
                )?,
            });
        }
    }

    let total_forward: u64 = intervals.iter().map(|r| r.forward_flops).sum();
    let total_backward: u64 = intervals.iter().map(|r| r.backward_flops).sum();
    let simulated_seconds: f64 = intervals.iter().map(|r| r.simulated_seconds).sum();
    let baseline_seconds =
        (baseline_forward + baseline_backward) as f64 * cfg.seconds_per_flop;
    let last = intervals.last().expect("a validated run has at least one interval");
    let summary = RunSummary {
        seed: cfg.seed,
        final_accuracy: last.eval_accuracy,
        best_accuracy: intervals.iter().map(|r| r.eval_accuracy).fold(0.0, f64::max),
        final_train_loss: last.train_loss,
        final_boundary: boundary,
        schedule,
        total_forward_flops: total_forward,
        total_backward_flops: total_backward,
        baseline_forward_flops: baseline_forward,
        baseline_backward_flops: baseline_backward,
        backward_flop_reduction: baseline_backward as f64 / total_backward as f64,
        simulated_seconds,
        baseline_seconds,
        time_speedup: baseline_seconds / simulated_seconds,
        cache: stats_of(&cache),
    };

    let report = RunReport {
        config: cfg.clone(),
        intervals,
        svcca: svcca_rows,
        summary,
        checkpoint_dir: checkpoint_dir.is_some().then(|| "checkpoints".to_string()),
    };
    Ok(TrainOutput { model, report, checkpoints })
}
