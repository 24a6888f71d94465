//! The distributed simulator against hand-checked arithmetic and a
//! brute-force planning oracle: reproduces the reference cluster numbers,
//! then sweeps hundreds of randomized scenarios where optimality and
//! dominance are provable.

mod common;

use frostune::distsim::{
    buckets_at, compare, max_batch, plan_efficiency, plan_full, plan_performance, t_comm,
    BucketTiming, ClusterConfig, ComputeTimeModel, ModelProfile,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The bundled 64-worker text-classification scenario, in code form. The
/// same numbers live in `scenarios/ag_news_64gpu.cfg`.
fn reference_scenario() -> (ClusterConfig, ModelProfile, u64, u64) {
    let cluster = ClusterConfig {
        workers: 64,
        bandwidth: 0.25e9,
        latency: 5e-3,
        cost_rate: 1.0,
        worker_memory: 16_200_000_000,
    };
    let mut measured = std::collections::BTreeMap::new();
    measured.insert((12usize, 6u64), 0.45);
    measured.insert((1usize, 54u64), 1.05);
    measured.insert((1usize, 48u64), 0.42);
    let profile = ModelProfile {
        total_layers: 12,
        weight_bytes: 420_000_000,
        grad_bytes_per_layer: 27_000_000,
        activation_bytes_per_sample_layer: 200_000_000,
        fixed_bytes_per_sample: 90_000_000,
        bucket_bytes: 25_000_000,
        bucket_timing: BucketTiming::AllFullSize,
        compute: ComputeTimeModel::Measured(measured),
    };
    (cluster, profile, 120_000, 6)
}

#[test]
fn reference_scenario_memory_lets_batch_grow_nine_fold() {
    let (cluster, profile, _, _) = reference_scenario();
    assert_eq!(max_batch(12, cluster.worker_memory, &profile).unwrap(), Some(6));
    assert_eq!(max_batch(1, cluster.worker_memory, &profile).unwrap(), Some(54));
}

#[test]
fn reference_scenario_reproduces_calibrated_epoch_numbers() {
    let (cluster, profile, n, b0) = reference_scenario();

    let perf = plan_performance(11, &cluster, &profile, n, b0, None).unwrap();
    assert_eq!(perf.workers, 64);
    assert_eq!(perf.per_worker_batch, 54);
    assert_eq!(perf.total_batch, 3456);
    assert_eq!(perf.iterations, 35);
    assert!((perf.iteration_time - 1.05).abs() < 1e-9, "got {}", perf.iteration_time);
    assert!((perf.epoch_time - 36.75).abs() < 1e-6, "got {}", perf.epoch_time);
    assert!(perf.t_comm < perf.t_comp, "overlap must hide communication here");

    let eff = plan_efficiency(11, &cluster, &profile, n, b0).unwrap();
    assert_eq!(eff.workers, 8);
    assert_eq!(eff.per_worker_batch, 48);
    assert_eq!(eff.total_batch, 384);
    assert_eq!(eff.iterations, 313);
    assert!((eff.iteration_time - 0.42).abs() < 1e-9, "got {}", eff.iteration_time);
    assert!((eff.epoch_time - 131.46).abs() < 1e-6, "got {}", eff.epoch_time);

    // Worker-second costs using the conventional rounded epoch times.
    assert_eq!(perf.epoch_time.floor() as u64 * perf.workers as u64, 2304);
    assert_eq!(eff.epoch_time.floor() as u64 * eff.workers as u64, 1048);

    let report = compare(&eff, &perf);
    assert!((report.cost_ratio - 2352.0 / 1051.68).abs() < 1e-6);
    assert!((report.time_ratio - 131.46 / 36.75).abs() < 1e-6);
}

#[test]
fn reference_scenario_bucket_layout() {
    let (_, profile, _, _) = reference_scenario();
    // One active layer leaves 27 MB: one full 25 MB bucket plus a 2 MB tail.
    let buckets = buckets_at(&profile, 11).unwrap();
    assert_eq!(buckets.count, 2);
    assert_eq!(buckets.last_bucket_bytes, 2_000_000);
    // Unfrozen: 324 MB over 25 MB buckets.
    let full = buckets_at(&profile, 0).unwrap();
    assert_eq!(full.count, 13);
    assert_eq!(full.last_bucket_bytes, 24_000_000);
}

#[test]
fn compute_bound_limit_reduces_to_iteration_count_ratio() {
    // alpha = 0 and effectively infinite bandwidth: epoch times are purely
    // iterations x compute.
    let cluster = ClusterConfig {
        workers: 8,
        bandwidth: 1e18,
        latency: 0.0,
        cost_rate: 1.0,
        worker_memory: 10_000,
    };
    let profile = ModelProfile {
        total_layers: 4,
        weight_bytes: 100,
        grad_bytes_per_layer: 10,
        activation_bytes_per_sample_layer: 10,
        fixed_bytes_per_sample: 0,
        bucket_bytes: 100,
        bucket_timing: BucketTiming::AllFullSize,
        compute: ComputeTimeModel::PerSampleLayerFlops {
            flops_per_sample_layer: 1.0,
            seconds_per_flop: 1e-3,
        },
    };
    let n = 9600;
    let b0 = max_batch(4, cluster.worker_memory, &profile).unwrap().unwrap();
    let eff = plan_efficiency(3, &cluster, &profile, n, b0).unwrap();
    let perf = plan_performance(3, &cluster, &profile, n, b0, None).unwrap();
    let time_ratio = eff.epoch_time / perf.epoch_time;
    // Per-worker compute per iteration is proportional to batch, so the
    // ratio collapses to iterations_eff / iterations_perf.
    let iter_ratio = eff.iterations as f64 * eff.per_worker_batch as f64
        / (perf.iterations as f64 * perf.per_worker_batch as f64);
    assert!((time_ratio - iter_ratio).abs() < 1e-9);
}

#[test]
fn weak_scaling_eight_to_sixty_four_workers_is_near_linear() {
    let profile = ModelProfile {
        total_layers: 6,
        weight_bytes: 0,
        grad_bytes_per_layer: 8,
        activation_bytes_per_sample_layer: 1,
        fixed_bytes_per_sample: 0,
        bucket_bytes: 64,
        bucket_timing: BucketTiming::AllFullSize,
        compute: ComputeTimeModel::PerSampleLayerFlops {
            flops_per_sample_layer: 1.0,
            seconds_per_flop: 1e-2,
        },
    };
    let at = |workers: usize| {
        let cluster = ClusterConfig {
            workers,
            bandwidth: 1e15, // negligible communication
            latency: 0.0,
            cost_rate: 1.0,
            worker_memory: 1_000_000,
        };
        plan_full(0, &cluster, &profile, 61_440, 10).unwrap().epoch_time
    };
    let ratio = at(8) / at(64);
    assert!((ratio - 8.0).abs() < 1e-9, "8x workers should be 8x faster, got {ratio}");
}

#[test]
fn communication_monotonicity_properties() {
    let base = t_comm(3, 1e6, 8, 1e9, 1e-4);
    assert!(base > 0.0);
    assert!(t_comm(4, 1e6, 8, 1e9, 1e-4) > base, "more buckets, more time");
    assert!(t_comm(3, 2e6, 8, 1e9, 1e-4) > base, "bigger buckets, more time");
    assert!(t_comm(3, 1e6, 9, 1e9, 1e-4) > base, "more workers, more time");
    assert!(t_comm(3, 1e6, 8, 1e9, 2e-4) > base, "more latency, more time");
    assert!(t_comm(3, 1e6, 8, 2e9, 1e-4) < base, "more bandwidth, less time");
}

#[test]
fn freezing_never_slows_an_epoch_or_adds_bytes() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    for _ in 0..50 {
        let scn = common::constrained_scenario(&mut rng);
        let mut last_time = f64::INFINITY;
        let mut last_bytes = u64::MAX;
        for boundary in 0..scn.profile.total_layers {
            let plan = plan_full(boundary, &scn.cluster, &scn.profile, scn.n, scn.b0).unwrap();
            assert!(
                plan.epoch_time <= last_time + 1e-12,
                "epoch time rose from {last_time} to {} at boundary {boundary}",
                plan.epoch_time
            );
            let buckets = buckets_at(&scn.profile, boundary).unwrap();
            let bytes = (buckets.count.saturating_sub(1)) * buckets.bucket_bytes
                + buckets.last_bucket_bytes;
            assert!(bytes <= last_bytes, "communicated bytes rose at boundary {boundary}");
            last_time = plan.epoch_time;
            last_bytes = bytes;
        }
    }
}

#[test]
fn planners_match_brute_force_and_dominate_each_other() {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let scenarios = 600;
    for case in 0..scenarios {
        let scn = common::constrained_scenario(&mut rng);
        let eff = plan_efficiency(scn.boundary, &scn.cluster, &scn.profile, scn.n, scn.b0)
            .unwrap_or_else(|e| panic!("case {case}: efficiency plan failed: {e}"));
        let perf =
            plan_performance(scn.boundary, &scn.cluster, &scn.profile, scn.n, scn.b0, scn.cap)
                .unwrap_or_else(|e| panic!("case {case}: performance plan failed: {e}"));

        // Structural contracts.
        assert_eq!(eff.total_batch, scn.b0 * scn.cluster.workers as u64, "case {case}: efficiency must preserve the total batch");
        assert_eq!(perf.workers, scn.cluster.workers, "case {case}: performance must keep every worker");

        // Optimality: the planner's objective value equals the brute-force
        // minimum over the full grid.
        let best_cost = common::brute_force_efficiency_cost(&scn);
        assert!(
            (eff.epoch_cost - best_cost).abs() <= 1e-9 * best_cost.max(1e-12),
            "case {case}: efficiency cost {} vs brute force {best_cost}",
            eff.epoch_cost
        );
        let best_time = common::brute_force_performance_time(&scn);
        assert!(
            (perf.epoch_time - best_time).abs() <= 1e-9 * best_time.max(1e-12),
            "case {case}: performance time {} vs brute force {best_time}",
            perf.epoch_time
        );

        // Dominance: each planner wins its own objective.
        assert!(
            eff.epoch_cost <= perf.epoch_cost * (1.0 + 1e-12),
            "case {case}: efficiency cost {} exceeds performance cost {}",
            eff.epoch_cost,
            perf.epoch_cost
        );
        assert!(
            perf.epoch_time <= eff.epoch_time * (1.0 + 1e-12),
            "case {case}: performance time {} exceeds efficiency time {}",
            perf.epoch_time,
            eff.epoch_time
        );
    }
}
