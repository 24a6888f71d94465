//! Run artifacts: interval CSV, summary JSON, and the schedule comparison.
//!
//! A finished training run is written as four files in its output
//! directory:
//!
//! * `intervals.csv` — one row per evaluation interval, fixed column
//!   order, header always present (an empty run yields a header-only file).
//! * `summary.json` — run-level totals: accuracy, flop and simulated-time
//!   accounting against the never-freeze baseline, the realised freezing
//!   schedule, and final cache counters.
//! * `svcca_vs_online.csv` — per interval, the boundary the online rule
//!   had reached next to the boundary a hindsight representation oracle
//!   would have chosen.
//! * `run_state.json` — the full [`RunReport`], enough to regenerate the
//!   other three files later. When the run also wrote activation
//!   checkpoints, the comparison column can be recomputed from those dumps
//!   instead of trusted from the stored rows.

use crate::cache::{read_record_dump, CacheStats};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::matrix::Matrix;
use crate::svcca::ideal_boundary;
use std::io::Write;
use std::path::{Path, PathBuf};

/// One evaluation interval of a training run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IntervalRecord {
    /// Global 1-based interval number.
    pub interval: u64,
    /// Prefix depth that was frozen while this interval ran.
    pub frozen_boundary: usize,
    /// Mean training loss over the interval's iterations.
    pub train_loss: f64,
    /// Accuracy on the held-out set at the end of the interval.
    pub eval_accuracy: f64,
    pub forward_flops: u64,
    pub backward_flops: u64,
    pub cache_hits: u64,
    pub cache_writes: u64,
    /// Modelled wall-clock spent training during this interval.
    pub simulated_seconds: f64,
}

/// Online freezing decision vs. the hindsight representation oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SvccaRecord {
    pub interval: u64,
    /// Boundary the gradient-norm rule had frozen by the end of the interval.
    pub online_boundary: usize,
    /// Deepest prefix whose representations had already converged to the
    /// final model, judged per layer against the end-of-run reference.
    pub ideal_boundary: usize,
}

/// Run-level totals for `summary.json`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub final_train_loss: f64,
    pub final_boundary: usize,
    /// `(global_interval, new_boundary)` pairs; interval 0 is the initial state.
    pub schedule: Vec<(u64, usize)>,
    pub total_forward_flops: u64,
    pub total_backward_flops: u64,
    /// What the same iterations would cost with nothing frozen or cached.
    pub baseline_forward_flops: u64,
    pub baseline_backward_flops: u64,
    /// Baseline over actual backward flops (1.0 when nothing froze).
    pub backward_flop_reduction: f64,
    pub simulated_seconds: f64,
    pub baseline_seconds: f64,
    /// Baseline over actual simulated seconds (1.0 when nothing froze).
    pub time_speedup: f64,
    pub cache: CacheStats,
}

/// Everything a run produced, as persisted in `run_state.json`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub intervals: Vec<IntervalRecord>,
    pub svcca: Vec<SvccaRecord>,
    pub summary: RunSummary,
    /// Subdirectory (relative to the run directory) holding per-interval
    /// activation dumps, when the run wrote them.
    pub checkpoint_dir: Option<String>,
}

/// File name of the activation dump for one layer of one interval.
pub fn checkpoint_file(interval: u64, layer: usize) -> String {
    format!("interval_{interval:04}_layer_{layer:02}.bin")
}

fn float(v: f64) -> String {
    // Shortest round-trip representation keeps the CSVs diff-stable.
    format!("{v}")
}

/// Renders `intervals.csv`. The header is always the first line, even when
/// there are no rows.
pub fn intervals_csv(rows: &[IntervalRecord]) -> String {
    let mut out = String::from(
        "interval,frozen_boundary,train_loss,eval_accuracy,forward_flops,backward_flops,cache_hits,cache_writes,simulated_seconds\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.interval,
            r.frozen_boundary,
            float(r.train_loss),
            float(r.eval_accuracy),
            r.forward_flops,
            r.backward_flops,
            r.cache_hits,
            r.cache_writes,
            float(r.simulated_seconds),
        ));
    }
    out
}

/// Renders `svcca_vs_online.csv`.
pub fn svcca_csv(rows: &[SvccaRecord]) -> String {
    let mut out = String::from("interval,online_boundary,ideal_boundary\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.interval, r.online_boundary, r.ideal_boundary));
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(contents.as_bytes())?;
    Ok(())
}

/// Writes all four artifact files into `dir` (created if needed).
pub fn write_artifacts(dir: &Path, report: &RunReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_file(&dir.join("intervals.csv"), &intervals_csv(&report.intervals))?;
    write_file(&dir.join("svcca_vs_online.csv"), &svcca_csv(&report.svcca))?;
    let summary = serde_json::to_string_pretty(&report.summary)
        .map_err(|e| Error::invalid(format!("cannot serialize summary: {e}")))?;
    write_file(&dir.join("summary.json"), &summary)?;
    let state = serde_json::to_string_pretty(report)
        .map_err(|e| Error::invalid(format!("cannot serialize run state: {e}")))?;
    write_file(&dir.join("run_state.json"), &state)?;
    Ok(())
}

/// Loads a persisted [`RunReport`] from a run directory.
pub fn load_run_state(dir: &Path) -> Result<RunReport> {
    let path = dir.join("run_state.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Record {
        path: path.clone(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Record {
        path,
        message: format!("cannot parse run state: {e}"),
    })
}

/// Reads the activation dump for one interval back into per-layer matrices.
pub fn load_checkpoint(dir: &Path, interval: u64, layers: usize) -> Result<Vec<Matrix>> {
    let mut out = Vec::with_capacity(layers);
    for layer in 1..=layers {
        let path: PathBuf = dir.join(checkpoint_file(interval, layer));
        let records = read_record_dump(&path)?;
        if records.is_empty() {
            return Err(Error::Record { path, message: "empty activation dump".into() });
        }
        let rows = records.iter().map(|r| r.values.clone()).collect();
        out.push(Matrix::from_rows(rows)?);
    }
    Ok(out)
}

/// Recomputes the oracle column of the schedule comparison from the
/// activation dumps under `run_dir`, replacing the stored rows. The final
/// interval's checkpoint is the reference. Returns an error when the run
/// kept no checkpoints.
pub fn recompute_svcca(run_dir: &Path, report: &mut RunReport) -> Result<()> {
    let sub = report
        .checkpoint_dir
        .as_deref()
        .ok_or_else(|| Error::invalid("run kept no activation checkpoints to recompute from"))?;
    let dir = run_dir.join(sub);
    let layers = report.config.hidden_layers;
    let Some(last) = report.intervals.last() else {
        report.svcca.clear();
        return Ok(());
    };
    let reference = load_checkpoint(&dir, last.interval, layers)?;
    let mut rows = Vec::with_capacity(report.intervals.len());
    for (row, stored) in report.intervals.iter().zip(&report.svcca) {
        let checkpoint = load_checkpoint(&dir, row.interval, layers)?;
        rows.push(SvccaRecord {
            interval: row.interval,
            online_boundary: stored.online_boundary,
            ideal_boundary: ideal_boundary(
                &checkpoint,
                &reference,
                report.config.svcca_threshold,
                report.config.svcca_variance_keep,
            )?,
        });
    }
    report.svcca = rows;
    Ok(())
}
