//! Flat `key = value` run configuration with CLI overrides.
//!
//! The format is a text file of one assignment per line; `#` starts a
//! comment and blank lines are skipped. Every key has a default, unknown
//! keys are rejected by name, and parse failures carry the line number.
//! The full key reference lives in the guide's harness chapter.

use crate::error::{Error, Result};
use crate::freeze::PercentileMethod;
use crate::nn::Activation;
use std::collections::BTreeMap;

/// When layers freeze, and who decides.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum FreezeMode {
    /// The online gradient-norm rule picks the boundary at every interval.
    Auto,
    /// Nothing ever freezes: the full fine-tuning baseline.
    Off,
    /// A fixed prefix is frozen from the very first step.
    Static(usize),
    /// A forced `(global_interval, boundary)` schedule, applied at the start
    /// of each listed interval. Lets two runs share one freezing history.
    Scheduled(Vec<(u64, usize)>),
}

/// Learning-rate policy over the fine-tuning run.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum LrSchedule {
    Constant,
    /// Multiplies the base rate by `decay_factor` when the run passes 30%
    /// and again at 60% of total iterations.
    Stepped { decay_factor: f64 },
}

/// Fractions of the run at which the stepped schedule decays.
pub const DECAY_POINTS: [f64; 2] = [0.3, 0.6];

/// Learning rate for `iteration` of `total_iterations`.
pub fn lr_at(schedule: LrSchedule, iteration: u64, total_iterations: u64, base_lr: f64) -> f64 {
    debug_assert!(iteration < total_iterations);
    match schedule {
        LrSchedule::Constant => base_lr,
        LrSchedule::Stepped { decay_factor } => {
            let progress = iteration as f64 / total_iterations as f64;
            let passed = DECAY_POINTS.iter().filter(|&&p| progress >= p).count();
            base_lr * decay_factor.powi(passed as i32)
        }
    }
}

/// Everything a training run needs, resolved and validated.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    // Synthetic task.
    pub train_samples: usize,
    pub test_samples: usize,
    pub features: usize,
    pub classes: usize,
    pub noise: f64,
    pub center_scale: f64,
    // Pre-training on the related source distribution.
    pub pretrain_samples: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_noise: f64,
    pub pretrain_center_jitter: f64,
    // Network.
    pub hidden_layers: usize,
    pub width: usize,
    pub activation: Activation,
    // Fine-tuning loop.
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    // Freezing.
    pub freeze_mode: FreezeMode,
    pub percentile: f64,
    pub percentile_method: PercentileMethod,
    pub include_bias: bool,
    pub intervals_per_epoch: usize,
    // Caching.
    pub cache_enabled: bool,
    pub cache_memory_mb: u64,
    pub cache_disk_mb: u64,
    pub cache_dir: Option<std::path::PathBuf>,
    pub cache_read_mb_s: f64,
    pub cache_write_mb_s: f64,
    // Simulated-time model.
    pub seconds_per_flop: f64,
    // Representation checkpoints.
    pub svcca_enabled: bool,
    pub svcca_probe_samples: usize,
    pub svcca_threshold: f64,
    pub svcca_variance_keep: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            train_samples: 4000,
            test_samples: 1000,
            features: 16,
            classes: 4,
            noise: 0.9,
            center_scale: 1.0,
            pretrain_samples: 4000,
            pretrain_epochs: 3,
            pretrain_lr: 0.05,
            pretrain_noise: 1.2,
            pretrain_center_jitter: 0.5,
            hidden_layers: 8,
            width: 24,
            activation: Activation::Tanh,
            epochs: 4,
            batch: 32,
            lr: 0.02,
            lr_schedule: LrSchedule::Constant,
            freeze_mode: FreezeMode::Auto,
            percentile: 50.0,
            percentile_method: PercentileMethod::LinearInterpolation,
            include_bias: true,
            intervals_per_epoch: 5,
            cache_enabled: false,
            cache_memory_mb: 64,
            cache_disk_mb: 256,
            cache_dir: None,
            cache_read_mb_s: 200.0,
            cache_write_mb_s: 150.0,
            seconds_per_flop: 1e-9,
            svcca_enabled: true,
            svcca_probe_samples: 256,
            svcca_threshold: 0.9,
            svcca_variance_keep: 0.99,
        }
    }
}

/// Raw `key = value` pairs from a config file. Later assignments win.
pub fn parse_key_values(text: &str, path: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: path.to_string(),
                line: idx + 1,
                message: format!("expected `key = value`, got `{line}`"),
            });
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

/// Applies `--set key=value` overrides on top of file-sourced pairs.
pub fn apply_overrides(map: &mut BTreeMap<String, String>, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let Some((key, value)) = item.split_once('=') else {
            return Err(Error::invalid(format!("override `{item}` is not of the form key=value")));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(())
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::invalid(format!("config key `{key}`: cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        other => Err(Error::invalid(format!("config key `{key}`: `{other}` is not a boolean"))),
    }
}

fn parse_schedule(value: &str) -> Result<Vec<(u64, usize)>> {
    let mut schedule = Vec::new();
    for part in value.split(',').filter(|p| !p.trim().is_empty()) {
        let Some((interval, boundary)) = part.split_once(':') else {
            return Err(Error::invalid(format!(
                "freeze.schedule entry `{part}` must be `interval:boundary`"
            )));
        };
        schedule.push((
            parse::<u64>("freeze.schedule", interval.trim())?,
            parse::<usize>("freeze.schedule", boundary.trim())?,
        ));
    }
    for pair in schedule.windows(2) {
        if pair[1].0 <= pair[0].0 || pair[1].1 < pair[0].1 {
            return Err(Error::invalid(
                "freeze.schedule must have strictly increasing intervals and non-decreasing boundaries",
            ));
        }
    }
    Ok(schedule)
}

impl RunConfig {
    /// Builds a config from raw pairs, starting at the defaults. Unknown
    /// keys are an error so typos cannot silently run the wrong experiment.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut static_prefix = 0usize;
        let mut forced_schedule: Vec<(u64, usize)> = Vec::new();
        let mut mode_name = String::from("auto");

        for (key, value) in pairs {
            match key.as_str() {
                "seed" => cfg.seed = parse(key, value)?,
                "data.train_samples" => cfg.train_samples = parse(key, value)?,
                "data.test_samples" => cfg.test_samples = parse(key, value)?,
                "data.features" => cfg.features = parse(key, value)?,
                "data.classes" => cfg.classes = parse(key, value)?,
                "data.noise" => cfg.noise = parse(key, value)?,
                "data.center_scale" => cfg.center_scale = parse(key, value)?,
                "pretrain.samples" => cfg.pretrain_samples = parse(key, value)?,
                "pretrain.epochs" => cfg.pretrain_epochs = parse(key, value)?,
                "pretrain.lr" => cfg.pretrain_lr = parse(key, value)?,
                "pretrain.noise" => cfg.pretrain_noise = parse(key, value)?,
                "pretrain.center_jitter" => cfg.pretrain_center_jitter = parse(key, value)?,
                "model.hidden_layers" => cfg.hidden_layers = parse(key, value)?,
                "model.width" => cfg.width = parse(key, value)?,
                "model.activation" => {
                    cfg.activation = match value.as_str() {
                        "identity" => Activation::Identity,
                        "relu" => Activation::Relu,
                        "tanh" => Activation::Tanh,
                        other => {
                            return Err(Error::invalid(format!(
                                "model.activation `{other}` is not identity|relu|tanh"
                            )))
                        }
                    }
                }
                "train.epochs" => cfg.epochs = parse(key, value)?,
                "train.batch" => cfg.batch = parse(key, value)?,
                "train.lr" => cfg.lr = parse(key, value)?,
                "lr.schedule" => {
                    cfg.lr_schedule = match value.as_str() {
                        "constant" => LrSchedule::Constant,
                        "stepped" => LrSchedule::Stepped { decay_factor: 0.1 },
                        other => {
                            return Err(Error::invalid(format!(
                                "lr.schedule `{other}` is not constant|stepped"
                            )))
                        }
                    }
                }
                "lr.decay_factor" => {
                    let factor: f64 = parse(key, value)?;
                    if let LrSchedule::Stepped { decay_factor } = &mut cfg.lr_schedule {
                        *decay_factor = factor;
                    } else {
                        cfg.lr_schedule = LrSchedule::Stepped { decay_factor: factor };
                    }
                }
                "freeze.mode" => mode_name = value.clone(),
                "freeze.static_prefix" => static_prefix = parse(key, value)?,
                "freeze.schedule" => forced_schedule = parse_schedule(value)?,
                "freeze.percentile" => cfg.percentile = parse(key, value)?,
                "freeze.method" => {
                    cfg.percentile_method = match value.as_str() {
                        "linear" => PercentileMethod::LinearInterpolation,
                        "nearest" => PercentileMethod::NearestRank,
                        other => {
                            return Err(Error::invalid(format!(
                                "freeze.method `{other}` is not linear|nearest"
                            )))
                        }
                    }
                }
                "freeze.include_bias" => cfg.include_bias = parse_bool(key, value)?,
                "freeze.intervals_per_epoch" => cfg.intervals_per_epoch = parse(key, value)?,
                "cache.enabled" => cfg.cache_enabled = parse_bool(key, value)?,
                "cache.memory_mb" => cfg.cache_memory_mb = parse(key, value)?,
                "cache.disk_mb" => cfg.cache_disk_mb = parse(key, value)?,
                "cache.dir" => cfg.cache_dir = Some(value.into()),
                "cache.read_mb_s" => cfg.cache_read_mb_s = parse(key, value)?,
                "cache.write_mb_s" => cfg.cache_write_mb_s = parse(key, value)?,
                "time.seconds_per_flop" => cfg.seconds_per_flop = parse(key, value)?,
                "svcca.enabled" => cfg.svcca_enabled = parse_bool(key, value)?,
                "svcca.probe_samples" => cfg.svcca_probe_samples = parse(key, value)?,
                "svcca.threshold" => cfg.svcca_threshold = parse(key, value)?,
                "svcca.variance_keep" => cfg.svcca_variance_keep = parse(key, value)?,
                unknown => {
                    return Err(Error::invalid(format!("unknown config key `{unknown}`")));
                }
            }
        }

        cfg.freeze_mode = match mode_name.as_str() {
            "auto" => FreezeMode::Auto,
            "off" => FreezeMode::Off,
            "static" => FreezeMode::Static(static_prefix),
            "scheduled" => FreezeMode::Scheduled(forced_schedule),
            other => {
                return Err(Error::invalid(format!(
                    "freeze.mode `{other}` is not auto|off|static|scheduled"
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a config file's text plus `--set` overrides.
    pub fn from_text(text: &str, path: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut pairs = parse_key_values(text, path)?;
        apply_overrides(&mut pairs, overrides)?;
        RunConfig::from_pairs(&pairs)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("data.train_samples", self.train_samples),
            ("data.test_samples", self.test_samples),
            ("data.features", self.features),
            ("model.width", self.width),
            ("train.epochs", self.epochs),
            ("train.batch", self.batch),
            ("freeze.intervals_per_epoch", self.intervals_per_epoch),
            ("svcca.probe_samples", self.svcca_probe_samples),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.classes < 2 {
            return Err(Error::invalid("data.classes must be at least 2"));
        }
        if self.hidden_layers < 2 {
            return Err(Error::invalid("model.hidden_layers must be at least 2"));
        }
        if !(self.percentile > 0.0 && self.percentile < 100.0) {
            return Err(Error::invalid("freeze.percentile must lie in (0, 100)"));
        }
        if !(self.lr > 0.0) || !(self.pretrain_lr > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(self.seconds_per_flop > 0.0) {
            return Err(Error::invalid("time.seconds_per_flop must be positive"));
        }
        let iters_per_epoch = self.train_samples.div_ceil(self.batch);
        if iters_per_epoch < self.intervals_per_epoch {
            return Err(Error::invalid(format!(
                "{iters_per_epoch} iterations per epoch cannot host {} evaluation intervals",
                self.intervals_per_epoch
            )));
        }
        match &self.freeze_mode {
            FreezeMode::Static(prefix) if *prefix >= self.hidden_layers => {
                return Err(Error::invalid(format!(
                    "static prefix {prefix} would freeze the whole {}-layer stack",
                    self.hidden_layers
                )));
            }
            FreezeMode::Scheduled(schedule) => {
                if let Some(&(_, deepest)) = schedule.last() {
                    if deepest >= self.hidden_layers {
                        return Err(Error::invalid(format!(
                            "forced schedule reaches boundary {deepest}, but only {} layers exist and the last must train",
                            self.hidden_layers
                        )));
                    }
                }
            }
            _ => {}
        }
        if !(self.svcca_threshold > 0.0 && self.svcca_threshold <= 1.0) {
            return Err(Error::invalid("svcca.threshold must lie in (0, 1]"));
        }
        if !(self.svcca_variance_keep > 0.0 && self.svcca_variance_keep <= 1.0) {
            return Err(Error::invalid("svcca.variance_keep must lie in (0, 1]"));
        }
        Ok(())
    }
}
