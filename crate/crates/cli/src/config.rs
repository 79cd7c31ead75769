use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use vaebench_core::objectives::{CapacitySchedule, Method, MethodParams};

use crate::error::{HarnessError, Result};

/// Every key accepted in a run config, in the order they are written.
pub const CONFIG_KEYS: [&str; 25] = [
    "method",
    "beta",
    "gamma",
    "lambda",
    "lambda_d",
    "lambda_od",
    "latent_size",
    "batch_size",
    "lr",
    "lr_min",
    "lr_factor",
    "patience",
    "capacity_max",
    "capacity_steps",
    "max_iters",
    "eval_interval",
    "seed_weights",
    "seed_data",
    "seed_eval",
    "image_size",
    "pretrain_iters",
    "eval_size",
    "kl_threshold",
    "traversal_steps",
    "traversal_range",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub method: MethodParams,
    pub latent_size: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub lr_factor: f64,
    pub patience: usize,
    pub capacity: CapacitySchedule,
    pub max_iters: u64,
    pub eval_interval: u64,
    pub seed_weights: u64,
    pub seed_data: u64,
    pub seed_eval: u64,
    pub image_size: usize,
    pub pretrain_iters: u64,
    pub eval_size: usize,
    /// Mean per-dimension KL (nats) above which a latent counts as used.
    pub kl_threshold: f64,
    pub traversal_steps: usize,
    pub traversal_range: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: MethodParams::defaults(Method::BetaVae),
            latent_size: 20,
            batch_size: 64,
            lr: 1e-3,
            lr_min: 1e-4,
            lr_factor: 0.95,
            patience: 2,
            capacity: CapacitySchedule::default(),
            max_iters: 200_000,
            eval_interval: 10_000,
            seed_weights: 0,
            seed_data: 1,
            seed_eval: 2,
            image_size: 64,
            pretrain_iters: 1000,
            eval_size: 1024,
            kl_threshold: 0.01,
            traversal_steps: 10,
            traversal_range: 3.0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| HarnessError::Config(format!("invalid value {value:?} for key {key:?}")))
}

impl RunConfig {
    /// Parses `key=value` lines on top of the defaults. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key=value, got {line:?}", no + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::File { path: path.to_path_buf(), source: e })?;
        Self::parse(&text)
    }

    /// Assigns one key. Does not validate cross-field invariants.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "method" => {
                let m: Method = value.parse()?;
                self.method.method = m;
            }
            "beta" => self.method.beta = parse(key, value)?,
            "gamma" => self.method.gamma = parse(key, value)?,
            "lambda" => self.method.lambda = parse(key, value)?,
            "lambda_d" => self.method.lambda_d = parse(key, value)?,
            "lambda_od" => self.method.lambda_od = parse(key, value)?,
            "latent_size" => self.latent_size = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_min" => self.lr_min = parse(key, value)?,
            "lr_factor" => self.lr_factor = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "capacity_max" => self.capacity.max = parse(key, value)?,
            "capacity_steps" => self.capacity.ramp_steps = parse(key, value)?,
            "max_iters" => self.max_iters = parse(key, value)?,
            "eval_interval" => self.eval_interval = parse(key, value)?,
            "seed_weights" => self.seed_weights = parse(key, value)?,
            "seed_data" => self.seed_data = parse(key, value)?,
            "seed_eval" => self.seed_eval = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "pretrain_iters" => self.pretrain_iters = parse(key, value)?,
            "eval_size" => self.eval_size = parse(key, value)?,
            "kl_threshold" => self.kl_threshold = parse(key, value)?,
            "traversal_steps" => self.traversal_steps = parse(key, value)?,
            "traversal_range" => self.traversal_range = parse(key, value)?,
            _ => {
                return Err(HarnessError::Config(format!(
                    "unknown config key {key:?}; valid keys: {}",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies a `key=value` override such as a `--set` flag.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        let m = &self.method;
        for (name, v) in [
            ("beta", m.beta),
            ("gamma", m.gamma),
            ("lambda", m.lambda),
            ("lambda_d", m.lambda_d),
            ("lambda_od", m.lambda_od),
            ("lr", self.lr),
            ("lr_min", self.lr_min),
            ("lr_factor", self.lr_factor),
            ("capacity_max", self.capacity.max),
            ("kl_threshold", self.kl_threshold),
            ("traversal_range", self.traversal_range),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("latent_size", self.latent_size as u64),
            ("batch_size", self.batch_size as u64),
            ("patience", self.patience as u64),
            ("capacity_steps", self.capacity.ramp_steps),
            ("max_iters", self.max_iters),
            ("eval_interval", self.eval_interval),
            ("pretrain_iters", self.pretrain_iters),
            ("eval_size", self.eval_size as u64),
            ("traversal_steps", self.traversal_steps as u64),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.lr_min > self.lr {
            return bad(format!("lr_min {} exceeds lr {}", self.lr_min, self.lr));
        }
        if self.lr_factor > 1.0 {
            return bad(format!("lr_factor {} would raise the learning rate", self.lr_factor));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if self.traversal_steps < 2 {
            return bad("traversal_steps must be at least 2".into());
        }
        if self.image_size != 16 && self.image_size != 64 {
            return bad(format!("image_size must be 16 or 64, got {}", self.image_size));
        }
        Ok(())
    }

    /// The config as `key=value` lines; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        let m = &self.method;
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        line("method", m.method.key().to_string());
        line("beta", m.beta.to_string());
        line("gamma", m.gamma.to_string());
        line("lambda", m.lambda.to_string());
        line("lambda_d", m.lambda_d.to_string());
        line("lambda_od", m.lambda_od.to_string());
        line("latent_size", self.latent_size.to_string());
        line("batch_size", self.batch_size.to_string());
        line("lr", self.lr.to_string());
        line("lr_min", self.lr_min.to_string());
        line("lr_factor", self.lr_factor.to_string());
        line("patience", self.patience.to_string());
        line("capacity_max", self.capacity.max.to_string());
        line("capacity_steps", self.capacity.ramp_steps.to_string());
        line("max_iters", self.max_iters.to_string());
        line("eval_interval", self.eval_interval.to_string());
        line("seed_weights", self.seed_weights.to_string());
        line("seed_data", self.seed_data.to_string());
        line("seed_eval", self.seed_eval.to_string());
        line("image_size", self.image_size.to_string());
        line("pretrain_iters", self.pretrain_iters.to_string());
        line("eval_size", self.eval_size.to_string());
        line("kl_threshold", self.kl_threshold.to_string());
        line("traversal_steps", self.traversal_steps.to_string());
        line("traversal_range", self.traversal_range.to_string());
        s
    }
}
