//! Run configuration: every hyperparameter and path a training run needs,
//! with plain `key = value` serialization so a finished run's resolved
//! config can be re-run verbatim.

use std::fmt;

use crate::error::{Error, Result};
use crate::mixture::Sparsity;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Gmm,
    Lda,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Gmm => "gmm",
            ModelKind::Lda => "lda",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlgKind {
    Svi,
    Mvi,
    Full,
}

impl fmt::Display for AlgKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlgKind::Svi => "svi",
            AlgKind::Mvi => "mvi",
            AlgKind::Full => "full",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Csv,
    Raw64,
    Pgm,
    Bow,
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataFormat::Csv => "csv",
            DataFormat::Raw64 => "raw64",
            DataFormat::Pgm => "pgm",
            DataFormat::Bow => "bow",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub k: usize,
    pub l: Sparsity,
    pub alg: AlgKind,
    pub batches: usize,
    pub laps: usize,
    pub alpha: f64,
    pub lambda_bar: f64,
    /// Wishart prior strength; derived from the data scale when absent.
    pub nu_bar: Option<f64>,
    pub delta: f64,
    pub kappa: f64,
    pub max_local_iters: usize,
    pub conv_threshold: f64,
    pub eps_active: f64,
    pub restarts: bool,
    pub warm_start: bool,
    pub seed: u64,
    pub deterministic: bool,
    /// Worker threads; 0 keeps the scheduler default.
    pub threads: usize,
    pub data: String,
    pub data_format: DataFormat,
    pub heldout: Option<String>,
    pub output_dir: String,
}

impl TrainConfig {
    /// Per-family defaults: concentration α = 10 for the patch mixture;
    /// α = 0.5 with topic-word smoothing λ̄ = 0.1 for topic models.
    pub fn defaults_for(model: ModelKind) -> TrainConfig {
        let (alpha, data_format) = match model {
            ModelKind::Gmm => (10.0, DataFormat::Csv),
            ModelKind::Lda => (0.5, DataFormat::Bow),
        };
        TrainConfig {
            model,
            k: 10,
            l: Sparsity::Dense,
            alg: AlgKind::Mvi,
            batches: 1,
            laps: 10,
            alpha,
            lambda_bar: 0.1,
            nu_bar: None,
            delta: 1.0,
            kappa: 0.55,
            max_local_iters: 100,
            conv_threshold: 0.05,
            eps_active: 1e-8,
            restarts: true,
            warm_start: false,
            seed: 0,
            deterministic: false,
            threads: 0,
            data: String::new(),
            data_format,
            heldout: None,
            output_dir: String::new(),
        }
    }

    /// Validates everything at once; the error lists every violation.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.k == 0 {
            problems.push("k must be >= 1".to_string());
        }
        if let Sparsity::TopL(l) = self.l {
            if l == 0 || l > self.k {
                problems.push(format!("--l = {l} out of range 1..={} (--k)", self.k));
            }
        }
        if self.batches == 0 {
            problems.push("batches must be >= 1".to_string());
        }
        if self.alg == AlgKind::Full && self.batches != 1 {
            problems.push("alg = full requires batches = 1".to_string());
        }
        if !(self.alpha > 0.0) {
            problems.push(format!("alpha = {} must be > 0", self.alpha));
        }
        if !(self.lambda_bar > 0.0) {
            problems.push(format!("lambda_bar = {} must be > 0", self.lambda_bar));
        }
        if let Some(nu) = self.nu_bar {
            if !nu.is_finite() {
                problems.push(format!("nu_bar = {nu} must be finite"));
            }
        }
        if self.alg == AlgKind::Svi {
            if !(self.kappa > 0.5 && self.kappa <= 1.0) {
                problems.push(format!("kappa = {} must lie in (0.5, 1]", self.kappa));
            }
            if !(self.delta >= 1.0) {
                problems.push(format!("delta = {} must be >= 1", self.delta));
            }
        }
        if self.max_local_iters == 0 {
            problems.push("max_local_iters must be >= 1".to_string());
        }
        if !(self.conv_threshold > 0.0) {
            problems.push(format!(
                "conv_threshold = {} must be > 0",
                self.conv_threshold
            ));
        }
        if self.eps_active < 0.0 {
            problems.push(format!("eps_active = {} must be >= 0", self.eps_active));
        }
        if self.data.is_empty() {
            problems.push("data path is required (--data)".to_string());
        }
        match (self.model, self.data_format) {
            (ModelKind::Gmm, DataFormat::Bow) => {
                problems.push("gmm runs need csv, raw64, or pgm data".to_string())
            }
            (ModelKind::Lda, f) if f != DataFormat::Bow => {
                problems.push("lda runs need bow data".to_string())
            }
            _ => {}
        }
        if self.output_dir.is_empty() {
            problems.push("output directory is required (--output-dir)".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Plain `key = value` lines, one per field, in a fixed order.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("model", self.model.to_string());
        kv("k", self.k.to_string());
        kv(
            "l",
            match self.l {
                Sparsity::Dense => "dense".to_string(),
                Sparsity::TopL(l) => l.to_string(),
            },
        );
        kv("alg", self.alg.to_string());
        kv("batches", self.batches.to_string());
        kv("laps", self.laps.to_string());
        kv("alpha", fmt_f64(self.alpha));
        kv("lambda_bar", fmt_f64(self.lambda_bar));
        kv("nu_bar", self.nu_bar.map_or("none".to_string(), fmt_f64));
        kv("delta", fmt_f64(self.delta));
        kv("kappa", fmt_f64(self.kappa));
        kv("max_local_iters", self.max_local_iters.to_string());
        kv("conv_threshold", fmt_f64(self.conv_threshold));
        kv("eps_active", fmt_f64(self.eps_active));
        kv("restarts", self.restarts.to_string());
        kv("warm_start", self.warm_start.to_string());
        kv("seed", self.seed.to_string());
        kv("deterministic", self.deterministic.to_string());
        kv("threads", self.threads.to_string());
        kv("data", self.data.clone());
        kv("data_format", self.data_format.to_string());
        kv(
            "heldout",
            self.heldout.clone().unwrap_or_else(|| "none".to_string()),
        );
        kv("output_dir", self.output_dir.clone());
        out
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are skipped;
    /// unknown keys are errors so stale configs fail loudly.
    pub fn from_key_values(text: &str) -> Result<TrainConfig> {
        let mut model = None;
        let mut fields: Vec<(String, String)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key == "model" {
                model = Some(parse_model(&value)?);
            }
            fields.push((key, value));
        }
        let model =
            model.ok_or_else(|| Error::Config("config must declare 'model'".to_string()))?;
        let mut cfg = TrainConfig::defaults_for(model);
        for (key, value) in fields {
            cfg.apply(&key, &value)?;
        }
        Ok(cfg)
    }

    /// Applies one key/value pair on top of this config.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value '{value}' for {what}"));
        match key {
            "model" => self.model = parse_model(value)?,
            "k" => self.k = value.parse().map_err(|_| bad("k"))?,
            "l" => self.l = parse_sparsity(value)?,
            "alg" => {
                self.alg = match value {
                    "svi" => AlgKind::Svi,
                    "mvi" => AlgKind::Mvi,
                    "full" => AlgKind::Full,
                    _ => return Err(bad("alg")),
                }
            }
            "batches" => self.batches = value.parse().map_err(|_| bad("batches"))?,
            "laps" => self.laps = value.parse().map_err(|_| bad("laps"))?,
            "alpha" => self.alpha = value.parse().map_err(|_| bad("alpha"))?,
            "lambda_bar" => self.lambda_bar = value.parse().map_err(|_| bad("lambda_bar"))?,
            "nu_bar" => {
                self.nu_bar = if value == "none" {
                    None
                } else {
                    Some(value.parse().map_err(|_| bad("nu_bar"))?)
                }
            }
            "delta" => self.delta = value.parse().map_err(|_| bad("delta"))?,
            "kappa" => self.kappa = value.parse().map_err(|_| bad("kappa"))?,
            "max_local_iters" => {
                self.max_local_iters = value.parse().map_err(|_| bad("max_local_iters"))?
            }
            "conv_threshold" => {
                self.conv_threshold = value.parse().map_err(|_| bad("conv_threshold"))?
            }
            "eps_active" => self.eps_active = value.parse().map_err(|_| bad("eps_active"))?,
            "restarts" => self.restarts = value.parse().map_err(|_| bad("restarts"))?,
            "warm_start" => self.warm_start = value.parse().map_err(|_| bad("warm_start"))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            "deterministic" => {
                self.deterministic = value.parse().map_err(|_| bad("deterministic"))?
            }
            "threads" => self.threads = value.parse().map_err(|_| bad("threads"))?,
            "data" => self.data = value.to_string(),
            "data_format" => {
                self.data_format = match value {
                    "csv" => DataFormat::Csv,
                    "raw64" => DataFormat::Raw64,
                    "pgm" => DataFormat::Pgm,
                    "bow" => DataFormat::Bow,
                    _ => return Err(bad("data_format")),
                }
            }
            "heldout" => {
                self.heldout = if value == "none" || value.is_empty() {
                    None
                } else {
                    Some(value.to_string())
                }
            }
            "output_dir" => self.output_dir = value.to_string(),
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }
}

fn parse_model(value: &str) -> Result<ModelKind> {
    match value {
        "gmm" => Ok(ModelKind::Gmm),
        "lda" => Ok(ModelKind::Lda),
        _ => Err(Error::Config(format!("bad value '{value}' for model"))),
    }
}

pub fn parse_sparsity(value: &str) -> Result<Sparsity> {
    if value == "dense" {
        Ok(Sparsity::Dense)
    } else {
        value.parse::<usize>().map(Sparsity::TopL).map_err(|_| {
            Error::Config(format!(
                "l must be 'dense' or a positive integer, got '{value}'"
            ))
        })
    }
}

fn fmt_f64(v: f64) -> String {
    // Shortest representation that round-trips exactly.
    format!("{v}")
}
