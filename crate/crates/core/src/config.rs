//! Run configuration, read from TOML with one table per concern.
//!
//! Unknown keys are rejected everywhere. Relative paths are resolved against
//! the directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::engine::GumbelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Daps,
    GumbelSt,
    Reinforce,
    VqVae,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Constant,
    Linear,
    Cosine,
}

/// A value interpolated from `initial` (step 0) to `final` (last step).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub initial: f64,
    #[serde(rename = "final")]
    pub final_value: f64,
    #[serde(default = "default_shape")]
    pub schedule: Shape,
}

fn default_shape() -> Shape {
    Shape::Linear
}

impl Schedule {
    pub fn constant(v: f64) -> Self {
        Self { initial: v, final_value: v, schedule: Shape::Constant }
    }

    pub fn at(&self, step: u64, total: u64) -> f64 {
        let frac = if total == 0 { 0.0 } else { (step as f64 / total as f64).min(1.0) };
        let (a, b) = (self.initial, self.final_value);
        match self.schedule {
            Shape::Constant => a,
            Shape::Linear => a + (b - a) * frac,
            Shape::Cosine => b + (a - b) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
        }
    }

    fn check(&self, what: &str, positive: bool) -> Result<()> {
        for v in [self.initial, self.final_value] {
            let ok = v.is_finite() && if positive { v > 0.0 } else { v >= 0.0 };
            if !ok {
                return Err(Error::Config(format!("{what} value {v} out of range")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    /// Validation rows scored per eval; all of them when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_rows: Option<usize>,
    #[serde(default = "default_metrics")]
    pub metrics: PathBuf,
    #[serde(default = "default_checkpoint")]
    pub checkpoint: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
    /// Off by default so that metrics files are reproducible byte for byte.
    #[serde(default)]
    pub record_wall_clock: bool,
}

fn default_k() -> usize {
    8
}
fn default_eval_every() -> u64 {
    200
}
fn default_metrics() -> PathBuf {
    "metrics.jsonl".into()
}
fn default_checkpoint() -> PathBuf {
    "model.ckpt".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub cosine_decay: bool,
    #[serde(default = "default_eta_lr")]
    pub eta_lr: f64,
    #[serde(default = "default_eta_init")]
    pub eta_init: f64,
}

fn default_lr() -> f64 {
    3e-4
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_eta_lr() -> f64 {
    1e-2
}
fn default_eta_init() -> f64 {
    1.0
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            weight_decay: default_weight_decay(),
            cosine_decay: false,
            eta_lr: default_eta_lr(),
            eta_init: default_eta_init(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DapsConfig {
    #[serde(default = "default_rho")]
    pub rho_target: f64,
}

fn default_rho() -> f64 {
    0.5
}

impl Default for DapsConfig {
    fn default() -> Self {
        Self { rho_target: default_rho() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqConfig {
    #[serde(default = "default_commitment")]
    pub commitment: f64,
}

fn default_commitment() -> f64 {
    0.25
}

impl Default for VqConfig {
    fn default() -> Self {
        Self { commitment: default_commitment() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub length: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_decoder_embed")]
    pub decoder_embed: usize,
    #[serde(default = "default_decoder_hidden")]
    pub decoder_hidden: usize,
}

fn default_hidden() -> usize {
    32
}
fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    2
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_decoder_embed() -> usize {
    16
}
fn default_decoder_hidden() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub run: RunConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default = "default_beta")]
    pub beta: Schedule,
    #[serde(default)]
    pub daps: DapsConfig,
    /// Gumbel-Softmax temperature.
    #[serde(default = "default_tau")]
    pub tau: Schedule,
    #[serde(default)]
    pub vq: VqConfig,
    pub model: ModelConfig,
    pub data: DatasetSpec,
}

fn default_beta() -> Schedule {
    Schedule::constant(1.0)
}
fn default_tau() -> Schedule {
    Schedule::constant(GumbelConfig::default().tau)
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.run.metrics);
        fix(&mut self.run.checkpoint);
        if let Some(p) = self.run.resume.as_mut() {
            fix(p);
        }
        if let Some(p) = self.data.path.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let run = &self.run;
        let bad = |msg: String| Err(Error::Config(msg));
        if run.k == 0 {
            return bad("run.k must be at least 1".into());
        }
        if run.batch_size == 0 || run.eval_every == 0 {
            return bad("run.batch_size and run.eval_every must be positive".into());
        }
        if run.eval_rows == Some(0) {
            return bad("run.eval_rows must be positive".into());
        }
        let o = &self.optim;
        // Zero rates are allowed: they turn the corresponding update into a no-op.
        for (name, v) in [("lr", o.lr), ("weight_decay", o.weight_decay), ("eta_lr", o.eta_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("optim.{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(o.eta_init > 0.0 && o.eta_init.is_finite()) {
            return bad(format!("optim.eta_init must be positive, got {}", o.eta_init));
        }
        let rho = self.daps.rho_target;
        if !(rho > 0.0 && rho < 1.0) {
            return bad(format!("daps.rho_target must be in (0, 1), got {rho}"));
        }
        self.beta.check("beta", false)?;
        self.tau.check("tau", true)?;
        if !(self.vq.commitment >= 0.0 && self.vq.commitment.is_finite()) {
            return bad(format!("vq.commitment must be non-negative, got {}", self.vq.commitment));
        }
        let m = &self.model;
        if [m.vocab, m.length, m.hidden, m.layers, m.heads, m.mlp_ratio, m.decoder_embed, m.decoder_hidden].contains(&0) {
            return bad(format!("model dimensions must be positive: {m:?}"));
        }
        if m.hidden % m.heads != 0 {
            return bad(format!("model.hidden {} not divisible by model.heads {}", m.hidden, m.heads));
        }
        self.data.validate()
    }

    /// The config with output locations cleared, for comparing a resumed run
    /// against the run that wrote the checkpoint.
    pub fn identity(&self) -> Self {
        let mut c = self.clone();
        c.run.metrics = PathBuf::new();
        c.run.checkpoint = PathBuf::new();
        c.run.resume = None;
        c.run.record_wall_clock = false;
        c
    }
}
