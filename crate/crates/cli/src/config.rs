//! Run configuration, read from TOML or an equivalent JSON document.
//!
//! ```toml
//! seed = 1
//! out_dir = "runs/desk"
//!
//! [arch]
//! n_classes = 10
//! input = { c = 2, h = 16, w = 16 }
//! layers = [
//!     { kind = "conv", channels = 8, kernel = 5 },
//!     { kind = "conv", channels = 16, kernel = 5 },
//! ]
//! lif = { alpha = 0.9, u_thres = 1.0, surrogate_beta = 10.0 }
//! init_gain = 0.3
//!
//! [optimizer]
//! lr = 1.0
//! epochs = 6
//! batch_size = 10
//!
//! [data]
//! source = "synth"
//! n_classes = 10
//! train_per_class = 20
//! test_per_class = 5
//! shape = { c = 2, h = 16, w = 16 }
//! steps = 50
//! rate_hi = 0.3
//! rate_lo = 0.02
//!
//! [quant]
//! layers = [
//!     { weight_bits = 8, state_bits = 16 },
//!     { weight_bits = 16, state_bits = 16 },
//! ]
//! ```
//!
//! The JSON form has the same keys. The run seed also seeds synthetic data.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use snnq::data::{Shape3, SynthConfig};
use snnq::hessian::HutchinsonConfig;
use snnq::net::ArchSpec;
use snnq::quant::{LayerBits, DEFAULT_GRAD_SCALE};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub arch: ArchSpec,
    pub optimizer: OptimizerConfig,
    pub data: DataSource,
    #[serde(default)]
    pub quant: Option<QuantConfig>,
    #[serde(default)]
    pub hutchinson: HutchinsonSection,
    #[serde(default)]
    pub allocate: Option<AllocateConfig>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_grad_scale")]
    pub grad_scale: f64,
    #[serde(default = "default_finetune_epochs")]
    pub finetune_epochs: usize,
    /// Learning rate while fine-tuning; updates are further multiplied by
    /// `grad_scale`. Defaults to `lr / grad_scale`.
    #[serde(default)]
    pub finetune_lr: Option<f64>,
}

fn default_batch() -> usize {
    32
}

fn default_grad_scale() -> f64 {
    DEFAULT_GRAD_SCALE
}

fn default_finetune_epochs() -> usize {
    10
}

impl OptimizerConfig {
    pub fn finetune_lr(&self) -> f64 {
        self.finetune_lr.unwrap_or(self.lr / self.grad_scale)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synth {
        n_classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        shape: Shape3,
        steps: usize,
        rate_hi: f64,
        rate_lo: f64,
        #[serde(default = "default_mask_density")]
        mask_density: f64,
    },
    /// `path/{train,test}/<label>/*.sevt`.
    Sevt { path: PathBuf, dt_us: u32, steps: usize },
}

fn default_mask_density() -> f64 {
    0.2
}

impl DataSource {
    pub fn synth_config(&self, seed: u64) -> Option<SynthConfig> {
        match *self {
            DataSource::Synth {
                n_classes,
                train_per_class,
                test_per_class,
                shape,
                steps,
                rate_hi,
                rate_lo,
                mask_density,
            } => Some(SynthConfig {
                n_classes,
                train_per_class,
                test_per_class,
                shape,
                steps,
                rate_hi,
                rate_lo,
                mask_density,
                seed,
            }),
            DataSource::Sevt { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    pub layers: Vec<LayerBits>,
    /// Training samples used to calibrate state formats.
    #[serde(default = "default_calibration")]
    pub calibration_samples: usize,
}

fn default_calibration() -> usize {
    20
}

/// Trace estimation settings. Probes are seeded from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HutchinsonSection {
    pub max_iter: usize,
    pub max_batch: usize,
    pub batch_size: usize,
    pub max_seq: usize,
    pub fd_step: f64,
    pub normalize_probe: bool,
}

impl Default for HutchinsonSection {
    fn default() -> Self {
        let d = HutchinsonConfig::default();
        Self {
            max_iter: d.max_iter,
            max_batch: d.max_batch,
            batch_size: d.batch_size,
            max_seq: d.max_seq,
            fd_step: d.fd_step,
            normalize_probe: d.normalize_probe,
        }
    }
}

impl HutchinsonSection {
    pub fn with_seed(&self, seed: u64) -> HutchinsonConfig {
        HutchinsonConfig {
            max_iter: self.max_iter,
            max_batch: self.max_batch,
            batch_size: self.batch_size,
            max_seq: self.max_seq,
            seed,
            fd_step: self.fd_step,
            normalize_probe: self.normalize_probe,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocateConfig {
    pub budget_mb: f64,
    pub menu: Vec<u32>,
}

impl RunConfig {
    /// Reads TOML, or JSON when the extension is `.json`, then validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        let json = path.extension().is_some_and(|e| e == "json");
        let cfg = Self::parse(&text, json).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn parse(text: &str, json: bool) -> Result<Self> {
        let cfg: Self = if json {
            let de = &mut serde_json::Deserializer::from_str(text);
            serde_path_to_error::deserialize(de)
                .map_err(|e| CliError::Config(format!("{}: {}", e.path(), e.inner())))?
        } else {
            let de = toml::Deserializer::parse(text).map_err(|e| CliError::Config(e.to_string()))?;
            serde_path_to_error::deserialize(de)
                .map_err(|e| CliError::Config(format!("{}: {}", e.path(), e.inner())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Other(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(CliError::Config(format!("{field}: {msg}")));
        self.arch
            .resolve()
            .map_err(|e| CliError::Config(format!("arch: {e}")))?;
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            return fail("optimizer.lr", format!("must be finite and non-negative, got {}", o.lr));
        }
        if o.batch_size == 0 {
            return fail("optimizer.batch_size", "must be at least 1".into());
        }
        if !(o.grad_scale > 0.0 && o.grad_scale.is_finite()) {
            return fail(
                "optimizer.grad_scale",
                format!("must be positive, got {}", o.grad_scale),
            );
        }
        if let Some(lr) = o.finetune_lr {
            if !(lr >= 0.0 && lr.is_finite()) {
                return fail(
                    "optimizer.finetune_lr",
                    format!("must be finite and non-negative, got {lr}"),
                );
            }
        }
        match &self.data {
            DataSource::Synth { n_classes, shape, .. } => {
                if *n_classes != self.arch.n_classes {
                    return fail(
                        "data.n_classes",
                        format!("{n_classes} differs from arch.n_classes {}", self.arch.n_classes),
                    );
                }
                if *shape != self.arch.input {
                    return fail(
                        "data.shape",
                        format!("{shape:?} differs from arch.input {:?}", self.arch.input),
                    );
                }
            }
            DataSource::Sevt { path, dt_us, steps } => {
                if !path.is_dir() {
                    return fail("data.path", format!("{} is not a directory", path.display()));
                }
                if *dt_us == 0 || *steps == 0 {
                    return fail("data", "dt_us and steps must be positive".into());
                }
            }
        }
        if let Some(q) = &self.quant {
            if q.layers.len() != self.arch.layers.len() {
                return fail(
                    "quant.layers",
                    format!("{} entries for {} layers", q.layers.len(), self.arch.layers.len()),
                );
            }
        }
        if let Some(a) = &self.allocate {
            if a.menu.is_empty() {
                return fail("allocate.menu", "must not be empty".into());
            }
        }
        Ok(())
    }
}

/// Parses a comma-separated list such as `8,16,16`.
pub fn parse_bits(list: &str) -> Result<Vec<u32>> {
    list.split(',')
        .map(|s| {
            s.trim()
                .parse::<u32>()
                .map_err(|_| CliError::Config(format!("bad bit width {s:?} in {list:?}")))
        })
        .collect()
}
