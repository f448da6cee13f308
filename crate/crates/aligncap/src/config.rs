//! Run configuration: a TOML file with nested sections, every field defaulted
//! to the desk-scale setup.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::god::DiscrepancyMode;
use crate::losses::LossWeights;

fn d_seed() -> u64 {
    42
}
fn d_batch() -> usize {
    8
}
fn d_steps() -> usize {
    300
}
fn d_lr() -> f64 {
    1e-3
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_mode() -> DiscrepancyMode {
    DiscrepancyMode::FeatureCosine
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { beta1: d_beta1(), beta2: d_beta2(), epsilon: d_eps() }
    }
}

macro_rules! dim_defaults {
    ($($fn_name:ident = $v:expr;)*) => {
        $(fn $fn_name() -> usize { $v })*
    };
}

dim_defaults! {
    d_dv = 16; d_dt = 16; d_dc = 16; d_ds = 8; d_dllm = 16;
    d_p = 2; d_h = 2; d_m = 4; d_k = 2; d_j = 3;
    d_g = 8; d_channels = 3; d_sr = 1;
}

/// Model and pipeline sizes. `g`/`channels` describe the scene raster,
/// `p` the RoI output side, `m` the latent bank, `k`/`j` the view sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimsConfig {
    #[serde(default = "d_dv")]
    pub d_v: usize,
    #[serde(default = "d_dt")]
    pub d_t: usize,
    #[serde(default = "d_dc")]
    pub d_c: usize,
    #[serde(default = "d_ds")]
    pub d_s: usize,
    #[serde(default = "d_dllm")]
    pub d_llm: usize,
    #[serde(default = "d_p")]
    pub p: usize,
    #[serde(default = "d_h")]
    pub h: usize,
    #[serde(default = "d_m")]
    pub m: usize,
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_j")]
    pub j: usize,
    #[serde(default = "d_g")]
    pub g: usize,
    #[serde(default = "d_channels")]
    pub channels: usize,
    #[serde(default = "d_sr")]
    pub sampling_ratio: usize,
}

impl Default for DimsConfig {
    fn default() -> Self {
        Self {
            d_v: d_dv(),
            d_t: d_dt(),
            d_c: d_dc(),
            d_s: d_ds(),
            d_llm: d_dllm(),
            p: d_p(),
            h: d_h(),
            m: d_m(),
            k: d_k(),
            j: d_j(),
            g: d_g(),
            channels: d_channels(),
            sampling_ratio: d_sr(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub dropout_p: f64,
    #[serde(default = "d_mode")]
    pub discrepancy_mode: DiscrepancyMode,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub dims: DimsConfig,
    #[serde(default)]
    pub weights: LossWeights,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config deserializes via field defaults")
    }
}

impl TrainingConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn god_config(&self) -> crate::god::GodConfig {
        crate::god::GodConfig {
            k: self.dims.k,
            j: self.dims.j,
            discrepancy_mode: self.discrepancy_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let dims = [
            ("d_v", d.d_v),
            ("d_t", d.d_t),
            ("d_c", d.d_c),
            ("d_s", d.d_s),
            ("d_llm", d.d_llm),
            ("p", d.p),
            ("h", d.h),
            ("m", d.m),
            ("k", d.k),
            ("j", d.j),
            ("g", d.g),
            ("channels", d.channels),
            ("sampling_ratio", d.sampling_ratio),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("dims.{name} must be positive")));
            }
        }
        for (name, dim) in [("d_v", d.d_v), ("d_c", d.d_c), ("d_llm", d.d_llm)] {
            if dim % d.h != 0 {
                return Err(Error::Config(format!(
                    "dims.h = {} must divide dims.{name} = {dim}",
                    d.h
                )));
            }
        }
        self.god_config().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !self.dropout_p.is_finite() || !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config(format!(
                "optimizer betas must lie in [0, 1), got beta1={} beta2={}",
                o.beta1, o.beta2
            )));
        }
        if !o.epsilon.is_finite() || o.epsilon <= 0.0 {
            return Err(Error::Config(format!("optimizer.epsilon must be > 0, got {}", o.epsilon)));
        }
        self.weights.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_yields_validated_defaults() {
        let cfg = TrainingConfig::from_toml("").unwrap();
        assert_eq!(cfg, TrainingConfig::default());
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.steps, 300);
        assert_eq!(cfg.learning_rate, 1e-3);
        assert_eq!(cfg.dropout_p, 0.0);
        assert_eq!(cfg.discrepancy_mode, DiscrepancyMode::FeatureCosine);
        assert_eq!(cfg.optimizer.beta1, 0.9);
        assert_eq!(cfg.optimizer.beta2, 0.999);
        assert_eq!(cfg.optimizer.epsilon, 1e-8);
        assert_eq!(cfg.dims.d_v, 16);
        assert_eq!(cfg.weights.alpha, 1.0);
    }

    #[test]
    fn partial_sections_override_only_named_fields() {
        let cfg = TrainingConfig::from_toml(
            "steps = 10\ndiscrepancy_mode = \"one-minus-iou\"\n[dims]\nd_v = 8\n[weights]\ngamma = 0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.steps, 10);
        assert_eq!(cfg.discrepancy_mode, DiscrepancyMode::OneMinusIou);
        assert_eq!(cfg.dims.d_v, 8);
        assert_eq!(cfg.dims.d_t, 16);
        assert_eq!(cfg.weights.gamma, 0.5);
        assert_eq!(cfg.weights.alpha, 1.0);
    }

    #[test]
    fn rejects_out_of_range_fields() {
        for bad in [
            "batch_size = 0",
            "steps = 0",
            "learning_rate = -1.0",
            "dropout_p = 1.0",
            "[dims]\nd_v = 0",
            "[dims]\nh = 3",
            "[dims]\nj = 1",
            "[optimizer]\nbeta1 = 1.0",
            "[optimizer]\nepsilon = 0.0",
            "[weights]\nalpha = 0.0\nbeta = 0.0\ngamma = 0.0\nlambda = 0.0",
        ] {
            assert!(TrainingConfig::from_toml(bad).is_err(), "accepted: {bad}");
        }
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(TrainingConfig::from_toml("stesp = 10").is_err());
        assert!(TrainingConfig::from_toml("[dims]\nwidth = 4").is_err());
    }

    #[test]
    fn toml_round_trip_preserves_config() {
        let mut cfg = TrainingConfig::default();
        cfg.steps = 7;
        cfg.dims.d_s = 4;
        cfg.weights.lambda = 0.25;
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(TrainingConfig::from_toml(&text).unwrap(), cfg);
    }
}
