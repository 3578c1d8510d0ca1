//! Context-window extension of rotary embeddings (base change and position
//! interpolation) and the partial-sum bound on attention-score drift under a
//! base change.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtensionKind {
    /// Replace the RoPE base.
    Abf,
    /// Divide positional indices by a scale factor.
    Pi,
}

/// How to extend a model to a longer window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtensionSpec {
    pub kind: ExtensionKind,
    /// New RoPE base; meaningful for [`ExtensionKind::Abf`] only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_base: Option<f64>,
    /// Interpolation factor; meaningful for [`ExtensionKind::Pi`] only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    pub target_window: usize,
}

impl ExtensionSpec {
    pub fn abf(new_base: f64, target_window: usize) -> Self {
        ExtensionSpec {
            kind: ExtensionKind::Abf,
            new_base: Some(new_base),
            scale: None,
            target_window,
        }
    }

    pub fn pi(scale: f64, target_window: usize) -> Self {
        ExtensionSpec {
            kind: ExtensionKind::Pi,
            new_base: None,
            scale: Some(scale),
            target_window,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.new_base, self.scale) {
            (ExtensionKind::Abf, Some(_), None) | (ExtensionKind::Pi, None, Some(_)) => Ok(()),
            (ExtensionKind::Abf, _, _) => Err(Error::config("abf extension takes new_base and no scale")),
            (ExtensionKind::Pi, _, _) => Err(Error::config("pi extension takes scale and no new_base")),
        }
    }

    pub fn apply(&self, config: &ModelConfig) -> Result<ModelConfig> {
        self.validate()?;
        match self.kind {
            ExtensionKind::Abf => extend_abf(config, self.new_base.unwrap_or_default(), self.target_window),
            ExtensionKind::Pi => extend_pi(config, self.scale.unwrap_or_default(), self.target_window),
        }
    }
}

/// Adjusted base frequency: new RoPE base and a larger window. Weights are untouched.
pub fn extend_abf(config: &ModelConfig, new_base: f64, target_window: usize) -> Result<ModelConfig> {
    if !(new_base > 1.0) || !new_base.is_finite() {
        return Err(Error::invalid(format!("new RoPE base {new_base} must be > 1")));
    }
    if target_window <= config.context {
        return Err(Error::invalid(format!(
            "target window {target_window} must exceed current window {}",
            config.context
        )));
    }
    let mut out = config.clone();
    out.theta = new_base;
    out.context = target_window;
    Ok(out)
}

/// Position interpolation: forward passes divide indices by `scale` before rotating.
pub fn extend_pi(config: &ModelConfig, scale: f64, target_window: usize) -> Result<ModelConfig> {
    if !(scale >= 1.0) || !scale.is_finite() {
        return Err(Error::invalid(format!("interpolation scale {scale} must be >= 1")));
    }
    if target_window <= config.context {
        return Err(Error::invalid(format!(
            "target window {target_window} must exceed current window {}",
            config.context
        )));
    }
    if target_window as f64 > scale * config.context as f64 {
        return Err(Error::invalid(format!(
            "target window {target_window} exceeds scale {scale} x window {}",
            config.context
        )));
    }
    let mut out = config.clone();
    out.pi_scale = config.pi_scale * scale;
    out.context = target_window;
    Ok(out)
}

/// Parameters of the partial-sum bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundConfig {
    pub base: f64,
    /// Head dimension (even).
    pub d: usize,
    /// Maximum sequence length; relative distances run over `0..=max_len`.
    pub max_len: usize,
}

impl BoundConfig {
    pub fn new(base: f64, d: usize, max_len: usize) -> Result<Self> {
        let cfg = BoundConfig { base, d, max_len };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 2 != 0 {
            return Err(Error::invalid(format!("bound head dimension {} must be even and positive", self.d)));
        }
        if !(self.base > 1.0) || !self.base.is_finite() {
            return Err(Error::invalid(format!("bound base {} must be > 1", self.base)));
        }
        Ok(())
    }
}

/// `|S_j|` for `j = 1..=d/2`, where `S_j = sum_{k<j} exp(i t theta_k)` and `theta_k = base^(-2k/d)`.
pub fn partial_sum_magnitudes(cfg: &BoundConfig, t: usize) -> Result<Vec<f64>> {
    cfg.validate()?;
    if t > cfg.max_len {
        return Err(Error::OutOfRange {
            context: "relative distance",
            index: t,
            limit: cfg.max_len + 1,
        });
    }
    Ok(magnitudes(cfg.base, cfg.d, t as f64))
}

fn magnitudes(base: f64, d: usize, t: f64) -> Vec<f64> {
    let mut acc = Complex64::new(0.0, 0.0);
    (0..d / 2)
        .map(|k| {
            let theta = base.powf(-2.0 * k as f64 / d as f64);
            acc += Complex64::from_polar(1.0, t * theta);
            acc.norm()
        })
        .collect()
}

/// `B = sum_{t=0}^{T} (T - t) sum_{i<d/2} |S_{i+1}^t|`.
pub fn rope_bound(cfg: &BoundConfig) -> Result<f64> {
    cfg.validate()?;
    let big_t = cfg.max_len;
    Ok((0..=big_t)
        .map(|t| (big_t - t) as f64 * magnitudes(cfg.base, cfg.d, t as f64).iter().sum::<f64>())
        .sum())
}
