//! Skipped positional indices for short-to-long distillation.
//!
//! A short input of `T` tokens is split into a head of `T_b` tokens, a middle
//! run of `T - 2 T_b` tokens and a tail of `T_b` tokens. The head keeps
//! positions `0..T_b`, the tail is moved to the end of the long window
//! `T_l - T_b..T_l`, and the middle becomes a contiguous run ending at a sampled
//! index `T_me`.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PlanSegments, PositionPlan};

/// How the head/tail length `T_b` is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryPolicy {
    Fixed(usize),
    /// Per sample, pick `round(4 * T_l / T)` or `floor(T / 3)` with equal odds.
    CreamRandom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Uniform,
    Cream,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkipConfig {
    /// Input length `T`.
    pub input_len: usize,
    /// Target long length `T_l`.
    pub target_len: usize,
    pub boundary: BoundaryPolicy,
    pub sampler: SamplerKind,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
}

fn default_sigma() -> f64 {
    3.0
}

fn default_grid_points() -> usize {
    1000
}

impl SkipConfig {
    pub fn new(input_len: usize, target_len: usize, boundary: BoundaryPolicy, sampler: SamplerKind) -> Result<Self> {
        let cfg = SkipConfig {
            input_len,
            target_len,
            boundary,
            sampler,
            sigma: default_sigma(),
            grid_points: default_grid_points(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn extension_factor(&self) -> f64 {
        self.target_len as f64 / self.input_len as f64
    }

    /// Every head/tail length this config can produce.
    pub fn boundaries(&self) -> Vec<usize> {
        match self.boundary {
            BoundaryPolicy::Fixed(b) => vec![b],
            BoundaryPolicy::CreamRandom => {
                let continuity = ((4.0 * self.extension_factor()).round() as usize).max(1);
                vec![continuity, self.input_len / 3]
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_len <= self.input_len {
            return Err(Error::config(format!(
                "target length {} must exceed input length {}",
                self.target_len, self.input_len
            )));
        }
        for b in self.boundaries() {
            if b == 0 || 2 * b >= self.input_len {
                return Err(Error::config(format!(
                    "boundary {b} invalid for input length {}: need 1 <= T_b and 2 T_b < T",
                    self.input_len
                )));
            }
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config("sigma must be positive"));
        }
        if self.grid_points < 2 {
            return Err(Error::config("grid_points must be at least 2"));
        }
        Ok(())
    }

    fn draw_boundary<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self.boundary {
            BoundaryPolicy::Fixed(b) => b,
            BoundaryPolicy::CreamRandom => self.boundaries()[rng.gen_range(0..2)],
        }
    }

    /// Inclusive range of admissible middle-segment end positions for a boundary.
    pub fn mid_end_range(&self, boundary: usize) -> (usize, usize) {
        (self.input_len - boundary, self.target_len - boundary - 1)
    }
}

/// Index ranges of the three segments over the input sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentSplit {
    pub head: Range<usize>,
    pub mid: Range<usize>,
    pub tail: Range<usize>,
}

pub fn split_segments(t: usize, boundary: usize) -> Result<SegmentSplit> {
    if boundary == 0 || 2 * boundary >= t {
        return Err(Error::invalid(format!("cannot split length {t} with boundary {boundary}")));
    }
    Ok(SegmentSplit {
        head: 0..boundary,
        mid: boundary..t - boundary,
        tail: t - boundary..t,
    })
}

/// Lays out head, middle (ending at `mid_end`) and tail positions.
pub fn skip_layout(t: usize, t_l: usize, boundary: usize, mid_end: usize) -> Result<PositionPlan> {
    let split = split_segments(t, boundary)?;
    if t_l <= t {
        return Err(Error::invalid(format!("target length {t_l} must exceed {t}")));
    }
    let (lo, hi) = (t - boundary, t_l - boundary - 1);
    if mid_end < lo || mid_end > hi {
        return Err(Error::invalid(format!("middle end {mid_end} outside [{lo}, {hi}]")));
    }
    let mid_len = split.mid.len();
    let mid_start = mid_end + 1 - mid_len;
    let indices: Vec<usize> = split
        .head
        .clone()
        .chain(mid_start..=mid_end)
        .chain(t_l - boundary..t_l)
        .collect();
    Ok(PositionPlan::new(indices, t_l - 1)?.with_segments(PlanSegments { boundary, mid_end }))
}

/// Which range a middle-segment end was drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeSource {
    /// The full admissible range `[T - T_b, T_l - T_b - 1]`.
    Uniform,
    /// `[T_b + a (T_l - 2 T_b), a T - T_b - 1]`, used when admissible.
    CreamPrinted,
    /// `[T_b + a (T - 2 T_b), a T - T_b - 1]`, used when admissible.
    CreamRescaled,
    /// Neither scaled range was admissible; drew from the full range.
    CreamFallback,
}

/// A sampled plan with the quantities that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SkipDraw {
    pub plan: PositionPlan,
    pub boundary: usize,
    pub mid_end: usize,
    pub alpha: Option<usize>,
    pub source: RangeSource,
}

pub fn uniform_skip<R: Rng + ?Sized>(cfg: &SkipConfig, rng: &mut R) -> Result<PositionPlan> {
    Ok(uniform_draw(cfg, rng)?.plan)
}

pub fn uniform_draw<R: Rng + ?Sized>(cfg: &SkipConfig, rng: &mut R) -> Result<SkipDraw> {
    cfg.validate()?;
    let boundary = cfg.draw_boundary(rng);
    let (lo, hi) = cfg.mid_end_range(boundary);
    if lo > hi {
        return Err(Error::invalid(format!("empty middle-end range [{lo}, {hi}]")));
    }
    let mid_end = rng.gen_range(lo..=hi);
    Ok(SkipDraw {
        plan: skip_layout(cfg.input_len, cfg.target_len, boundary, mid_end)?,
        boundary,
        mid_end,
        alpha: None,
        source: RangeSource::Uniform,
    })
}

fn normal_cdf(x: f64, mu: f64, sigma: f64) -> f64 {
    0.5 * (1.0 + libm::erf((x - mu) / (sigma * std::f64::consts::SQRT_2)))
}

/// Draws the scale factor `alpha` from a Gaussian (mean `1 + T_l/T`) truncated
/// to `[1, T_l/T]`, by inverting its CDF tabulated on an even grid.
pub fn sample_cream_alpha<R: Rng + ?Sized>(cfg: &SkipConfig, rng: &mut R) -> Result<usize> {
    let k = cfg.extension_factor();
    if !(k > 1.0) {
        return Err(Error::invalid(format!("extension factor {k} must exceed 1")));
    }
    let n = cfg.grid_points.max(2);
    let mu = 1.0 + k;
    let xs: Vec<f64> = (0..n).map(|i| 1.0 + (k - 1.0) * i as f64 / (n - 1) as f64).collect();
    let cdf: Vec<f64> = xs.iter().map(|&x| normal_cdf(x, mu, cfg.sigma)).collect();
    let (f_lo, f_hi) = (cdf[0], cdf[n - 1]);
    let target = f_lo + rng.gen::<f64>() * (f_hi - f_lo);
    let i = cdf.partition_point(|&f| f < target).clamp(1, n - 1);
    let span = cdf[i] - cdf[i - 1];
    let u = if span > 0.0 {
        xs[i - 1] + (xs[i] - xs[i - 1]) * (target - cdf[i - 1]) / span
    } else {
        xs[i]
    };
    Ok((u.round() as usize).clamp(1, k.floor() as usize))
}

pub fn cream_skip<R: Rng + ?Sized>(cfg: &SkipConfig, rng: &mut R) -> Result<PositionPlan> {
    Ok(cream_draw(cfg, rng)?.plan)
}

pub fn cream_draw<R: Rng + ?Sized>(cfg: &SkipConfig, rng: &mut R) -> Result<SkipDraw> {
    cfg.validate()?;
    let boundary = cfg.draw_boundary(rng);
    let alpha = sample_cream_alpha(cfg, rng)?;
    let (t, t_l, b, a) = (
        cfg.input_len as i64,
        cfg.target_len as i64,
        boundary as i64,
        alpha as i64,
    );
    let (lo, hi) = cfg.mid_end_range(boundary);
    let admissible = |r_lo: i64, r_hi: i64| r_lo <= r_hi && r_lo >= lo as i64 && r_hi <= hi as i64;
    let printed = (b + a * (t_l - 2 * b), a * t - b - 1);
    let rescaled = (b + a * (t - 2 * b), a * t - b - 1);
    let (range, source) = if admissible(printed.0, printed.1) {
        ((printed.0 as usize, printed.1 as usize), RangeSource::CreamPrinted)
    } else if admissible(rescaled.0, rescaled.1) {
        ((rescaled.0 as usize, rescaled.1 as usize), RangeSource::CreamRescaled)
    } else {
        ((lo, hi), RangeSource::CreamFallback)
    };
    let mid_end = rng.gen_range(range.0..=range.1);
    Ok(SkipDraw {
        plan: skip_layout(cfg.input_len, cfg.target_len, boundary, mid_end)?,
        boundary,
        mid_end,
        alpha: Some(alpha),
        source,
    })
}

/// Draws a plan with the configured sampler.
pub fn sample_plan<R: Rng + ?Sized>(cfg: &SkipConfig, rng: &mut R) -> Result<SkipDraw> {
    match cfg.sampler {
        SamplerKind::Uniform => uniform_draw(cfg, rng),
        SamplerKind::Cream => cream_draw(cfg, rng),
    }
}
