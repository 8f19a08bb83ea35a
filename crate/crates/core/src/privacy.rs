//! Local differential privacy for released gradients: global L2 clipping
//! followed by i.i.d. Laplace noise.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::model::GradientSet;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PrivacyError {
    #[error("invalid LDP configuration: {0}")]
    Config(String),
    #[error("gradient contains a non-finite entry")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdpConfig {
    /// Clipping threshold on the global gradient norm.
    pub delta: f64,
    /// Laplace scale `b`; the noise variance is `2b²`.
    pub lambda: f64,
    pub enabled: bool,
}

impl Default for LdpConfig {
    fn default() -> Self {
        Self {
            delta: 0.4,
            lambda: 0.15,
            enabled: false,
        }
    }
}

impl LdpConfig {
    pub fn validate(&self) -> Result<(), PrivacyError> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(PrivacyError::Config(format!("delta must be > 0, got {}", self.delta)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(PrivacyError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Zero-mean Laplace noise of scale `b`, sampled as the difference of two
/// exponentials with rate `1/b`.
#[derive(Debug, Clone, Copy)]
pub struct Laplace {
    exp: Option<Exp<f64>>,
}

impl Laplace {
    pub fn new(scale: f64) -> Result<Self, PrivacyError> {
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(PrivacyError::Config(format!("Laplace scale must be >= 0, got {scale}")));
        }
        if scale == 0.0 {
            return Ok(Self { exp: None });
        }
        let exp = Exp::new(1.0 / scale).map_err(|e| PrivacyError::Config(e.to_string()))?;
        Ok(Self { exp: Some(exp) })
    }
}

impl Distribution<f64> for Laplace {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.exp {
            Some(e) => e.sample(rng) - e.sample(rng),
            None => 0.0,
        }
    }
}

/// What [`clip_and_noise`] did to a gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipReport {
    pub norm_before: f64,
    /// Multiplier applied before noising (1 when inside the ball).
    pub clip_scale: f64,
}

/// Rescale `grad` to global norm at most `δ`, then add Laplace(0, λ) noise
/// to every entry it carries.
pub fn clip_and_noise<R: Rng>(
    grad: &mut GradientSet,
    config: &LdpConfig,
    rng: &mut R,
) -> Result<ClipReport, PrivacyError> {
    config.validate()?;
    if grad.values().any(|x| !x.is_finite()) {
        return Err(PrivacyError::NonFinite);
    }
    let norm = grad.norm();
    let clip_scale = if norm > config.delta { config.delta / norm } else { 1.0 };
    if clip_scale != 1.0 {
        grad.scale(clip_scale);
    }
    if config.lambda > 0.0 {
        let noise = Laplace::new(config.lambda)?;
        for x in grad.values_mut() {
            *x += noise.sample(rng);
        }
    }
    Ok(ClipReport {
        norm_before: norm,
        clip_scale,
    })
}

/// Upper bound `ε = 2δ/λ` on the single-release privacy budget;
/// `f64::INFINITY` when no noise is added.
pub fn privacy_budget(config: &LdpConfig) -> f64 {
    if config.lambda == 0.0 {
        f64::INFINITY
    } else {
        2.0 * config.delta / config.lambda
    }
}
