//! Smoothing distributions and smoothed training labels.
//!
//! A smoothed label mixes the one-hot target with a smoothing distribution
//! `P_ls`: `(1 - alpha) * onehot(k) + alpha * P_ls`. Uniform label smoothing,
//! distillation from a teacher and the bi-level optimal smoothing differ only
//! in the choice of `P_ls`.
//!
//! The optimal smoothing for the inner problem
//! `min_P  -alpha * sum_j P_j log p_j + beta * KL(P || U)` is
//! `P*_j ∝ p_j^(alpha / beta)`. Only the ratio `tau = beta / alpha` matters, so
//! `beta` is never configured: it is derived as `alpha * tau`. With an
//! adaptive, per-instance `alpha` the exponent `1 / tau` stays fixed and the
//! adaptivity changes only the mixing weight and the KL weight.

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::numerics::{entropy, exp_normalized, softmax, tempered_softmax, LogitVec, ProbVec};

pub const DEFAULT_TAU: f64 = 1.25;
pub const DEFAULT_RHO: f64 = 0.5;
pub const DEFAULT_LS_ALPHA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingMode {
    None,
    UniformLs,
    KdTeacher,
    Labo,
}

/// How the mixing weight `alpha` is chosen for an instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum AlphaRule {
    Fixed {
        alpha: f64,
    },
    /// `alpha = (log K - rho * H(p)) / log K`, `rho` in `[0.5, 1]`.
    Adaptive {
        rho: f64,
    },
}

impl AlphaRule {
    fn validate(&self) -> Result<()> {
        match *self {
            AlphaRule::Fixed { alpha } => check_alpha(alpha),
            AlphaRule::Adaptive { rho } => check_rho(rho),
        }
    }

    pub fn alpha_for(&self, p: &ProbVec) -> Result<f64> {
        match *self {
            AlphaRule::Fixed { alpha } => Ok(alpha),
            AlphaRule::Adaptive { rho } => adaptive_alpha(p, rho),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSmoothingConfig", into = "RawSmoothingConfig")]
pub struct SmoothingConfig {
    mode: SmoothingMode,
    alpha_rule: AlphaRule,
    tau: f64,
}

#[derive(Serialize, Deserialize)]
struct RawSmoothingConfig {
    mode: SmoothingMode,
    alpha_rule: AlphaRule,
    #[serde(default = "default_tau")]
    tau: f64,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

impl TryFrom<RawSmoothingConfig> for SmoothingConfig {
    type Error = Error;

    fn try_from(raw: RawSmoothingConfig) -> Result<Self> {
        SmoothingConfig::new(raw.mode, raw.alpha_rule, raw.tau)
    }
}

impl From<SmoothingConfig> for RawSmoothingConfig {
    fn from(cfg: SmoothingConfig) -> Self {
        RawSmoothingConfig {
            mode: cfg.mode,
            alpha_rule: cfg.alpha_rule,
            tau: cfg.tau,
        }
    }
}

impl SmoothingConfig {
    pub fn new(mode: SmoothingMode, alpha_rule: AlphaRule, tau: f64) -> Result<Self> {
        alpha_rule.validate()?;
        check_tau(tau)?;
        Ok(Self {
            mode,
            alpha_rule,
            tau,
        })
    }

    pub fn none() -> Self {
        Self {
            mode: SmoothingMode::None,
            alpha_rule: AlphaRule::Fixed { alpha: 0.0 },
            tau: DEFAULT_TAU,
        }
    }

    pub fn uniform(alpha: f64) -> Result<Self> {
        Self::new(
            SmoothingMode::UniformLs,
            AlphaRule::Fixed { alpha },
            DEFAULT_TAU,
        )
    }

    pub fn kd(alpha: f64) -> Result<Self> {
        Self::new(
            SmoothingMode::KdTeacher,
            AlphaRule::Fixed { alpha },
            DEFAULT_TAU,
        )
    }

    pub fn labo(alpha_rule: AlphaRule, tau: f64) -> Result<Self> {
        Self::new(SmoothingMode::Labo, alpha_rule, tau)
    }

    pub fn mode(&self) -> SmoothingMode {
        self.mode
    }

    pub fn alpha_rule(&self) -> AlphaRule {
        self.alpha_rule
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// KL weight for a given mixing weight.
    pub fn beta_for(&self, alpha: f64) -> f64 {
        alpha * self.tau
    }
}

/// A training target `(1 - alpha) * onehot(target) + alpha * p_ls`.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothedLabel {
    pub target: usize,
    pub alpha_used: f64,
    /// The smoothing distribution that was mixed in.
    pub p_ls: ProbVec,
    pub dist: ProbVec,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )))
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if (0.5..=1.0).contains(&rho) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "rho must lie in [0.5, 1], got {rho}"
        )))
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("tau must be > 0, got {tau}")))
    }
}

pub fn uniform_smooth(k: usize, classes: usize, alpha: f64) -> Result<SmoothedLabel> {
    mix_label(k, &ProbVec::uniform(classes)?, alpha)
}

pub fn mix_label(k: usize, p_ls: &ProbVec, alpha: f64) -> Result<SmoothedLabel> {
    check_alpha(alpha)?;
    let classes = p_ls.len();
    if k >= classes {
        return Err(Error::invalid(format!(
            "class {k} out of range for {classes} classes"
        )));
    }
    let mut dist: Vec<f64> = p_ls.as_slice().iter().map(|v| alpha * v).collect();
    dist[k] += 1.0 - alpha;
    Ok(SmoothedLabel {
        target: k,
        alpha_used: alpha,
        p_ls: p_ls.clone(),
        dist: ProbVec::from_normalized(dist),
    })
}

/// `p^exponent`, renormalized, computed in the log domain.
pub(crate) fn power_smoothing(p: &ProbVec, exponent: f64) -> Result<ProbVec> {
    if let Some(j) = p.as_slice().iter().position(|&v| v <= 0.0) {
        return Err(Error::domain(format!(
            "optimal smoothing needs strictly positive probabilities, p[{j}] = 0"
        )));
    }
    let scaled: Vec<f64> = p.as_slice().iter().map(|v| exponent * v.ln()).collect();
    Ok(exp_normalized(&scaled))
}

/// Closed-form minimizer of the inner smoothing problem: `p^(1/tau)` renormalized.
pub fn labo_optimal_smoothing(p: &ProbVec, tau: f64) -> Result<ProbVec> {
    check_tau(tau)?;
    power_smoothing(p, 1.0 / tau)
}

/// The optimal smoothing written as a tempered softmax of the logits.
pub fn labo_from_logits(z: &LogitVec, tau: f64) -> Result<ProbVec> {
    tempered_softmax(z, tau)
}

pub fn adaptive_alpha(p: &ProbVec, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    let h_uniform = (p.len() as f64).ln();
    let alpha = (h_uniform - rho * entropy(p)) / h_uniform;
    Ok(alpha.clamp(1.0 - rho, 1.0))
}

/// Builds the (detached) training label for one instance.
///
/// `z` is the model's current forward pass for the instance; under `Labo`
/// both the adaptive weight and the optimal smoothing come from it.
pub fn build_label(
    k: usize,
    z: &LogitVec,
    cfg: &SmoothingConfig,
    teacher_p: Option<&ProbVec>,
) -> Result<SmoothedLabel> {
    let classes = z.len();
    match cfg.mode {
        SmoothingMode::None => mix_label(k, &ProbVec::uniform(classes)?, 0.0),
        SmoothingMode::UniformLs => {
            let alpha = match cfg.alpha_rule {
                AlphaRule::Fixed { alpha } => alpha,
                rule => rule.alpha_for(&softmax(z))?,
            };
            uniform_smooth(k, classes, alpha)
        }
        SmoothingMode::KdTeacher => {
            let teacher = teacher_p.ok_or(Error::MissingTeacher)?;
            check_dims(classes, teacher.len())?;
            let alpha = cfg.alpha_rule.alpha_for(&softmax(z))?;
            mix_label(k, teacher, alpha)
        }
        SmoothingMode::Labo => {
            let alpha = cfg.alpha_rule.alpha_for(&softmax(z))?;
            let p_star = labo_from_logits(z, cfg.tau)?;
            mix_label(k, &p_star, alpha)
        }
    }
}
