//! Numerically stable probability kernels.
//!
//! Everything that produces a distribution works in the log domain and
//! exponentiates last: tempered exponents such as `1/tau` can otherwise
//! underflow raw probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};

/// Tolerance on `|sum - 1|` accepted when validating a [`ProbVec`].
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Unnormalized class scores produced by a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LogitVec(Vec<f64>);

impl LogitVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "logit {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for LogitVec {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<LogitVec> for Vec<f64> {
    fn from(z: LogitVec) -> Self {
        z.0
    }
}

/// A point on the probability simplex with at least two classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVec(Vec<f64>);

impl ProbVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid(format!(
                "probability {i} is negative or not finite ({})",
                values[i]
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!("probabilities sum to {sum}")));
        }
        Ok(Self(values))
    }

    /// Wraps values that are a simplex point by construction.
    pub(crate) fn from_normalized(values: Vec<f64>) -> Self {
        debug_assert!(values.len() >= 2);
        debug_assert!((values.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL);
        Self(values)
    }

    pub fn uniform(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        Ok(Self(vec![1.0 / classes as f64; classes]))
    }

    pub fn one_hot(k: usize, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        if k >= classes {
            return Err(Error::invalid(format!(
                "class {k} out of range for {classes} classes"
            )));
        }
        let mut values = vec![0.0; classes];
        values[k] = 1.0;
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Index and value of the largest entry (first one on ties).
    pub fn argmax(&self) -> (usize, f64) {
        self.0
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            })
    }

    pub fn linf_distance(&self, other: &ProbVec) -> f64 {
        linf(&self.0, &other.0)
    }
}

impl TryFrom<Vec<f64>> for ProbVec {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ProbVec> for Vec<f64> {
    fn from(p: ProbVec) -> Self {
        p.0
    }
}

pub(crate) fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `log sum exp` of a finite, non-empty slice.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalizes log-weights onto the simplex without leaving the log domain
/// until the last step.
pub(crate) fn log_normalize(log_weights: &[f64]) -> Vec<f64> {
    let lse = logsumexp(log_weights);
    log_weights.iter().map(|w| w - lse).collect()
}

pub(crate) fn exp_normalized(log_weights: &[f64]) -> ProbVec {
    let max = log_weights
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_weights.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = w.iter().sum();
    ProbVec::from_normalized(w.into_iter().map(|v| v / total).collect())
}

pub fn softmax(z: &LogitVec) -> ProbVec {
    exp_normalized(z.as_slice())
}

pub fn log_softmax(z: &LogitVec) -> Vec<f64> {
    log_normalize(z.as_slice())
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn entropy(p: &ProbVec) -> f64 {
    -p.as_slice()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// `KL(p || q)` in nats. Fails when `q` puts zero mass where `p` does not.
pub fn kl_div(p: &ProbVec, q: &ProbVec) -> Result<f64> {
    check_dims(p.len(), q.len())?;
    let mut total = 0.0;
    for (j, (&pj, &qj)) in p.as_slice().iter().zip(q.as_slice()).enumerate() {
        if pj == 0.0 {
            continue;
        }
        if qj == 0.0 {
            return Err(Error::domain(format!(
                "KL support violation at class {j}: p = {pj}, q = 0"
            )));
        }
        total += pj * (pj / qj).ln();
    }
    // Rounding can leave a tiny negative value when p == q.
    Ok(total.max(0.0))
}

/// `softmax(z / tau)`.
pub fn tempered_softmax(z: &LogitVec, tau: f64) -> Result<ProbVec> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!(
            "temperature must be > 0, got {tau}"
        )));
    }
    let scaled: Vec<f64> = z.as_slice().iter().map(|v| v / tau).collect();
    Ok(exp_normalized(&scaled))
}
