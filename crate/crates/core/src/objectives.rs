//! Per-instance losses and their gradients with respect to the logits.
//!
//! The regularized objective for one instance is
//!
//! ```text
//! R(P_ls) = -sum_j Phat_j log p_j  +  beta * KL(P_ls || U),
//! Phat    = (1 - alpha) onehot(k) + alpha P_ls
//! ```
//!
//! Uniform smoothing makes the KL term vanish, a teacher distribution turns
//! it into distillation (up to a constant), and the closed-form optimum
//! gives the bi-level objective. Batch losses are arithmetic means.

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Result};
use crate::numerics::{entropy, kl_div, log_softmax, softmax, LogitVec, ProbVec};
use crate::smoothing::{mix_label, SmoothedLabel};

/// The two summands of the regularized objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub ce_term: f64,
    pub kl_term: f64,
    pub total: f64,
}

impl ObjectiveBreakdown {
    fn new(ce_term: f64, kl_term: f64) -> Self {
        Self {
            ce_term,
            kl_term,
            total: ce_term + kl_term,
        }
    }
}

/// Cross entropy of the logits against a (possibly soft) label.
pub fn smoothed_ce(label: &SmoothedLabel, z: &LogitVec) -> Result<f64> {
    check_dims(label.dist.len(), z.len())?;
    let log_p = log_softmax(z);
    Ok(-label
        .dist
        .as_slice()
        .iter()
        .zip(&log_p)
        .map(|(t, l)| t * l)
        .sum::<f64>())
}

pub fn unified_objective(
    k: usize,
    z: &LogitVec,
    p_ls: &ProbVec,
    alpha: f64,
    beta: f64,
) -> Result<ObjectiveBreakdown> {
    check_dims(z.len(), p_ls.len())?;
    let label = mix_label(k, p_ls, alpha)?;
    let ce = smoothed_ce(&label, z)?;
    let kl = beta * kl_div(p_ls, &ProbVec::uniform(p_ls.len())?)?;
    Ok(ObjectiveBreakdown::new(ce, kl))
}

/// The same objective written as one sum over classes,
/// `sum_j [ -Phat_j log p_j + beta P_j log(K P_j) ]`.
///
/// Evaluated term by term so it can be compared with [`unified_objective`].
pub fn reduced_objective(
    k: usize,
    z: &LogitVec,
    p_ls: &ProbVec,
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    check_dims(z.len(), p_ls.len())?;
    let classes = z.len() as f64;
    let log_p = log_softmax(z);
    let label = mix_label(k, p_ls, alpha)?;
    Ok(label
        .dist
        .as_slice()
        .iter()
        .zip(p_ls.as_slice())
        .zip(&log_p)
        .map(|((&hat, &q), &lp)| {
            let kl = if q > 0.0 {
                beta * q * (classes * q).ln()
            } else {
                0.0
            };
            -hat * lp + kl
        })
        .sum())
}

/// Gradient of the objective with respect to the smoothing distribution,
/// treated as an unconstrained vector: `-alpha log p_j + beta (log P_j + 1 + log K)`.
pub fn grad_wrt_smoothing(z: &LogitVec, p_ls: &ProbVec, alpha: f64, beta: f64) -> Result<Vec<f64>> {
    check_dims(z.len(), p_ls.len())?;
    let log_k = (z.len() as f64).ln();
    Ok(log_softmax(z)
        .iter()
        .zip(p_ls.as_slice())
        .map(|(lp, q)| -alpha * lp + beta * (q.ln() + 1.0 + log_k))
        .collect())
}

/// Euclidean norm of `v` after projecting out the all-ones direction
/// (the tangent space of the simplex).
pub fn tangent_projection_norm(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>().sqrt()
}

/// Confidence penalty: cross entropy minus `beta_cp` times the output entropy.
pub fn cp_loss(k: usize, z: &LogitVec, beta_cp: f64) -> Result<f64> {
    check_class(k, z.len())?;
    let log_p = log_softmax(z);
    Ok(-log_p[k] - beta_cp * entropy(&softmax(z)))
}

/// Analytic gradient of [`cp_loss`]: `p - onehot(k) + beta_cp * p_j (log p_j + H(p))`.
pub fn cp_grad_wrt_logits(k: usize, z: &LogitVec, beta_cp: f64) -> Result<Vec<f64>> {
    check_class(k, z.len())?;
    let log_p = log_softmax(z);
    let p = softmax(z);
    let h = entropy(&p);
    Ok(p.as_slice()
        .iter()
        .zip(&log_p)
        .enumerate()
        .map(|(j, (&pj, &lp))| {
            let hit = if j == k { 1.0 } else { 0.0 };
            pj - hit + beta_cp * pj * (lp + h)
        })
        .collect())
}

/// Distillation loss at temperature 1:
/// `(1 - alpha) CE(onehot(k), p) + alpha KL(P_T || p)`.
pub fn kd_loss(k: usize, z: &LogitVec, teacher_p: &ProbVec, alpha: f64) -> Result<f64> {
    check_dims(z.len(), teacher_p.len())?;
    check_class(k, z.len())?;
    let log_p = log_softmax(z);
    let ce = -log_p[k];
    let kl = if alpha == 0.0 {
        0.0
    } else {
        kl_div(teacher_p, &softmax(z))?
    };
    Ok((1.0 - alpha) * ce + alpha * kl)
}

/// Distance between the distillation loss and its rewrite as a smoothed
/// cross entropy plus `alpha * KL(P_T || U) - alpha * log K`.
pub fn kd_decomposition_residual(
    k: usize,
    z: &LogitVec,
    teacher_p: &ProbVec,
    alpha: f64,
) -> Result<f64> {
    let direct = kd_loss(k, z, teacher_p, alpha)?;
    let label = mix_label(k, teacher_p, alpha)?;
    let classes = z.len() as f64;
    let rewritten = smoothed_ce(&label, z)?
        + alpha * kl_div(teacher_p, &ProbVec::uniform(z.len())?)?
        - alpha * classes.ln();
    Ok((direct - rewritten).abs())
}

/// `softmax(z) - label`: the gradient of [`smoothed_ce`] with the label held
/// constant. With the optimal smoothing detached this is also the complete
/// training gradient of the regularized objective, since its derivative
/// through the inner solution vanishes.
pub fn grad_wrt_logits(label: &SmoothedLabel, z: &LogitVec) -> Result<Vec<f64>> {
    check_dims(label.dist.len(), z.len())?;
    Ok(softmax(z)
        .as_slice()
        .iter()
        .zip(label.dist.as_slice())
        .map(|(p, t)| p - t)
        .collect())
}

fn check_class(k: usize, classes: usize) -> Result<()> {
    if k < classes {
        Ok(())
    } else {
        Err(crate::error::Error::invalid(format!(
            "class {k} out of range for {classes} classes"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smoothing::{labo_from_logits, labo_optimal_smoothing, uniform_smooth};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn z(v: &[f64]) -> LogitVec {
        LogitVec::new(v.to_vec()).unwrap()
    }

    fn p(v: &[f64]) -> ProbVec {
        ProbVec::new(v.to_vec()).unwrap()
    }

    fn random_logits(rng: &mut ChaCha8Rng, k: usize) -> LogitVec {
        LogitVec::new((0..k).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap()
    }

    fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> ProbVec {
        let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s: f64 = w.iter().sum();
        ProbVec::new(w.iter().map(|v| v / s).collect()).unwrap()
    }

    /// Central differences of `f` around `x`.
    fn numeric_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut up = x.to_vec();
                let mut down = x.to_vec();
                up[i] += h;
                down[i] -= h;
                (f(&up) - f(&down)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let den = a
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }

    #[test]
    fn smoothed_ce_examples() {
        let logits = z(&[2.0, 1.0, 0.0]);
        let log_p = log_softmax(&logits);
        for (k, lp) in log_p.iter().enumerate() {
            let onehot = uniform_smooth(k, 3, 0.0).unwrap();
            assert!((smoothed_ce(&onehot, &logits).unwrap() + lp).abs() < 1e-15);
        }
        let flat = z(&[0.7; 5]);
        let label = mix_label(2, &p(&[0.1, 0.2, 0.3, 0.25, 0.15]), 0.6).unwrap();
        assert!((smoothed_ce(&label, &flat).unwrap() - 5f64.ln()).abs() < 1e-14);
        let ls = uniform_smooth(0, 3, 0.1).unwrap();
        assert!((smoothed_ce(&ls, &logits).unwrap() - 0.507_605_964_444_380_3).abs() < 1e-12);
        assert!(smoothed_ce(&ls, &z(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn unified_objective_examples() {
        let logits = z(&[2.0, 1.0, 0.0]);
        let u = ProbVec::uniform(3).unwrap();
        let b = unified_objective(1, &logits, &u, 0.1, 3.0).unwrap();
        assert_eq!(b.kl_term, 0.0);
        assert_eq!(
            b.total,
            smoothed_ce(&uniform_smooth(1, 3, 0.1).unwrap(), &logits).unwrap()
        );

        let q = p(&[0.6, 0.3, 0.1]);
        let b = unified_objective(0, &logits, &q, 0.3, 0.0).unwrap();
        assert_eq!(b.total, b.ce_term);

        let star = labo_from_logits(&logits, 2.0).unwrap();
        let b = unified_objective(0, &logits, &star, 0.4, 0.8).unwrap();
        let reduced = reduced_objective(0, &logits, &star, 0.4, 0.8).unwrap();
        assert!((b.total - reduced).abs() <= 1e-12);
        // 40-digit reference.
        assert!((b.ce_term - 0.679_543_297_312_457_7).abs() < 1e-12);
        assert!((b.total - 0.742_280_058_865_480_4).abs() < 1e-12);
    }

    #[test]
    fn direct_and_reduced_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let k_classes = rng.random_range(2..12);
            let logits = random_logits(&mut rng, k_classes);
            let k = rng.random_range(0..k_classes);
            let tau = rng.random_range(1.0..10.0);
            let alpha = rng.random_range(0.0..=1.0);
            let star = labo_from_logits(&logits, tau).unwrap();
            let b = unified_objective(k, &logits, &star, alpha, alpha * tau).unwrap();
            assert!((b.total - (b.ce_term + b.kl_term)).abs() <= 1e-12);
            assert!(b.kl_term >= 0.0);
            let r = reduced_objective(k, &logits, &star, alpha, alpha * tau).unwrap();
            assert!((b.total - r).abs() <= 1e-10);
        }
    }

    #[test]
    fn cp_examples() {
        let logits = z(&[2.0, 1.0, 0.0]);
        let ce = -log_softmax(&logits)[0];
        assert_eq!(cp_loss(0, &logits, 0.0).unwrap(), ce);
        let flat = z(&[1.0; 4]);
        let want = 4f64.ln() - 0.3 * 4f64.ln();
        assert!((cp_loss(2, &flat, 0.3).unwrap() - want).abs() < 1e-14);
        assert!((cp_loss(0, &logits, 0.1).unwrap() - 0.324_366_406_260_386_4).abs() < 1e-12);
    }

    #[test]
    fn cp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let kc = rng.random_range(2..8);
            let logits = random_logits(&mut rng, kc);
            let k = rng.random_range(0..kc);
            let beta = rng.random_range(0.0..1.0);
            let analytic = cp_grad_wrt_logits(k, &logits, beta).unwrap();
            let numeric = numeric_grad(logits.as_slice(), 1e-5, |v| {
                cp_loss(k, &LogitVec::new(v.to_vec()).unwrap(), beta).unwrap()
            });
            assert!(
                rel_l2(&analytic, &numeric) <= 1e-6,
                "{analytic:?} vs {numeric:?}"
            );
        }
    }

    #[test]
    fn kd_examples() {
        let logits = z(&[0.3, -1.0, 2.0]);
        let teacher = p(&[0.2, 0.1, 0.7]);
        let ce = -log_softmax(&logits)[2];
        assert_eq!(kd_loss(2, &logits, &teacher, 0.0).unwrap(), ce);
        let own = softmax(&logits);
        assert!((kd_loss(2, &logits, &own, 0.4).unwrap() - 0.6 * ce).abs() < 1e-15);
        assert_eq!(
            kd_decomposition_residual(1, &logits, &teacher, 0.0).unwrap(),
            0.0
        );
        let u = ProbVec::uniform(3).unwrap();
        assert!(kd_decomposition_residual(0, &logits, &u, 0.7).unwrap() <= 1e-12);
        let ls = smoothed_ce(&uniform_smooth(0, 3, 0.7).unwrap(), &logits).unwrap();
        assert!((kd_loss(0, &logits, &u, 0.7).unwrap() + 0.7 * 3f64.ln() - ls).abs() < 1e-12);
    }

    #[test]
    fn kd_decomposition_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let kc = rng.random_range(2..20);
            let logits = random_logits(&mut rng, kc);
            let teacher = random_simplex(&mut rng, kc);
            let k = rng.random_range(0..kc);
            let alpha = rng.random_range(0.0..=1.0);
            assert!(kd_decomposition_residual(k, &logits, &teacher, alpha).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn logit_gradient_basics() {
        let logits = z(&[0.5, -0.2, 1.3, 0.0]);
        let own = mix_label(1, &softmax(&logits), 1.0).unwrap();
        let g = grad_wrt_logits(&own, &logits).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let kc = rng.random_range(2..10);
            let logits = random_logits(&mut rng, kc);
            let label = mix_label(
                rng.random_range(0..kc),
                &random_simplex(&mut rng, kc),
                rng.random(),
            )
            .unwrap();
            let g = grad_wrt_logits(&label, &logits).unwrap();
            assert!(g.iter().sum::<f64>().abs() < 1e-14);
            let numeric = numeric_grad(logits.as_slice(), 1e-5, |v| {
                smoothed_ce(&label, &LogitVec::new(v.to_vec()).unwrap()).unwrap()
            });
            assert!(rel_l2(&g, &numeric) <= 1e-6);
        }
    }

    #[test]
    fn detached_gradient_matches_full_objective() {
        // Perturbing the logits re-solves the smoothing; the derivative
        // through the inner optimum vanishes so the detached gradient wins.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let kc = rng.random_range(2..10);
            let logits = random_logits(&mut rng, kc);
            let k = rng.random_range(0..kc);
            let alpha = rng.random_range(0.05..=1.0);
            let tau = rng.random_range(1.0..5.0);
            let beta = alpha * tau;
            let star = labo_from_logits(&logits, tau).unwrap();
            let label = mix_label(k, &star, alpha).unwrap();
            let g = grad_wrt_logits(&label, &logits).unwrap();
            let numeric = numeric_grad(logits.as_slice(), 1e-5, |v| {
                let zz = LogitVec::new(v.to_vec()).unwrap();
                let s = labo_optimal_smoothing(&softmax(&zz), tau).unwrap();
                unified_objective(k, &zz, &s, alpha, beta).unwrap().total
            });
            assert!(rel_l2(&g, &numeric) <= 1e-4);
            let inner = grad_wrt_smoothing(&logits, &star, alpha, beta).unwrap();
            assert!(tangent_projection_norm(&inner) <= 1e-8);
        }
    }

    #[test]
    fn inner_gradient_off_optimum_is_not_flat() {
        let logits = z(&[2.0, 1.0, 0.0]);
        let u = ProbVec::uniform(3).unwrap();
        let g = grad_wrt_smoothing(&logits, &u, 0.5, 1.0).unwrap();
        assert!(tangent_projection_norm(&g) > 0.1);
    }
}
