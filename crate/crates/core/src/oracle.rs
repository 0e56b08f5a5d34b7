//! Independent numerical checks of the inner smoothing problem.
//!
//! For fixed model probabilities `p` the inner problem is
//!
//! ```text
//! min_{P in simplex}  -alpha * sum_j P_j log p_j  +  beta * KL(P || U)
//! ```
//!
//! (the one-hot part of the smoothed label does not depend on `P`). The
//! solver here minimizes it by exponentiated gradient, which never consults
//! the closed-form answer, so agreement between the two is real evidence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{linf, log_normalize, ProbVec};
use crate::smoothing::labo_optimal_smoothing;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplexSolverReport {
    pub argmin: ProbVec,
    pub objective_at_argmin: f64,
    pub iterations: usize,
    pub converged: bool,
    /// L-infinity size of the last mirror step; `<= tol` whenever `converged`.
    pub last_step: f64,
    /// Smallest coordinate of any iterate.
    pub min_entry_seen: f64,
}

/// The inner objective for one instance.
#[derive(Clone, Debug)]
pub struct InnerProblem {
    log_p: Vec<f64>,
    alpha: f64,
    beta: f64,
}

impl InnerProblem {
    pub fn new(p: &ProbVec, alpha: f64, beta: f64) -> Result<Self> {
        if let Some(j) = p.as_slice().iter().position(|&v| v <= 0.0) {
            return Err(Error::domain(format!(
                "inner problem needs strictly positive p, p[{j}] = 0"
            )));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be > 0, got {beta}")));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!(
                "alpha must lie in [0, 1], got {alpha}"
            )));
        }
        Ok(Self {
            log_p: p.as_slice().iter().map(|v| v.ln()).collect(),
            alpha,
            beta,
        })
    }

    pub fn classes(&self) -> usize {
        self.log_p.len()
    }

    pub fn objective(&self, smoothing: &[f64]) -> f64 {
        let k = self.classes() as f64;
        smoothing
            .iter()
            .zip(&self.log_p)
            .map(|(&q, &lp)| {
                let kl = if q > 0.0 { q * (k * q).ln() } else { 0.0 };
                -self.alpha * q * lp + self.beta * kl
            })
            .sum()
    }

    /// Gradient at a point given by its log-coordinates.
    fn gradient_from_log(&self, log_q: &[f64]) -> Vec<f64> {
        let log_k = (self.classes() as f64).ln();
        log_q
            .iter()
            .zip(&self.log_p)
            .map(|(lq, lp)| -self.alpha * lp + self.beta * (lq + 1.0 + log_k))
            .collect()
    }

    /// Exponentiated-gradient descent from `start` with step `0.1 / beta`.
    ///
    /// Iterates are kept as normalized log-weights, so every coordinate stays
    /// strictly positive and no projection is needed.
    pub fn solve_from(
        &self,
        start: &ProbVec,
        tol: f64,
        max_iter: usize,
    ) -> Result<SimplexSolverReport> {
        if start.len() != self.classes() {
            return Err(Error::DimensionMismatch {
                expected: self.classes(),
                got: start.len(),
            });
        }
        if start.as_slice().iter().any(|&v| v <= 0.0) {
            return Err(Error::domain(
                "solver start must lie in the simplex interior",
            ));
        }
        if tol.is_nan() || tol <= 0.0 {
            return Err(Error::invalid(format!("tolerance must be > 0, got {tol}")));
        }
        let step = 0.1 / self.beta;
        let mut log_q: Vec<f64> = start.as_slice().iter().map(|v| v.ln()).collect();
        let mut q: Vec<f64> = start.as_slice().to_vec();
        let mut min_entry_seen = q.iter().copied().fold(f64::INFINITY, f64::min);
        let mut last_step = f64::INFINITY;
        let mut iterations = 0;
        let mut converged = false;

        while iterations < max_iter {
            let grad = self.gradient_from_log(&log_q);
            let moved: Vec<f64> = log_q.iter().zip(&grad).map(|(l, g)| l - step * g).collect();
            log_q = log_normalize(&moved);
            let next: Vec<f64> = log_q.iter().map(|l| l.exp()).collect();
            last_step = linf(&next, &q);
            min_entry_seen = next.iter().copied().fold(min_entry_seen, f64::min);
            q = next;
            iterations += 1;
            if last_step <= tol {
                converged = true;
                break;
            }
        }

        let objective_at_argmin = self.objective(&q);
        // Renormalize by the sum so the report holds an exact simplex point.
        let sum: f64 = q.iter().sum();
        let argmin = ProbVec::new(q.into_iter().map(|v| v / sum).collect())?;
        Ok(SimplexSolverReport {
            argmin,
            objective_at_argmin,
            iterations,
            converged,
            last_step,
            min_entry_seen,
        })
    }
}

/// Minimizes the inner problem numerically, starting from the uniform point.
pub fn solve_inner_numeric(
    p: &ProbVec,
    alpha: f64,
    beta: f64,
    tol: f64,
    max_iter: usize,
) -> Result<SimplexSolverReport> {
    let problem = InnerProblem::new(p, alpha, beta)?;
    problem.solve_from(&ProbVec::uniform(p.len())?, tol, max_iter)
}

/// Outcome of comparing a closed-form candidate against the solver.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosedFormCheck {
    /// L-infinity distance between the candidate and the solver's argmin.
    pub distance: f64,
    pub candidate_objective: f64,
    pub solver_objective: f64,
    pub solver_iterations: usize,
}

impl ClosedFormCheck {
    /// How much worse the candidate scores than the solver (negative when better).
    pub fn objective_gap(&self) -> f64 {
        self.candidate_objective - self.solver_objective
    }
}

/// Compares any closed-form candidate `(p, tau) -> P` against the solver.
pub fn check_closed_form<F>(
    candidate: F,
    p: &ProbVec,
    alpha: f64,
    beta: f64,
    tol: f64,
) -> Result<ClosedFormCheck>
where
    F: Fn(&ProbVec, f64) -> Result<ProbVec>,
{
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(Error::invalid("alpha must be > 0 for tau = beta / alpha"));
    }
    let problem = InnerProblem::new(p, alpha, beta)?;
    let report = problem.solve_from(&ProbVec::uniform(p.len())?, tol, DEFAULT_MAX_ITER)?;
    if !report.converged {
        return Err(Error::NotConverged {
            iterations: report.iterations,
            last_step: report.last_step,
        });
    }
    let closed = candidate(p, beta / alpha)?;
    Ok(ClosedFormCheck {
        distance: closed.linf_distance(&report.argmin),
        candidate_objective: problem.objective(closed.as_slice()),
        solver_objective: report.objective_at_argmin,
        solver_iterations: report.iterations,
    })
}

/// Checks the closed-form optimum against the solver. Fails if the solver
/// does not converge or if the closed form scores worse than the solver by
/// more than `tol`.
pub fn verify_theorem1(p: &ProbVec, alpha: f64, beta: f64, tol: f64) -> Result<f64> {
    let check = check_closed_form(labo_optimal_smoothing, p, alpha, beta, tol)?;
    if check.objective_gap() > tol {
        return Err(Error::domain(format!(
            "closed form objective {} exceeds solver objective {} by more than {tol}",
            check.candidate_objective, check.solver_objective
        )));
    }
    Ok(check.distance)
}

/// Numerical Hessian of the inner objective against `diag(beta / P_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianCheck {
    pub numeric: Vec<Vec<f64>>,
    pub analytic_diagonal: Vec<f64>,
    pub max_diagonal_error: f64,
    pub max_off_diagonal: f64,
    pub min_diagonal: f64,
}

impl HessianCheck {
    /// L-infinity distance of the whole numerical matrix to the analytic diagonal.
    pub fn distance(&self) -> f64 {
        self.max_diagonal_error.max(self.max_off_diagonal)
    }
}

/// Relative step for the second differences, scaled per coordinate.
const HESSIAN_REL_STEP: f64 = 5e-4;

/// Central second differences of the inner objective with respect to the
/// smoothing coordinates (treated as free variables), using the smoothing
/// itself as the model distribution for the linear part.
pub fn hessian_check(p_ls: &ProbVec, beta: f64) -> Result<HessianCheck> {
    let problem = InnerProblem::new(p_ls, 1.0, beta)?;
    let x = p_ls.as_slice();
    let k = x.len();
    let h: Vec<f64> = x.iter().map(|v| HESSIAN_REL_STEP * v).collect();
    let eval = |shifts: &[(usize, f64)]| {
        let mut y = x.to_vec();
        for &(i, d) in shifts {
            y[i] += d;
        }
        problem.objective(&y)
    };
    let f0 = problem.objective(x);
    let mut numeric = vec![vec![0.0; k]; k];
    for i in 0..k {
        numeric[i][i] = (eval(&[(i, h[i])]) - 2.0 * f0 + eval(&[(i, -h[i])])) / (h[i] * h[i]);
        for j in (i + 1)..k {
            let v = (eval(&[(i, h[i]), (j, h[j])])
                - eval(&[(i, h[i]), (j, -h[j])])
                - eval(&[(i, -h[i]), (j, h[j])])
                + eval(&[(i, -h[i]), (j, -h[j])]))
                / (4.0 * h[i] * h[j]);
            numeric[i][j] = v;
            numeric[j][i] = v;
        }
    }
    let analytic_diagonal: Vec<f64> = x.iter().map(|v| beta / v).collect();
    let mut max_diagonal_error: f64 = 0.0;
    let mut max_off_diagonal: f64 = 0.0;
    let mut min_diagonal = f64::INFINITY;
    for i in 0..k {
        for j in 0..k {
            if i == j {
                max_diagonal_error =
                    max_diagonal_error.max((numeric[i][i] - analytic_diagonal[i]).abs());
                min_diagonal = min_diagonal.min(numeric[i][i]);
            } else {
                max_off_diagonal = max_off_diagonal.max(numeric[i][j].abs());
            }
        }
    }
    Ok(HessianCheck {
        numeric,
        analytic_diagonal,
        max_diagonal_error,
        max_off_diagonal,
        min_diagonal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p(v: &[f64]) -> ProbVec {
        ProbVec::new(v.to_vec()).unwrap()
    }

    #[test]
    fn large_beta_goes_uniform() {
        let r = solve_inner_numeric(
            &p(&[0.7, 0.2, 0.1]),
            1.0,
            1e6,
            DEFAULT_TOL,
            DEFAULT_MAX_ITER,
        )
        .unwrap();
        assert!(r.converged);
        assert!(r.argmin.linf_distance(&ProbVec::uniform(3).unwrap()) <= 1e-5);
    }

    #[test]
    fn equal_weights_return_p() {
        let q = p(&[0.5, 0.3, 0.15, 0.05]);
        let r = solve_inner_numeric(&q, 0.7, 0.7, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(r.converged);
        assert!(r.argmin.linf_distance(&q) <= 1e-9);
    }

    #[test]
    fn solver_matches_hand_computed_optimum() {
        let r = solve_inner_numeric(
            &p(&[0.7, 0.2, 0.1]),
            1.0,
            2.0,
            DEFAULT_TOL,
            DEFAULT_MAX_ITER,
        )
        .unwrap();
        assert!(r.converged);
        // sqrt-normalize at 40 digits.
        let want = [
            0.522_879_383_007_869_7,
            0.279_490_786_546_170_94,
            0.197_629_830_445_959_36,
        ];
        assert!(linf(r.argmin.as_slice(), &want) <= 1e-6);
    }

    #[test]
    fn two_class_example_is_exact() {
        let q = p(&[0.9, 0.1]);
        let r = solve_inner_numeric(&q, 1.0, 2.0, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(linf(r.argmin.as_slice(), &[0.75, 0.25]) <= 1e-8);
        let closed = labo_optimal_smoothing(&q, 2.0).unwrap();
        assert!(linf(closed.as_slice(), &[0.75, 0.25]) <= 1e-15);
        assert!(verify_theorem1(&q, 1.0, 2.0, DEFAULT_TOL).unwrap() <= 1e-8);
    }

    #[test]
    fn unit_ratio_is_tight() {
        let q = p(&[0.4, 0.35, 0.25]);
        assert!(verify_theorem1(&q, 0.5, 0.5, 1e-14).unwrap() <= 1e-12);
    }

    #[test]
    fn non_convergence_is_reported() {
        let r = solve_inner_numeric(&p(&[0.7, 0.2, 0.1]), 1.0, 2.0, DEFAULT_TOL, 3).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 3);
        assert!(r.last_step > DEFAULT_TOL);
    }

    #[test]
    fn invalid_inputs() {
        let q = p(&[1.0, 0.0]);
        assert!(matches!(
            solve_inner_numeric(&q, 1.0, 1.0, DEFAULT_TOL, 10),
            Err(Error::Domain(_))
        ));
        let q = p(&[0.5, 0.5]);
        assert!(solve_inner_numeric(&q, 1.0, 0.0, DEFAULT_TOL, 10).is_err());
        assert!(solve_inner_numeric(&q, 1.0, 1.0, 0.0, 10).is_err());
    }

    #[test]
    fn iterates_stay_interior_and_start_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let k = rng.random_range(2..20);
            let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = w.iter().sum();
            let q = p(&w.iter().map(|v| v / s).collect::<Vec<_>>());
            let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = w.iter().sum();
            let start = p(&w.iter().map(|v| v / s).collect::<Vec<_>>());
            let beta = rng.random_range(1.05..20.0);
            let problem = InnerProblem::new(&q, 1.0, beta).unwrap();
            let a = problem
                .solve_from(&ProbVec::uniform(k).unwrap(), DEFAULT_TOL, DEFAULT_MAX_ITER)
                .unwrap();
            let b = problem
                .solve_from(&start, DEFAULT_TOL, DEFAULT_MAX_ITER)
                .unwrap();
            assert!(a.converged && b.converged);
            assert!(a.min_entry_seen > 0.0 && b.min_entry_seen > 0.0);
            // Contraction is about 0.9 per step, so a 1e-10 last step leaves ~1e-9.
            let d = a.argmin.linf_distance(&b.argmin);
            assert!(
                d <= 1e-8,
                "beta {beta} k {k} d {d:e} iters {} {}",
                a.iterations,
                b.iterations
            );
        }
    }

    #[test]
    fn hessian_examples() {
        let u = ProbVec::uniform(4).unwrap();
        let h = hessian_check(&u, 1.0).unwrap();
        assert_eq!(h.analytic_diagonal, vec![4.0; 4]);
        assert!(h.distance() <= 1e-4);

        let h = hessian_check(&p(&[0.5, 0.3, 0.2]), 2.0).unwrap();
        assert!(linf(&h.analytic_diagonal, &[4.0, 2.0 / 0.3, 10.0]) < 1e-12);
        assert!(h.max_diagonal_error <= 1e-4);
        assert!(h.max_off_diagonal <= 1e-4);
        assert!(h.min_diagonal > 0.0);
    }
}
