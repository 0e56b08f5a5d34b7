//! The property suite run by `labo verify`.
//!
//! Each check draws its instances from a fixed seed, so the suite is
//! deterministic. A [`Mutation`] swaps the closed-form smoothing for a broken
//! variant; the suite must then fail, which shows the checks have teeth.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::data::gaussian_blobs;
use crate::error::Result;
use crate::model::MlpModel;
use crate::numerics::{softmax, LogitVec, ProbVec};
use crate::objectives::{
    cp_grad_wrt_logits, cp_loss, grad_wrt_logits, grad_wrt_smoothing, kd_decomposition_residual,
    reduced_objective, smoothed_ce, tangent_projection_norm, unified_objective,
};
use crate::oracle::{check_closed_form, hessian_check, DEFAULT_TOL};
use crate::smoothing::{labo_from_logits, labo_optimal_smoothing, mix_label, power_smoothing};
use crate::train::{Mode, RegularizerParams, TrainConfig, Trainer};

pub const CLOSED_FORM_DISTANCE_TOL: f64 = 1e-6;
pub const CLOSED_FORM_OBJECTIVE_SLACK: f64 = 1e-9;
pub const IDENTITY_TOL: f64 = 1e-12;
pub const KD_RESIDUAL_TOL: f64 = 1e-10;
pub const REDUCED_FORM_TOL: f64 = 1e-10;
pub const LARGE_TAU_TOL: f64 = 1e-5;
pub const HYPERGRADIENT_REL_TOL: f64 = 1e-4;
pub const TANGENT_TOL: f64 = 1e-8;
pub const HESSIAN_TOL: f64 = 1e-4;
pub const PARAM_GRAD_REL_TOL: f64 = 1e-5;
pub const CP_GRAD_REL_TOL: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for per-parameter relative errors, so parameters with
/// vanishing gradients are judged on absolute error `<= tol * floor`.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

const CLOSED_FORM_CLASSES: [usize; 4] = [2, 3, 10, 50];
const DIRICHLET_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    /// Uses `p^tau` instead of `p^(1/tau)` for the closed form.
    ExponentInversion,
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    pub quick: bool,
    pub seed: u64,
    pub mutation: Option<Mutation>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            quick: false,
            seed: 20_230_601,
            mutation: None,
        }
    }
}

impl VerifyOptions {
    fn sweep(&self) -> usize {
        if self.quick {
            100
        } else {
            1000
        }
    }

    fn closed_form(&self, p: &ProbVec, tau: f64) -> Result<ProbVec> {
        match self.mutation {
            None => labo_optimal_smoothing(p, tau),
            Some(Mutation::ExponentInversion) => power_smoothing(p, tau),
        }
    }

    fn rng(&self, salt: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(salt);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
    pub tolerance: f64,
    pub instances: usize,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<6} {:<26} worst {:>10.3e}  tol {:>8.1e}  n={:<5} {:>6.2}s  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tolerance,
            self.instances,
            self.seconds,
            self.detail
        )
    }
}

/// Largest-magnitude tracker that treats NaN as a failure.
#[derive(Default)]
struct Worst {
    value: f64,
    bad: bool,
}

impl Worst {
    fn see(&mut self, v: f64) {
        if v.is_nan() {
            self.bad = true;
        } else {
            self.value = self.value.max(v);
        }
    }

    fn within(&self, tol: f64) -> bool {
        !self.bad && self.value <= tol
    }
}

fn finish(
    name: &'static str,
    worst: Worst,
    tol: f64,
    instances: usize,
    detail: String,
    start: Instant,
) -> CheckResult {
    CheckResult {
        name,
        passed: worst.within(tol),
        worst: worst.value,
        tolerance: tol,
        instances,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn failed(name: &'static str, err: crate::Error, start: Instant) -> CheckResult {
    CheckResult {
        name,
        passed: false,
        worst: f64::NAN,
        tolerance: f64::NAN,
        instances: 0,
        detail: format!("error: {err}"),
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Dirichlet(1) sample conditioned on every coordinate being at least `floor`.
pub fn dirichlet_interior(rng: &mut impl Rng, classes: usize, floor: f64) -> ProbVec {
    loop {
        let w: Vec<f64> = (0..classes).map(|_| Exp1.sample(rng)).collect();
        let s: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|v| v / s).collect();
        if p.iter().all(|&v| v >= floor) {
            return ProbVec::new(p).expect("normalized Dirichlet draw");
        }
    }
}

pub fn random_logits(rng: &mut impl Rng, classes: usize, scale: f64) -> LogitVec {
    LogitVec::new(
        (0..classes)
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    )
    .expect("finite logits")
}

fn closed_form_oracle(opts: &VerifyOptions) -> CheckResult {
    let start = Instant::now();
    let mut rng = opts.rng(1);
    let n = opts.sweep();
    let mut distance = Worst::default();
    let mut gap = Worst::default();
    let mut iters = 0usize;
    for i in 0..n {
        let classes = CLOSED_FORM_CLASSES[i % CLOSED_FORM_CLASSES.len()];
        let p = dirichlet_interior(&mut rng, classes, DIRICHLET_FLOOR);
        let tau = rng.random_range(1.05..=20.0);
        let alpha = rng.random_range(0.1..=1.0);
        match check_closed_form(
            |p, t| opts.closed_form(p, t),
            &p,
            alpha,
            alpha * tau,
            DEFAULT_TOL,
        ) {
            Ok(c) => {
                distance.see(c.distance);
                gap.see(c.objective_gap());
                iters = iters.max(c.solver_iterations);
            }
            Err(e) => return failed("closed_form_oracle", e, start),
        }
    }
    let gap_ok = gap.within(CLOSED_FORM_OBJECTIVE_SLACK);
    let mut r = finish(
        "closed_form_oracle",
        distance,
        CLOSED_FORM_DISTANCE_TOL,
        n,
        format!("objective gap {:.2e} (slack {CLOSED_FORM_OBJECTIVE_SLACK:.0e}), max solver iters {iters}", gap.value),
        start,
    );
    r.passed &= gap_ok;
    r
}

fn limits(opts: &VerifyOptions) -> CheckResult {
    let start = Instant::now();
    let mut rng = opts.rng(2);
    let n = opts.sweep();
    let mut unit = Worst::default();
    let mut flat = Worst::default();
    for i in 0..n {
        let classes = 2 + i % 20;
        let p = dirichlet_interior(&mut rng, classes, DIRICHLET_FLOOR);
        match (opts.closed_form(&p, 1.0), opts.closed_form(&p, 1e6)) {
            (Ok(a), Ok(b)) => {
                unit.see(a.linf_distance(&p));
                flat.see(b.linf_distance(&ProbVec::uniform(classes).expect("K >= 2")));
            }
            (Err(e), _) | (_, Err(e)) => return failed("closed_form_limits", e, start),
        }
    }
    let flat_ok = flat.within(LARGE_TAU_TOL);
    let mut r = finish(
        "closed_form_limits",
        unit,
        IDENTITY_TOL,
        n,
        format!(
            "tau=1 vs p; tau=1e6 vs uniform {:.2e} (tol {LARGE_TAU_TOL:.0e})",
            flat.value
        ),
        start,
    );
    r.passed &= flat_ok;
    r
}

fn temperature_identity(opts: &VerifyOptions) -> CheckResult {
    let start = Instant::now();
    let mut rng = opts.rng(3);
    let n = opts.sweep();
    let mut worst = Worst::default();
    for i in 0..n {
        let classes = rng.random_range(2..=50);
        let z = random_logits(&mut rng, classes, 8.0);
        let tau = match i % 3 {
            0 => 1.15,
            1 => 1.25,
            _ => rng.random_range(1.0..=10.0),
        };
        let a = labo_from_logits(&z, tau);
        let b = opts.closed_form(&softmax(&z), tau);
        match (a, b) {
            (Ok(a), Ok(b)) => worst.see(a.linf_distance(&b)),
            (Err(e), _) | (_, Err(e)) => return failed("temperature_identity", e, start),
        }
    }
    finish(
        "temperature_identity",
        worst,
        IDENTITY_TOL,
        n,
        "tempered softmax vs closed form".into(),
        start,
    )
}

fn kd_decomposition(opts: &VerifyOptions) -> CheckResult {
    let start = Instant::now();
    let mut rng = opts.rng(4);
    let n = opts.sweep();
    let mut worst = Worst::default();
    for _ in 0..n {
        let classes = rng.random_range(2..=50);
        let z = random_logits(&mut rng, classes, 6.0);
        let teacher = dirichlet_interior(&mut rng, classes, 1e-8);
        let k = rng.random_range(0..classes);
        let alpha = rng.random_range(0.0..=1.0);
        match kd_decomposition_residual(k, &z, &teacher, alpha) {
            Ok(r) => worst.see(r),
            Err(e) => return failed("kd_decomposition", e, start),
        }
    }
    finish(
        "kd_decomposition",
        worst,
        KD_RESIDUAL_TOL,
        n,
        "constant -alpha log K".into(),
        start,
    )
}

fn reduced_form(opts: &VerifyOptions) -> CheckResult {
    let start = Instant::now();
    let mut rng = opts.rng(5);
    let n = opts.sweep();
    let mut worst = Worst::default();
    for _ in 0..n {
        let classes = rng.random_range(2..=20);
        let z = random_logits(&mut rng, classes, 5.0);
        let k = rng.random_range(0..classes);
        let tau = rng.random_range(1.0..=10.0);
        let alpha = rng.random_range(0.0..=1.0);
        let res = opts.closed_form(&softmax(&z), tau).and_then(|star| {
            let b = unified_objective(k, &z, &star, alpha, alpha * tau)?;
            let r = reduced_objective(k, &z, &star, alpha, alpha * tau)?;
            Ok((b.total - r)
                .abs()
                .max((b.total - b.ce_term - b.kl_term).abs()))
        });
        match res {
            Ok(v) => worst.see(v),
            Err(e) => return failed("reduced_objective", e, start),
        }
    }
    finish(
        "reduced_objective",
        worst,
        REDUCED_FORM_TOL,
        n,
        "direct vs per-class expansion".into(),
        start,
    )
}

pub fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Per-parameter relative error with [`REL_ERROR_FLOOR`] in the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// One instance of the hypergradient comparison.
pub struct HypergradientInstance {
    pub model: MlpModel,
    pub inputs: Vec<(Vec<f64>, usize)>,
    pub alpha: f64,
    pub tau: f64,
}

/// Returns `(relative L2 gradient error, worst tangent-projection norm)`.
///
/// The analytic side detaches the smoothing; the numeric side recomputes it
/// at every perturbed parameter vector and includes the KL term.
pub fn hypergradient_errors<F>(inst: &HypergradientInstance, closed_form: F) -> Result<(f64, f64)>
where
    F: Fn(&ProbVec, f64) -> Result<ProbVec>,
{
    let beta = inst.alpha * inst.tau;
    let n = inst.inputs.len() as f64;
    let model = &inst.model;
    let mut analytic = vec![0.0; model.parameter_count()];
    let mut tangent: f64 = 0.0;
    for (x, k) in &inst.inputs {
        let pass = model.forward(x)?;
        let star = closed_form(&softmax(&pass.logits), inst.tau)?;
        let label = mix_label(*k, &star, inst.alpha)?;
        let g = model
            .backward(&pass, &grad_wrt_logits(&label, &pass.logits)?)?
            .flatten();
        for (a, v) in analytic.iter_mut().zip(g) {
            *a += v / n;
        }
        let inner = grad_wrt_smoothing(&pass.logits, &star, inst.alpha, beta)?;
        tangent = tangent.max(tangent_projection_norm(&inner));
    }

    let full_objective = |m: &MlpModel| -> Result<f64> {
        let mut total = 0.0;
        for (x, k) in &inst.inputs {
            let z = m.logits(x)?;
            let star = closed_form(&softmax(&z), inst.tau)?;
            total += unified_objective(*k, &z, &star, inst.alpha, beta)?.total;
        }
        Ok(total / n)
    };
    let theta = model.flat_params();
    let mut probe = model.clone();
    let mut numeric = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let mut t = theta.clone();
        t[i] = theta[i] + FD_STEP;
        probe.set_flat_params(&t)?;
        let up = full_objective(&probe)?;
        t[i] = theta[i] - FD_STEP;
        probe.set_flat_params(&t)?;
        let down = full_objective(&probe)?;
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    Ok((relative_l2(&analytic, &numeric), tangent))
}

pub fn random_hypergradient_instance(
    rng: &mut impl Rng,
    sizes: &[usize],
    batch: usize,
) -> Result<HypergradientInstance> {
    let model = MlpModel::new(sizes, rng.random())?;
    let classes = *sizes.last().unwrap();
    let inputs = (0..batch)
        .map(|_| {
            let x: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
            (x, rng.random_range(0..classes))
        })
        .collect();
    Ok(HypergradientInstance {
        model,
        inputs,
        alpha: rng.random_range(0.1..=1.0),
        tau: rng.random_range(1.05..=5.0),
    })
}

fn hypergradient(opts: &VerifyOptions) -> CheckResult {
    let start = Instant::now();
    let mut rng = opts.rng(6);
    let n = 50;
    let mut grad = Worst::default();
    let mut tangent = Worst::default();
    for _ in 0..n {
        let res = random_hypergradient_instance(&mut rng, &[2, 8, 3], 4)
            .and_then(|inst| hypergradient_errors(&inst, |p, t| opts.closed_form(p, t)));
        match res {
            Ok((g, t)) => {
                grad.see(g);
                tangent.see(t);
            }
            Err(e) => return failed("zero_hypergradient", e, start),
        }
    }
    let tangent_ok = tangent.within(TANGENT_TOL);
    let mut r = finish(
        "zero_hypergradient",
        grad,
        HYPERGRADIENT_REL_TOL,
        n,
        format!(
            "tangent projection {:.2e} (tol {TANGENT_TOL:.0e})",
            tangent.value
        ),
        start,
    );
    r.passed &= tangent_ok;
    r
}

fn hessian(opts: &VerifyOptions) -> CheckResult {
    let start = Instant::now();
    let mut rng = opts.rng(7);
    let n = 100;
    let mut worst = Worst::default();
    let mut min_diag = f64::INFINITY;
    for _ in 0..n {
        let classes = rng.random_range(2..=10);
        let w: Vec<f64> = (0..classes).map(|_| rng.random_range(0.2..1.0)).collect();
        let s: f64 = w.iter().sum();
        let p = ProbVec::new(w.iter().map(|v| v / s).collect()).expect("normalized");
        let beta = rng.random_range(0.1..=5.0);
        match hessian_check(&p, beta) {
            Ok(h) => {
                worst.see(h.distance());
                min_diag = min_diag.min(h.min_diagonal);
            }
            Err(e) => return failed("hessian_structure", e, start),
        }
    }
    let mut r = finish(
        "hessian_structure",
        worst,
        HESSIAN_TOL,
        n,
        format!("min diagonal {min_diag:.3}"),
        start,
    );
    r.passed &= min_diag > 0.0;
    r
}

/// Worst per-parameter relative error between backprop and central
/// differences of the smoothed cross entropy.
pub fn model_gradient_error(
    model: &MlpModel,
    x: &[f64],
    label: &crate::SmoothedLabel,
) -> Result<f64> {
    let pass = model.forward(x)?;
    let analytic = model
        .backward(&pass, &grad_wrt_logits(label, &pass.logits)?)?
        .flatten();
    let theta = model.flat_params();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        let mut t = theta.clone();
        t[i] = theta[i] + FD_STEP;
        probe.set_flat_params(&t)?;
        let up = smoothed_ce(label, &probe.logits(x)?)?;
        t[i] = theta[i] - FD_STEP;
        probe.set_flat_params(&t)?;
        let down = smoothed_ce(label, &probe.logits(x)?)?;
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    Ok(worst)
}

fn model_gradients(opts: &VerifyOptions) -> CheckResult {
    let start = Instant::now();
    let mut rng = opts.rng(8);
    let archs: [&[usize]; 3] = [&[2, 8, 3], &[4, 16, 8, 5], &[10, 6, 10]];
    let mut worst = Worst::default();
    let mut n = 0;
    for arch in archs {
        for _ in 0..5 {
            let res = MlpModel::new(arch, rng.random()).and_then(|m| {
                let classes = *arch.last().unwrap();
                let x: Vec<f64> = (0..arch[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
                let p_ls = dirichlet_interior(&mut rng, classes, 1e-6);
                let label = mix_label(
                    rng.random_range(0..classes),
                    &p_ls,
                    rng.random_range(0.0..=1.0),
                )?;
                model_gradient_error(&m, &x, &label)
            });
            match res {
                Ok(v) => worst.see(v),
                Err(e) => return failed("model_gradient_gate", e, start),
            }
            n += 1;
        }
    }
    finish(
        "model_gradient_gate",
        worst,
        PARAM_GRAD_REL_TOL,
        n,
        "per-parameter relative error".into(),
        start,
    )
}

fn cp_gradient(opts: &VerifyOptions) -> CheckResult {
    let start = Instant::now();
    let mut rng = opts.rng(9);
    let n = 200;
    let mut worst = Worst::default();
    for _ in 0..n {
        let classes = rng.random_range(2..=10);
        let z = random_logits(&mut rng, classes, 4.0);
        let k = rng.random_range(0..classes);
        let beta = rng.random_range(0.0..=1.0);
        let res = cp_grad_wrt_logits(k, &z, beta).and_then(|g| {
            let mut numeric = Vec::with_capacity(classes);
            for j in 0..classes {
                let mut up = z.as_slice().to_vec();
                let mut down = up.clone();
                up[j] += FD_STEP;
                down[j] -= FD_STEP;
                let fu = cp_loss(k, &LogitVec::new(up)?, beta)?;
                let fd = cp_loss(k, &LogitVec::new(down)?, beta)?;
                numeric.push((fu - fd) / (2.0 * FD_STEP));
            }
            Ok(relative_l2(&g, &numeric))
        });
        match res {
            Ok(v) => worst.see(v),
            Err(e) => return failed("cp_gradient", e, start),
        }
    }
    finish(
        "cp_gradient",
        worst,
        CP_GRAD_REL_TOL,
        n,
        "analytic vs central differences".into(),
        start,
    )
}

fn warmup_equivalence(opts: &VerifyOptions) -> CheckResult {
    let start = Instant::now();
    let res = (|| -> Result<(bool, usize)> {
        let data = gaussian_blobs(3, 100, 2, 1.0, opts.seed)?;
        let cfg = TrainConfig {
            steps: 80,
            warmup: Some(40),
            batch_size: 16,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: opts.seed,
            eval_every: 40,
            mode: Mode::Labo,
            regularizer: RegularizerParams::default(),
        };
        let model = MlpModel::new(&[2, 8, 3], opts.seed)?;
        let mut labo = Trainer::new(model.clone(), &data, &cfg, None)?;
        let mut ls = Trainer::new(model, &data, &cfg.with_mode(Mode::Ls), None)?;
        let mut identical = true;
        for _ in 0..cfg.warmup_steps() {
            let a = labo.step()?;
            let b = ls.step()?;
            let same_params = labo
                .model()
                .flat_params()
                .iter()
                .zip(ls.model().flat_params())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            identical &= a == b && same_params;
        }
        Ok((identical, cfg.warmup_steps()))
    })();
    match res {
        Ok((identical, steps)) => CheckResult {
            name: "warmup_equivalence",
            passed: identical,
            worst: if identical { 0.0 } else { 1.0 },
            tolerance: 0.0,
            instances: steps,
            detail: "labo warm-up vs uniform smoothing, bitwise".into(),
            seconds: start.elapsed().as_secs_f64(),
        },
        Err(e) => failed("warmup_equivalence", e, start),
    }
}

/// Runs every check in order.
pub fn run_suite(opts: &VerifyOptions) -> Vec<CheckResult> {
    let checks: [fn(&VerifyOptions) -> CheckResult; 10] = [
        closed_form_oracle,
        limits,
        temperature_identity,
        kd_decomposition,
        reduced_form,
        hypergradient,
        hessian,
        model_gradients,
        cp_gradient,
        warmup_equivalence,
    ];
    checks.iter().map(|check| check(opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let results = run_suite(&VerifyOptions {
            quick: true,
            ..Default::default()
        });
        for r in &results {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn exponent_inversion_is_caught() {
        let opts = VerifyOptions {
            quick: true,
            mutation: Some(Mutation::ExponentInversion),
            ..Default::default()
        };
        assert!(!closed_form_oracle(&opts).passed);
        assert!(!temperature_identity(&opts).passed);
        assert!(!hypergradient(&opts).passed);
    }

    #[test]
    fn dirichlet_draws_respect_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = dirichlet_interior(&mut rng, 50, 1e-5);
            assert!(p.as_slice().iter().all(|&v| v >= 1e-5));
        }
    }
}
