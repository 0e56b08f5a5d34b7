//! Two-stage training: every step first builds the smoothed labels for the
//! mini-batch from the current model (closed form, no inner loop), then takes
//! one SGD step on the detached labels. The first `warmup` steps of a `labo`
//! run use uniform label smoothing instead.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model::{sgd_step, Gradients, MlpModel, OptimizerState};
use crate::numerics::{entropy, softmax, LogitVec, ProbVec};
use crate::objectives::{
    cp_grad_wrt_logits, cp_loss, grad_wrt_logits, kd_loss, smoothed_ce, unified_objective,
};
use crate::smoothing::{
    build_label, AlphaRule, SmoothingConfig, DEFAULT_LS_ALPHA, DEFAULT_RHO, DEFAULT_TAU,
};

pub const HISTOGRAM_BINS: usize = 20;
pub const TEACHER_HIDDEN: usize = 64;

/// Which regularizer a run trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Plain one-hot cross entropy.
    None,
    /// Uniform label smoothing.
    Ls,
    /// Confidence penalty.
    Cp,
    /// Distillation from a teacher checkpoint.
    Kd,
    Labo,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::None => "none",
            Mode::Ls => "ls",
            Mode::Cp => "cp",
            Mode::Kd => "kd",
            Mode::Labo => "labo",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerParams {
    /// Mixing weight for uniform smoothing, also used during warm-up.
    #[serde(default = "default_ls_alpha")]
    pub ls_alpha: f64,
    #[serde(default = "default_cp_beta")]
    pub cp_beta: f64,
    #[serde(default = "default_kd_alpha")]
    pub kd_alpha: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_alpha_rule")]
    pub alpha_rule: AlphaRule,
}

fn default_ls_alpha() -> f64 {
    DEFAULT_LS_ALPHA
}
fn default_cp_beta() -> f64 {
    0.1
}
fn default_kd_alpha() -> f64 {
    0.5
}
fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn default_alpha_rule() -> AlphaRule {
    AlphaRule::Adaptive { rho: DEFAULT_RHO }
}

impl Default for RegularizerParams {
    fn default() -> Self {
        Self {
            ls_alpha: default_ls_alpha(),
            cp_beta: default_cp_beta(),
            kd_alpha: default_kd_alpha(),
            tau: default_tau(),
            alpha_rule: default_alpha_rule(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Uniform-smoothing warm-up for `labo`; defaults to `steps / 8`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    pub eval_every: usize,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub regularizer: RegularizerParams,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_mode() -> Mode {
    Mode::Labo
}

/// What a single training step optimizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepObjective {
    Labels(SmoothingConfig),
    ConfidencePenalty { beta: f64 },
}

impl TrainConfig {
    pub fn warmup_steps(&self) -> usize {
        self.warmup.unwrap_or(self.steps / 8)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be >= 1"));
        }
        if self.warmup_steps() > self.steps {
            return Err(Error::invalid(format!(
                "warm-up {} exceeds {} steps",
                self.warmup_steps(),
                self.steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every must be >= 1"));
        }
        if self.regularizer.cp_beta.is_nan() || self.regularizer.cp_beta < 0.0 {
            return Err(Error::invalid("cp_beta must be >= 0"));
        }
        // Build every smoothing config once so bad alphas and taus fail early.
        SmoothingConfig::uniform(self.regularizer.ls_alpha)?;
        SmoothingConfig::kd(self.regularizer.kd_alpha)?;
        SmoothingConfig::labo(self.regularizer.alpha_rule, self.regularizer.tau)?;
        Ok(())
    }

    pub fn objective_at(&self, step: usize) -> Result<StepObjective> {
        let r = &self.regularizer;
        let cfg = match self.mode {
            Mode::None => SmoothingConfig::none(),
            Mode::Ls => SmoothingConfig::uniform(r.ls_alpha)?,
            Mode::Kd => SmoothingConfig::kd(r.kd_alpha)?,
            Mode::Cp => return Ok(StepObjective::ConfidencePenalty { beta: r.cp_beta }),
            Mode::Labo if step < self.warmup_steps() => SmoothingConfig::uniform(r.ls_alpha)?,
            Mode::Labo => SmoothingConfig::labo(r.alpha_rule, r.tau)?,
        };
        Ok(StepObjective::Labels(cfg))
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }
}

/// Metrics recorded at an evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub step: usize,
    /// Mean per-instance training objective over the steps since the last report.
    pub train_loss: f64,
    pub val_acc: f64,
    pub mean_confidence: f64,
    pub mean_entropy: f64,
    /// Mean mixing weight over the instances seen since the last report.
    pub mean_alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl ConfidenceHistogram {
    pub fn new() -> Self {
        Self {
            edges: (0..=HISTOGRAM_BINS)
                .map(|i| i as f64 / HISTOGRAM_BINS as f64)
                .collect(),
            counts: vec![0; HISTOGRAM_BINS],
        }
    }

    pub fn bin_of(confidence: f64) -> usize {
        ((confidence * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1)
    }

    pub fn add(&mut self, confidence: f64) {
        self.counts[Self::bin_of(confidence)] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Index of the fullest bin (lowest index on ties).
    pub fn mode_bin(&self) -> usize {
        let max = self.counts.iter().copied().max().unwrap_or(0);
        self.counts.iter().position(|&c| c == max).unwrap_or(0)
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    /// Two whitespace-separated columns: bin center, count.
    pub fn save_plot_data(&self, path: &Path) -> Result<()> {
        let mut out = String::from("# bin_center count\n");
        for (c, n) in self.centers().iter().zip(&self.counts) {
            out.push_str(&format!("{c:.3} {n}\n"));
        }
        write_atomic(path, out.as_bytes())
    }
}

impl Default for ConfidenceHistogram {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub histogram: ConfidenceHistogram,
    pub mean_confidence: f64,
    pub mean_entropy: f64,
}

pub fn evaluate(model: &MlpModel, data: &Dataset, split: Split) -> Result<Evaluation> {
    evaluate_rows(model, data, data.split(split))
}

pub fn evaluate_rows(model: &MlpModel, data: &Dataset, rows: &[usize]) -> Result<Evaluation> {
    if rows.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    check_model_fits(model, data)?;
    let mut histogram = ConfidenceHistogram::new();
    let mut correct = 0usize;
    let mut confidence = 0.0;
    let mut ent = 0.0;
    for &i in rows {
        let p = softmax(&model.logits(data.row(i))?);
        let (pred, conf) = p.argmax();
        if pred == data.label(i) {
            correct += 1;
        }
        histogram.add(conf);
        confidence += conf;
        ent += entropy(&p);
    }
    let n = rows.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        histogram,
        mean_confidence: confidence / n,
        mean_entropy: ent / n,
    })
}

pub fn check_model_fits(model: &MlpModel, data: &Dataset) -> Result<()> {
    if model.input_dim() != data.dim() || model.classes() != data.classes() {
        return Err(Error::ShapeMismatch(format!(
            "model {:?} cannot score data with {} features and {} classes",
            model.sizes(),
            data.dim(),
            data.classes()
        )));
    }
    Ok(())
}

/// Per-step telemetry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub mean_alpha: f64,
}

/// Stateful driver for one run. Owns its model, optimizer and sampler; labels
/// are rebuilt from scratch every step, so no label state carries over.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a Dataset,
    teacher_probs: Option<Vec<ProbVec>>,
    model: MlpModel,
    optimizer: OptimizerState,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: MlpModel,
        data: &'a Dataset,
        cfg: &TrainConfig,
        teacher: Option<&MlpModel>,
    ) -> Result<Self> {
        cfg.validate()?;
        check_model_fits(&model, data)?;
        if data.split(Split::Train).is_empty() {
            return Err(Error::invalid("training split is empty"));
        }
        let teacher_probs = match (cfg.mode, teacher) {
            (Mode::Kd, None) => return Err(Error::MissingTeacher),
            (Mode::Kd, Some(t)) => {
                check_model_fits(t, data)?;
                // Cache the teacher's predictions for every row once.
                Some(
                    (0..data.len())
                        .map(|i| t.logits(data.row(i)).map(|z| softmax(&z)))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            _ => None,
        };
        let optimizer =
            OptimizerState::new(&model, cfg.learning_rate, cfg.momentum, cfg.weight_decay)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let mut order = data.split(Split::Train).to_vec();
        order.shuffle(&mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            data,
            teacher_probs,
            model,
            optimizer,
            rng,
            order,
            cursor: 0,
            step: 0,
        })
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    pub fn into_model(self) -> MlpModel {
        self.model
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Next mini-batch, reshuffling whenever an epoch is exhausted.
    fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        while batch.len() < self.cfg.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let take = (self.cfg.batch_size - batch.len()).min(self.order.len() - self.cursor);
            batch.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        batch
    }

    pub fn step(&mut self) -> Result<StepStats> {
        let step = self.step;
        let overflow = |what: String| Error::NumericOverflow { step, what };
        let objective = self.cfg.objective_at(step)?;
        let batch = self.next_batch();
        let scale = 1.0 / batch.len() as f64;
        let mut grads = Gradients::zeros_like(&self.model);
        let mut loss = 0.0;
        let mut alpha_sum = 0.0;

        for &i in &batch {
            let k = self.data.label(i);
            let pass = match self.model.forward(self.data.row(i)) {
                Ok(p) => p,
                Err(Error::InvalidArgument(msg)) => return Err(overflow(msg)),
                Err(e) => return Err(e),
            };
            let z: &LogitVec = &pass.logits;
            let (instance_loss, upstream) = match objective {
                StepObjective::ConfidencePenalty { beta } => {
                    (cp_loss(k, z, beta)?, cp_grad_wrt_logits(k, z, beta)?)
                }
                StepObjective::Labels(cfg) => {
                    let teacher = self.teacher_probs.as_ref().map(|t| &t[i]);
                    let label = build_label(k, z, &cfg, teacher)?;
                    let l = match cfg.mode() {
                        crate::SmoothingMode::Labo => {
                            let beta = cfg.beta_for(label.alpha_used);
                            unified_objective(k, z, &label.p_ls, label.alpha_used, beta)?.total
                        }
                        crate::SmoothingMode::KdTeacher => {
                            kd_loss(k, z, &label.p_ls, label.alpha_used)?
                        }
                        _ => smoothed_ce(&label, z)?,
                    };
                    alpha_sum += label.alpha_used;
                    (l, grad_wrt_logits(&label, z)?)
                }
            };
            loss += instance_loss;
            grads.add_scaled(&self.model.backward(&pass, &upstream)?, scale)?;
        }

        let loss = loss * scale;
        if !loss.is_finite() {
            return Err(overflow(format!("training loss is {loss}")));
        }
        sgd_step(&mut self.model, &grads, &mut self.optimizer)?;
        if self.model.flat_params().iter().any(|v| !v.is_finite()) {
            return Err(overflow("parameters diverged".into()));
        }
        self.step += 1;
        Ok(StepStats {
            step,
            loss,
            mean_alpha: alpha_sum * scale,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_model: MlpModel,
    /// Parameters at the evaluation point with the best validation accuracy.
    pub best_model: MlpModel,
    pub best_val_acc: f64,
    pub reports: Vec<EpochReport>,
}

/// Runs the configured number of steps, evaluating on the validation split
/// every `eval_every` steps and after the last one.
pub fn run_training(
    model: MlpModel,
    data: &Dataset,
    cfg: &TrainConfig,
    teacher: Option<&MlpModel>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, data, cfg, teacher)?;
    let mut reports = Vec::new();
    let mut best: Option<(f64, MlpModel)> = None;
    let (mut loss_sum, mut alpha_sum, mut window) = (0.0, 0.0, 0usize);

    while trainer.steps_taken() < cfg.steps {
        let stats = trainer.step()?;
        loss_sum += stats.loss;
        alpha_sum += stats.mean_alpha;
        window += 1;
        let done = trainer.steps_taken();
        if done % cfg.eval_every == 0 || done == cfg.steps {
            let eval = evaluate(trainer.model(), data, Split::Val)?;
            reports.push(EpochReport {
                step: done,
                train_loss: loss_sum / window as f64,
                val_acc: eval.accuracy,
                mean_confidence: eval.mean_confidence,
                mean_entropy: eval.mean_entropy,
                mean_alpha: alpha_sum / window as f64,
            });
            if best.as_ref().is_none_or(|(acc, _)| eval.accuracy > *acc) {
                best = Some((eval.accuracy, trainer.model().clone()));
            }
            loss_sum = 0.0;
            alpha_sum = 0.0;
            window = 0;
        }
    }
    let (best_val_acc, best_model) = best.expect("at least one evaluation");
    Ok(TrainOutcome {
        final_model: trainer.into_model(),
        best_model,
        best_val_acc,
        reports,
    })
}

/// Trains a wider `[D, 64, K]` network with uniform smoothing for use as a
/// distillation teacher; returns the best-validation checkpoint.
pub fn train_teacher(data: &Dataset, cfg: &TrainConfig) -> Result<MlpModel> {
    let teacher_cfg = cfg.with_mode(Mode::Ls);
    let model = MlpModel::new(&[data.dim(), TEACHER_HIDDEN, data.classes()], cfg.seed)?;
    Ok(run_training(model, data, &teacher_cfg, None)?.best_model)
}

pub fn write_reports_csv(path: &Path, reports: &[EpochReport]) -> Result<()> {
    let mut out = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for r in reports {
            w.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
        }
        if reports.is_empty() {
            w.write_record([
                "step",
                "train_loss",
                "val_acc",
                "mean_confidence",
                "mean_entropy",
                "mean_alpha",
            ])
            .map_err(|e| Error::invalid(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    write_atomic(path, &out)
}
