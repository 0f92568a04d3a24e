//! The selective distillation loop: per-step scoring and hard-sample selection,
//! a full-batch tail, AdamW or SGD with momentum, a uniform running average of
//! the weights, and checkpoint choice by validation accuracy.

use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{make_batch_positions, DomainDataset};
use crate::error::{Error, Result};
use crate::losses::{self, LossWeights, PerSampleTerms};
use crate::rng;
use crate::selection::{
    is_full_batch_step, kept_indices, score_samples, SampleQuantities, ScheduleConfig,
    SelectionConfig, SelectionStrategy,
};
use crate::student::{StudentConfig, StudentParams};
use crate::teacher::TeacherArtifact;

pub const FIDELITY_NOTE: &str = "desk-scale run: relu MLP student instead of a ResNet, synthetic \
rotated-latent domains instead of image benchmarks, oracle or imported teacher embeddings, and a \
uniform running weight average instead of windowed averaging; numbers are not comparable to \
image-benchmark results";

const EVAL_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// Momentum for `sgd_momentum`; ignored by Adam.
    pub momentum: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub loss: LossWeights,
    pub selection: SelectionConfig,
    pub schedule: ScheduleConfig,
    /// Weight averaging starts after this fraction of the steps.
    pub ma_start_frac: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            weight_decay: 1e-4,
            momentum: 0.9,
            batch_size: 32,
            total_steps: 2000,
            loss: LossWeights::default(),
            selection: SelectionConfig::default(),
            schedule: ScheduleConfig::default(),
            ma_start_frac: 0.5,
            eval_every: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "total_steps, batch_size and eval_every must be >= 1".into(),
            ));
        }
        if !(self.ma_start_frac >= 0.0 && self.ma_start_frac < 1.0) {
            return Err(Error::Config(format!(
                "ma_start_frac must be in [0, 1), got {}",
                self.ma_start_frac
            )));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.momentum >= 0.0) {
            return Err(Error::Config(
                "lr, weight_decay and momentum must be >= 0".into(),
            ));
        }
        self.loss.validate()?;
        self.selection.validate()?;
        self.schedule.validate()
    }

    pub fn ma_start_step(&self) -> usize {
        (self.ma_start_frac * self.total_steps as f64).floor() as usize
    }

    /// True when any term or scorer reads teacher outputs.
    pub fn needs_teacher(&self) -> bool {
        self.loss.lambda_logits > 0.0
            || self.loss.lambda_cm > 0.0
            || self.selection.strategy == SelectionStrategy::Kl
    }
}

/// AdamW (decoupled decay, beta 0.9/0.999, eps 1e-8) or SGD with momentum.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    momentum: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(cfg: &TrainConfig, params: &StudentParams) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();
        Optimizer {
            kind: cfg.optimizer,
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            momentum: cfg.momentum,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut StudentParams, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Contract(
                "gradient count does not match parameters".into(),
            ));
        }
        self.t += 1;
        let (bc1, bc2) = (1.0 - BETA1.powi(self.t), 1.0 - BETA2.powi(self.t));
        for (k, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for (j, p) in tensor.values_mut().iter_mut().enumerate() {
                let update = match self.kind {
                    OptimizerKind::Adam => {
                        m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                        v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                        (m[j] / bc1) / ((v[j] / bc2).sqrt() + ADAM_EPS)
                    }
                    OptimizerKind::SgdMomentum => {
                        m[j] = self.momentum * m[j] + g[j];
                        m[j]
                    }
                };
                *p -= self.lr * (update + self.weight_decay * *p);
            }
        }
        Ok(())
    }
}

/// Uniform running mean of parameter snapshots.
#[derive(Clone, Debug)]
pub struct MaState {
    config: StudentConfig,
    buffer: Vec<Vec<f64>>,
    count: usize,
    start_step: usize,
}

impl MaState {
    pub fn new(params: &StudentParams, start_step: usize) -> Self {
        MaState {
            config: params.config.clone(),
            buffer: params
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.numel()])
                .collect(),
            count: 0,
            start_step,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn start_step(&self) -> usize {
        self.start_step
    }

    /// `buffer += (params - buffer) / (count + 1)`.
    pub fn update(&mut self, params: &StudentParams, step: usize) -> Result<()> {
        if step < self.start_step {
            return Err(Error::Contract(format!(
                "averaging step {step} precedes start step {}",
                self.start_step
            )));
        }
        if params.config.shapes() != self.config.shapes() {
            return Err(Error::Contract(
                "snapshot shape differs from the average".into(),
            ));
        }
        let denom = (self.count + 1) as f64;
        for (buf, t) in self.buffer.iter_mut().zip(params.tensors()) {
            buf.iter_mut()
                .zip(t.values())
                .for_each(|(b, p)| *b += (p - *b) / denom);
        }
        self.count += 1;
        Ok(())
    }

    /// The averaged parameters, or `None` before the first update.
    pub fn params(&self) -> Option<StudentParams> {
        if self.count == 0 {
            return None;
        }
        let tensors = self
            .config
            .shapes()
            .into_iter()
            .zip(&self.buffer)
            .map(|(s, b)| Tensor::new(s, b.clone()))
            .collect::<Result<Vec<_>>>()
            .ok()?;
        StudentParams::from_tensors(self.config.clone(), tensors).ok()
    }
}

/// Fraction of samples whose argmax logit equals the label. Never touches the projector.
pub fn evaluate(params: &StudentParams, data: &DomainDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Parameter(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let positions: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in positions.chunks(EVAL_CHUNK) {
        let preds = params.predict(&data.features(chunk)?)?;
        correct += preds
            .iter()
            .zip(chunk)
            .filter(|(p, &i)| **p == data.samples[i].y)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Index of the earliest maximum.
pub fn select_model_by_val(curve: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in curve.iter().enumerate() {
        if best.is_none_or(|b| v > curve[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub ce: f64,
    pub logits: f64,
    pub cm: f64,
    pub batch: usize,
    pub selected: usize,
    pub full_batch: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    /// Number of optimizer steps taken when evaluated.
    pub step: usize,
    pub val_acc: f64,
    pub test_acc: Option<f64>,
    pub val_acc_ma: Option<f64>,
    pub test_acc_ma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub step: usize,
    pub val_acc: f64,
    pub test_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix_secs: u64,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub fidelity_note: String,
    pub config: TrainConfig,
    pub student: StudentConfig,
    pub gamma: Option<f64>,
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalPoint>,
    pub selected_raw: Selected,
    pub selected_ma: Option<Selected>,
    pub final_test_acc: Option<f64>,
    pub final_test_acc_ma: Option<f64>,
    pub timing: Timing,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// JSON without the `timing` block; equal for equal config and seed.
    pub fn canonical_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("timing");
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }

    pub fn val_curve(&self) -> Vec<f64> {
        self.evals.iter().map(|e| e.val_acc).collect()
    }

    /// Eval step of the raw-weight model with the best validation accuracy.
    pub fn select_model_by_val(&self) -> Option<usize> {
        select_model_by_val(&self.val_curve()).map(|i| self.evals[i].step)
    }

    /// Held-out accuracy of the validation-selected averaged model, falling back to raw.
    pub fn headline_test_acc(&self) -> Option<f64> {
        self.selected_ma
            .as_ref()
            .and_then(|s| s.test_acc)
            .or(self.selected_raw.test_acc)
    }
}

pub struct TrainData<'a> {
    pub train: &'a DomainDataset,
    pub val: &'a DomainDataset,
    pub test: Option<&'a DomainDataset>,
}

pub struct TrainOutcome {
    pub report: TrainReport,
    /// Raw weights at the validation-selected step.
    pub selected: StudentParams,
    /// Averaged weights at the validation-selected step, if averaging ran.
    pub selected_ma: Option<StudentParams>,
    pub last: StudentParams,
}

struct TeacherView<'a> {
    text: Tensor,
    soft: Tensor,
    gamma: f64,
    _artifact: &'a TeacherArtifact,
}

fn gather(m: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let (_, c) = m.dims2()?;
    let mut v = Vec::with_capacity(rows.len() * c);
    rows.iter().for_each(|&r| v.extend_from_slice(m.row(r)));
    Tensor::matrix(rows.len(), c, v)
}

/// Runs the full training loop. Deterministic given the configs and data.
pub fn train(
    cfg: &TrainConfig,
    student: &StudentConfig,
    data: &TrainData<'_>,
    teacher: Option<&TeacherArtifact>,
) -> Result<TrainOutcome> {
    train_with_progress(cfg, student, data, teacher, |_| {})
}

pub fn train_with_progress(
    cfg: &TrainConfig,
    student: &StudentConfig,
    data: &TrainData<'_>,
    teacher: Option<&TeacherArtifact>,
    mut progress: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    let started = Instant::now();
    let started_unix_secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    cfg.validate()?;
    student.validate()?;
    let train_ds = data.train;
    if train_ds.is_empty() {
        return Err(Error::Parameter("empty training set".into()));
    }
    if train_ds.feature_dim != student.input_dim || train_ds.num_classes != student.num_classes {
        return Err(Error::Config(
            "student input_dim/num_classes disagree with the dataset".into(),
        ));
    }
    let t = cfg.loss.temperature;

    let tv = match (cfg.needs_teacher(), teacher) {
        (false, _) => None,
        (true, None) => {
            return Err(Error::Config(
                "this configuration needs a teacher artifact".into(),
            ))
        }
        (true, Some(a)) => {
            if a.num_classes() != student.num_classes || a.embed_dim() != student.teacher_embed_dim
            {
                return Err(Error::Config(
                    "teacher classes/embedding size disagree with the student".into(),
                ));
            }
            Some(TeacherView {
                text: a.text_matrix()?,
                soft: a.soft_targets(&train_ds.ids(), t)?,
                gamma: cfg.loss.gamma.unwrap_or(a.logit_scale),
                _artifact: a,
            })
        }
    };
    let need_kl = cfg.loss.lambda_logits > 0.0 || cfg.selection.strategy == SelectionStrategy::Kl;
    let need_cm = cfg.loss.lambda_cm > 0.0;

    let mut params = StudentParams::init(student)?;
    let mut opt = Optimizer::new(cfg, &params);
    let mut ma = MaState::new(&params, cfg.ma_start_step());

    let mut steps = Vec::with_capacity(cfg.total_steps);
    let mut evals: Vec<EvalPoint> = Vec::new();
    let mut best_raw: Option<(f64, StudentParams)> = None;
    let mut best_ma: Option<(f64, StudentParams)> = None;

    let mut epoch = 0u64;
    let mut queue =
        make_batch_positions(train_ds.len(), cfg.batch_size, rng::derive(cfg.seed, epoch))
            .into_iter();

    for step in 0..cfg.total_steps {
        let positions = match queue.next() {
            Some(b) => b,
            None => {
                epoch += 1;
                queue = make_batch_positions(
                    train_ds.len(),
                    cfg.batch_size,
                    rng::derive(cfg.seed, epoch),
                )
                .into_iter();
                queue.next().expect("non-empty dataset yields a batch")
            }
        };
        let labels = train_ds.labels(&positions);
        let full_batch = is_full_batch_step(step, &cfg.schedule, cfg.total_steps);

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let x = tape.constant(train_ds.features(&positions)?);
        let feats = bound.features(&mut tape, x)?;
        let logits = bound.logits(&mut tape, feats)?;
        let ce = losses::ce_per_sample(&mut tape, logits, &labels)?;

        let soft = match &tv {
            Some(v) => Some(gather(&v.soft, &positions)?),
            None => None,
        };
        let logits_kl = match (&soft, need_kl) {
            (Some(s), true) => Some(losses::logits_kl_per_sample(&mut tape, logits, s, t)?),
            _ => None,
        };
        let cm = match (&tv, &soft, need_cm) {
            (Some(v), Some(s), true) => {
                let u = bound.project(&mut tape, feats)?;
                Some(losses::cm_per_sample(&mut tape, u, &v.text, s, v.gamma, t)?)
            }
            _ => None,
        };

        let kept = if full_batch || cfg.selection.strategy == SelectionStrategy::None {
            (0..positions.len()).collect()
        } else {
            let q = SampleQuantities {
                ce: Some(tape.values(ce)),
                logits_kl: logits_kl.map(|v| tape.values(v)),
                cm: cm.map(|v| tape.values(v)),
            };
            let scores = score_samples(
                cfg.selection.strategy,
                &q,
                &cfg.loss,
                cfg.selection.focal_gamma,
            )?;
            kept_indices(&scores, &cfg.selection, false)
        };

        let terms = PerSampleTerms { ce, logits_kl, cm };
        let loss = losses::combined_loss(&mut tape, &cfg.loss, &terms, &kept)?;
        if !loss.total_value.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!(
                    "loss {} (ce {}, logits {}, cm {}), batch of {} with {} kept, params finite: {}, first ids {:?}",
                    loss.total_value,
                    loss.ce,
                    loss.logits,
                    loss.cm,
                    positions.len(),
                    kept.len(),
                    params.is_finite(),
                    positions.iter().take(8).map(|&p| train_ds.samples[p].id).collect::<Vec<_>>()
                ),
            });
        }
        tape.backward(loss.total)?;
        let grads = bound.grads(&tape);
        opt.step(&mut params, &grads)?;
        if !params.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: "non-finite parameters after the optimizer step".into(),
            });
        }
        if step >= ma.start_step() {
            ma.update(&params, step)?;
        }

        let log = StepLog {
            step,
            total: loss.total_value,
            ce: loss.ce,
            logits: loss.logits,
            cm: loss.cm,
            batch: positions.len(),
            selected: kept.len(),
            full_batch,
        };
        progress(&log);
        steps.push(log);

        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.total_steps {
            let val_acc = evaluate(&params, data.val)?;
            let test_acc = data.test.map(|d| evaluate(&params, d)).transpose()?;
            let ma_params = ma.params();
            let (val_acc_ma, test_acc_ma) = match &ma_params {
                Some(p) => (
                    Some(evaluate(p, data.val)?),
                    data.test.map(|d| evaluate(p, d)).transpose()?,
                ),
                None => (None, None),
            };
            if best_raw.as_ref().is_none_or(|(b, _)| val_acc > *b) {
                best_raw = Some((val_acc, params.clone()));
            }
            if let (Some(v), Some(p)) = (val_acc_ma, ma_params) {
                if best_ma.as_ref().is_none_or(|(b, _)| v > *b) {
                    best_ma = Some((v, p));
                }
            }
            evals.push(EvalPoint {
                step: done,
                val_acc,
                test_acc,
                val_acc_ma,
                test_acc_ma,
            });
        }
    }

    let raw_idx = select_model_by_val(&evals.iter().map(|e| e.val_acc).collect::<Vec<_>>())
        .expect("at least one evaluation");
    let selected_raw = Selected {
        step: evals[raw_idx].step,
        val_acc: evals[raw_idx].val_acc,
        test_acc: evals[raw_idx].test_acc,
    };
    let ma_points: Vec<(usize, f64)> = evals
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.val_acc_ma.map(|v| (i, v)))
        .collect();
    let selected_ma =
        select_model_by_val(&ma_points.iter().map(|p| p.1).collect::<Vec<_>>()).map(|k| {
            let e = &evals[ma_points[k].0];
            Selected {
                step: e.step,
                val_acc: ma_points[k].1,
                test_acc: e.test_acc_ma,
            }
        });
    let last_eval = evals.last().unwrap();
    let report = TrainReport {
        fidelity_note: FIDELITY_NOTE.to_string(),
        config: cfg.clone(),
        student: student.clone(),
        gamma: tv.as_ref().map(|v| v.gamma),
        final_test_acc: last_eval.test_acc,
        final_test_acc_ma: last_eval.test_acc_ma,
        steps,
        evals: evals.clone(),
        selected_raw,
        selected_ma,
        timing: Timing {
            started_unix_secs,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
    };
    Ok(TrainOutcome {
        report,
        selected: best_raw.map(|b| b.1).unwrap(),
        selected_ma: best_ma.map(|b| b.1),
        last: params,
    })
}
