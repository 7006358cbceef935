//! The staged training ladder and the Self-KD stage.

pub mod batch;

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_row, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Checkpoint, Modality, OmniModelState, ParamGroup, RngState};
use crate::synth::{stream, DatasetKind, Sample, Task};
use crate::tensor::Tensor;

pub use batch::{forced_forward, ForcedBatch, Prompts};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    TextPretrain,
    VisionTextAlign,
    VisionTextSft,
    AudioTextAlign,
    VisionAudioSft,
}

impl Stage {
    /// Training order.
    pub const ALL: [Stage; 5] =
        [Stage::TextPretrain, Stage::VisionTextAlign, Stage::VisionTextSft, Stage::AudioTextAlign, Stage::VisionAudioSft];

    pub fn name(self) -> &'static str {
        match self {
            Stage::TextPretrain => "text_pretrain",
            Stage::VisionTextAlign => "vision_text_align",
            Stage::VisionTextSft => "vision_text_sft",
            Stage::AudioTextAlign => "audio_text_align",
            Stage::VisionAudioSft => "vision_audio_sft",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn dataset(self) -> DatasetKind {
        match self {
            Stage::TextPretrain => DatasetKind::TextPretrain,
            Stage::VisionTextAlign => DatasetKind::CaptionAlign,
            Stage::VisionTextSft => DatasetKind::VqaText,
            Stage::AudioTextAlign => DatasetKind::Asr,
            Stage::VisionAudioSft => DatasetKind::VqaAudioPaired,
        }
    }

    /// Query modality of the trained (student) path.
    pub fn modality(self) -> Modality {
        match self {
            Stage::AudioTextAlign | Stage::VisionAudioSft => Modality::Audio,
            _ => Modality::Text,
        }
    }

    fn accepts(self, sample: &Sample) -> bool {
        match self {
            Stage::TextPretrain | Stage::AudioTextAlign => sample.task == Task::Asr,
            Stage::VisionTextAlign => sample.task == Task::Caption && sample.scene.is_some(),
            // Text transcription samples may be replayed alongside the VQA data.
            Stage::VisionTextSft => sample.scene.is_some() || (sample.task == Task::Asr && sample.audio.is_none()),
            Stage::VisionAudioSft => sample.task != Task::Asr && sample.scene.is_some(),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Groups each stage trains; everything else is frozen.
pub fn freeze_policy(stage: Stage) -> Vec<ParamGroup> {
    use ParamGroup::*;
    match stage {
        Stage::TextPretrain => vec![TextEmbedding, Backbone, OutputHead],
        Stage::VisionTextAlign => vec![VisionEncoder, VisionProjector],
        Stage::VisionTextSft => vec![TextEmbedding, VisionEncoder, VisionProjector, Backbone, OutputHead],
        Stage::AudioTextAlign | Stage::VisionAudioSft => vec![AudioEncoder, AudioProjector],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdMode {
    /// Full-vocabulary KL between teacher and student distributions.
    TokenKl,
    /// Mean of `log p_T(y) − log p_S(y)` at the ground-truth tokens.
    GtLogratio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub trainable_groups: Vec<ParamGroup>,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    /// Weight of the Self-KD loss; non-zero only for `vision_audio_sft`.
    pub alpha: f64,
    pub kd_mode: KdMode,
    pub temperature: f64,
    pub seed: u64,
    pub clip_norm: f64,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl StageConfig {
    /// Desk-scale defaults for `stage`.
    pub fn default_for(stage: Stage) -> Self {
        let align = matches!(stage, Stage::VisionTextAlign | Stage::AudioTextAlign | Stage::TextPretrain);
        Self {
            stage,
            trainable_groups: freeze_policy(stage),
            epochs: 1,
            batch_size: if align { 32 } else { 16 },
            base_lr: 3e-4,
            warmup_steps: 0,
            alpha: 0.0,
            kd_mode: KdMode::TokenKl,
            temperature: 1.0,
            seed: 0,
            clip_norm: 1.0,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = |name: &str| format!("stages.{}.{name}", self.stage);
        if self.epochs == 0 {
            return Err(Error::config(f("epochs"), "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(f("batch_size"), "must be positive"));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::config(f("base_lr"), "must be a positive number"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(f("alpha"), format!("{} is outside [0, 1]", self.alpha)));
        }
        if self.alpha != 0.0 && self.stage != Stage::VisionAudioSft {
            return Err(Error::config(f("alpha"), "Self-KD applies only to vision_audio_sft"));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config(f("temperature"), "must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config(f("clip_norm"), "must be positive"));
        }
        if self.trainable_groups.is_empty() {
            return Err(Error::config(f("trainable_groups"), "must name at least one group"));
        }
        let mut seen = self.trainable_groups.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.trainable_groups.len() {
            return Err(Error::config(f("trainable_groups"), "contains duplicates"));
        }
        Ok(())
    }
}

/// Cosine decay from `base_lr` at `step = warmup` to 0 at `total_steps`,
/// preceded by a linear ramp over the first `warmup` steps.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64, warmup: usize) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::config("total_steps", "must be positive"));
    }
    if step > total_steps {
        return Err(Error::Invalid(format!("lr_schedule: step {step} exceeds total {total_steps}")));
    }
    if step < warmup {
        return Ok(base_lr * (step + 1) as f64 / warmup as f64);
    }
    let span = total_steps.saturating_sub(warmup).max(1);
    let t = (step - warmup) as f64 / span as f64;
    Ok(base_lr * 0.5 * (1.0 + (PI * t).cos()))
}

/// Cross-entropy of the student at the answer positions.
pub fn loss_sft(tape: &mut Tape, student: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    Ok(tape.cross_entropy(student, targets, mask)?)
}

/// Self-KD loss between teacher and student answer-position logits. The
/// teacher side never receives gradient.
///
/// `gt_logratio` applies the temperature to both sides but no τ² factor.
pub fn loss_self_kd(
    tape: &mut Tape,
    teacher: Var,
    student: Var,
    targets: &[usize],
    mask: &[bool],
    temperature: f64,
    mode: KdMode,
) -> Result<Var> {
    let (ts, ss) = (tape.value(teacher).shape().to_vec(), tape.value(student).shape().to_vec());
    if ts != ss || ts.len() != 2 || mask.len() != ts[0] {
        return Err(Error::Invalid(format!(
            "loss_self_kd: teacher {ts:?}, student {ss:?} and mask of {} rows are misaligned",
            mask.len()
        )));
    }
    match mode {
        KdMode::TokenKl => Ok(tape.kl_divergence(teacher, student, mask, temperature)?),
        KdMode::GtLogratio => {
            if targets.len() != mask.len() {
                return Err(Error::Invalid(format!(
                    "loss_self_kd: {} targets for {} rows",
                    targets.len(),
                    mask.len()
                )));
            }
            if !(temperature > 0.0) || !temperature.is_finite() {
                return Err(crate::TensorError::NonPositiveTemperature(temperature).into());
            }
            let v = ts[1];
            let t = tape.value(teacher).data();
            let mut sum = 0.0;
            let mut count = 0usize;
            for r in (0..mask.len()).filter(|&r| mask[r]) {
                let row: Vec<f64> = t[r * v..(r + 1) * v].iter().map(|x| x / temperature).collect();
                sum += log_softmax_row(&row)[targets[r]];
                count += 1;
            }
            let scaled = if temperature == 1.0 { student } else { tape.scale(student, 1.0 / temperature) };
            let ce = tape.cross_entropy(scaled, targets, mask)?;
            let teacher_term = tape.constant(Tensor::scalar(sum / count.max(1) as f64));
            Ok(tape.add(teacher_term, ce)?)
        }
    }
}

/// `α·kd + (1 − α)·sft`.
pub fn loss_combined(tape: &mut Tape, kd: Var, sft: Var, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config("alpha", format!("{alpha} is outside [0, 1]")));
    }
    let a = tape.scale(kd, alpha);
    let b = tape.scale(sft, 1.0 - alpha);
    Ok(tape.add(a, b)?)
}

/// Adam over the parameters of the trainable groups.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: vec![None; n_params] }
    }

    /// One update; `grads[i]` is `None` for parameters left untouched.
    pub fn step(&mut self, model: &mut OmniModelState, grads: &[Option<Tensor>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in model.params_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = self.moments[i].get_or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub l_sft: f64,
    /// Absent when α = 0 (no teacher pass).
    pub l_kd: Option<f64>,
    pub l_total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSnapshot {
    pub epoch: usize,
    pub last_step: usize,
    pub mean_l_sft: f64,
    pub mean_l_kd: Option<f64>,
    pub mean_l_total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: Option<Stage>,
    pub alpha: f64,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSnapshot>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "step,lr,l_sft,l_kd,l_total,grad_norm";

    /// CSV with an empty `l_kd` cell when no KD loss was computed.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.steps {
            let kd = r.l_kd.map(|v| format!("{v:e}")).unwrap_or_default();
            let _ = writeln!(out, "{},{:e},{:e},{},{:e},{:e}", r.step, r.lr, r.l_sft, kd, r.l_total, r.grad_norm);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Global L2 norm of the gradients.
pub fn grad_norm(grads: &[Option<Tensor>]) -> f64 {
    grads.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Losses and gradients of one batch, without touching the model.
pub struct StepOutcome {
    pub l_sft: f64,
    pub l_kd: Option<f64>,
    pub l_total: f64,
    pub grads: Vec<Option<Tensor>>,
}

/// Teacher answer-position logits for a batch, from a gradient-free pass.
pub fn teacher_logits(model: &OmniModelState, prompts: &Prompts, samples: &[&Sample]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = model.bind_frozen(&mut tape);
    let fb = forced_forward(model, &mut tape, &bound, prompts, samples, Modality::Text, false)?;
    Ok(tape.value(fb.logits).clone())
}

/// Forward and backward for one batch under `cfg`.
pub fn compute_step(model: &OmniModelState, cfg: &StageConfig, prompts: &Prompts, samples: &[&Sample]) -> Result<StepOutcome> {
    let teacher = if cfg.alpha > 0.0 { Some(teacher_logits(model, prompts, samples)?) } else { None };
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let fb = forced_forward(model, &mut tape, &bound, prompts, samples, cfg.stage.modality(), false)?;
    let sft = loss_sft(&mut tape, fb.logits, &fb.targets, &fb.mask)?;
    let (kd, total) = match teacher {
        Some(t) => {
            let t = tape.constant(t);
            let kd = loss_self_kd(&mut tape, t, fb.logits, &fb.targets, &fb.mask, cfg.temperature, cfg.kd_mode)?;
            (Some(kd), loss_combined(&mut tape, kd, sft, cfg.alpha)?)
        }
        None => (None, sft),
    };
    let l_total = tape.value(total).item();
    let mut grads = vec![None; bound.vars().len()];
    if l_total.is_finite() {
        tape.backward(total)?;
        for (g, &v) in grads.iter_mut().zip(bound.vars()) {
            if tape.requires_grad(v) {
                *g = tape.grad(v).cloned();
            }
        }
    }
    Ok(StepOutcome { l_sft: tape.value(sft).item(), l_kd: kd.map(|k| tape.value(k).item()), l_total, grads })
}

/// Trains `model` for one stage. On a non-finite loss the model keeps the
/// parameters of the last good step (also written to `last_good.json` under
/// `checkpoint_dir`) and `Error::NanLoss` is returned.
pub fn run_stage(
    model: &mut OmniModelState,
    cfg: &StageConfig,
    prompts: &Prompts,
    data: &[Sample],
    checkpoint_dir: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid(format!("stage {}: empty dataset", cfg.stage)));
    }
    if let Some(s) = data.iter().find(|s| !cfg.stage.accepts(s)) {
        return Err(Error::Invalid(format!("stage {}: sample {} has task {}", cfg.stage, s.meta.id, s.task)));
    }
    if cfg.stage.modality() == Modality::Audio {
        if let Some(s) = data.iter().find(|s| s.audio.is_none()) {
            return Err(Error::Invalid(format!("stage {}: sample {} lacks audio", cfg.stage, s.meta.id)));
        }
    }
    model.set_trainable(&cfg.trainable_groups);
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut adam = Adam::new(model.params().len());
    let mut log = TrainLog { stage: Some(cfg.stage), alpha: cfg.alpha, ..TrainLog::default() };
    let mut step = 0;
    let save = |model: &OmniModelState, step: usize, file: &str| -> Result<()> {
        if let Some(dir) = checkpoint_dir {
            let ck = Checkpoint {
                stage: cfg.stage.name().into(),
                rng: RngState { seed: cfg.seed, step: step as u64 },
                model: model.clone(),
            };
            save_checkpoint(&dir.join(file), &ck)?;
        }
        Ok(())
    };
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream(cfg.seed, 0x07D3_u64, epoch as u64));
        let first = log.steps.len();
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let lr = lr_schedule(step, total, cfg.base_lr, cfg.warmup_steps)?;
            let mut out = compute_step(model, cfg, prompts, &samples)?;
            let norm = grad_norm(&out.grads);
            if !out.l_total.is_finite() || !norm.is_finite() {
                save(model, step, "last_good.json")?;
                return Err(Error::NanLoss { step });
            }
            if norm > cfg.clip_norm {
                let k = cfg.clip_norm / norm;
                for g in out.grads.iter_mut().flatten() {
                    g.data_mut().iter_mut().for_each(|x| *x *= k);
                }
            }
            adam.step(model, &out.grads, lr);
            log.steps.push(StepRecord { step, lr, l_sft: out.l_sft, l_kd: out.l_kd, l_total: out.l_total, grad_norm: norm });
            step += 1;
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                save(model, step, &format!("step-{step:06}.json"))?;
            }
        }
        let recs = &log.steps[first..];
        let n = recs.len() as f64;
        let mean = |f: &dyn Fn(&StepRecord) -> f64| recs.iter().map(f).sum::<f64>() / n;
        log.epochs.push(EpochSnapshot {
            epoch,
            last_step: step.saturating_sub(1),
            mean_l_sft: mean(&|r| r.l_sft),
            mean_l_kd: recs.iter().all(|r| r.l_kd.is_some()).then(|| mean(&|r| r.l_kd.unwrap_or(0.0))),
            mean_l_total: mean(&|r| r.l_total),
        });
    }
    Ok(log)
}

