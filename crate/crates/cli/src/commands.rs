//! The operator commands. Each one reads and writes only inside the run directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use selfkd_core::eval::{
    attention_profile, decode_all, mmalign_score, score, yes_ratio, AttentionProfile, BiasReport, EvalResult, MmAlignResult,
    TaskScore,
};
use selfkd_core::model::{load_checkpoint, save_checkpoint, Checkpoint, Modality, OmniModelState, RngState};
use selfkd_core::synth::{dataset_bytes, read_dataset, read_manifest, write_manifest, DatasetKind, DatasetManifest, Sample};
use selfkd_core::train::{run_stage, Prompts, Stage, StageConfig, TrainLog};

use crate::config::{ExperimentConfig, StagePlan};
use crate::error::{CliError, Result};
use crate::layout::{model_tag, RunDir};

/// A validated config bound to the directory it writes into.
pub struct Run {
    pub config: ExperimentConfig,
    pub dir: RunDir,
}

/// Query modalities requested on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ModalityArg {
    Text,
    Audio,
    Both,
}

impl ModalityArg {
    pub fn modalities(self) -> Vec<Modality> {
        match self {
            ModalityArg::Text => vec![Modality::Text],
            ModalityArg::Audio => vec![Modality::Audio],
            ModalityArg::Both => vec![Modality::Text, Modality::Audio],
        }
    }
}

fn modality_key(m: Modality) -> String {
    selfkd_core::eval::modality_name(m).to_string()
}

/// Everything `eval` measures for one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub stage: String,
    pub dataset: DatasetKind,
    pub n: usize,
    /// Per-task accuracy keyed by query modality.
    pub accuracy: BTreeMap<String, BTreeMap<String, TaskScore>>,
    pub average: BTreeMap<String, f64>,
    /// Present when both modalities were evaluated on the same samples.
    pub gap: Option<EvalResult>,
    pub bias: BiasReport,
    pub mmalign: BTreeMap<String, MmAlignResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub tasks: BTreeMap<String, f64>,
    pub average: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let tasks: Vec<&String> = rows.first().map(|r| r.tasks.keys().collect()).unwrap_or_default();
    let mut out = String::from("alpha");
    for t in &tasks {
        let _ = write!(out, ",{t}");
    }
    out.push_str(",average\n");
    for r in rows {
        let _ = write!(out, "{}", r.alpha);
        for t in &tasks {
            let _ = write!(out, ",{:.4}", r.tasks[*t]);
        }
        let _ = writeln!(out, ",{:.4}", r.average);
    }
    out
}

impl Run {
    pub fn new(config: ExperimentConfig, root: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, dir: RunDir::new(root) })
    }

    /// Loads a config and resolves its run directory.
    pub fn from_config_file(path: &Path) -> Result<Self> {
        let config = ExperimentConfig::load(path)?;
        let root = config.run_dir();
        Self::new(config, root)
    }

    fn write_config(&self) -> Result<()> {
        self.dir.write(&RunDir::config_rel(), self.config.to_json().as_bytes())?;
        Ok(())
    }

    /// Datasets consumed by the configured stages and evaluations, in order.
    pub fn dataset_kinds(&self) -> Vec<DatasetKind> {
        let mut kinds: BTreeSet<DatasetKind> = self.config.stages.iter().flat_map(|p| p.datasets.iter().copied()).collect();
        kinds.insert(self.config.eval.vqa);
        kinds.insert(self.config.eval.mmalign);
        kinds.into_iter().collect()
    }

    /// Generates every dataset and the manifest; returns the manifest checksum.
    pub fn gen_data(&self) -> Result<String> {
        self.write_config()?;
        let mut manifest = DatasetManifest::build(self.config.seed, &self.config.synth)?;
        for kind in self.dataset_kinds() {
            let samples = manifest.generate(kind)?;
            let sum = self.dir.write(&RunDir::dataset_rel(kind), &dataset_bytes(&samples))?;
            manifest.files.insert(kind.name().to_string(), sum);
        }
        let rel = RunDir::manifest_rel();
        let path = self.dir.prepare(&rel)?;
        write_manifest(&path, &manifest)?;
        self.dir.record(&rel)?;
        Ok(read_manifest(&path)?.checksum)
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        let path = self.dir.path(&RunDir::manifest_rel());
        if !path.exists() {
            return Err(CliError::Missing(format!("datasets ({} not found; run gen-data)", path.display())));
        }
        let m = read_manifest(&path).map_err(|_| CliError::Corrupt(vec![path.clone()]))?;
        if m.seed != self.config.seed || m.config != self.config.synth {
            return Err(CliError::Incompatible(format!(
                "{} was generated from a different seed or synth config; rerun gen-data",
                path.display()
            )));
        }
        Ok(m)
    }

    pub fn dataset(&self, manifest: &DatasetManifest, kind: DatasetKind) -> Result<Vec<Sample>> {
        let rel = RunDir::dataset_rel(kind);
        let path = self.dir.path(&rel);
        let Some(expected) = manifest.files.get(kind.name()) else {
            return Err(CliError::Missing(format!("dataset {kind} is not in the manifest; run gen-data")));
        };
        let bytes = fs::read(&path).map_err(|_| CliError::Missing(format!("dataset {kind} ({})", path.display())))?;
        if selfkd_core::synth::fnv1a_hex(&bytes) != *expected {
            return Err(CliError::Corrupt(vec![path]));
        }
        let samples = read_dataset(&path).map_err(|_| CliError::Corrupt(vec![path.clone()]))?;
        let vocab = manifest.vocab.len();
        if samples.iter().any(|s| s.question.iter().chain(&s.answer).any(|&t| t as usize >= vocab)) {
            return Err(CliError::Incompatible(format!("{} uses token ids outside the manifest vocabulary", path.display())));
        }
        Ok(samples)
    }

    fn stage_data(&self, manifest: &DatasetManifest, plan: &StagePlan) -> Result<Vec<Sample>> {
        let mut data = Vec::new();
        for &kind in &plan.datasets {
            data.extend(self.dataset(manifest, kind)?);
        }
        Ok(data)
    }

    fn check_compatible(&self, model: &OmniModelState, manifest: &DatasetManifest, what: &str) -> Result<()> {
        if model.config.vocab_size != manifest.vocab.len() {
            return Err(CliError::Incompatible(format!(
                "{what} has vocab_size {} but the dataset vocabulary has {} tokens",
                model.config.vocab_size,
                manifest.vocab.len()
            )));
        }
        if model.config.audio_dim != manifest.config.audio_dim || model.config.k_frames != manifest.k_frames {
            return Err(CliError::Incompatible(format!("{what} expects a different audio frame layout than the dataset")));
        }
        Ok(())
    }

    pub fn load_model(&self, rel_or_path: &str) -> Result<(String, Checkpoint)> {
        let candidates = [self.dir.path(rel_or_path), PathBuf::from(rel_or_path), self.dir.path(&RunDir::checkpoint_rel(rel_or_path))];
        let Some(path) = candidates.iter().find(|p| p.is_file()) else {
            return Err(CliError::Missing(format!("checkpoint {rel_or_path}")));
        };
        let ck = load_checkpoint(path).map_err(|e| match e {
            selfkd_core::Error::Io { .. } => CliError::Missing(format!("checkpoint {}", path.display())),
            _ => CliError::Corrupt(vec![path.clone()]),
        })?;
        let shown = path.strip_prefix(self.dir.root()).unwrap_or(path).display().to_string();
        Ok((shown, ck))
    }

    /// Model entering `stage`: a fresh init for the first configured stage,
    /// otherwise the previous stage's checkpoint.
    fn stage_input(&self, stage: Stage) -> Result<OmniModelState> {
        let idx = self.config.stages.iter().position(|p| p.config.stage == stage).expect("stage is configured");
        if idx == 0 {
            return Ok(OmniModelState::init(self.config.model.clone())?);
        }
        let prev = self.config.stages[idx - 1].config.stage;
        let rel = RunDir::checkpoint_rel(&model_tag(prev, None));
        if !self.dir.path(&rel).is_file() {
            return Err(CliError::Missing(format!("stage {prev} must be trained before {stage} ({rel} not found)")));
        }
        let (_, ck) = self.load_model(&rel)?;
        if ck.model.config != self.config.model {
            return Err(CliError::Incompatible(format!("{rel} was trained with a different model config")));
        }
        Ok(ck.model)
    }

    /// Trains one stage from its prerequisite checkpoint and writes the
    /// checkpoint and logs. `alpha` overrides the configured KD ratio.
    pub fn train_stage(&self, stage: Stage, alpha: Option<f64>) -> Result<TrainLog> {
        let Some(plan) = self.config.plan(stage) else {
            return Err(CliError::Config(format!("stage {stage} is not listed in `stages`")));
        };
        let mut cfg: StageConfig = plan.config.clone();
        if let Some(a) = alpha {
            if stage != Stage::VisionAudioSft {
                return Err(CliError::Config(format!("--alpha applies only to vision_audio_sft, not {stage}")));
            }
            cfg.alpha = a;
        }
        cfg.validate()?;
        let manifest = self.manifest()?;
        let prompts = Prompts::new(&manifest.vocab)?;
        let mut model = self.stage_input(stage)?;
        self.check_compatible(&model, &manifest, "the model")?;
        let data = self.stage_data(&manifest, plan)?;
        let tag = model_tag(stage, (stage == Stage::VisionAudioSft).then_some(cfg.alpha));
        let step_dir = (cfg.checkpoint_every > 0).then(|| self.dir.path(&format!("checkpoints/{tag}-steps")));
        if let Some(d) = &step_dir {
            fs::create_dir_all(d).map_err(|e| CliError::io(d, e))?;
        }
        let started = Instant::now();
        let log = run_stage(&mut model, &cfg, &prompts, &data, step_dir.as_deref())?;
        let seconds = started.elapsed().as_secs_f64();
        let ck = Checkpoint { stage: stage.name().into(), rng: RngState { seed: cfg.seed, step: log.steps.len() as u64 }, model };
        let rel = RunDir::checkpoint_rel(&tag);
        save_checkpoint(&self.dir.prepare(&rel)?, &ck)?;
        self.dir.record(&rel)?;
        self.dir.write(&RunDir::log_rel(&tag), log.to_csv().as_bytes())?;
        let json = serde_json::to_string_pretty(&log).expect("log serializes") + "\n";
        self.dir.write(&RunDir::log_json_rel(&tag), json.as_bytes())?;
        self.dir.record_timing(&tag, seconds)?;
        Ok(log)
    }

    /// Trains every configured stage in order.
    pub fn train_all(&self, alpha: Option<f64>) -> Result<()> {
        for plan in &self.config.stages {
            let stage = plan.config.stage;
            self.train_stage(stage, if stage == Stage::VisionAudioSft { alpha } else { None })?;
        }
        Ok(())
    }

    /// Trains every configured stage before vision_audio_sft.
    pub fn train_prestages(&self) -> Result<()> {
        for plan in self.config.stages.iter().filter(|p| p.config.stage != Stage::VisionAudioSft) {
            self.train_stage(plan.config.stage, None)?;
        }
        Ok(())
    }

    /// Scores `checkpoint` on `dataset` under each modality, with yes-ratio
    /// bias and MMAlign probes; writes `eval/<tag>.json`.
    pub fn eval(&self, checkpoint: &str, dataset: DatasetKind, modality: ModalityArg, tag: &str) -> Result<EvalReport> {
        let (shown, ck) = self.load_model(checkpoint)?;
        let manifest = self.manifest()?;
        self.check_compatible(&ck.model, &manifest, &shown)?;
        let prompts = Prompts::new(&manifest.vocab)?;
        let samples = self.dataset(&manifest, dataset)?;
        let probes = self.dataset(&manifest, self.config.eval.mmalign)?;
        let mut accuracy = BTreeMap::new();
        let mut average = BTreeMap::new();
        let mut mmalign = BTreeMap::new();
        let mut predicted = BTreeMap::new();
        let mut gt_yes = 0.0;
        let mut n_yesno = 0;
        for m in modality.modalities() {
            let preds = decode_all(&ck.model, &prompts, &samples, m)?;
            let scores = score(&samples, &preds)?;
            let (n, gt, bias) = yes_ratio(&samples, &preds, &manifest.vocab)?;
            (n_yesno, gt_yes) = (n, gt);
            predicted.insert(modality_key(m), bias);
            average.insert(modality_key(m), scores.values().map(|s| s.accuracy).sum::<f64>() / scores.len().max(1) as f64);
            accuracy.insert(modality_key(m), scores);
            let probe_preds = decode_all(&ck.model, &prompts, &probes, m)?;
            mmalign.insert(modality_key(m), mmalign_score(&probes, &probe_preds)?);
        }
        let gap = match (accuracy.get("text"), accuracy.get("audio")) {
            (Some(t), Some(a)) => Some(EvalResult::from_scores(t, a)?),
            _ => None,
        };
        let report = EvalReport {
            checkpoint: shown,
            stage: ck.stage,
            dataset,
            n: samples.len(),
            accuracy,
            average,
            gap,
            bias: BiasReport { dataset: dataset.name().into(), n: n_yesno, ground_truth_yes: gt_yes, predicted },
            mmalign,
        };
        let json = serde_json::to_string_pretty(&report).expect("eval report serializes") + "\n";
        self.dir.write(&RunDir::eval_rel(tag), json.as_bytes())?;
        Ok(report)
    }

    /// Attention profiles of `checkpoint`; writes `profiles/<tag>.{csv,json}`.
    pub fn probe_attention(
        &self,
        checkpoint: &str,
        dataset: DatasetKind,
        modality: ModalityArg,
        n: usize,
        tag: &str,
    ) -> Result<Vec<AttentionProfile>> {
        let (shown, ck) = self.load_model(checkpoint)?;
        let manifest = self.manifest()?;
        self.check_compatible(&ck.model, &manifest, &shown)?;
        let prompts = Prompts::new(&manifest.vocab)?;
        let samples = self.dataset(&manifest, dataset)?;
        let n = if n > samples.len() {
            eprintln!("warning: --n {n} exceeds the {} samples in {dataset}; using {}", samples.len(), samples.len());
            samples.len()
        } else {
            n
        };
        let mut profiles = Vec::new();
        let mut csv = String::new();
        for m in modality.modalities() {
            let p = attention_profile(&ck.model, &prompts, &samples, m, n, tag)?;
            let body = p.to_csv();
            if csv.is_empty() {
                csv.push_str(&body);
            } else {
                csv.extend(body.lines().skip(1).map(|l| format!("{l}\n")));
            }
            profiles.push(p);
        }
        self.dir.write(&RunDir::profile_csv_rel(tag), csv.as_bytes())?;
        let json = serde_json::to_string_pretty(&profiles).expect("profiles serialize") + "\n";
        self.dir.write(&RunDir::profile_json_rel(tag), json.as_bytes())?;
        Ok(profiles)
    }

    /// Trains vision_audio_sft once per α from the same audio-aligned
    /// checkpoint and scores audio queries; writes `ablation/sweep.csv`.
    pub fn ablate(&self, alphas: &[f64]) -> Result<Vec<SweepRow>> {
        if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(CliError::Config(format!("--alphas: {a} is outside [0, 1]")));
        }
        if alphas.is_empty() {
            return Err(CliError::Config("--alphas: empty list".into()));
        }
        let manifest = self.manifest()?;
        let prompts = Prompts::new(&manifest.vocab)?;
        let samples = self.dataset(&manifest, self.config.eval.vqa)?;
        let mut rows = Vec::with_capacity(alphas.len());
        for &alpha in alphas {
            self.train_stage(Stage::VisionAudioSft, Some(alpha))?;
            let (_, ck) = self.load_model(&RunDir::checkpoint_rel(&model_tag(Stage::VisionAudioSft, Some(alpha))))?;
            let preds = decode_all(&ck.model, &prompts, &samples, Modality::Audio)?;
            let tasks: BTreeMap<String, f64> = score(&samples, &preds)?.into_iter().map(|(k, v)| (k, v.accuracy)).collect();
            let average = tasks.values().sum::<f64>() / tasks.len().max(1) as f64;
            rows.push(SweepRow { alpha, tasks, average });
        }
        self.dir.write(&RunDir::sweep_rel(), sweep_csv(&rows).as_bytes())?;
        let json = serde_json::to_string_pretty(&rows).expect("sweep serializes") + "\n";
        self.dir.write(&RunDir::sweep_json_rel(), json.as_bytes())?;
        Ok(rows)
    }
}
