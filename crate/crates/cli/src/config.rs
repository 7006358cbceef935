//! The experiment config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use selfkd_core::model::ModelConfig;
use selfkd_core::synth::{DatasetKind, SynthConfig, Vocab, FEATURE_DIM};
use selfkd_core::train::{KdMode, Stage, StageConfig};

use crate::error::CliError;

/// Environment variable that replaces `output_dir` when set.
pub const OUTPUT_ROOT_ENV: &str = "SELFKD_OUTPUT_ROOT";

/// One training stage and the datasets it consumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub datasets: Vec<DatasetKind>,
    pub config: StageConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    /// Paired VQA set scored under text and audio queries.
    pub vqa: DatasetKind,
    pub mmalign: DatasetKind,
    /// Samples per attention profile.
    pub profile_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportOptions {
    /// KD ratio of the conventional-SFT model.
    pub sft_alpha: f64,
    /// KD ratio of the Self-KD model.
    pub kd_alpha: f64,
    /// Ablation grid; must contain both of the above.
    pub alphas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub stages: Vec<StagePlan>,
    pub eval: EvalOptions,
    pub output_dir: PathBuf,
    pub report: ReportOptions,
}

fn stage_plan(stage: Stage, datasets: Vec<DatasetKind>, epochs: usize, base_lr: f64, seed: u64) -> StagePlan {
    StagePlan { datasets, config: StageConfig { epochs, base_lr, seed, ..StageConfig::default_for(stage) } }
}

impl ExperimentConfig {
    /// The desk-scale experiment: 4-layer model, 4 heads, ~8k paired VQA samples.
    pub fn desk(seed: u64) -> Self {
        let synth = SynthConfig::default();
        let vocab = Vocab::standard(synth.grid_size);
        let model = ModelConfig {
            vocab_size: vocab.len(),
            d_model: 32,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 48,
            vision_dim: FEATURE_DIM,
            audio_dim: synth.audio_dim,
            k_frames: synth.k_frames,
            init_scale: 0.5,
            init_seed: seed,
        };
        use DatasetKind::*;
        let stages = vec![
            stage_plan(Stage::TextPretrain, vec![TextPretrain], 4, 4e-3, seed),
            stage_plan(Stage::VisionTextAlign, vec![CaptionAlign], 1, 4e-3, seed),
            stage_plan(Stage::VisionTextSft, vec![VqaText, TextPretrain], 16, 4e-3, seed),
            stage_plan(Stage::AudioTextAlign, vec![Asr], 2, 3e-3, seed),
            StagePlan {
                datasets: vec![VqaAudioPaired],
                config: StageConfig {
                    epochs: 1,
                    base_lr: 3e-4,
                    seed,
                    alpha: 0.75,
                    kd_mode: KdMode::TokenKl,
                    temperature: 4.0,
                    ..StageConfig::default_for(Stage::VisionAudioSft)
                },
            },
        ];
        Self {
            seed,
            synth,
            model,
            stages,
            eval: EvalOptions { vqa: VqaEval, mmalign: Mmalign, profile_samples: 200 },
            output_dir: PathBuf::from(format!("runs/desk-seed{seed}")),
            report: ReportOptions { sft_alpha: 0.0, kd_alpha: 0.75, alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0] },
        }
    }

    /// A seconds-scale variant of [`desk`](Self::desk) for smoke runs.
    pub fn tiny(seed: u64) -> Self {
        let mut c = Self::desk(seed);
        c.synth.counts.text_pretrain = 64;
        c.synth.counts.caption_align = 64;
        c.synth.counts.vqa_text = 96;
        c.synth.counts.asr = 64;
        c.synth.counts.vqa_audio_paired = 64;
        c.synth.counts.vqa_eval = 40;
        c.synth.counts.mmalign = 20;
        c.model.d_model = 16;
        c.model.n_layers = 2;
        c.model.n_heads = 2;
        for s in &mut c.stages {
            s.config.epochs = 1;
        }
        c.eval.profile_samples = 8;
        c.report.alphas = vec![0.0, 0.75];
        c.output_dir = PathBuf::from(format!("runs/tiny-seed{seed}"));
        c
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Run directory: `$SELFKD_OUTPUT_ROOT` if set, else `output_dir`.
    pub fn run_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root),
            _ => self.output_dir.clone(),
        }
    }

    pub fn plan(&self, stage: Stage) -> Option<&StagePlan> {
        self.stages.iter().find(|p| p.config.stage == stage)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: selfkd_core::Error| CliError::Config(e.to_string());
        let field = |name: &str, reason: String| CliError::Config(format!("invalid config field `{name}`: {reason}"));
        self.synth.validate().map_err(|e| CliError::Config(format!("synth: {e}")))?;
        self.model.validate().map_err(cfg)?;
        let vocab = Vocab::standard(self.synth.grid_size).len();
        if self.model.vocab_size != vocab {
            return Err(field("model.vocab_size", format!("{} does not match the generated vocabulary ({vocab})", self.model.vocab_size)));
        }
        if self.model.audio_dim != self.synth.audio_dim {
            return Err(field("model.audio_dim", format!("must equal synth.audio_dim = {}", self.synth.audio_dim)));
        }
        if self.model.k_frames != self.synth.k_frames {
            return Err(field("model.k_frames", format!("must equal synth.k_frames = {}", self.synth.k_frames)));
        }
        if self.model.vision_dim != FEATURE_DIM {
            return Err(field("model.vision_dim", format!("must equal the scene feature width {FEATURE_DIM}")));
        }
        let mut last: Option<Stage> = None;
        for (i, plan) in self.stages.iter().enumerate() {
            let stage = plan.config.stage;
            if let Some(prev) = last {
                if stage <= prev {
                    return Err(field(
                        &format!("stages[{i}].config.stage"),
                        format!("{stage} cannot follow {prev}; stages run in the order {}", stage_order()),
                    ));
                }
            }
            last = Some(stage);
            plan.config.validate().map_err(cfg)?;
            if plan.datasets.is_empty() {
                return Err(field(&format!("stages.{stage}.datasets"), "must name at least one dataset".into()));
            }
            if !plan.datasets.contains(&stage.dataset()) {
                return Err(field(&format!("stages.{stage}.datasets"), format!("must include {}", stage.dataset())));
            }
            if let Some(d) = plan.datasets.iter().find(|d| matches!(d, DatasetKind::VqaEval | DatasetKind::Mmalign)) {
                return Err(field(&format!("stages.{stage}.datasets"), format!("{d} is held out for evaluation")));
            }
        }
        if self.eval.vqa != DatasetKind::VqaEval && self.eval.vqa != DatasetKind::VqaAudioPaired {
            return Err(field("eval.vqa", "must be a paired text/audio VQA set".into()));
        }
        if self.eval.mmalign != DatasetKind::Mmalign {
            return Err(field("eval.mmalign", "must be mmalign".into()));
        }
        if self.eval.profile_samples == 0 {
            return Err(field("eval.profile_samples", "must be positive".into()));
        }
        let r = &self.report;
        for (name, a) in [("report.sft_alpha", r.sft_alpha), ("report.kd_alpha", r.kd_alpha)] {
            if !(0.0..=1.0).contains(&a) {
                return Err(field(name, format!("{a} is outside [0, 1]")));
            }
            if !r.alphas.contains(&a) {
                return Err(field(name, format!("{a} is missing from report.alphas")));
            }
        }
        if let Some(a) = r.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(field("report.alphas", format!("{a} is outside [0, 1]")));
        }
        Ok(())
    }
}

fn stage_order() -> String {
    Stage::ALL.iter().map(|s| s.name()).collect::<Vec<_>>().join(" → ")
}
