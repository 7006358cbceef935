//! Deterministic tri-modal synthetic world: grid scenes, templated questions,
//! pseudo-TTS audio, transcription data and two-choice caption probes.
//!
//! Every sample is drawn from its own random stream derived from
//! `(seed, dataset, index)`, so a dataset is a pure function of the manifest
//! seed and configuration.

mod audio;
mod io;
mod scene;
mod templates;
mod vocab;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use audio::{quantize, AcousticTable, AudioFrames};
pub use io::{dataset_bytes, fnv1a_hex, read_dataset, read_manifest, write_dataset, write_manifest, DATASET_VERSION};
pub use scene::{Cell, Color, Scene, Shape, FEATURE_DIM};
pub use templates::{caption_pair, Caption, Perturbation, Query, Relation, Task};
pub use vocab::{TokenId, Vocab, ANSWER, EOS, SYS, TRANSCRIBE};

/// Maximum number of question tokens.
pub const MAX_QUESTION_TOKENS: usize = 24;
/// Maximum number of answer tokens, excluding the end token.
pub const MAX_ANSWER_TOKENS: usize = 6;

/// One supervised example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub task: Task,
    pub scene: Option<Scene>,
    pub question: Vec<TokenId>,
    /// Voiced question; `None` for text-only datasets.
    pub audio: Option<AudioFrames>,
    pub answer: Vec<TokenId>,
    pub meta: SampleMeta,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmalign: Option<MmAlignMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmAlignMeta {
    pub perturbation: Perturbation,
    /// Whether the correct caption is presented as option A.
    pub correct_first: bool,
    pub caption_correct: Vec<TokenId>,
    pub caption_perturbed: Vec<TokenId>,
}

/// A two-choice probe: which caption better matches the scene?
#[derive(Clone, Debug, PartialEq)]
pub struct MmAlignSample {
    pub scene: Scene,
    pub caption_correct: Vec<TokenId>,
    pub caption_perturbed: Vec<TokenId>,
    pub perturbation: Perturbation,
    pub correct_first: bool,
    pub question: Vec<TokenId>,
    pub audio: Option<AudioFrames>,
    /// `a` or `b`.
    pub answer: TokenId,
}

impl MmAlignSample {
    pub fn to_sample(&self, id: u64) -> Sample {
        Sample {
            task: Task::Mmalign,
            scene: Some(self.scene.clone()),
            question: self.question.clone(),
            audio: self.audio.clone(),
            answer: vec![self.answer],
            meta: SampleMeta {
                id,
                mmalign: Some(MmAlignMeta {
                    perturbation: self.perturbation,
                    correct_first: self.correct_first,
                    caption_correct: self.caption_correct.clone(),
                    caption_perturbed: self.caption_perturbed.clone(),
                }),
            },
        }
    }

    pub fn from_sample(s: &Sample) -> Option<Self> {
        let m = s.meta.mmalign.as_ref()?;
        Some(Self {
            scene: s.scene.clone()?,
            caption_correct: m.caption_correct.clone(),
            caption_perturbed: m.caption_perturbed.clone(),
            perturbation: m.perturbation,
            correct_first: m.correct_first,
            question: s.question.clone(),
            audio: s.audio.clone(),
            answer: *s.answer.first()?,
        })
    }
}

/// Relative frequency of each visual task in a VQA dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMix {
    pub yesno: f64,
    pub color: f64,
    pub shape: f64,
    pub count: f64,
    pub caption: f64,
    pub mmalign: f64,
}

impl TaskMix {
    fn weights(&self) -> [(Task, f64); 6] {
        [
            (Task::Yesno, self.yesno),
            (Task::Color, self.color),
            (Task::Shape, self.shape),
            (Task::Count, self.count),
            (Task::Caption, self.caption),
            (Task::Mmalign, self.mmalign),
        ]
    }

    fn pick<R: Rng>(&self, rng: &mut R) -> Task {
        let w = self.weights();
        let total: f64 = w.iter().map(|(_, v)| v).sum();
        let mut x = rng.random::<f64>() * total;
        for (t, v) in w {
            if x < v {
                return t;
            }
            x -= v;
        }
        w.iter().rev().find(|(_, v)| *v > 0.0).map_or(Task::Yesno, |(t, _)| *t)
    }
}

impl Default for TaskMix {
    fn default() -> Self {
        Self { yesno: 0.25, color: 0.15, shape: 0.15, count: 0.15, caption: 0.1, mmalign: 0.2 }
    }
}

/// The datasets of one experiment, in the order they are consumed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Text transcription (copy) task for the backbone.
    TextPretrain,
    /// Per-cell descriptions for vision-text alignment.
    CaptionAlign,
    /// Text-query VQA for vision-text SFT.
    VqaText,
    /// Audio → transcript pairs for audio-text alignment.
    Asr,
    /// VQA with both text and voiced queries for vision-audio SFT / Self-KD.
    VqaAudioPaired,
    /// Held-out paired VQA for evaluation.
    VqaEval,
    /// Held-out two-choice caption probes.
    Mmalign,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 7] = [
        DatasetKind::TextPretrain,
        DatasetKind::CaptionAlign,
        DatasetKind::VqaText,
        DatasetKind::Asr,
        DatasetKind::VqaAudioPaired,
        DatasetKind::VqaEval,
        DatasetKind::Mmalign,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::TextPretrain => "text_pretrain",
            DatasetKind::CaptionAlign => "caption_align",
            DatasetKind::VqaText => "vqa_text",
            DatasetKind::Asr => "asr",
            DatasetKind::VqaAudioPaired => "vqa_audio_paired",
            DatasetKind::VqaEval => "vqa_eval",
            DatasetKind::Mmalign => "mmalign",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }

    pub fn has_audio(self) -> bool {
        matches!(self, DatasetKind::Asr | DatasetKind::VqaAudioPaired | DatasetKind::VqaEval | DatasetKind::Mmalign)
    }

    fn stream_tag(self) -> u64 {
        0x5EED_0000 + self as u64
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetCounts {
    pub text_pretrain: usize,
    pub caption_align: usize,
    pub vqa_text: usize,
    pub asr: usize,
    pub vqa_audio_paired: usize,
    pub vqa_eval: usize,
    pub mmalign: usize,
}

impl DatasetCounts {
    pub fn get(&self, kind: DatasetKind) -> usize {
        match kind {
            DatasetKind::TextPretrain => self.text_pretrain,
            DatasetKind::CaptionAlign => self.caption_align,
            DatasetKind::VqaText => self.vqa_text,
            DatasetKind::Asr => self.asr,
            DatasetKind::VqaAudioPaired => self.vqa_audio_paired,
            DatasetKind::VqaEval => self.vqa_eval,
            DatasetKind::Mmalign => self.mmalign,
        }
    }
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub grid_size: usize,
    pub k_frames: usize,
    pub audio_dim: usize,
    pub sigma: f64,
    /// Ground-truth fraction of "yes" answers in yes/no questions.
    pub yes_rate: f64,
    /// Inclusive bounds on transcription sentence length.
    pub asr_min_len: usize,
    pub asr_max_len: usize,
    pub task_mix: TaskMix,
    pub counts: DatasetCounts,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid_size: 4,
            k_frames: 3,
            audio_dim: 16,
            sigma: 0.05,
            yes_rate: 0.5,
            asr_min_len: 3,
            asr_max_len: MAX_ANSWER_TOKENS,
            task_mix: TaskMix::default(),
            counts: DatasetCounts {
                text_pretrain: 4000,
                caption_align: 4000,
                vqa_text: 8000,
                asr: 4000,
                vqa_audio_paired: 8000,
                vqa_eval: 1000,
                mmalign: 600,
            },
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(Error::config("grid_size", "must be at least 2"));
        }
        if self.k_frames == 0 {
            return Err(Error::config("k_frames", "must be positive"));
        }
        if self.audio_dim == 0 {
            return Err(Error::config("audio_dim", "must be positive"));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::config("sigma", "must be a finite value ≥ 0"));
        }
        if !(0.0..=1.0).contains(&self.yes_rate) {
            return Err(Error::config("yes_rate", "must lie in [0, 1]"));
        }
        if self.asr_min_len == 0 || self.asr_min_len > self.asr_max_len || self.asr_max_len > MAX_ANSWER_TOKENS {
            return Err(Error::config(
                "asr_min_len",
                format!("need 1 ≤ asr_min_len ≤ asr_max_len ≤ {MAX_ANSWER_TOKENS}"),
            ));
        }
        let w = self.task_mix.weights();
        if w.iter().any(|(_, v)| !(*v >= 0.0)) || w.iter().all(|(_, v)| *v == 0.0) {
            return Err(Error::config("task_mix", "weights must be ≥ 0 and not all zero"));
        }
        for kind in DatasetKind::ALL {
            if self.counts.get(kind) == 0 {
                return Err(Error::config(format!("counts.{}", kind.name()), "must be positive"));
            }
        }
        if self.counts.mmalign % 2 != 0 {
            return Err(Error::config("counts.mmalign", "must be even (half relation, half attribute)"));
        }
        Ok(())
    }
}

/// Everything needed to regenerate or interpret the datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub vocab: Vocab,
    pub signatures: Vec<Vec<f64>>,
    pub k_frames: usize,
    pub sigma: f64,
    pub config: SynthConfig,
    pub counts: BTreeMap<String, usize>,
    /// FNV-1a of each dataset file, filled in when the files are written.
    pub files: BTreeMap<String, String>,
    pub checksum: String,
}

impl DatasetManifest {
    pub fn build(seed: u64, config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocab::standard(config.grid_size);
        let mut rng = stream(seed, 0xAC0_u64, 0);
        let table = AcousticTable::generate(&mut rng, vocab.len(), config.audio_dim, config.k_frames, config.sigma);
        let counts = DatasetKind::ALL.iter().map(|k| (k.name().to_string(), config.counts.get(*k))).collect();
        let mut m = Self {
            version: DATASET_VERSION,
            seed,
            vocab,
            signatures: table.signatures,
            k_frames: config.k_frames,
            sigma: config.sigma,
            config: config.clone(),
            counts,
            files: BTreeMap::new(),
            checksum: String::new(),
        };
        m.checksum = m.compute_checksum();
        Ok(m)
    }

    pub fn acoustic_table(&self) -> AcousticTable {
        AcousticTable { k_frames: self.k_frames, sigma: self.sigma, signatures: self.signatures.clone() }
    }

    /// FNV-1a over the canonical serialization with an empty checksum field.
    pub fn compute_checksum(&self) -> String {
        let mut body = self.clone();
        body.checksum.clear();
        fnv1a_hex(&serde_json::to_vec(&body).expect("manifest serializes"))
    }

    pub fn generate(&self, kind: DatasetKind) -> Result<Vec<Sample>> {
        generate_dataset(self, kind)
    }
}

/// Independent random stream for `(seed, tag, index)`.
pub fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(tag)));
    rng.set_stream(index);
    rng
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn encode(vocab: &Vocab, words: &[String]) -> Result<Vec<TokenId>> {
    words.iter().map(|w| vocab.id(w)).collect()
}

/// Scene plus a question of `task`, resampling scenes that cannot support it.
fn scene_question<R: Rng>(rng: &mut R, task: Task, cfg: &SynthConfig) -> (Scene, Query) {
    loop {
        let scene = Scene::generate(rng, cfg.grid_size);
        if let Some(q) = Query::sample(task, &scene, cfg.yes_rate, rng) {
            return (scene, q);
        }
    }
}

fn vqa_sample<R: Rng>(rng: &mut R, task: Task, m: &DatasetManifest, id: u64, voiced: bool) -> Result<Sample> {
    let (scene, query) = scene_question(rng, task, &m.config);
    let question = query.tokens(&m.vocab)?;
    let answer = encode(&m.vocab, &query.answer(&scene).expect("sampled queries are answerable"))?;
    let audio = if voiced { Some(m.acoustic_table().synth_audio(&question, rng)?) } else { None };
    let meta = match query {
        Query::Choice { first, second } => {
            let correct_first = first.holds(&scene);
            let (good, bad) = if correct_first { (first, second) } else { (second, first) };
            let kind = if good.subject == bad.object && good.object == bad.subject {
                Perturbation::Relation
            } else {
                Perturbation::Attribute
            };
            Some(MmAlignMeta {
                perturbation: kind,
                correct_first,
                caption_correct: words_to_ids(&m.vocab, &good.words())?,
                caption_perturbed: words_to_ids(&m.vocab, &bad.words())?,
            })
        }
        _ => None,
    };
    Ok(Sample { task: query.task(), scene: Some(scene), question, audio, answer, meta: SampleMeta { id, mmalign: meta } })
}

fn words_to_ids(vocab: &Vocab, words: &[&str]) -> Result<Vec<TokenId>> {
    words.iter().map(|w| vocab.id(w)).collect()
}

/// Random transcription sentence with optional audio.
fn transcript_sample<R: Rng>(rng: &mut R, m: &DatasetManifest, id: u64, voiced: bool) -> Result<Sample> {
    let content = m.vocab.content_ids();
    let len = rng.random_range(m.config.asr_min_len..=m.config.asr_max_len);
    let words: Vec<TokenId> = (0..len).map(|_| content[rng.random_range(0..content.len())]).collect();
    let audio = if voiced { Some(m.acoustic_table().synth_audio(&words, rng)?) } else { None };
    Ok(Sample {
        task: Task::Asr,
        scene: None,
        question: words.clone(),
        audio,
        answer: words,
        meta: SampleMeta { id, mmalign: None },
    })
}

/// Generates `n` MMAlign probes: the first half relation perturbations, the
/// second half attribute perturbations; within each half exactly half (±1)
/// present the correct caption as option A.
pub fn gen_mmalign(m: &DatasetManifest, n: usize, tag: u64) -> Result<Vec<MmAlignSample>> {
    if n % 2 != 0 {
        return Err(Error::config("counts.mmalign", "must be even"));
    }
    let half = n / 2;
    let mut order_rng = stream(m.seed, tag, u64::MAX);
    let mut order = Vec::with_capacity(n);
    for _ in 0..2 {
        let mut bits: Vec<bool> = (0..half).map(|i| i < half.div_ceil(2)).collect();
        bits.shuffle(&mut order_rng);
        order.extend(bits);
    }
    let table = m.acoustic_table();
    (0..n)
        .map(|i| {
            let mut rng = stream(m.seed, tag, i as u64);
            let kind = if i < half { Perturbation::Relation } else { Perturbation::Attribute };
            let (scene, good, bad) = loop {
                let scene = Scene::generate(&mut rng, m.config.grid_size);
                if let Some((good, bad)) = caption_pair(&scene, kind, &mut rng) {
                    break (scene, good, bad);
                }
            };
            let correct_first = order[i];
            let (first, second) = if correct_first { (good, bad) } else { (bad, good) };
            let question = Query::Choice { first, second }.tokens(&m.vocab)?;
            let audio = Some(table.synth_audio(&question, &mut rng)?);
            Ok(MmAlignSample {
                caption_correct: words_to_ids(&m.vocab, &good.words())?,
                caption_perturbed: words_to_ids(&m.vocab, &bad.words())?,
                scene,
                perturbation: kind,
                correct_first,
                question,
                audio,
                answer: m.vocab.id_of(if correct_first { "a" } else { "b" }),
            })
        })
        .collect()
}

/// Transcription dataset: random sentences voiced by the pseudo-TTS.
pub fn gen_asr_dataset(m: &DatasetManifest, n: usize, tag: u64) -> Result<Vec<Sample>> {
    (0..n).map(|i| transcript_sample(&mut stream(m.seed, tag, i as u64), m, i as u64, true)).collect()
}

fn generate_dataset(m: &DatasetManifest, kind: DatasetKind) -> Result<Vec<Sample>> {
    let n = m.config.counts.get(kind);
    let tag = kind.stream_tag();
    match kind {
        DatasetKind::Mmalign => {
            Ok(gen_mmalign(m, n, tag)?.iter().enumerate().map(|(i, s)| s.to_sample(i as u64)).collect())
        }
        DatasetKind::Asr => gen_asr_dataset(m, n, tag),
        DatasetKind::TextPretrain => {
            (0..n).map(|i| transcript_sample(&mut stream(m.seed, tag, i as u64), m, i as u64, false)).collect()
        }
        DatasetKind::CaptionAlign => (0..n)
            .map(|i| vqa_sample(&mut stream(m.seed, tag, i as u64), Task::Caption, m, i as u64, false))
            .collect(),
        DatasetKind::VqaText | DatasetKind::VqaAudioPaired | DatasetKind::VqaEval => (0..n)
            .map(|i| {
                let mut rng = stream(m.seed, tag, i as u64);
                let task = m.config.task_mix.pick(&mut rng);
                vqa_sample(&mut rng, task, m, i as u64, kind.has_audio())
            })
            .collect(),
    }
}

/// Re-derives a sample's answer from its scene and question tokens.
pub fn recompute_answer(sample: &Sample, vocab: &Vocab) -> Option<Vec<TokenId>> {
    if sample.task == Task::Asr {
        return Some(sample.question.clone());
    }
    let words: Vec<&str> = sample.question.iter().map(|&t| vocab.word(t)).collect::<Option<_>>()?;
    let query = Query::parse(&words)?;
    let answer = query.answer(sample.scene.as_ref()?)?;
    answer.iter().map(|w| vocab.id(w).ok()).collect()
}
