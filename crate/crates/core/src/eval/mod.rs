//! Accuracy, modality gap, yes-ratio bias, MMAlign and attention profiles.

mod profile;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Modality, OmniModelState};
use crate::synth::{Perturbation, Sample, Task, TokenId, Vocab, MAX_ANSWER_TOKENS};
use crate::train::batch::{features, prefix};
use crate::train::Prompts;

pub use profile::{attention_profile, profile_distance, AttentionProfile, Channel};

/// Prefixes decoded per packed forward pass.
pub const DECODE_BATCH: usize = 64;

pub fn modality_name(m: Modality) -> &'static str {
    match m {
        Modality::Text => "text",
        Modality::Audio => "audio",
    }
}

/// Greedy answers (end token trimmed) for every sample.
pub fn decode_all(model: &OmniModelState, prompts: &Prompts, samples: &[Sample], modality: Modality) -> Result<Vec<Vec<TokenId>>> {
    let feats: Vec<_> = samples.iter().map(features).collect();
    let mut out = Vec::with_capacity(samples.len());
    for (chunk, fchunk) in samples.chunks(DECODE_BATCH).zip(feats.chunks(DECODE_BATCH)) {
        let prefixes =
            chunk.iter().zip(fchunk).map(|(s, f)| prefix(prompts, s, f.as_ref(), modality)).collect::<Result<Vec<_>>>()?;
        out.extend(model.generate_greedy(&prefixes, prompts.eos, MAX_ANSWER_TOKENS + 1)?);
    }
    Ok(out)
}

/// Sample count and percent correct for one task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub n: usize,
    pub accuracy: f64,
}

/// Exact-match accuracy per task tag, in percent.
pub fn score(samples: &[Sample], predictions: &[Vec<TokenId>]) -> Result<BTreeMap<String, TaskScore>> {
    if samples.len() != predictions.len() {
        return Err(Error::Invalid(format!("{} predictions for {} samples", predictions.len(), samples.len())));
    }
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (s, p) in samples.iter().zip(predictions) {
        let e = tally.entry(s.task.name().to_string()).or_default();
        e.0 += 1;
        e.1 += usize::from(*p == s.answer);
    }
    Ok(tally.into_iter().map(|(k, (n, c))| (k, TaskScore { n, accuracy: 100.0 * c as f64 / n as f64 })).collect())
}

pub fn eval_accuracy(
    model: &OmniModelState,
    prompts: &Prompts,
    samples: &[Sample],
    modality: Modality,
) -> Result<BTreeMap<String, TaskScore>> {
    let preds = decode_all(model, prompts, samples, modality)?;
    score(samples, &preds)
}

/// Unweighted mean over tasks.
pub fn average(scores: &BTreeMap<String, f64>) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.values().sum::<f64>() / scores.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub per_task: BTreeMap<String, f64>,
    pub average: f64,
}

/// Per-key `text − audio` and the mean of those gaps.
pub fn compute_gap(text: &BTreeMap<String, f64>, audio: &BTreeMap<String, f64>) -> Result<GapReport> {
    if !text.keys().eq(audio.keys()) {
        let only_text: Vec<&String> = text.keys().filter(|k| !audio.contains_key(*k)).collect();
        let only_audio: Vec<&String> = audio.keys().filter(|k| !text.contains_key(*k)).collect();
        return Err(Error::Invalid(format!(
            "compute_gap: task keys differ (text only {only_text:?}, audio only {only_audio:?})"
        )));
    }
    let per_task: BTreeMap<String, f64> = text.iter().map(|(k, t)| (k.clone(), t - audio[k])).collect();
    let average = average(&per_task);
    Ok(GapReport { per_task, average })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub n: usize,
    pub text: f64,
    pub audio: f64,
    pub gap: f64,
}

/// Text and audio accuracy on identical samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub tasks: BTreeMap<String, TaskResult>,
    pub text_average: f64,
    pub audio_average: f64,
    pub gap_average: f64,
}

impl EvalResult {
    pub fn from_scores(text: &BTreeMap<String, TaskScore>, audio: &BTreeMap<String, TaskScore>) -> Result<Self> {
        let t: BTreeMap<String, f64> = text.iter().map(|(k, v)| (k.clone(), v.accuracy)).collect();
        let a: BTreeMap<String, f64> = audio.iter().map(|(k, v)| (k.clone(), v.accuracy)).collect();
        let gap = compute_gap(&t, &a)?;
        let tasks = text
            .iter()
            .map(|(k, v)| (k.clone(), TaskResult { n: v.n, text: t[k], audio: a[k], gap: gap.per_task[k] }))
            .collect();
        Ok(Self { tasks, text_average: average(&t), audio_average: average(&a), gap_average: gap.average })
    }
}

/// Fraction of "yes" answers under one query modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityBias {
    pub predicted_yes: f64,
    /// Decodes that were neither "yes" nor "no" (counted as "no").
    pub unparsed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub dataset: String,
    pub n: usize,
    pub ground_truth_yes: f64,
    pub predicted: BTreeMap<String, ModalityBias>,
}

/// Yes-ratio of `predictions` over the yes/no samples among `samples`.
pub fn yes_ratio(samples: &[Sample], predictions: &[Vec<TokenId>], vocab: &Vocab) -> Result<(usize, f64, ModalityBias)> {
    let (yes, no) = (vocab.id("yes")?, vocab.id("no")?);
    let mut n = 0;
    let (mut gt, mut pred, mut unparsed) = (0, 0, 0);
    for (s, p) in samples.iter().zip(predictions).filter(|(s, _)| s.task == Task::Yesno) {
        n += 1;
        gt += usize::from(s.answer == [yes]);
        match p.as_slice() {
            [t] if *t == yes => pred += 1,
            [t] if *t == no => {}
            _ => unparsed += 1,
        }
    }
    let frac = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    Ok((n, frac(gt), ModalityBias { predicted_yes: frac(pred), unparsed }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmAlignResult {
    pub n_relation: usize,
    pub n_attribute: usize,
    pub relation: f64,
    pub attribute: f64,
    /// Mean of the relation and attribute accuracies.
    pub average: f64,
}

/// Scores two-choice probes; anything but the stored option letter is wrong.
pub fn mmalign_score(samples: &[Sample], predictions: &[Vec<TokenId>]) -> Result<MmAlignResult> {
    let mut counts = [(0usize, 0usize); 2];
    for (s, p) in samples.iter().zip(predictions) {
        let meta = s
            .meta
            .mmalign
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("sample {} is not an MMAlign probe", s.meta.id)))?;
        let slot = usize::from(meta.perturbation == Perturbation::Attribute);
        counts[slot].0 += 1;
        counts[slot].1 += usize::from(*p == s.answer);
    }
    let pct = |(n, c): (usize, usize)| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 };
    let (relation, attribute) = (pct(counts[0]), pct(counts[1]));
    Ok(MmAlignResult {
        n_relation: counts[0].0,
        n_attribute: counts[1].0,
        relation,
        attribute,
        average: mmalign_average(relation, attribute),
    })
}

pub fn mmalign_average(relation: f64, attribute: f64) -> f64 {
    (relation + attribute) / 2.0
}

pub fn mmalign_eval(model: &OmniModelState, prompts: &Prompts, samples: &[Sample], modality: Modality) -> Result<MmAlignResult> {
    let preds = decode_all(model, prompts, samples, modality)?;
    mmalign_score(samples, &preds)
}

