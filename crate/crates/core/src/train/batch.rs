//! Teacher-forced batches: samples → packed sequences → answer-position logits.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{AssembledSequence, Bound, ForwardOutput, Modality, OmniModelState, Prefix, QueryInput, Segment};
use crate::synth::{Sample, Task, TokenId, Vocab, ANSWER, SYS, TRANSCRIBE};
use crate::tensor::Tensor;

/// System prompts and the end token, resolved against one vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompts {
    pub answer: Vec<TokenId>,
    pub transcribe: Vec<TokenId>,
    pub eos: TokenId,
}

impl Prompts {
    pub fn new(vocab: &Vocab) -> Result<Self> {
        Ok(Self {
            answer: vec![vocab.id(SYS)?, vocab.id(ANSWER)?],
            transcribe: vec![vocab.id(SYS)?, vocab.id(TRANSCRIBE)?],
            eos: vocab.eos(),
        })
    }

    /// Transcription samples get the transcribe prompt, everything else the
    /// answer prompt. Teacher and student share it.
    pub fn system(&self, task: Task) -> &[TokenId] {
        if task == Task::Asr {
            &self.transcribe
        } else {
            &self.answer
        }
    }
}

/// Vision features of a sample, if it has a scene.
pub fn features(sample: &Sample) -> Option<Tensor> {
    sample.scene.as_ref().map(|s| s.features())
}

pub fn query<'a>(sample: &'a Sample, modality: Modality) -> Result<QueryInput<'a>> {
    match modality {
        Modality::Text => Ok(QueryInput::Text(&sample.question)),
        Modality::Audio => sample
            .audio
            .as_ref()
            .map(QueryInput::Audio)
            .ok_or_else(|| Error::Invalid(format!("sample {} has no audio query", sample.meta.id))),
    }
}

/// Decoding prefix of a sample; `features` must come from [`features`].
pub fn prefix<'a>(
    prompts: &'a Prompts,
    sample: &'a Sample,
    features: Option<&'a Tensor>,
    modality: Modality,
) -> Result<Prefix<'a>> {
    Ok(Prefix { system: prompts.system(sample.task), vision: features, query: query(sample, modality)? })
}

/// Logits at the answer-prediction positions of a packed forward pass.
///
/// For an answer `y_1..y_n` the rows predict `y_1, …, y_n, <eos>`, so each
/// sample contributes `n + 1` rows.
pub struct ForcedBatch {
    pub logits: Var,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    /// Number of gathered rows per sample.
    pub rows_per_sample: Vec<usize>,
    pub forward: ForwardOutput,
    pub sequences: Vec<AssembledSequence>,
}

pub fn forced_forward(
    model: &OmniModelState,
    tape: &mut Tape,
    bound: &Bound,
    prompts: &Prompts,
    samples: &[&Sample],
    modality: Modality,
    capture_attention: bool,
) -> Result<ForcedBatch> {
    let feats: Vec<Option<Tensor>> = samples.iter().map(|s| features(s)).collect();
    let mut sequences = Vec::with_capacity(samples.len());
    for (s, f) in samples.iter().zip(&feats) {
        let q = query(s, modality)?;
        sequences.push(model.assemble(tape, bound, prompts.system(s.task), f.as_ref(), q, &s.answer)?);
    }
    let forward = model.forward(tape, bound, &sequences, capture_attention)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut rows_per_sample = Vec::with_capacity(samples.len());
    for ((s, seq), span) in samples.iter().zip(&sequences).zip(&forward.spans) {
        let r0 = seq.range(Segment::Response).start;
        for j in 0..=s.answer.len() {
            rows.push(span.start + r0 - 1 + j);
            targets.push(s.answer.get(j).copied().unwrap_or(prompts.eos) as usize);
        }
        rows_per_sample.push(s.answer.len() + 1);
    }
    let logits = tape.embedding(forward.logits, &rows)?;
    let mask = vec![true; rows.len()];
    Ok(ForcedBatch { logits, targets, mask, rows_per_sample, forward, sequences })
}
