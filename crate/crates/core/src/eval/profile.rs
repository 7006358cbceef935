//! Layer-wise attention mass between sequence segments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{AttentionRecord, Modality, OmniModelState, Segment};
use crate::synth::Sample;
use crate::train::{forced_forward, Prompts};

use super::modality_name;

/// Source → destination segment pair. `S` is the system prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    #[serde(rename = "Q->S")]
    QS,
    #[serde(rename = "Q->V")]
    QV,
    #[serde(rename = "Q->Q")]
    QQ,
    #[serde(rename = "R->S")]
    RS,
    #[serde(rename = "R->V")]
    RV,
    #[serde(rename = "R->Q")]
    RQ,
    #[serde(rename = "R->R")]
    RR,
}

impl Channel {
    pub const ALL: [Channel; 7] = [Channel::QS, Channel::QV, Channel::QQ, Channel::RS, Channel::RV, Channel::RQ, Channel::RR];

    pub fn name(self) -> &'static str {
        match self {
            Channel::QS => "Q->S",
            Channel::QV => "Q->V",
            Channel::QQ => "Q->Q",
            Channel::RS => "R->S",
            Channel::RV => "R->V",
            Channel::RQ => "R->Q",
            Channel::RR => "R->R",
        }
    }

    pub fn segments(self) -> (Segment, Segment) {
        use Segment::*;
        match self {
            Channel::QS => (Query, System),
            Channel::QV => (Query, Vision),
            Channel::QQ => (Query, Query),
            Channel::RS => (Response, System),
            Channel::RV => (Response, Vision),
            Channel::RQ => (Response, Query),
            Channel::RR => (Response, Response),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    pub modality: String,
    pub model_tag: String,
    pub n_samples: usize,
    /// How heads are combined before summing segment mass.
    pub head_aggregation: String,
    /// How response positions are obtained.
    pub response_positions: String,
    pub layers: Vec<BTreeMap<Channel, f64>>,
}

impl AttentionProfile {
    pub fn value(&self, layer: usize, channel: Channel) -> f64 {
        self.layers[layer].get(&channel).copied().unwrap_or(0.0)
    }

    pub const CSV_HEADER: &'static str = "layer,channel,modality,value";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for (l, chans) in self.layers.iter().enumerate() {
            for (c, v) in chans {
                let _ = writeln!(out, "{l},{},{},{v:.9}", c.name(), self.modality);
            }
        }
        out
    }
}

/// Per-layer channel masses of one captured sequence.
pub fn sequence_profile(record: &AttentionRecord, segments: &[Segment]) -> Vec<BTreeMap<Channel, f64>> {
    let n = record.len;
    record
        .layers
        .iter()
        .map(|heads| {
            let h = heads.len() as f64;
            let mean = |i: usize, j: usize| heads.iter().map(|w| w[i * n + j]).sum::<f64>() / h;
            let mut out = BTreeMap::new();
            for c in Channel::ALL {
                let (src, dst) = c.segments();
                let rows: Vec<usize> = (0..n).filter(|&i| segments[i] == src).collect();
                if rows.is_empty() {
                    continue;
                }
                let total: f64 =
                    rows.iter().map(|&i| (0..=i).filter(|&j| segments[j] == dst).map(|j| mean(i, j)).sum::<f64>()).sum();
                out.insert(c, total / rows.len() as f64);
            }
            out
        })
        .collect()
}

/// Mean attention-mass profile over the first `n_samples` samples, with
/// response positions teacher-forced on the ground-truth answers.
pub fn attention_profile(
    model: &OmniModelState,
    prompts: &Prompts,
    samples: &[Sample],
    modality: Modality,
    n_samples: usize,
    model_tag: &str,
) -> Result<AttentionProfile> {
    let n = n_samples.min(samples.len());
    if n == 0 {
        return Err(Error::Invalid("attention_profile: no samples".into()));
    }
    let layers = model.config.n_layers;
    let mut sums: Vec<BTreeMap<Channel, (f64, usize)>> = vec![BTreeMap::new(); layers];
    for chunk in samples[..n].chunks(super::DECODE_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut tape = Tape::new();
        let bound = model.bind_frozen(&mut tape);
        let fb = forced_forward(model, &mut tape, &bound, prompts, &refs, modality, true)?;
        for (k, seq) in fb.sequences.iter().enumerate() {
            let record = fb.forward.attention(&tape, k).expect("attention captured");
            for (l, chans) in sequence_profile(&record, &seq.segments).into_iter().enumerate() {
                for (c, v) in chans {
                    let e = sums[l].entry(c).or_insert((0.0, 0));
                    e.0 += v;
                    e.1 += 1;
                }
            }
        }
    }
    Ok(AttentionProfile {
        modality: modality_name(modality).into(),
        model_tag: model_tag.into(),
        n_samples: n,
        head_aggregation: "mean".into(),
        response_positions: "teacher_forced".into(),
        layers: sums.into_iter().map(|m| m.into_iter().map(|(c, (s, k))| (c, s / k as f64)).collect()).collect(),
    })
}

/// Upper half of `n_layers`.
pub fn upper_half(n_layers: usize) -> Range<usize> {
    n_layers / 2..n_layers
}

/// Mean over `layers` (default: upper half) of the absolute Q→V difference.
pub fn profile_distance(a: &AttentionProfile, b: &AttentionProfile, layers: Option<Range<usize>>) -> Result<f64> {
    channel_distance(a, b, Channel::QV, layers)
}

pub fn channel_distance(a: &AttentionProfile, b: &AttentionProfile, channel: Channel, layers: Option<Range<usize>>) -> Result<f64> {
    if a.layers.len() != b.layers.len() {
        return Err(Error::Invalid(format!(
            "profile_distance: {} layers vs {} layers",
            a.layers.len(),
            b.layers.len()
        )));
    }
    let range = layers.unwrap_or_else(|| upper_half(a.layers.len()));
    if range.is_empty() || range.end > a.layers.len() {
        return Err(Error::Invalid(format!("profile_distance: layer range {range:?} is invalid")));
    }
    let n = range.len() as f64;
    Ok(range.map(|l| (a.value(l, channel) - b.value(l, channel)).abs()).sum::<f64>() / n)
}
