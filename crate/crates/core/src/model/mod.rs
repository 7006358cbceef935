//! The tiny omnimodal causal transformer.
//!
//! One decoder backbone is shared by two input paths. The teacher path embeds
//! the query with the text embedding; the student path encodes the voiced
//! query with the audio encoder. Both paths see the same system prompt, the
//! same vision tokens and the same response tokens, laid out as
//! `system | vision | query | response`.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionWeights, Span, Tape, Var};
use crate::error::{Error, Result};
use crate::synth::{AudioFrames, TokenId};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    /// Width of a vision feature row.
    pub vision_dim: usize,
    /// Width of one audio frame.
    pub audio_dim: usize,
    /// Audio frames per text token.
    pub k_frames: usize,
    /// Standard deviation of the token and position embedding init.
    pub init_scale: f64,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
            ("vision_dim", self.vision_dim),
            ("audio_dim", self.audio_dim),
            ("k_frames", self.k_frames),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{name}"), "must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config("model.n_heads", format!("must divide d_model = {}", self.d_model)));
        }
        if !(self.init_scale > 0.0) {
            return Err(Error::config("model.init_scale", "must be positive"));
        }
        Ok(())
    }
}

/// Parameter groups, the unit of freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    TextEmbedding,
    VisionEncoder,
    VisionProjector,
    AudioEncoder,
    AudioProjector,
    Backbone,
    OutputHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::TextEmbedding,
        ParamGroup::VisionEncoder,
        ParamGroup::VisionProjector,
        ParamGroup::AudioEncoder,
        ParamGroup::AudioProjector,
        ParamGroup::Backbone,
        ParamGroup::OutputHead,
    ];

    /// Groups read by the vision-text (teacher) path.
    pub const TEACHER: [ParamGroup; 5] = [
        ParamGroup::TextEmbedding,
        ParamGroup::VisionEncoder,
        ParamGroup::VisionProjector,
        ParamGroup::Backbone,
        ParamGroup::OutputHead,
    ];

    /// Groups read by the vision-audio (student) path.
    pub const STUDENT: [ParamGroup; 7] = ParamGroup::ALL;

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::TextEmbedding => "text_embedding",
            ParamGroup::VisionEncoder => "vision_encoder",
            ParamGroup::VisionProjector => "vision_projector",
            ParamGroup::AudioEncoder => "audio_encoder",
            ParamGroup::AudioProjector => "audio_projector",
            ParamGroup::Backbone => "backbone",
            ParamGroup::OutputHead => "output_head",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Every parameter of the model plus per-group trainability.
#[derive(Clone, Debug, PartialEq)]
pub struct OmniModelState {
    pub config: ModelConfig,
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
    trainable: BTreeMap<ParamGroup, bool>,
}

/// Position labels of an assembled sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    System,
    Vision,
    Query,
    Response,
}

/// Query segment input: text ids (teacher) or audio frames (student).
#[derive(Clone, Copy, Debug)]
pub enum QueryInput<'a> {
    Text(&'a [TokenId]),
    Audio(&'a AudioFrames),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Text,
    Audio,
}

/// Embedded tokens (without positions) and their segment labels.
#[derive(Clone, Debug)]
pub struct AssembledSequence {
    pub embeddings: Var,
    pub segments: Vec<Segment>,
}

impl AssembledSequence {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Position range of `segment` (empty range when absent).
    pub fn range(&self, segment: Segment) -> std::ops::Range<usize> {
        let start = self.segments.iter().position(|&s| s == segment);
        match start {
            Some(a) => a..a + self.segments.iter().filter(|&&s| s == segment).count(),
            None => {
                let at = self.segments.iter().position(|&s| s > segment).unwrap_or(self.len());
                at..at
            }
        }
    }
}

/// Post-softmax attention of one sequence: `layers[l][h]` is `len × len`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub len: usize,
    pub layers: Vec<Vec<Vec<f64>>>,
}

impl AttentionRecord {
    pub fn weight(&self, layer: usize, head: usize, row: usize, col: usize) -> f64 {
        self.layers[layer][head][row * self.len + col]
    }
}

/// Output of a packed forward pass.
#[derive(Debug)]
pub struct ForwardOutput {
    /// `[Σ len × V]` logits; row `i` of a sequence predicts its token `i + 1`.
    pub logits: Var,
    pub spans: Vec<Span>,
    attention: Vec<Var>,
}

impl ForwardOutput {
    /// Attention record of the `seq`-th packed sequence, when captured.
    pub fn attention(&self, tape: &Tape, seq: usize) -> Option<AttentionRecord> {
        if self.attention.is_empty() {
            return None;
        }
        let len = self.spans[seq].len;
        let layers = self
            .attention
            .iter()
            .map(|&v| {
                let w: &AttentionWeights = tape.attention_weights(v).expect("attention node");
                (0..w.n_heads).map(|h| w.block(seq, h).to_vec()).collect()
            })
            .collect();
        Some(AttentionRecord { len, layers })
    }
}

/// Parameters registered on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps vars registered elsewhere, in [`OmniModelState::params`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    Ok(tape.add_bias(h, b)?)
}

impl OmniModelState {
    /// Freshly initialized model: N(0, init_scale²) embeddings, N(0, 1/fan_in)
    /// weight matrices, zero biases, unit layer-norm gains. Every group starts
    /// trainable.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let normal = Normal::new(0.0, config.init_scale).map_err(|e| Error::config("model.init_scale", e.to_string()))?;
        let mut params = Vec::new();
        let d = config.d_model;
        let mut add = |name: String, group: ParamGroup, shape: &[usize], kind: Init| {
            let value = match kind {
                Init::Gauss => Tensor::from_fn(shape, |_| normal.sample(&mut rng)),
                Init::FanIn => {
                    let scale = 1.0 / (shape[0] as f64).sqrt();
                    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
                }
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::ones(shape),
            };
            params.push(Param { name, group, value });
        };
        use Init::*;
        use ParamGroup::*;
        add("tok_emb".into(), TextEmbedding, &[config.vocab_size, d], Gauss);
        for (prefix, enc, proj, input) in [
            ("vis", VisionEncoder, VisionProjector, config.vision_dim),
            ("aud", AudioEncoder, AudioProjector, config.audio_dim * config.k_frames),
        ] {
            add(format!("{prefix}.fc1.w"), enc, &[input, d], FanIn);
            add(format!("{prefix}.fc1.b"), enc, &[d], Zeros);
            add(format!("{prefix}.fc2.w"), enc, &[d, d], FanIn);
            add(format!("{prefix}.fc2.b"), enc, &[d], Zeros);
            add(format!("{prefix}.proj.w"), proj, &[d, d], FanIn);
            add(format!("{prefix}.proj.b"), proj, &[d], Zeros);
        }
        add("pos_emb".into(), Backbone, &[config.max_seq_len, d], Gauss);
        for l in 0..config.n_layers {
            add(format!("h{l}.ln1.g"), Backbone, &[d], Ones);
            add(format!("h{l}.ln1.b"), Backbone, &[d], Zeros);
            add(format!("h{l}.attn.qkv.w"), Backbone, &[d, 3 * d], FanIn);
            add(format!("h{l}.attn.out.w"), Backbone, &[d, d], FanIn);
            add(format!("h{l}.attn.out.b"), Backbone, &[d], Zeros);
            add(format!("h{l}.ln2.g"), Backbone, &[d], Ones);
            add(format!("h{l}.ln2.b"), Backbone, &[d], Zeros);
            add(format!("h{l}.mlp.up.w"), Backbone, &[d, 4 * d], FanIn);
            add(format!("h{l}.mlp.up.b"), Backbone, &[4 * d], Zeros);
            add(format!("h{l}.mlp.down.w"), Backbone, &[4 * d, d], FanIn);
            add(format!("h{l}.mlp.down.b"), Backbone, &[d], Zeros);
        }
        add("ln_f.g".into(), Backbone, &[d], Ones);
        add("ln_f.b".into(), Backbone, &[d], Zeros);
        add("head.w".into(), OutputHead, &[d, config.vocab_size], FanIn);
        add("head.b".into(), OutputHead, &[config.vocab_size], Zeros);
        Self::from_params(config, params, ParamGroup::ALL.iter().map(|&g| (g, true)).collect())
    }

    pub(crate) fn from_params(config: ModelConfig, params: Vec<Param>, trainable: BTreeMap<ParamGroup, bool>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, p) in params.iter().enumerate() {
            if index.insert(p.name.clone(), i).is_some() {
                return Err(Error::format("params", format!("duplicate parameter {}", p.name)));
            }
        }
        Ok(Self { config, params, index, trainable })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        self.trainable.get(&group).copied().unwrap_or(false)
    }

    pub fn trainable_groups(&self) -> Vec<ParamGroup> {
        ParamGroup::ALL.into_iter().filter(|&g| self.is_trainable(g)).collect()
    }

    /// Marks exactly `groups` trainable.
    pub fn set_trainable(&mut self, groups: &[ParamGroup]) {
        for g in ParamGroup::ALL {
            self.trainable.insert(g, groups.contains(&g));
        }
    }

    /// FNV-1a over the raw bytes of every parameter in `group`.
    pub fn group_checksum(&self, group: ParamGroup) -> String {
        let mut bytes = Vec::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            bytes.extend(p.name.as_bytes());
            for v in p.value.data() {
                bytes.extend(v.to_le_bytes());
            }
        }
        crate::synth::fnv1a_hex(&bytes)
    }

    /// Checksum over all currently trainable groups.
    pub fn trainable_checksum(&self) -> String {
        let sums: Vec<String> = self.trainable_groups().iter().map(|&g| self.group_checksum(g)).collect();
        crate::synth::fnv1a_hex(sums.join(",").as_bytes())
    }

    /// Registers parameters on `tape`; trainable groups become gradient leaves.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if self.is_trainable(p.group) {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Registers every parameter as a constant (evaluation).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.params.iter().map(|p| tape.constant(p.value.clone())).collect() }
    }

    /// Position of a named parameter in [`Bound::vars`].
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    fn v(&self, bound: &Bound, name: &str) -> Var {
        bound.vars[self.index[name]]
    }

    fn mlp_encoder(&self, tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let h = linear(tape, x, self.v(bound, &format!("{prefix}.fc1.w")), self.v(bound, &format!("{prefix}.fc1.b")))?;
        let h = tape.gelu(h);
        let h = linear(tape, h, self.v(bound, &format!("{prefix}.fc2.w")), self.v(bound, &format!("{prefix}.fc2.b")))?;
        linear(tape, h, self.v(bound, &format!("{prefix}.proj.w")), self.v(bound, &format!("{prefix}.proj.b")))
    }

    /// Scene features `[G² × F]` → one token per cell `[G² × d]`.
    pub fn encode_vision(&self, tape: &mut Tape, bound: &Bound, features: &Tensor) -> Result<Var> {
        if features.shape().len() != 2 || features.cols() != self.config.vision_dim {
            return Err(crate::TensorError::ShapeMismatch {
                op: "encode_vision",
                left: features.shape().to_vec(),
                right: vec![self.config.vision_dim],
            }
            .into());
        }
        let x = tape.constant(features.clone());
        self.mlp_encoder(tape, bound, "vis", x)
    }

    /// `K·T` audio frames → `T` tokens, one per group of K consecutive frames.
    pub fn encode_audio(&self, tape: &mut Tape, bound: &Bound, frames: &AudioFrames) -> Result<Var> {
        let k = self.config.k_frames;
        let n = frames.n_frames();
        if frames.dim != self.config.audio_dim || n == 0 || n % k != 0 {
            return Err(Error::Invalid(format!(
                "encode_audio: {n} frames of width {} cannot be grouped by K = {k} at width {}",
                frames.dim, self.config.audio_dim
            )));
        }
        let grouped = Tensor::new(vec![n / k, k * frames.dim], frames.data.clone())?;
        let x = tape.constant(grouped);
        self.mlp_encoder(tape, bound, "aud", x)
    }

    /// Lays out `system | vision | query | response`.
    pub fn assemble(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        system: &[TokenId],
        vision: Option<&Tensor>,
        query: QueryInput<'_>,
        response: &[TokenId],
    ) -> Result<AssembledSequence> {
        let emb = self.v(bound, "tok_emb");
        let ids = |ids: &[TokenId]| ids.iter().map(|&i| i as usize).collect::<Vec<_>>();
        let mut parts = Vec::new();
        let mut segments = Vec::new();
        if !system.is_empty() {
            parts.push(tape.embedding(emb, &ids(system))?);
            segments.extend(std::iter::repeat_n(Segment::System, system.len()));
        }
        if let Some(f) = vision {
            let v = self.encode_vision(tape, bound, f)?;
            segments.extend(std::iter::repeat_n(Segment::Vision, f.rows()));
            parts.push(v);
        }
        let (q, qlen) = match query {
            QueryInput::Text(t) if t.is_empty() => (None, 0),
            QueryInput::Text(t) => (Some(tape.embedding(emb, &ids(t))?), t.len()),
            QueryInput::Audio(a) => (Some(self.encode_audio(tape, bound, a)?), a.n_frames() / self.config.k_frames),
        };
        if let Some(q) = q {
            parts.push(q);
            segments.extend(std::iter::repeat_n(Segment::Query, qlen));
        }
        if !response.is_empty() {
            parts.push(tape.embedding(emb, &ids(response))?);
            segments.extend(std::iter::repeat_n(Segment::Response, response.len()));
        }
        if segments.len() > self.config.max_seq_len || segments.is_empty() {
            return Err(Error::Invalid(format!(
                "assemble: sequence of {} tokens (system {}, vision {}, query {qlen}, response {}) exceeds max_seq_len {}",
                segments.len(),
                system.len(),
                vision.map_or(0, Tensor::rows),
                response.len(),
                self.config.max_seq_len
            )));
        }
        let embeddings = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
        Ok(AssembledSequence { embeddings, segments })
    }

    /// Packed causal forward pass over several sequences.
    ///
    /// Attention weights are always kept on the tape for the backward pass;
    /// `capture_attention` only controls whether they are exposed.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, seqs: &[AssembledSequence], capture_attention: bool) -> Result<ForwardOutput> {
        if seqs.is_empty() {
            return Err(Error::Invalid("forward: no sequences".into()));
        }
        let mut spans = Vec::with_capacity(seqs.len());
        let mut positions = Vec::new();
        let mut at = 0;
        for s in seqs {
            spans.push(Span { start: at, len: s.len() });
            positions.extend(0..s.len());
            at += s.len();
        }
        let parts: Vec<Var> = seqs.iter().map(|s| s.embeddings).collect();
        let x = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
        let pos = tape.embedding(self.v(bound, "pos_emb"), &positions)?;
        let mut x = tape.add(x, pos)?;
        let mut attention = Vec::new();
        for l in 0..self.config.n_layers {
            let p = |n: &str| format!("h{l}.{n}");
            let h = tape.layer_norm(x, self.v(bound, &p("ln1.g")), self.v(bound, &p("ln1.b")))?;
            // No bias here: a key bias cannot change attention (softmax is shift invariant).
            let qkv = tape.matmul(h, self.v(bound, &p("attn.qkv.w")))?;
            let a = tape.causal_attention(qkv, &spans, self.config.n_heads)?;
            if capture_attention {
                attention.push(a);
            }
            let o = linear(tape, a, self.v(bound, &p("attn.out.w")), self.v(bound, &p("attn.out.b")))?;
            x = tape.add(x, o)?;
            let h = tape.layer_norm(x, self.v(bound, &p("ln2.g")), self.v(bound, &p("ln2.b")))?;
            let u = linear(tape, h, self.v(bound, &p("mlp.up.w")), self.v(bound, &p("mlp.up.b")))?;
            let u = tape.gelu(u);
            let dn = linear(tape, u, self.v(bound, &p("mlp.down.w")), self.v(bound, &p("mlp.down.b")))?;
            x = tape.add(x, dn)?;
        }
        let x = tape.layer_norm(x, self.v(bound, "ln_f.g"), self.v(bound, "ln_f.b"))?;
        let logits = linear(tape, x, self.v(bound, "head.w"), self.v(bound, "head.b"))?;
        Ok(ForwardOutput { logits, spans, attention })
    }

    /// Greedy decoding for a batch of prefixes that end at the response
    /// boundary. Ties go to the lowest token id; decoding stops at `eos` or
    /// after `max_new` tokens (the end token is not returned).
    pub fn generate_greedy(&self, prefixes: &[Prefix<'_>], eos: TokenId, max_new: usize) -> Result<Vec<Vec<TokenId>>> {
        let mut out: Vec<Vec<TokenId>> = vec![Vec::new(); prefixes.len()];
        let mut active: Vec<usize> = (0..prefixes.len()).collect();
        for _ in 0..max_new {
            if active.is_empty() {
                break;
            }
            let mut tape = Tape::new();
            let bound = self.bind_frozen(&mut tape);
            let seqs = active
                .iter()
                .map(|&i| {
                    let p = &prefixes[i];
                    self.assemble(&mut tape, &bound, p.system, p.vision, p.query, &out[i])
                })
                .collect::<Result<Vec<_>>>()?;
            let fwd = self.forward(&mut tape, &bound, &seqs, false)?;
            let logits = tape.value(fwd.logits);
            let mut still = Vec::with_capacity(active.len());
            for (k, &i) in active.iter().enumerate() {
                let span = fwd.spans[k];
                let row = logits.row(span.start + span.len - 1);
                let next = argmax_lowest(row) as TokenId;
                if next == eos {
                    continue;
                }
                out[i].push(next);
                still.push(i);
            }
            active = still;
        }
        Ok(out)
    }
}

#[derive(Clone, Copy)]
enum Init {
    Gauss,
    FanIn,
    Zeros,
    Ones,
}

/// A decoding prefix `system | vision | query`.
#[derive(Clone, Copy, Debug)]
pub struct Prefix<'a> {
    pub system: &'a [TokenId],
    pub vision: Option<&'a Tensor>,
    pub query: QueryInput<'a>,
}

/// Index of the maximum; the lowest index wins ties.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

