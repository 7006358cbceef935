//! Pseudo text-to-speech: every token is voiced as K noisy copies of a fixed
//! acoustic signature.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::vocab::TokenId;

/// Rounds to 9 significant digits so serialized floats reproduce exactly.
pub fn quantize(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

/// A row-major `[frames × dim]` matrix of audio frames.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFrames {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl AudioFrames {
    pub fn n_frames(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Option<Self>> {
        let Some(first) = rows.first() else { return Ok(None) };
        let dim = first.len();
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::format("audio_frames", "rows must share one non-zero width"));
        }
        Ok(Some(Self { dim, data: rows.concat() }))
    }
}

/// Per-token acoustic signatures plus the rendering parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcousticTable {
    pub k_frames: usize,
    pub sigma: f64,
    pub signatures: Vec<Vec<f64>>,
}

impl AcousticTable {
    /// Standard-normal signatures for `vocab_len` tokens.
    pub fn generate<R: Rng>(rng: &mut R, vocab_len: usize, dim: usize, k_frames: usize, sigma: f64) -> Self {
        let signatures = (0..vocab_len)
            .map(|_| (0..dim).map(|_| quantize(StandardNormal.sample(rng))).collect())
            .collect();
        Self { k_frames, sigma, signatures }
    }

    pub fn dim(&self) -> usize {
        self.signatures.first().map_or(0, Vec::len)
    }

    /// Voices `tokens`: K frames per token, each its signature plus N(0, σ²).
    pub fn synth_audio<R: Rng>(&self, tokens: &[TokenId], rng: &mut R) -> Result<AudioFrames> {
        let dim = self.dim();
        let noise = Normal::new(0.0, self.sigma).map_err(|e| Error::config("sigma", e.to_string()))?;
        let mut data = Vec::with_capacity(tokens.len() * self.k_frames * dim);
        for &t in tokens {
            let sig = self
                .signatures
                .get(t as usize)
                .ok_or_else(|| Error::UnknownToken(format!("id {t} has no acoustic signature")))?;
            for _ in 0..self.k_frames {
                for &s in sig {
                    let n: f64 = if self.sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                    data.push(quantize(s + n));
                }
            }
        }
        Ok(AudioFrames { dim, data })
    }

    /// Nearest-signature decoding of each K-frame group (group mean vs table).
    pub fn decode_nearest(&self, frames: &AudioFrames) -> Vec<TokenId> {
        let k = self.k_frames;
        (0..frames.n_frames() / k)
            .map(|g| {
                let mean: Vec<f64> = (0..frames.dim)
                    .map(|j| (0..k).map(|f| frames.frame(g * k + f)[j]).sum::<f64>() / k as f64)
                    .collect();
                let dist = |s: &Vec<f64>| s.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                self.signatures
                    .iter()
                    .enumerate()
                    .min_by(|a, b| dist(a.1).total_cmp(&dist(b.1)))
                    .map(|(i, _)| i as TokenId)
                    .expect("table is non-empty")
            })
            .collect()
    }
}
