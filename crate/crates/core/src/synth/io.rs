//! JSON-lines datasets and the JSON manifest.

use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{AudioFrames, DatasetManifest, Sample, SampleMeta, Scene, Task, TokenId};

pub const DATASET_VERSION: u32 = 1;

/// 64-bit FNV-1a as 16 lowercase hex digits.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h = FnvHasher::default();
    h.write(bytes);
    format!("{:016x}", h.finish())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleLine {
    task: Task,
    scene_cells: Option<Scene>,
    question_text_ids: Vec<TokenId>,
    audio_frames: Vec<Vec<f64>>,
    answer_ids: Vec<TokenId>,
    meta: SampleMeta,
}

/// Serializes samples as JSON lines; returns the bytes written.
pub fn dataset_bytes(samples: &[Sample]) -> Vec<u8> {
    let mut out = Vec::new();
    for s in samples {
        let line = SampleLine {
            task: s.task,
            scene_cells: s.scene.clone(),
            question_text_ids: s.question.clone(),
            audio_frames: s.audio.as_ref().map(AudioFrames::to_rows).unwrap_or_default(),
            answer_ids: s.answer.clone(),
            meta: s.meta.clone(),
        };
        serde_json::to_writer(&mut out, &line).expect("sample serializes");
        out.push(b'\n');
    }
    out
}

/// Writes a dataset and returns its FNV-1a checksum.
pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<String> {
    let bytes = dataset_bytes(samples);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(fnv1a_hex(&bytes))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let line: SampleLine =
                serde_json::from_str(l).map_err(|e| Error::Json { path: path.into(), line: i + 1, source: e })?;
            if let Some(s) = &line.scene_cells {
                if Scene::from_cells(s.cells().to_vec()).is_none() {
                    return Err(Error::format("scene_cells", format!("line {} is not a valid scene", i + 1)));
                }
            }
            Ok(Sample {
                task: line.task,
                scene: line.scene_cells,
                question: line.question_text_ids,
                audio: AudioFrames::from_rows(&line.audio_frames)?,
                answer: line.answer_ids,
                meta: line.meta,
            })
        })
        .collect()
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut m = manifest.clone();
    m.checksum = m.compute_checksum();
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads a manifest, checking its version and checksum.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), line: e.line(), source: e })?;
    if m.version != DATASET_VERSION {
        return Err(Error::format("version", format!("expected {DATASET_VERSION}, found {}", m.version)));
    }
    m.vocab.reindex()?;
    if m.signatures.len() != m.vocab.len() {
        return Err(Error::format("signatures", "one signature per vocabulary entry is required"));
    }
    let computed = m.compute_checksum();
    if computed != m.checksum {
        return Err(Error::Checksum { stored: m.checksum, computed });
    }
    Ok(m)
}
