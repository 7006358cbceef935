//! JSON checkpoint container.
//!
//! ```text
//! {
//!   "format": "selfkd-checkpoint",
//!   "version": 1,
//!   "stage": "<stage tag>",
//!   "config": { ModelConfig },
//!   "rng": { "seed": u64, "step": u64 },
//!   "groups": [
//!     { "group": "<name>", "trainable": bool,
//!       "params": [ { "name": str, "shape": [usize], "data": [f64] } ] }
//!   ]
//! }
//! ```
//!
//! Floats use the shortest representation that parses back to the same
//! `f64`, so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{ModelConfig, OmniModelState, Param, ParamGroup};

pub const CHECKPOINT_FORMAT: &str = "selfkd-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredGroup {
    group: ParamGroup,
    trainable: bool,
    params: Vec<StoredParam>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Stored {
    format: String,
    version: u32,
    stage: String,
    config: ModelConfig,
    rng: RngState,
    groups: Vec<StoredGroup>,
}

/// A model state tagged with the stage that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub rng: RngState,
    pub model: OmniModelState,
}

fn to_stored(ck: &Checkpoint) -> Stored {
    let m = &ck.model;
    let groups = ParamGroup::ALL
        .iter()
        .map(|&g| StoredGroup {
            group: g,
            trainable: m.is_trainable(g),
            params: m
                .params()
                .iter()
                .filter(|p| p.group == g)
                .map(|p| StoredParam { name: p.name.clone(), shape: p.value.shape().to_vec(), data: p.value.data().to_vec() })
                .collect(),
        })
        .collect();
    Stored {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        stage: ck.stage.clone(),
        config: m.config.clone(),
        rng: ck.rng.clone(),
        groups,
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = serde_json::to_vec(&to_stored(ck)).expect("checkpoint serializes");
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let stored: Stored =
        serde_json::from_slice(&bytes).map_err(|e| Error::Json { path: path.into(), line: e.line(), source: e })?;
    if stored.format != CHECKPOINT_FORMAT {
        return Err(Error::format("format", format!("expected {CHECKPOINT_FORMAT:?}, found {:?}", stored.format)));
    }
    if stored.version != CHECKPOINT_VERSION {
        return Err(Error::format("version", format!("expected {CHECKPOINT_VERSION}, found {}", stored.version)));
    }
    let reference = OmniModelState::init(stored.config.clone())?;
    let mut by_name: BTreeMap<String, (ParamGroup, Tensor)> = BTreeMap::new();
    let mut trainable = BTreeMap::new();
    for g in stored.groups {
        trainable.insert(g.group, g.trainable);
        for p in g.params {
            let t = Tensor::new(p.shape, p.data).map_err(|e| Error::format(format!("params.{}", p.name), e.to_string()))?;
            by_name.insert(p.name, (g.group, t));
        }
    }
    let mut params = Vec::with_capacity(reference.params().len());
    for r in reference.params() {
        let (group, value) = by_name
            .remove(&r.name)
            .ok_or_else(|| Error::format(format!("params.{}", r.name), "missing from checkpoint"))?;
        if group != r.group || value.shape() != r.value.shape() {
            return Err(Error::format(
                format!("params.{}", r.name),
                format!("expected {} {:?}, found {} {:?}", r.group, r.value.shape(), group, value.shape()),
            ));
        }
        params.push(Param { name: r.name.clone(), group, value });
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::format(format!("params.{extra}"), "not part of the model"));
    }
    let model = OmniModelState::from_params(stored.config, params, trainable)?;
    Ok(Checkpoint { stage: stored.stage, rng: stored.rng, model })
}
