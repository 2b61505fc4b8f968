//! Checkpoint files `ckpt_<step>.bin`.
//!
//! Layout: a `LSCK v1` line, one line of JSON naming the parameters in storage order (plus
//! step, Adam step counter and the architecture hash), then tensor records for every parameter
//! value, every first moment and every second moment, in that order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use langseg_core::adam::AdamState;
use langseg_core::model::ModelConfig;
use langseg_core::ParamStore;

use crate::error::{self, AppError, Result};
use crate::tensor_io::{decode_tensor, encode_tensor};

const MAGIC: &[u8] = b"LSCK v1\n";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub model: ModelConfig,
    pub config_hash: String,
    pub params: ParamStore,
    pub adam: AdamState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    step: u64,
    adam_t: u64,
    config_hash: String,
    model: ModelShape,
    params: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelShape {
    height: usize,
    width: usize,
    levels: usize,
    classes: usize,
    features: usize,
    text_dim: usize,
    vocab_size: usize,
    max_tokens: usize,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step}.bin")
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(checkpoint_name(step))
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let m = &self.model;
        let manifest = Manifest {
            step: self.step,
            adam_t: self.adam.t,
            config_hash: self.config_hash.clone(),
            model: ModelShape {
                height: m.height,
                width: m.width,
                levels: m.levels,
                classes: m.classes,
                features: m.features,
                text_dim: m.text_dim,
                vocab_size: m.vocab_size,
                max_tokens: m.max_tokens,
            },
            params: self.params.names().map(str::to_string).collect(),
        };
        let mut out = MAGIC.to_vec();
        out.extend(serde_json::to_vec(&manifest).expect("manifest serializes"));
        out.push(b'\n');
        for (_, p) in self.params.iter() {
            encode_tensor(&p.value, &mut out);
        }
        for moments in [&self.adam.m, &self.adam.v] {
            for name in self.params.names() {
                encode_tensor(&moments[name], &mut out);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let rest = bytes.strip_prefix(MAGIC).ok_or("not a checkpoint (bad magic)")?;
        let nl = rest.iter().position(|&b| b == b'\n').ok_or("truncated manifest")?;
        let manifest: Manifest = serde_json::from_slice(&rest[..nl]).map_err(|e| format!("manifest: {e}"))?;
        let mut rest = &rest[nl + 1..];
        let mut next = |what: &str, name: &str| {
            let (t, r) = decode_tensor(rest).map_err(|e| format!("{what} of {name}: {e}"))?;
            rest = r;
            Ok::<_, String>(t)
        };
        let mut params = ParamStore::new();
        for name in &manifest.params {
            params.insert(name, next("value", name)?).map_err(|e| e.to_string())?;
        }
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (what, map) in [("first moment", &mut m), ("second moment", &mut v)] {
            for name in &manifest.params {
                let t = next(what, name)?;
                if t.shape() != params.value(name).map_err(|e| e.to_string())?.shape() {
                    return Err(format!("{what} of {name} has the wrong shape"));
                }
                map.insert(name.clone(), t);
            }
        }
        if !rest.is_empty() {
            return Err(format!("{} trailing bytes", rest.len()));
        }
        let s = manifest.model;
        Ok(Checkpoint {
            step: manifest.step,
            model: ModelConfig {
                height: s.height,
                width: s.width,
                levels: s.levels,
                classes: s.classes,
                features: s.features,
                text_dim: s.text_dim,
                vocab_size: s.vocab_size,
                max_tokens: s.max_tokens,
            },
            config_hash: manifest.config_hash,
            params,
            adam: AdamState {
                m,
                v,
                t: manifest.adam_t,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        error::write(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&error::read(path)?).map_err(|m| AppError::format(path, m))
    }

    /// Refuses to pair this checkpoint with a different architecture or vocabulary.
    pub fn check_hash(&self, expected: &str) -> Result<()> {
        if self.config_hash != expected {
            return Err(AppError::Mismatch(format!(
                "checkpoint was written for architecture {} ({}), config describes {}",
                &self.config_hash[..self.config_hash.len().min(12)],
                self.model.fingerprint(),
                &expected[..expected.len().min(12)]
            )));
        }
        Ok(())
    }
}
