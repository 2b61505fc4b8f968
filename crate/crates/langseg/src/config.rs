//! `config.json`: the single source of truth for a run. Command-line flags overlay it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use langseg_core::adam::AdamConfig;
use langseg_core::augment::AugmentConfig;
use langseg_core::loss::LossWeights;
use langseg_core::model::ModelConfig;
use langseg_core::synth;
use langseg_core::text::{Vocabulary, DEFAULT_MAX_LEN};
use langseg_core::train::{Schedule, TrainConfig};

use crate::error::{self, AppError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory holding `manifest.json`.
    pub dataset: Option<PathBuf>,
    /// Where logs, checkpoints and reports go.
    pub output: PathBuf,
    /// Vocabulary file; the built-in prompt vocabulary when absent.
    pub vocab: Option<PathBuf>,
    /// Train on the first 80% of the dataset only, keeping the rest held out.
    pub holdout: bool,

    pub height: usize,
    pub width: usize,
    pub levels: usize,
    pub classes: usize,
    pub features: usize,
    pub text_dim: usize,
    pub max_tokens: usize,

    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub schedule: String,
    pub checkpoint_interval: u64,
    pub clip_norm: f64,
    pub zero_text: bool,

    pub lambda_gen: f64,
    pub lambda_triplet: f64,
    pub lambda_seg: f64,
    pub lambda_multi_scale: f64,
    pub margin: f64,
    pub eps: f64,

    pub flip: bool,
    pub crop: bool,
    pub jitter: bool,
    pub crop_fraction: f64,
    pub jitter_min: f64,
    pub jitter_max: f64,

    /// Training seeds for `ablate`; each variant is trained once per seed.
    pub ablation_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            dataset: None,
            output: PathBuf::from("run"),
            vocab: None,
            holdout: false,
            height: m.height,
            width: m.width,
            levels: m.levels,
            classes: m.classes,
            features: m.features,
            text_dim: m.text_dim,
            max_tokens: DEFAULT_MAX_LEN,
            lr: t.lr,
            batch_size: t.batch_size,
            steps: t.steps,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            seed: t.seed,
            schedule: t.schedule.as_str().to_string(),
            checkpoint_interval: t.checkpoint_interval,
            clip_norm: t.clip_norm,
            zero_text: t.zero_text,
            lambda_gen: t.loss.gen,
            lambda_triplet: t.loss.triplet,
            lambda_seg: t.loss.seg,
            lambda_multi_scale: t.loss.multi_scale,
            margin: t.loss.margin,
            eps: t.loss.eps,
            flip: t.augment.flip,
            crop: t.augment.crop,
            jitter: t.augment.jitter,
            crop_fraction: t.augment.crop_fraction,
            jitter_min: t.augment.jitter_range.0,
            jitter_max: t.augment.jitter_range.1,
            ablation_seeds: vec![t.seed],
        }
    }
}

/// Validated, typed view of a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct Resolved {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: Vocabulary,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = error::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self).expect("config serializes");
        json.push(b'\n');
        error::write(path, &json)
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        match &self.vocab {
            None => Ok(synth::vocabulary()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| AppError::io(p, e))?;
                Vocabulary::from_lines(&text).map_err(|e| AppError::format(p, e.to_string()))
            }
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            height: self.height,
            width: self.width,
            levels: self.levels,
            classes: self.classes,
            features: self.features,
            text_dim: self.text_dim,
            vocab_size,
            max_tokens: self.max_tokens,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            steps: self.steps,
            adam: AdamConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            seed: self.seed,
            loss: LossWeights {
                gen: self.lambda_gen,
                triplet: self.lambda_triplet,
                seg: self.lambda_seg,
                multi_scale: self.lambda_multi_scale,
                margin: self.margin,
                eps: self.eps,
            },
            augment: AugmentConfig {
                flip: self.flip,
                crop: self.crop,
                jitter: self.jitter,
                crop_fraction: self.crop_fraction,
                jitter_range: (self.jitter_min, self.jitter_max),
            },
            schedule: Schedule::parse(&self.schedule)?,
            checkpoint_interval: self.checkpoint_interval,
            clip_norm: self.clip_norm,
            zero_text: self.zero_text,
        })
    }

    /// Checks everything before any work starts.
    pub fn resolve(&self) -> Result<Resolved> {
        let vocab = self.vocabulary()?;
        let model = self.model_config(vocab.len());
        model.validate().map_err(|e| AppError::Config(e.to_string()))?;
        let train = self.train_config()?;
        train.validate()?;
        if self.ablation_seeds.is_empty() {
            return Err(AppError::Config("ablation_seeds is empty".into()));
        }
        Ok(Resolved { model, train, vocab })
    }
}

/// Hash of everything that fixes the parameter layout and token ids. Training
/// hyper-parameters are deliberately excluded so that a run can be resumed with more steps.
pub fn architecture_hash(model: &ModelConfig, vocab: &Vocabulary) -> String {
    let mut h = Sha256::new();
    h.update(model.fingerprint().as_bytes());
    h.update(b"\n");
    h.update(vocab.to_lines().as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_to_core_defaults() {
        let r = RunConfig::default().resolve().unwrap();
        assert_eq!(r.model, ModelConfig::default());
        assert_eq!(r.train, TrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"stpes": 10}"#).unwrap_err();
        assert!(err.to_string().contains("stpes"));
        let ok: RunConfig = serde_json::from_str(r#"{"steps": 10}"#).unwrap();
        assert_eq!(ok.steps, 10);
        assert_eq!(ok.lr, 1e-4);
    }

    #[test]
    fn invalid_values_fail_resolution() {
        for c in [
            RunConfig { steps: 0, ..Default::default() },
            RunConfig { schedule: "sometimes".into(), ..Default::default() },
            RunConfig { height: 30, ..Default::default() },
            RunConfig { lambda_seg: -1.0, ..Default::default() },
        ] {
            assert!(c.resolve().is_err());
        }
    }

    #[test]
    fn hash_tracks_architecture_only() {
        let v = synth::vocabulary();
        let m = ModelConfig::default();
        let a = architecture_hash(&m, &v);
        assert_eq!(a.len(), 64);
        assert_eq!(a, architecture_hash(&m, &v));
        assert_ne!(a, architecture_hash(&ModelConfig { features: 16, ..m }, &v));
    }
}
