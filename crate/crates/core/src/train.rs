//! Step-level training machinery: batching, augmentation, loss schedule, clipping and Adam.
//!
//! All randomness is a pure function of `(seed, step)`, so the only state a resumed run needs
//! is the parameters, the optimizer moments and the step counter.

use alloc::vec::Vec;

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::augment::{self, AugmentConfig};
use crate::error::{Error, Result};
use crate::loss::{batch_objective, total_loss, BatchItem, LossBreakdown, LossWeights};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::rng::SplitMix64;
use crate::synth::SegSample;
use crate::tape::Tape;
use crate::text::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// Backward on the full weighted total every step.
    Joint,
    /// Round-robin over `[gen + multi_scale, triplet, seg]`, one phase per step.
    Alternating,
}

impl Schedule {
    pub fn as_str(self) -> &'static str {
        match self {
            Schedule::Joint => "joint",
            Schedule::Alternating => "alternating",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Schedule::Joint),
            "alternating" => Ok(Schedule::Alternating),
            _ => Err(Error::config(alloc::format!("unknown schedule {s:?}"))),
        }
    }

    /// λ actually back-propagated at 1-based `step`.
    pub fn lambdas(self, step: u64, w: &LossWeights) -> [f64; 4] {
        match self {
            Schedule::Joint => w.as_array(),
            Schedule::Alternating => match (step.max(1) - 1) % 3 {
                0 => [w.gen, 0.0, 0.0, w.multi_scale],
                1 => [0.0, w.triplet, 0.0, 0.0],
                _ => [0.0, 0.0, w.seg, 0.0],
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub loss: LossWeights,
    pub augment: AugmentConfig,
    pub schedule: Schedule,
    /// Save a checkpoint every this many steps; 0 disables intermediate checkpoints.
    pub checkpoint_interval: u64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Feed the zero vector instead of the text embedding (language path severed).
    pub zero_text: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 8,
            steps: 3000,
            adam: AdamConfig::default(),
            seed: 7,
            loss: LossWeights::default(),
            augment: AugmentConfig::default(),
            schedule: Schedule::Joint,
            checkpoint_interval: 0,
            clip_norm: 10.0,
            zero_text: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("learning rate must be > 0"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch size must be >= 2 for in-batch negatives"));
        }
        if self.steps < 1 {
            return Err(Error::config("steps must be >= 1"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be > 0"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::config("adam betas must be in [0, 1) and eps > 0"));
        }
        self.loss.validate()?;
        self.augment.validate()
    }
}

const SHUFFLE_TAG: u64 = 0x5348_5546;
const AUGMENT_TAG: u64 = 0x4155_4731;

/// Dataset indices of the batch consumed at 1-based `step`: a seeded permutation per epoch,
/// read as one endless stream.
pub fn batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    let start = (step.max(1) - 1) * batch as u64;
    for q in start..start + batch as u64 {
        let epoch = q / n as u64;
        let perm = match &cached {
            Some((e, p)) if *e == epoch => p,
            _ => {
                let mut p: Vec<usize> = (0..n).collect();
                SplitMix64::new(seed ^ SHUFFLE_TAG).fork(epoch).shuffle(&mut p);
                cached = Some((epoch, p));
                &cached.as_ref().unwrap().1
            }
        };
        out.push(perm[(q % n as u64) as usize]);
    }
    out
}

fn augment_rng(seed: u64, step: u64, slot: usize) -> SplitMix64 {
    SplitMix64::new(seed ^ AUGMENT_TAG).fork(step).fork(slot as u64)
}

/// Outcome of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub breakdown: LossBreakdown,
    pub grad_norm: f64,
}

pub struct Trainer<'a> {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub params: ParamStore,
    pub adam: AdamState,
    /// Steps completed so far.
    pub step: u64,
    data: &'a [SegSample],
    tokens: &'a [TokenSequence],
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: ModelConfig,
        config: TrainConfig,
        params: ParamStore,
        data: &'a [SegSample],
        tokens: &'a [TokenSequence],
    ) -> Result<Self> {
        let adam = AdamState::new(&params);
        Self::resume(model, config, params, adam, 0, data, tokens)
    }

    pub fn resume(
        model: ModelConfig,
        config: TrainConfig,
        params: ParamStore,
        adam: AdamState,
        step: u64,
        data: &'a [SegSample],
        tokens: &'a [TokenSequence],
    ) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        if data.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        if tokens.len() != data.len() {
            return Err(Error::contract("one token sequence per sample required"));
        }
        for s in data {
            s.mask.check_classes(model.classes)?;
            let (_, h, w) = s.image.chw()?;
            if (h, w) != (model.height, model.width) {
                return Err(Error::dim(alloc::format!(
                    "sample {} is {h}x{w}, model expects {}x{}",
                    s.seed,
                    model.height,
                    model.width
                )));
            }
        }
        Ok(Trainer {
            model,
            config,
            params,
            adam,
            step,
            data,
            tokens,
        })
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.steps
    }

    /// Runs the next step and returns its loss breakdown (λ-weighted with the configured λ,
    /// whatever the schedule back-propagated).
    pub fn step(&mut self) -> Result<StepLog> {
        let step = self.step + 1;
        let cfg = &self.config;
        let idx = batch_indices(cfg.seed, step, cfg.batch_size, self.data.len());
        let mut batch = Vec::with_capacity(idx.len());
        for (slot, &i) in idx.iter().enumerate() {
            let mut rng = augment_rng(cfg.seed, step, slot);
            batch.push(augment::augment(&self.data[i], &cfg.augment, &mut rng)?);
        }
        let items: Vec<BatchItem<'_>> = batch
            .iter()
            .zip(&idx)
            .map(|(s, &i)| BatchItem {
                image: &s.image,
                mask: &s.mask,
                tokens: &self.tokens[i],
            })
            .collect();

        let mut tape = Tape::new();
        let losses = batch_objective(&mut tape, &self.params, &self.model, &items, &cfg.loss, cfg.zero_text)?;
        let breakdown = total_loss(losses.values(&tape), &cfg.loss)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite(alloc::format!("total loss at step {step}: {breakdown:?}")));
        }
        let objective = losses.weighted(&mut tape, cfg.schedule.lambdas(step, &cfg.loss))?;
        self.params.zero_grad();
        if tape.requires_grad(objective) {
            tape.backward(objective, &mut self.params)?;
        }
        drop(tape);
        let grad_norm = self.params.clip_grad_norm(cfg.clip_norm);
        adam_step(&mut self.params, &mut self.adam, cfg.lr, &cfg.adam)?;
        self.step = step;
        Ok(StepLog {
            step,
            breakdown,
            grad_norm,
        })
    }
}
