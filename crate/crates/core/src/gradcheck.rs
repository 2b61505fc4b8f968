//! Central finite-difference gradient checking.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Coordinates checked per parameter; tensors at or below this size are checked exhaustively.
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            tol: 1e-4,
            samples_per_param: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub pass: bool,
    pub h: f64,
    pub tol: f64,
}

/// `|a - n| / max(1, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the tape gradient of `loss_fn` with central differences on the values in `store`.
///
/// `loss_fn` records a scalar loss on a fresh tape. The store's gradient accumulators are
/// left zeroed and its values are restored bit-for-bit.
pub fn grad_check<F>(loss_fn: F, store: &mut ParamStore, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(cfg.h > 0.0) {
        return Err(Error::config("gradient check step h must be > 0"));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let v = loss_fn(&mut tape, store)?;
        Ok(tape.value(v).item())
    };

    store.zero_grad();
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    let base = tape.value(loss).item();
    tape.backward(loss, store)?;
    drop(tape);
    let again = eval(store)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::contract(alloc::format!(
            "loss function is not deterministic: {base} then {again}"
        )));
    }

    let mut rng = SplitMix64::new(cfg.seed);
    let names: Vec<String> = store.names().map(ToString::to_string).collect();
    let mut params = Vec::with_capacity(names.len());
    let mut worst = 0.0f64;
    for name in names {
        let n = store.value(&name)?.len();
        let coords = sample_coords(n, cfg.samples_per_param, &mut rng);
        let mut max_err = 0.0f64;
        for &i in &coords {
            let analytic = store.grad(&name)?.data()[i];
            let orig = store.value(&name)?.data()[i];
            set_coord(store, &name, i, orig + cfg.h);
            let up = eval(store);
            set_coord(store, &name, i, orig - cfg.h);
            let down = eval(store);
            set_coord(store, &name, i, orig);
            let numeric = (up? - down?) / (2.0 * cfg.h);
            let err = relative_error(analytic, numeric);
            if !err.is_finite() {
                max_err = f64::INFINITY;
            } else {
                max_err = max_err.max(err);
            }
        }
        worst = worst.max(max_err);
        params.push(ParamCheck {
            name,
            checked: coords.len(),
            max_rel_error: max_err,
        });
    }
    store.zero_grad();
    Ok(GradCheckReport {
        params,
        max_rel_error: worst,
        pass: worst <= cfg.tol,
        h: cfg.h,
        tol: cfg.tol,
    })
}

fn set_coord(store: &mut ParamStore, name: &str, i: usize, v: f64) {
    if let Some(p) = store.get_mut(name) {
        p.value.data_mut()[i] = v;
    }
}

fn sample_coords(n: usize, k: usize, rng: &mut SplitMix64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if n <= k {
        return idx;
    }
    // partial Fisher-Yates
    for i in 0..k {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::boxed::Box;
    use alloc::vec;

    fn store_with(name: &str, v: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::from_vec(v)).unwrap();
        s
    }

    #[test]
    fn quadratic_passes_tight_tolerance() {
        let mut s = store_with("theta", vec![1.0, 2.0]);
        let cfg = GradCheckConfig {
            tol: 1e-6,
            ..Default::default()
        };
        let rep = grad_check(
            |t, s| {
                let th = t.param(s, "theta")?;
                let sq = t.mul(th, th)?;
                Ok(t.sum(sq))
            },
            &mut s,
            &cfg,
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");
        assert_eq!(s.value("theta").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn constant_loss_passes() {
        let mut s = store_with("theta", vec![3.0]);
        let rep = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(5.0))),
            &mut s,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(rep.pass);
        assert_eq!(rep.max_rel_error, 0.0);
    }

    #[test]
    fn doubled_backward_rule_fails() {
        let mut s = store_with("theta", vec![1.0, 2.0]);
        let rep = grad_check(
            |t, s| {
                let th = t.param(s, "theta")?;
                let v: f64 = t.value(th).data().iter().map(|x| x * x).sum();
                let bad = t.custom(
                    &[th],
                    Tensor::scalar(v),
                    Box::new(|ins, _, g| vec![ins[0].map(|x| 2.0 * 2.0 * x * g.item())]),
                );
                Ok(bad)
            },
            &mut s,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!rep.pass);
        // analytic 4θ vs numeric 2θ at θ=2: |8-4|/8
        assert!((rep.max_rel_error - 0.5).abs() < 1e-6, "{}", rep.max_rel_error);
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        use core::cell::Cell;
        let mut s = store_with("theta", vec![1.0]);
        let calls = Cell::new(0.0);
        let err = grad_check(
            |t, s| {
                calls.set(calls.get() + 1.0);
                let th = t.param(s, "theta")?;
                Ok(t.add_scalar(th, calls.get()))
            },
            &mut s,
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn sampling_caps_coordinates() {
        let mut rng = SplitMix64::new(1);
        let c = sample_coords(1000, 64, &mut rng);
        assert_eq!(c.len(), 64);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_coords(10, 64, &mut rng).len(), 10);
    }
}

/// The seeded micro-model used to check every loss end to end: 8×8 images, K = 2 levels,
/// C = 3 classes, two samples so the triplet term has an in-batch negative.
pub struct MicroModel {
    pub config: crate::model::ModelConfig,
    pub params: ParamStore,
    pub images: Vec<crate::tensor::Tensor>,
    pub masks: Vec<crate::mask::ClassMask>,
    pub tokens: Vec<crate::text::TokenSequence>,
    pub weights: crate::loss::LossWeights,
}

/// Loss terms checked by [`check_micro_model`], in report order.
pub const MICRO_LOSSES: [&str; 5] = ["gen", "triplet", "seg", "multi_scale", "total"];

impl MicroModel {
    pub fn new(seed: u64) -> Result<Self> {
        use crate::{mask::ClassMask, model, synth, tensor::Tensor, text};
        let vocab = synth::vocabulary();
        let config = model::ModelConfig {
            height: 8,
            width: 8,
            levels: 2,
            classes: 3,
            features: 4,
            text_dim: 4,
            vocab_size: vocab.len(),
            max_tokens: 8,
        };
        let mut params = model::init_params(&config, seed)?;
        let mut rng = SplitMix64::new(seed).fork(1);
        // nonzero biases and scale logits, so no term sits at a symmetric point
        for (_, p) in params.iter_mut() {
            if p.value.shape().len() == 1 {
                for v in p.value.data_mut() {
                    *v = rng.uniform(-0.2, 0.2);
                }
            }
        }
        let mut images = Vec::new();
        let mut masks = Vec::new();
        for _ in 0..2 {
            let px = (0..3 * 64).map(|_| rng.next_f64()).collect();
            images.push(Tensor::new(&[3, 8, 8], px)?);
            let ids = (0..64).map(|_| rng.below(3) as u8).collect();
            masks.push(ClassMask::new(8, 8, ids)?);
        }
        let tokens = ["a scene with red circle", "a scene with blue square left of green triangle"]
            .iter()
            .map(|p| text::tokenize(p, &vocab, config.max_tokens))
            .collect();
        Ok(MicroModel {
            config,
            params,
            images,
            masks,
            tokens,
            weights: crate::loss::LossWeights::default(),
        })
    }

    /// Records loss term `which` (one of [`MICRO_LOSSES`]).
    pub fn loss(&self, tape: &mut Tape, store: &ParamStore, which: &str) -> Result<Var> {
        let items: Vec<crate::loss::BatchItem<'_>> = (0..self.images.len())
            .map(|i| crate::loss::BatchItem {
                image: &self.images[i],
                mask: &self.masks[i],
                tokens: &self.tokens[i],
            })
            .collect();
        let b = crate::loss::batch_objective(tape, store, &self.config, &items, &self.weights, false)?;
        Ok(match which {
            "gen" => b.gen,
            "triplet" => b.triplet,
            "seg" => b.seg,
            "multi_scale" => b.multi_scale,
            "total" => b.weighted(tape, self.weights.as_array())?,
            _ => return Err(Error::config(alloc::format!("unknown loss term {which:?}"))),
        })
    }
}

/// Gradient-checks every loss term on the micro-model built from `seed`.
pub fn check_micro_model(seed: u64, cfg: &GradCheckConfig) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut m = MicroModel::new(seed)?;
    let mut params = core::mem::take(&mut m.params);
    let mut out = Vec::with_capacity(MICRO_LOSSES.len());
    for which in MICRO_LOSSES {
        let rep = grad_check(|t, s| m.loss(t, s, which), &mut params, cfg)?;
        out.push((which, rep));
    }
    m.params = params;
    Ok(out)
}
