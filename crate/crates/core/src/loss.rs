//! Training objectives: mask likelihood, pixel cross-entropy, image/text triplet alignment,
//! deep supervision across pyramid levels and their weighted total.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mask::ClassMask;
use crate::model::{self, ForwardOptions, ModelConfig};
use crate::params::ParamStore;
use crate::tape::{Tape, Var, COSINE_NORM_FLOOR};
use crate::tensor::Tensor;
use crate::text::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub gen: f64,
    pub triplet: f64,
    pub seg: f64,
    pub multi_scale: f64,
    /// Triplet margin α.
    pub margin: f64,
    /// Probability floor inside the logarithm.
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gen: 0.5,
            triplet: 1.0,
            seg: 1.0,
            multi_scale: 0.25,
            margin: 0.5,
            eps: 1e-7,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gen", self.gen),
            ("triplet", self.triplet),
            ("seg", self.seg),
            ("multi_scale", self.multi_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(Error::config(format!("triplet margin must be > 0, got {}", self.margin)));
        }
        if !(self.eps > 0.0 && self.eps < 1e-3) {
            return Err(Error::config(format!("probability floor must be in (0, 1e-3), got {}", self.eps)));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.gen, self.triplet, self.seg, self.multi_scale]
    }
}

/// Unweighted loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub gen: f64,
    pub triplet: f64,
    pub seg: f64,
    pub multi_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub gen: f64,
    pub triplet: f64,
    pub seg: f64,
    pub multi_scale: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            gen: self.gen,
            triplet: self.triplet,
            seg: self.seg,
            multi_scale: self.multi_scale,
        }
    }
}

/// `λ1 gen + λ2 triplet + λ3 seg + λ4 multi_scale`, with the components carried alongside.
pub fn total_loss(c: LossComponents, w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    let parts = [c.gen, c.triplet, c.seg, c.multi_scale];
    if parts.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss components {parts:?}")));
    }
    let total = w.gen * c.gen + w.triplet * c.triplet + w.seg * c.seg + w.multi_scale * c.multi_scale;
    Ok(LossBreakdown {
        gen: c.gen,
        triplet: c.triplet,
        seg: c.seg,
        multi_scale: c.multi_scale,
        total,
    })
}

fn check_mask(tape: &Tape, probs: Var, gt: &ClassMask) -> Result<()> {
    let (c, h, w) = tape.value(probs).chw()?;
    if (h, w) != (gt.height(), gt.width()) {
        return Err(Error::dim(format!(
            "prediction is {h}x{w}, mask is {}x{}",
            gt.height(),
            gt.width()
        )));
    }
    gt.check_classes(c)
}

/// Mean pixel cross-entropy `-(1/N) sum ln max(p[gt], ε)`.
pub fn seg_ce(tape: &mut Tape, probs: Var, gt: &ClassMask, eps: f64) -> Result<Var> {
    check_mask(tape, probs, gt)?;
    tape.pixel_nll(probs, &gt.as_usize(), eps)
}

/// Negative log-likelihood of the ground-truth mask under a per-pixel factorised
/// `P(M | I, L)`. Numerically the same estimator as [`seg_ce`]; it stays a separate term so
/// both can be weighted independently.
pub fn gen_nll(tape: &mut Tape, probs: Var, gt: &ClassMask, eps: f64) -> Result<Var> {
    check_mask(tape, probs, gt)?;
    tape.pixel_nll(probs, &gt.as_usize(), eps)
}

/// An image embedding and a text embedding of equal width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingPair {
    pub image: Var,
    pub text: Var,
}

/// `max(0, d(pos.image, pos.text) - d(neg.image, neg.text) + α)` with cosine distance.
pub fn triplet(tape: &mut Tape, pos: EmbeddingPair, neg: EmbeddingPair, margin: f64) -> Result<Var> {
    let dp = tape.cosine_distance(pos.image, pos.text)?;
    let dn = tape.cosine_distance(neg.image, neg.text)?;
    let ndn = tape.scale(dn, -1.0);
    let diff = tape.add(dp, ndn)?;
    let shifted = tape.add_scalar(diff, margin);
    Ok(tape.relu(shifted))
}

/// Mean over levels of the cross-entropy of each level's prediction against the
/// nearest-neighbour downsampled mask.
pub fn multi_scale_loss(tape: &mut Tape, level_probs: &[Var], gt: &ClassMask, eps: f64) -> Result<Var> {
    if level_probs.is_empty() {
        return Err(Error::contract("multi_scale_loss needs at least one level"));
    }
    let mut acc: Option<Var> = None;
    for (k, &p) in level_probs.iter().enumerate() {
        let g = gt.downsample_pow2(k)?;
        let l = seg_ce(tape, p, &g, eps)?;
        acc = Some(match acc {
            None => l,
            Some(a) => tape.add(a, l)?,
        });
    }
    let sum = acc.expect("non-empty");
    Ok(tape.scale(sum, 1.0 / level_probs.len() as f64))
}

/// Cosine distance on plain slices, `1 - cos`, or 1 when either norm is (near) zero.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = libm::sqrt(u.iter().map(|a| a * a).sum());
    let nv = libm::sqrt(v.iter().map(|a| a * a).sum());
    if nu < COSINE_NORM_FLOOR || nv < COSINE_NORM_FLOOR {
        1.0
    } else {
        1.0 - dot / (nu * nv)
    }
}

/// Plain-number triplet hinge.
pub fn triplet_hinge(d_pos: f64, d_neg: f64, margin: f64) -> f64 {
    (d_pos - d_neg + margin).max(0.0)
}

/// One training example as the objective sees it.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub image: &'a Tensor,
    pub mask: &'a ClassMask,
    pub tokens: &'a TokenSequence,
}

/// Batch-mean loss components recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub gen: Var,
    pub triplet: Var,
    pub seg: Var,
    pub multi_scale: Var,
}

impl BatchLoss {
    pub fn values(&self, tape: &Tape) -> LossComponents {
        LossComponents {
            gen: tape.value(self.gen).item(),
            triplet: tape.value(self.triplet).item(),
            seg: tape.value(self.seg).item(),
            multi_scale: tape.value(self.multi_scale).item(),
        }
    }

    /// `sum λ_i component_i`, leaving zero-weighted terms off the graph entirely.
    pub fn weighted(&self, tape: &mut Tape, lambdas: [f64; 4]) -> Result<Var> {
        let parts = [self.gen, self.triplet, self.seg, self.multi_scale];
        let mut acc: Option<Var> = None;
        for (v, l) in parts.into_iter().zip(lambdas) {
            if l == 0.0 {
                continue;
            }
            let s = tape.scale(v, l);
            acc = Some(match acc {
                None => s,
                Some(a) => tape.add(a, s)?,
            });
        }
        Ok(acc.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
    }
}

/// Records every loss component for a batch.
///
/// Negatives are in-batch: item `i` is paired with the text of item `(i + 1) % B`.
pub fn batch_objective(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    items: &[BatchItem<'_>],
    weights: &LossWeights,
    zero_text: bool,
) -> Result<BatchLoss> {
    if items.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let opts = ForwardOptions {
        zero_text,
        level_heads: true,
        image_embedding: true,
    };
    let mut outs = Vec::with_capacity(items.len());
    for it in items {
        outs.push(model::forward(tape, store, cfg, it.image, it.tokens, opts)?);
    }
    let n = items.len();
    let mut gens = Vec::with_capacity(n);
    let mut segs = Vec::with_capacity(n);
    let mut mss = Vec::with_capacity(n);
    let mut trips = Vec::with_capacity(n);
    for (i, (it, out)) in items.iter().zip(&outs).enumerate() {
        gens.push(gen_nll(tape, out.probs, it.mask, weights.eps)?);
        segs.push(seg_ce(tape, out.probs, it.mask, weights.eps)?);
        mss.push(multi_scale_loss(tape, &out.level_probs, it.mask, weights.eps)?);
        let image = out.image_embed.expect("requested");
        let pos = EmbeddingPair {
            image,
            text: out.text_embed,
        };
        let neg = EmbeddingPair {
            image,
            text: outs[(i + 1) % n].text_embed,
        };
        trips.push(triplet(tape, pos, neg, weights.margin)?);
    }
    Ok(BatchLoss {
        gen: mean_of(tape, &gens)?,
        triplet: mean_of(tape, &trips)?,
        seg: mean_of(tape, &segs)?,
        multi_scale: mean_of(tape, &mss)?,
    })
}

fn mean_of(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, 1.0 / vars.len() as f64))
}
