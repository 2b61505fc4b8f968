//! Image encoder pyramid, language-broadcast fusion decoder and the class heads.
//!
//! Parameter naming:
//!
//! ```text
//! image_encoder.level<k>.{weight,bias}   [F, Cin, 3, 3], [F]
//! text_encoder.embedding                 [V, D]
//! text_encoder.proj.{weight,bias}        [D, D], [D]
//! decoder.fuse<k>.{weight,bias}          [F, F + D], [F]
//! decoder.scale_logits                   [K]
//! decoder.head.{weight,bias}             [C, F, 1, 1], [C]
//! decoder.aux<k>.{weight,bias}           [C, F, 1, 1], [C]
//! align.proj.{weight,bias}               [F, D], [D]
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::text::{self, TokenSequence};

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Pyramid levels K.
    pub levels: usize,
    /// Classes C, background included.
    pub classes: usize,
    /// Feature width F.
    pub features: usize,
    /// Text embedding width D.
    pub text_dim: usize,
    /// Vocabulary size V.
    pub vocab_size: usize,
    pub max_tokens: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 64,
            width: 64,
            levels: 3,
            classes: 13,
            features: 32,
            text_dim: 64,
            vocab_size: crate::synth::vocabulary().len(),
            max_tokens: text::DEFAULT_MAX_LEN,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("height", self.height),
            ("width", self.width),
            ("levels", self.levels),
            ("classes", self.classes),
            ("features", self.features),
            ("text_dim", self.text_dim),
            ("max_tokens", self.max_tokens),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocabulary needs at least <PAD> and <UNK>"));
        }
        if self.levels > 16 {
            return Err(Error::config("levels must be <= 16"));
        }
        check_divisible(self.height, self.width, self.levels)
    }

    /// Spatial size of pyramid level `k`.
    pub fn level_size(&self, k: usize) -> (usize, usize) {
        (self.height >> k, self.width >> k)
    }

    /// Stable textual fingerprint of the architecture, used to refuse mismatched checkpoints.
    pub fn fingerprint(&self) -> String {
        format!(
            "h{}w{}k{}c{}f{}d{}v{}t{}",
            self.height,
            self.width,
            self.levels,
            self.classes,
            self.features,
            self.text_dim,
            self.vocab_size,
            self.max_tokens
        )
    }
}

fn check_divisible(h: usize, w: usize, levels: usize) -> Result<()> {
    let m = 1usize << (levels - 1);
    if h % m != 0 || w % m != 0 {
        return Err(Error::dim(format!(
            "image {h}x{w} not divisible by 2^(K-1) = {m} for K = {levels}"
        )));
    }
    Ok(())
}

pub fn level_weight(k: usize) -> String {
    format!("image_encoder.level{k}.weight")
}
pub fn level_bias(k: usize) -> String {
    format!("image_encoder.level{k}.bias")
}
pub fn fuse_weight(k: usize) -> String {
    format!("decoder.fuse{k}.weight")
}
pub fn fuse_bias(k: usize) -> String {
    format!("decoder.fuse{k}.bias")
}
pub fn aux_weight(k: usize) -> String {
    format!("decoder.aux{k}.weight")
}
pub fn aux_bias(k: usize) -> String {
    format!("decoder.aux{k}.bias")
}
pub const SCALE_LOGITS: &str = "decoder.scale_logits";
pub const HEAD_WEIGHT: &str = "decoder.head.weight";
pub const HEAD_BIAS: &str = "decoder.head.bias";
pub const ALIGN_WEIGHT: &str = "align.proj.weight";
pub const ALIGN_BIAS: &str = "align.proj.bias";

/// Seeded initialisation: Glorot-uniform weights, zero biases, equal scale logits.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(seed);
    let mut s = ParamStore::new();
    let (f, d, c) = (cfg.features, cfg.text_dim, cfg.classes);
    for k in 0..cfg.levels {
        let cin = if k == 0 { IMAGE_CHANNELS } else { f };
        s.insert_glorot(&level_weight(k), &[f, cin, 3, 3], cin * 9, f * 9, &mut rng)?;
        s.insert(&level_bias(k), Tensor::zeros(&[f]))?;
        s.insert_glorot(&fuse_weight(k), &[f, f + d], f + d, f, &mut rng)?;
        s.insert(&fuse_bias(k), Tensor::zeros(&[f]))?;
        s.insert_glorot(&aux_weight(k), &[c, f, 1, 1], f, c, &mut rng)?;
        s.insert(&aux_bias(k), Tensor::zeros(&[c]))?;
    }
    s.insert(SCALE_LOGITS, Tensor::zeros(&[cfg.levels]))?;
    s.insert_glorot(HEAD_WEIGHT, &[c, f, 1, 1], f, c, &mut rng)?;
    s.insert(HEAD_BIAS, Tensor::zeros(&[c]))?;
    s.insert_glorot(text::EMBEDDING, &[cfg.vocab_size, d], cfg.vocab_size, d, &mut rng)?;
    s.insert_glorot(text::PROJ_WEIGHT, &[d, d], d, d, &mut rng)?;
    s.insert(text::PROJ_BIAS, Tensor::zeros(&[d]))?;
    s.insert_glorot(ALIGN_WEIGHT, &[f, d], f, d, &mut rng)?;
    s.insert(ALIGN_BIAS, Tensor::zeros(&[d]))?;
    Ok(s)
}

/// Checks a `[3, H, W]` image with values in `[0, 1]`.
pub fn validate_image(img: &Tensor) -> Result<()> {
    let (c, h, w) = img.chw()?;
    if c != IMAGE_CHANNELS {
        return Err(Error::dim(format!("image must have 3 channels, got {c}")));
    }
    if let Some(i) = img.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        let p = i % (h * w);
        return Err(Error::data(format!(
            "pixel value {} outside [0, 1] at channel {}, row {}, col {}",
            img.data()[i],
            i / (h * w),
            p / w,
            p % w
        )));
    }
    Ok(())
}

/// Strided convolution stack; level 0 is full resolution, each further level halves H and W.
pub fn encode_image(tape: &mut Tape, img: Var, store: &ParamStore, levels: usize) -> Result<Vec<Var>> {
    if levels == 0 {
        return Err(Error::config("pyramid needs at least one level"));
    }
    let (_, h, w) = tape.value(img).chw()?;
    check_divisible(h, w, levels)?;
    let mut pyramid = Vec::with_capacity(levels);
    let mut x = img;
    for k in 0..levels {
        let wt = tape.param(store, &level_weight(k))?;
        let b = tape.param(store, &level_bias(k))?;
        let stride = if k == 0 { 1 } else { 2 };
        let conv = tape.conv2d(x, wt, Some(b), stride, 1)?;
        x = tape.relu(conv);
        pyramid.push(x);
    }
    Ok(pyramid)
}

/// `relu(W [feat; broadcast(text)] + b)` for pyramid level `k`.
pub fn fuse_level(tape: &mut Tape, feat: Var, text: Var, store: &ParamStore, k: usize) -> Result<Var> {
    let w = tape.param(store, &fuse_weight(k))?;
    let b = tape.param(store, &fuse_bias(k))?;
    let pre = tape.fuse_broadcast(feat, text, w, b)?;
    Ok(tape.relu(pre))
}

/// Softmax-normalised scale weights as a `[K]` value.
pub fn scale_weights(tape: &mut Tape, logits: Var) -> Result<Var> {
    let k = tape.value(logits).len();
    let as_map = tape.reshape(logits, &[k, 1, 1])?;
    let sm = tape.softmax_channels(as_map)?;
    tape.reshape(sm, &[k])
}

/// Resizes every level to the size of level 0 and mixes them with `weights` (already normalised).
pub fn combine_scales(tape: &mut Tape, fused: &[Var], weights: Var) -> Result<Var> {
    let first = *fused
        .first()
        .ok_or_else(|| Error::contract("combine_scales needs at least one level"))?;
    if tape.value(weights).len() != fused.len() {
        return Err(Error::dim(format!(
            "{} scale weights for {} levels",
            tape.value(weights).len(),
            fused.len()
        )));
    }
    let (_, h, w) = tape.value(first).chw()?;
    let mut resized = Vec::with_capacity(fused.len());
    for &l in fused {
        resized.push(tape.bilinear_resize(l, h, w)?);
    }
    tape.weighted_sum(&resized, weights)
}

/// Switches for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ForwardOptions {
    /// Replace the text embedding by the zero vector (no language guidance).
    pub zero_text: bool,
    /// Emit per-level class distributions for deep supervision.
    pub level_heads: bool,
    /// Emit the pooled image embedding used by the alignment loss.
    pub image_embedding: bool,
}

/// Tape handles produced by [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[C, H, W]` class distribution.
    pub probs: Var,
    /// `[C, H/2^k, W/2^k]` per-level distributions (empty unless requested).
    pub level_probs: Vec<Var>,
    /// `[D]` language embedding (the zero constant under `zero_text`).
    pub text_embed: Var,
    /// `[D]` pooled, projected level-0 image features.
    pub image_embed: Option<Var>,
    pub pyramid: Vec<Var>,
}

pub fn forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    image: &Tensor,
    seq: &TokenSequence,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    validate_image(image)?;
    let text_embed = if opts.zero_text {
        tape.constant(Tensor::zeros(&[cfg.text_dim]))
    } else {
        text::encode_text(tape, seq, store)?
    };
    let (_, h, w) = image.chw()?;
    check_divisible(h, w, cfg.levels)?;
    let img = tape.constant(image.clone());
    let pyramid = encode_image(tape, img, store, cfg.levels)?;
    let mut fused = Vec::with_capacity(cfg.levels);
    for (k, &feat) in pyramid.iter().enumerate() {
        fused.push(fuse_level(tape, feat, text_embed, store, k)?);
    }
    let logits = tape.param(store, SCALE_LOGITS)?;
    let weights = scale_weights(tape, logits)?;
    let combined = combine_scales(tape, &fused, weights)?;
    let hw = tape.param(store, HEAD_WEIGHT)?;
    let hb = tape.param(store, HEAD_BIAS)?;
    let head = tape.conv2d(combined, hw, Some(hb), 1, 0)?;
    let probs = tape.softmax_channels(head)?;

    let mut level_probs = Vec::new();
    if opts.level_heads {
        for (k, &l) in fused.iter().enumerate() {
            let aw = tape.param(store, &aux_weight(k))?;
            let ab = tape.param(store, &aux_bias(k))?;
            let a = tape.conv2d(l, aw, Some(ab), 1, 0)?;
            level_probs.push(tape.softmax_channels(a)?);
        }
    }

    let image_embed = if opts.image_embedding {
        Some(image_embedding(tape, store, pyramid[0])?)
    } else {
        None
    };
    Ok(ForwardOutput {
        probs,
        level_probs,
        text_embed,
        image_embed,
        pyramid,
    })
}

/// Global-average-pooled level-0 features, projected to the text width.
pub fn image_embedding(tape: &mut Tape, store: &ParamStore, level0: Var) -> Result<Var> {
    let pooled = tape.spatial_mean(level0)?;
    let f = tape.value(pooled).len();
    let row = tape.reshape(pooled, &[1, f])?;
    let w = tape.param(store, ALIGN_WEIGHT)?;
    let proj = tape.matmul(row, w)?;
    let d = tape.value(proj).shape()[1];
    let flat = tape.reshape(proj, &[d])?;
    let b = tape.param(store, ALIGN_BIAS)?;
    tape.add(flat, b)
}

/// Full-resolution class distribution for one image and prompt.
pub fn predict_mask(
    store: &ParamStore,
    cfg: &ModelConfig,
    image: &Tensor,
    seq: &TokenSequence,
    zero_text: bool,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let out = forward(
        &mut tape,
        store,
        cfg,
        image,
        seq,
        ForwardOptions {
            zero_text,
            ..Default::default()
        },
    )?;
    Ok(tape.value(out.probs).clone())
}

/// Per-pixel argmax over channels of a `[C, H, W]` tensor; ties go to the lower class id.
pub fn argmax_mask(probs: &Tensor) -> Result<crate::mask::ClassMask> {
    let (c, h, w) = probs.chw()?;
    if c > 256 {
        return Err(Error::dim("argmax_mask supports at most 256 classes"));
    }
    let p = h * w;
    let data = probs.data();
    let ids = (0..p)
        .map(|i| {
            let mut best = 0;
            let mut best_v = data[i];
            for ch in 1..c {
                let v = data[ch * p + i];
                if v > best_v {
                    best = ch;
                    best_v = v;
                }
            }
            best as u8
        })
        .collect();
    crate::mask::ClassMask::new(h, w, ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn micro() -> ModelConfig {
        ModelConfig {
            height: 8,
            width: 8,
            levels: 2,
            classes: 3,
            features: 4,
            text_dim: 5,
            vocab_size: 7,
            max_tokens: 6,
        }
    }

    #[test]
    fn divisibility_is_checked_before_compute() {
        let mut cfg = micro();
        cfg.height = 6;
        cfg.levels = 3;
        assert!(matches!(cfg.validate(), Err(Error::Dimension(_))));
        let store = init_params(&micro(), 1).unwrap();
        let mut t = Tape::new();
        let img = t.constant(Tensor::zeros(&[3, 6, 6]));
        assert!(encode_image(&mut t, img, &store, 3).is_err());
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn pyramid_shapes_halve() {
        let mut cfg = micro();
        cfg.height = 64;
        cfg.width = 64;
        cfg.levels = 3;
        let store = init_params(&cfg, 3).unwrap();
        let mut t = Tape::new();
        let img = t.constant(Tensor::full(&[3, 64, 64], 0.5));
        let p = encode_image(&mut t, img, &store, 3).unwrap();
        let shapes: Vec<_> = p.iter().map(|&v| t.value(v).shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![4, 64, 64], vec![4, 32, 32], vec![4, 16, 16]]);
    }

    #[test]
    fn single_level_pyramid() {
        let store = init_params(&micro(), 3).unwrap();
        let mut t = Tape::new();
        let img = t.constant(Tensor::full(&[3, 8, 8], 0.5));
        let p = encode_image(&mut t, img, &store, 1).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(t.value(p[0]).shape(), &[4, 8, 8]);
    }

    #[test]
    fn zero_encoder_gives_zero_pyramid() {
        let mut store = init_params(&micro(), 3).unwrap();
        for (name, p) in store.iter_mut() {
            if name.starts_with("image_encoder") {
                p.value.data_mut().fill(0.0);
            }
        }
        let mut t = Tape::new();
        let img = t.constant(Tensor::full(&[3, 8, 8], 0.9));
        for v in encode_image(&mut t, img, &store, 2).unwrap() {
            assert!(t.value(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        let mut img = Tensor::full(&[3, 8, 8], 0.5);
        img.data_mut()[70] = 1.5;
        assert!(matches!(validate_image(&img), Err(Error::Data(_))));
    }

    #[test]
    fn argmax_ties_go_low() {
        let p = Tensor::new(&[3, 1, 2], vec![0.4, 0.3, 0.4, 0.3, 0.2, 0.3]).unwrap();
        let m = argmax_mask(&p).unwrap();
        assert_eq!(m.ids(), &[0, 0]);
    }
}
