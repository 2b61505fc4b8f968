//! Paired image/mask augmentation: horizontal flip, crop-and-resize-back, colour jitter.

use crate::error::{Error, Result};
use crate::mask::ClassMask;
use crate::rng::SplitMix64;
use crate::synth::SegSample;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub flip: bool,
    pub crop: bool,
    pub jitter: bool,
    /// Crop side as a fraction of the canvas.
    pub crop_fraction: f64,
    pub jitter_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip: true,
            crop: true,
            jitter: true,
            crop_fraction: 7.0 / 8.0,
            jitter_range: (0.8, 1.2),
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            flip: false,
            crop: false,
            jitter: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::config("crop_fraction must be in (0, 1]"));
        }
        let (lo, hi) = self.jitter_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::config("jitter range must satisfy 0 < lo <= hi"));
        }
        Ok(())
    }
}

/// Concrete random choices for one augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDecision {
    pub flip: bool,
    /// `(top, left, height, width)` of the crop window.
    pub crop: (usize, usize, usize, usize),
    pub jitter: [f64; 3],
}

impl AugmentDecision {
    pub fn identity(height: usize, width: usize) -> Self {
        AugmentDecision {
            flip: false,
            crop: (0, 0, height, width),
            jitter: [1.0; 3],
        }
    }

    pub fn draw(cfg: &AugmentConfig, height: usize, width: usize, rng: &mut SplitMix64) -> Self {
        let flip = rng.bernoulli(0.5) && cfg.flip;
        let crop = if cfg.crop {
            let ch = ((height as f64 * cfg.crop_fraction) as usize).clamp(1, height);
            let cw = ((width as f64 * cfg.crop_fraction) as usize).clamp(1, width);
            let top = rng.below(height - ch + 1);
            let left = rng.below(width - cw + 1);
            (top, left, ch, cw)
        } else {
            (0, 0, height, width)
        };
        let mut jitter = [1.0; 3];
        for j in &mut jitter {
            let v = rng.uniform(cfg.jitter_range.0, cfg.jitter_range.1);
            if cfg.jitter {
                *j = v;
            }
        }
        AugmentDecision { flip, crop, jitter }
    }
}

pub fn augment(sample: &SegSample, cfg: &AugmentConfig, rng: &mut SplitMix64) -> Result<SegSample> {
    let (_, h, w) = sample.image.chw()?;
    apply(sample, &AugmentDecision::draw(cfg, h, w, rng))
}

/// Applies a decision; the prompt and scenario are carried through unchanged.
pub fn apply(sample: &SegSample, d: &AugmentDecision) -> Result<SegSample> {
    let (c, h, w) = sample.image.chw()?;
    let (top, left, ch, cw) = d.crop;
    if ch == 0 || cw == 0 || top + ch > h || left + cw > w {
        return Err(Error::contract("crop window outside the canvas"));
    }
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();
    if d.flip {
        image = flip_image(&image)?;
        mask = mask.flip_horizontal();
    }
    if (ch, cw) != (h, w) {
        let mut crop = alloc::vec::Vec::with_capacity(c * ch * cw);
        for k in 0..c {
            for r in top..top + ch {
                let row = &image.data()[(k * h + r) * w..][..w];
                crop.extend_from_slice(&row[left..left + cw]);
            }
        }
        image = tensor::bilinear_resize(&Tensor::new(&[c, ch, cw], crop)?, h, w)?;
        let mut ids = alloc::vec::Vec::with_capacity(h * w);
        // nearest sample on the same align-corners grid as the image resize
        let near = |i: usize, n: usize, src: usize| {
            if n <= 1 {
                0
            } else {
                (2 * i * (src - 1) + (n - 1)) / (2 * (n - 1))
            }
        };
        for r in 0..h {
            let sr = top + near(r, h, ch);
            for col in 0..w {
                ids.push(mask.get(sr, left + near(col, w, cw)));
            }
        }
        mask = ClassMask::new(h, w, ids)?;
    }
    if d.jitter != [1.0; 3] {
        let p = h * w;
        for (k, s) in d.jitter.iter().enumerate().take(c) {
            for v in &mut image.data_mut()[k * p..(k + 1) * p] {
                *v = (*v * s).clamp(0.0, 1.0);
            }
        }
    }
    Ok(SegSample {
        image,
        mask,
        prompt: sample.prompt.clone(),
        scenario: sample.scenario,
        seed: sample.seed,
    })
}

fn flip_image(x: &Tensor) -> Result<Tensor> {
    let (_, _, w) = x.chw()?;
    let mut out = alloc::vec::Vec::with_capacity(x.len());
    for row in x.data().chunks(w) {
        out.extend(row.iter().rev());
    }
    Tensor::new(x.shape(), out)
}
