use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Integer class-id raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClassMask {
    height: usize,
    width: usize,
    ids: Vec<u8>,
}

impl ClassMask {
    pub fn new(height: usize, width: usize, ids: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || ids.len() != height * width {
            return Err(Error::dim(format!(
                "mask {height}x{width} cannot hold {} ids",
                ids.len()
            )));
        }
        Ok(ClassMask { height, width, ids })
    }

    pub fn filled(height: usize, width: usize, id: u8) -> Self {
        assert!(height > 0 && width > 0);
        ClassMask {
            height,
            width,
            ids: alloc::vec![id; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn ids_mut(&mut self) -> &mut [u8] {
        &mut self.ids
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.ids[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, id: u8) {
        self.ids[row * self.width + col] = id;
    }

    pub fn as_usize(&self) -> Vec<usize> {
        self.ids.iter().map(|&v| v as usize).collect()
    }

    /// Errors with the first pixel whose id is `>= classes`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.ids.iter().position(|&v| v as usize >= classes) {
            None => Ok(()),
            Some(i) => Err(Error::data(format!(
                "class id {} >= {classes} at pixel (row {}, col {})",
                self.ids[i],
                i / self.width,
                i % self.width
            ))),
        }
    }

    /// Nearest-neighbour subsampling by `2^level`, aligned with stride-2 / pad-1 convolutions
    /// (output pixel `(i, j)` reads input `(i * 2^level, j * 2^level)`).
    pub fn downsample_pow2(&self, level: usize) -> Result<ClassMask> {
        let f = 1usize << level;
        if self.height % f != 0 || self.width % f != 0 {
            return Err(Error::dim(format!(
                "mask {}x{} not divisible by {f}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / f, self.width / f);
        let mut ids = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                ids.push(self.get(i * f, j * f));
            }
        }
        ClassMask::new(h, w, ids)
    }

    pub fn flip_horizontal(&self) -> ClassMask {
        let mut ids = Vec::with_capacity(self.ids.len());
        for row in self.ids.chunks(self.width) {
            ids.extend(row.iter().rev());
        }
        ClassMask {
            height: self.height,
            width: self.width,
            ids,
        }
    }
}
