//! Dense row-major `f64` tensors and the raw numeric kernels the tape builds on.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64` values in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(alloc::format!("zero-sized dimension in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(alloc::format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector tensor");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a 2-D tensor from nested rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(&[rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(alloc::format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Interprets a `[C, H, W]` tensor and returns `(C, H, W)`.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::dim(alloc::format!(
                "expected [C, H, W], got {:?}",
                self.shape
            ))),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` over raw row-major buffers.
///
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<(Self, usize)> {
        let (cin, h, w) = match *input {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::dim(alloc::format!("conv2d input must be [Cin, H, W], got {input:?}"))),
        };
        let (cout, kcin, kh, kw) = match *kernel {
            [a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(Error::dim(alloc::format!(
                    "conv2d kernel must be [Cout, Cin, kh, kw], got {kernel:?}"
                )))
            }
        };
        if kcin != cin {
            return Err(Error::dim(alloc::format!(
                "conv2d channel mismatch: input {input:?} vs kernel {kernel:?}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::dim(alloc::format!("conv2d kernel {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be >= 1"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::dim(alloc::format!(
                "conv2d kernel {kernel:?} larger than padded input {input:?} (pad {pad})"
            )));
        }
        let out_h = (h + 2 * pad - kh) / stride + 1;
        let out_w = (w + 2 * pad - kw) / stride + 1;
        Ok((
            ConvGeometry {
                cin,
                h,
                w,
                kh,
                kw,
                stride,
                pad,
                out_h,
                out_w,
            },
            cout,
        ))
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds the input into a `[Cin*kh*kw, out_h*out_w]` column matrix.
    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let cols = self.out_len();
        let mut out = vec![0.0; self.patch_len() * cols];
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    for oi in 0..self.out_h {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let src = &x[(c * self.h + ii as usize) * self.w..][..self.w];
                        for oj in 0..self.out_w {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && jj < self.w as isize {
                                dst[oi * self.out_w + oj] = src[jj as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters columns back into an input-shaped buffer.
    pub fn col2im(&self, cols_buf: &[f64], dx: &mut [f64]) {
        let cols = self.out_len();
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols_buf[row * cols..(row + 1) * cols];
                    for oi in 0..self.out_h {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + ii as usize) * self.w..][..self.w];
                        for oj in 0..self.out_w {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && jj < self.w as isize {
                                dst[jj as usize] += src[oi * self.out_w + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Align-corners source coordinate table for one resized axis: `(lo, hi, frac)` per output index.
pub(crate) fn resize_axis(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|o| {
            if output == 1 || input == 1 {
                return (0, 0, 0.0);
            }
            let num = o * (input - 1);
            let den = output - 1;
            let lo = num / den;
            let rem = num % den;
            if rem == 0 || lo + 1 >= input {
                (lo, lo, 0.0)
            } else {
                (lo, lo + 1, rem as f64 / den as f64)
            }
        })
        .collect()
}

/// Plain bilinear (align-corners) resize of a `[C, H, W]` tensor without recording anything.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim("bilinear_resize target must be at least 1x1"));
    }
    if out_h == h && out_w == w {
        return Ok(x.clone());
    }
    let rows = resize_axis(h, out_h);
    let cols = resize_axis(w, out_w);
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let src = &x.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oi, &(r0, r1, fr)) in rows.iter().enumerate() {
            for (oj, &(c0, c1, fc)) in cols.iter().enumerate() {
                let top = src[r0 * w + c0] * (1.0 - fc) + src[r0 * w + c1] * fc;
                let bot = src[r1 * w + c0] * (1.0 - fc) + src[r1 * w + c1] * fc;
                dst[oi * out_w + oj] = top * (1.0 - fr) + bot * fr;
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Per-pixel softmax across the channel axis of a `[C, H, W]` tensor.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let (c, h, w) = logits.chw()?;
    let hw = h * w;
    let src = logits.data();
    let mut out = vec![0.0; c * hw];
    let mut max = vec![f64::NEG_INFINITY; hw];
    for ch in 0..c {
        for (m, &v) in max.iter_mut().zip(&src[ch * hw..(ch + 1) * hw]) {
            if v > *m {
                *m = v;
            }
        }
    }
    let mut sum = vec![0.0; hw];
    for ch in 0..c {
        let row = &mut out[ch * hw..(ch + 1) * hw];
        for p in 0..hw {
            let e = libm::exp(src[ch * hw + p] - max[p]);
            row[p] = e;
            sum[p] += e;
        }
    }
    for ch in 0..c {
        for (v, s) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(&sum) {
            *v /= s;
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Naive matrix product, kept for callers that do not need a tape.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
    Tensor::new(&[m, n], out)
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (a, b) {
        ([m, k1], [k2, n]) if k1 == k2 => Ok((*m, *k1, *n)),
        _ => Err(Error::dim(alloc::format!(
            "matmul shape mismatch: {a:?} x {b:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
    }

    #[test]
    fn resize_axis_endpoints() {
        let t = resize_axis(2, 3);
        assert_eq!(t[0], (0, 0, 0.0));
        assert_eq!(t[1], (0, 1, 0.5));
        assert_eq!(t[2], (1, 1, 0.0));
    }

    #[test]
    fn conv_geometry_rejects_oversized_kernel() {
        let err = ConvGeometry::new(&[1, 2, 2], &[1, 1, 5, 5], 1, 0).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let (g, _) = ConvGeometry::new(&[2, 5, 4], &[3, 2, 3, 3], 2, 1).unwrap();
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = g.im2col(&x);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        g.col2im(&y, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
