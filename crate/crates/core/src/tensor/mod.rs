//! Dense rank-4 tensors and the convolution-family primitives built on them.
//!
//! Activations are `N x C x H x W`, row-major with each sample's channels
//! contiguous. Kernels are stored tap-major: `k x k x C_in x C_out`, so each
//! spatial tap `(m, n)` is one `C_in x C_out` row-major matrix.

mod conv;
mod group;
pub mod layers;

pub use conv::{conv2d_backward, conv2d_forward, ConvGeometry};
pub use group::{group_conv_backward, group_conv_forward, GroupSpec, GroupedKernel};

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        check_dims(&[n, c, h, w])?;
        Ok(Self {
            n,
            c,
            h,
            w,
            data: vec![T::ZERO; n * c * h * w],
        })
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        check_dims(&[n, c, h, w])?;
        if data.len() != n * c * h * w {
            return Err(dim_err!(
                "feature map ({n}, {c}, {h}, {w}) needs {} values, got {}",
                n * c * h * w,
                data.len()
            ));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn from_fn(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut out = Self::zeros(n, c, h, w)?;
        let mut idx = 0;
        for s in 0..n {
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        out.data[idx] = f(s, ch, i, j);
                        idx += 1;
                    }
                }
            }
        }
        Ok(out)
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.c
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }

    /// Number of values in one sample (`C * H * W`).
    #[inline]
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn index(&self, s: usize, ch: usize, i: usize, j: usize) -> usize {
        ((s * self.c + ch) * self.h + i) * self.w + j
    }

    #[inline]
    pub fn at(&self, s: usize, ch: usize, i: usize, j: usize) -> T {
        self.data[self.index(s, ch, i, j)]
    }

    #[inline]
    pub fn set(&mut self, s: usize, ch: usize, i: usize, j: usize, v: T) {
        let idx = self.index(s, ch, i, j);
        self.data[idx] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn sample(&self, s: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[s * len..(s + 1) * len]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Reorders channels: output channel `j` is input channel `order[j]`.
    pub fn gather_channels(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.c || order.iter().any(|&o| o >= self.c) {
            return Err(dim_err!(
                "channel order of length {} invalid for {} channels",
                order.len(),
                self.c
            ));
        }
        let plane = self.plane_len();
        let mut out = Vec::with_capacity(self.data.len());
        for s in 0..self.n {
            let base = s * self.sample_len();
            for &src in order {
                out.extend_from_slice(&self.data[base + src * plane..base + (src + 1) * plane]);
            }
        }
        Self::from_vec(self.n, self.c, self.h, self.w, out)
    }

    /// Inverse of [`gather_channels`](Self::gather_channels): input channel `j`
    /// lands at output channel `order[j]`.
    pub fn scatter_channels(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.c || order.iter().any(|&o| o >= self.c) {
            return Err(dim_err!(
                "channel order of length {} invalid for {} channels",
                order.len(),
                self.c
            ));
        }
        let plane = self.plane_len();
        let mut out = vec![T::ZERO; self.data.len()];
        for s in 0..self.n {
            let base = s * self.sample_len();
            for (j, &dst) in order.iter().enumerate() {
                out[base + dst * plane..base + (dst + 1) * plane]
                    .copy_from_slice(&self.data[base + j * plane..base + (j + 1) * plane]);
            }
        }
        Self::from_vec(self.n, self.c, self.h, self.w, out)
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.to_f64() * b.to_f64())
            .sum()
    }
}

/// Convolution kernel, `k x k` spatial taps of `C_in x C_out` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelTensor<T> {
    k: usize,
    cin: usize,
    cout: usize,
    data: Vec<T>,
}

impl<T: Scalar> KernelTensor<T> {
    pub fn zeros(k: usize, cin: usize, cout: usize) -> Result<Self> {
        check_dims(&[k, cin, cout])?;
        Ok(Self {
            k,
            cin,
            cout,
            data: vec![T::ZERO; k * k * cin * cout],
        })
    }

    pub fn from_vec(k: usize, cin: usize, cout: usize, data: Vec<T>) -> Result<Self> {
        check_dims(&[k, cin, cout])?;
        if data.len() != k * k * cin * cout {
            return Err(dim_err!(
                "kernel ({k}, {k}, {cin}, {cout}) needs {} values, got {}",
                k * k * cin * cout,
                data.len()
            ));
        }
        Ok(Self { k, cin, cout, data })
    }

    pub fn from_fn(
        k: usize,
        cin: usize,
        cout: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut out = Self::zeros(k, cin, cout)?;
        let mut idx = 0;
        for m in 0..k {
            for n in 0..k {
                for p in 0..cin {
                    for q in 0..cout {
                        out.data[idx] = f(m, n, p, q);
                        idx += 1;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Per-tap identity over channels (a 1x1 kernel acting as the identity map).
    pub fn identity(channels: usize) -> Result<Self> {
        Self::from_fn(1, channels, channels, |_, _, p, q| {
            if p == q {
                T::ONE
            } else {
                T::ZERO
            }
        })
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn in_channels(&self) -> usize {
        self.cin
    }

    #[inline]
    pub fn out_channels(&self) -> usize {
        self.cout
    }

    #[inline]
    pub fn taps(&self) -> usize {
        self.k * self.k
    }

    #[inline]
    pub fn tap_len(&self) -> usize {
        self.cin * self.cout
    }

    #[inline]
    pub fn index(&self, m: usize, n: usize, p: usize, q: usize) -> usize {
        ((m * self.k + n) * self.cin + p) * self.cout + q
    }

    #[inline]
    pub fn at(&self, m: usize, n: usize, p: usize, q: usize) -> T {
        self.data[self.index(m, n, p, q)]
    }

    #[inline]
    pub fn set(&mut self, m: usize, n: usize, p: usize, q: usize, v: T) {
        let idx = self.index(m, n, p, q);
        self.data[idx] = v;
    }

    /// The `C_in x C_out` matrix of tap number `t = m * k + n`.
    pub fn tap(&self, t: usize) -> &[T] {
        let len = self.tap_len();
        &self.data[t * len..(t + 1) * len]
    }

    pub fn tap_mut(&mut self, t: usize) -> &mut [T] {
        let len = self.tap_len();
        &mut self.data[t * len..(t + 1) * len]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.k, self.cin, self.cout) == (other.k, other.cin, other.cout)
    }

    pub fn cast<U: Scalar>(&self) -> KernelTensor<U> {
        KernelTensor {
            k: self.k,
            cin: self.cin,
            cout: self.cout,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Multiplies every tap elementwise by `mask(p, q)`.
    pub fn masked(&self, mut mask: impl FnMut(usize, usize) -> bool) -> Self {
        let mut out = self.clone();
        for p in 0..self.cin {
            for q in 0..self.cout {
                if !mask(p, q) {
                    for t in 0..self.taps() {
                        let idx = t * self.tap_len() + p * self.cout + q;
                        out.data[idx] = T::ZERO;
                    }
                }
            }
        }
        out
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.to_f64() * b.to_f64())
            .sum()
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(dim_err!("all dimensions must be >= 1, got {dims:?}"));
    }
    Ok(())
}
