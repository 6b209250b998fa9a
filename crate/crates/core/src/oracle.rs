//! Slow reference implementations used to check the fast paths: nested-loop
//! convolution, central finite differences, and error metrics. Nothing here is
//! called on a training path.

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvGeometry, FeatureMap, KernelTensor};

/// Direct evaluation of the convolution double sum.
pub fn conv2d_naive<T: Scalar>(
    input: &FeatureMap<T>,
    kernel: &KernelTensor<T>,
    geom: ConvGeometry,
) -> Result<FeatureMap<T>> {
    let (n, cin, h, w) = input.shape();
    if cin != kernel.in_channels() {
        return Err(dim_err!("input channels {cin} vs kernel {}", kernel.in_channels()));
    }
    let k = kernel.size();
    let (ho, wo) = geom.output_dims(h, w, k)?;
    let cout = kernel.out_channels();
    FeatureMap::from_fn(n, cout, ho, wo, |s, q, i, j| {
        let mut acc = 0.0f64;
        for m in 0..k {
            for nn in 0..k {
                let ii = (i * geom.stride + m) as isize - geom.padding as isize;
                let jj = (j * geom.stride + nn) as isize - geom.padding as isize;
                if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                    continue;
                }
                for p in 0..cin {
                    acc += input.at(s, p, ii as usize, jj as usize).to_f64()
                        * kernel.at(m, nn, p, q).to_f64();
                }
            }
        }
        T::from_f64(acc)
    })
}

/// `max |a - b| / max |b|`: the worst deviation measured against the scale
/// of the reference `b`.
pub fn max_rel_err<A: Scalar, B: Scalar>(a: &[A], b: &[B]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    let scale = b.iter().map(|v| v.to_f64().abs()).fold(0.0, f64::max);
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x.to_f64() - y.to_f64()).abs())
        .fold(0.0, f64::max);
    if diff == 0.0 {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn fd_vec_grad(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let plus = f(&probe);
            probe[i] = orig - step;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

pub fn fd_map_grad(
    x: &FeatureMap<f64>,
    step: f64,
    mut f: impl FnMut(&FeatureMap<f64>) -> f64,
) -> FeatureMap<f64> {
    let (n, c, h, w) = x.shape();
    let mut probe = x.clone();
    let grad = fd_vec_grad(x.data(), step, |v| {
        probe.data_mut().copy_from_slice(v);
        f(&probe)
    });
    FeatureMap::from_vec(n, c, h, w, grad).expect("same shape")
}

pub fn fd_kernel_grad(
    w: &KernelTensor<f64>,
    step: f64,
    mut f: impl FnMut(&KernelTensor<f64>) -> f64,
) -> KernelTensor<f64> {
    let mut probe = w.clone();
    let grad = fd_vec_grad(w.data(), step, |v| {
        probe.data_mut().copy_from_slice(v);
        f(&probe)
    });
    KernelTensor::from_vec(w.size(), w.in_channels(), w.out_channels(), grad).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_scales_by_reference() {
        assert_eq!(max_rel_err(&[1.0f64, 2.0], &[1.0f64, 2.0]), 0.0);
        assert!((max_rel_err(&[1.0f64, 2.1], &[1.0f64, 2.0]) - 0.05).abs() < 1e-12);
        assert!(max_rel_err(&[1e-3f64], &[0.0f64]).is_infinite());
    }

    #[test]
    fn fd_of_quadratic() {
        let g = fd_vec_grad(&[1.0, -2.0], 1e-5, |v| v[0] * v[0] + 3.0 * v[1]);
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }
}
