//! im2col + GEMM convolution, shared by the dense and grouped entry points.

use rayon::prelude::*;

use super::{FeatureMap, KernelTensor};
use crate::error::{config_err, dim_err, Result};
use crate::scalar::Scalar;

/// Samples per backward reduction chunk. Kernel gradients are summed within a
/// chunk in sample order, then across chunks in chunk order, so results do not
/// depend on the number of worker threads.
const REDUCE_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    /// Stride 1 with "same" zero padding for an odd kernel size.
    pub const fn same(k: usize) -> Self {
        Self {
            stride: 1,
            padding: k / 2,
        }
    }

    pub fn output_dims(&self, h: usize, w: usize, k: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(config_err!("stride must be positive"));
        }
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < k || pw < k {
            return Err(config_err!(
                "kernel {k} does not fit padded input {ph}x{pw}"
            ));
        }
        Ok(((ph - k) / self.stride + 1, (pw - k) / self.stride + 1))
    }
}

/// Shape bookkeeping for one (possibly grouped) convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvPlan {
    pub groups: usize,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
    pub geom: ConvGeometry,
}

impl ConvPlan {
    pub fn new(
        input: (usize, usize, usize, usize),
        groups: usize,
        k: usize,
        cout: usize,
        geom: ConvGeometry,
    ) -> Result<Self> {
        let (_, cin, h, w) = input;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(config_err!(
                "group count {groups} must divide C_in={cin} and C_out={cout}"
            ));
        }
        let (ho, wo) = geom.output_dims(h, w, k)?;
        Ok(Self {
            groups,
            k,
            cin,
            cout,
            h,
            w,
            ho,
            wo,
            geom,
        })
    }

    #[inline]
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    #[inline]
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    #[inline]
    fn rows(&self) -> usize {
        self.k * self.k * self.cin_g()
    }

    #[inline]
    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Weight values per group: `k * k * C_in/G * C_out/G`.
    #[inline]
    pub fn group_weight_len(&self) -> usize {
        self.rows() * self.cout_g()
    }

    /// 1x1 kernels with unit stride and no padding read the input directly.
    #[inline]
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.geom.stride == 1 && self.geom.padding == 0
    }

    /// Fills `col` (`rows x positions`) for group `g` of one input sample.
    fn im2col<T: Scalar>(&self, x: &[T], g: usize, col: &mut [T]) {
        let (k, cin_g, ho, wo) = (self.k, self.cin_g(), self.ho, self.wo);
        let (stride, pad) = (self.geom.stride as isize, self.geom.padding as isize);
        let p = self.positions();
        let plane = self.h * self.w;
        for m in 0..k {
            for n in 0..k {
                for cl in 0..cin_g {
                    let row = (m * k + n) * cin_g + cl;
                    let src = &x[(g * cin_g + cl) * plane..(g * cin_g + cl + 1) * plane];
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oi in 0..ho {
                        let ii = oi as isize * stride + m as isize - pad;
                        let drow = &mut dst[oi * wo..(oi + 1) * wo];
                        if ii < 0 || ii >= self.h as isize {
                            drow.fill(T::ZERO);
                            continue;
                        }
                        let srow = &src[ii as usize * self.w..(ii as usize + 1) * self.w];
                        for (oj, d) in drow.iter_mut().enumerate() {
                            let jj = oj as isize * stride + n as isize - pad;
                            *d = if jj < 0 || jj >= self.w as isize {
                                T::ZERO
                            } else {
                                srow[jj as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Accumulates `col` gradients for group `g` back into one sample's input gradient.
    fn col2im<T: Scalar>(&self, col: &[T], g: usize, dx: &mut [T]) {
        let (k, cin_g, ho, wo) = (self.k, self.cin_g(), self.ho, self.wo);
        let (stride, pad) = (self.geom.stride as isize, self.geom.padding as isize);
        let p = self.positions();
        let plane = self.h * self.w;
        for m in 0..k {
            for n in 0..k {
                for cl in 0..cin_g {
                    let row = (m * k + n) * cin_g + cl;
                    let src = &col[row * p..(row + 1) * p];
                    let dst = &mut dx[(g * cin_g + cl) * plane..(g * cin_g + cl + 1) * plane];
                    for oi in 0..ho {
                        let ii = oi as isize * stride + m as isize - pad;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let drow = &mut dst[ii as usize * self.w..(ii as usize + 1) * self.w];
                        for oj in 0..wo {
                            let jj = oj as isize * stride + n as isize - pad;
                            if jj >= 0 && jj < self.w as isize {
                                drow[jj as usize] += src[oi * wo + oj];
                            }
                        }
                    }
                }
            }
        }
    }

    /// `weights` holds `groups` consecutive blocks laid out `[tap][ci][co]`.
    pub fn forward<T: Scalar>(&self, input: &FeatureMap<T>, weights: &[T]) -> Result<FeatureMap<T>> {
        debug_assert_eq!(weights.len(), self.groups * self.group_weight_len());
        let n = input.batch();
        let mut out = FeatureMap::zeros(n, self.cout, self.ho, self.wo)?;
        let in_len = input.sample_len();
        let out_len = self.cout * self.positions();
        let (rows, p, cout_g) = (self.rows(), self.positions(), self.cout_g());
        let pointwise = self.is_pointwise();
        out.data_mut()
            .par_chunks_mut(out_len)
            .enumerate()
            .for_each_init(
                || vec![T::ZERO; if pointwise { 0 } else { rows * p }],
                |col, (s, y)| {
                    let x = &input.data()[s * in_len..(s + 1) * in_len];
                    for g in 0..self.groups {
                        let w = &weights[g * self.group_weight_len()..(g + 1) * self.group_weight_len()];
                        let colv: &[T] = if pointwise {
                            &x[g * rows * p..(g + 1) * rows * p]
                        } else {
                            self.im2col(x, g, col);
                            col
                        };
                        let yg = &mut y[g * cout_g * p..(g + 1) * cout_g * p];
                        // y_g (cout_g x P) = W_g^T (cout_g x rows) * col (rows x P)
                        T::gemm(
                            cout_g, rows, p, T::ONE, w, 1, cout_g as isize, colv, p as isize, 1,
                            T::ZERO, yg, p as isize, 1,
                        );
                    }
                },
            );
        Ok(out)
    }

    /// Returns `(grad_input, grad_weights)`; `grad_weights` matches the
    /// layout of `weights`.
    pub fn backward<T: Scalar>(
        &self,
        input: &FeatureMap<T>,
        weights: &[T],
        upstream: &FeatureMap<T>,
    ) -> Result<(FeatureMap<T>, Vec<T>)> {
        let n = input.batch();
        if upstream.shape() != (n, self.cout, self.ho, self.wo) {
            return Err(dim_err!(
                "upstream shape {:?} != forward output shape {:?}",
                upstream.shape(),
                (n, self.cout, self.ho, self.wo)
            ));
        }
        let mut dx = FeatureMap::zeros(n, self.cin, self.h, self.w)?;
        let in_len = input.sample_len();
        let out_len = self.cout * self.positions();
        let (rows, p, cout_g) = (self.rows(), self.positions(), self.cout_g());
        let gw = self.group_weight_len();
        let pointwise = self.is_pointwise();

        let partials: Vec<Vec<T>> = dx
            .data_mut()
            .par_chunks_mut(in_len * REDUCE_CHUNK)
            .enumerate()
            .map(|(chunk, dx_chunk)| {
                let mut dw = vec![T::ZERO; self.groups * gw];
                let mut col = vec![T::ZERO; if pointwise { 0 } else { rows * p }];
                let mut dcol = vec![T::ZERO; if pointwise { 0 } else { rows * p }];
                for (local, dxs) in dx_chunk.chunks_mut(in_len).enumerate() {
                    let s = chunk * REDUCE_CHUNK + local;
                    let x = &input.data()[s * in_len..(s + 1) * in_len];
                    let dy = &upstream.data()[s * out_len..(s + 1) * out_len];
                    for g in 0..self.groups {
                        let w = &weights[g * gw..(g + 1) * gw];
                        let dyg = &dy[g * cout_g * p..(g + 1) * cout_g * p];
                        let dwg = &mut dw[g * gw..(g + 1) * gw];
                        if pointwise {
                            let colv = &x[g * rows * p..(g + 1) * rows * p];
                            // dW_g += col (rows x P) * dy_g^T (P x cout_g)
                            T::gemm(
                                rows, p, cout_g, T::ONE, colv, p as isize, 1, dyg, 1, p as isize,
                                T::ONE, dwg, cout_g as isize, 1,
                            );
                            // dx_g (rows x P) = W_g (rows x cout_g) * dy_g (cout_g x P)
                            let dxg = &mut dxs[g * rows * p..(g + 1) * rows * p];
                            T::gemm(
                                rows, cout_g, p, T::ONE, w, cout_g as isize, 1, dyg, p as isize, 1,
                                T::ONE, dxg, p as isize, 1,
                            );
                        } else {
                            self.im2col(x, g, &mut col);
                            T::gemm(
                                rows, p, cout_g, T::ONE, &col, p as isize, 1, dyg, 1, p as isize,
                                T::ONE, dwg, cout_g as isize, 1,
                            );
                            T::gemm(
                                rows, cout_g, p, T::ONE, w, cout_g as isize, 1, dyg, p as isize, 1,
                                T::ZERO, &mut dcol, p as isize, 1,
                            );
                            self.col2im(&dcol, g, dxs);
                        }
                    }
                }
                dw
            })
            .collect();

        let mut dw = vec![T::ZERO; self.groups * gw];
        for part in &partials {
            for (acc, v) in dw.iter_mut().zip(part) {
                *acc += *v;
            }
        }
        Ok((dx, dw))
    }
}

/// Dense 2-D convolution: `out[s, q, i, j] = sum_{m,n,p} x[s, p, i*stride+m-pad, j*stride+n-pad] * w[m, n, p, q]`.
pub fn conv2d_forward<T: Scalar>(
    input: &FeatureMap<T>,
    kernel: &KernelTensor<T>,
    geom: ConvGeometry,
) -> Result<FeatureMap<T>> {
    if input.channels() != kernel.in_channels() {
        return Err(dim_err!(
            "input has {} channels, kernel expects {}",
            input.channels(),
            kernel.in_channels()
        ));
    }
    let plan = ConvPlan::new(input.shape(), 1, kernel.size(), kernel.out_channels(), geom)?;
    plan.forward(input, kernel.data())
}

/// Adjoint of [`conv2d_forward`] with respect to both the input and the kernel.
pub fn conv2d_backward<T: Scalar>(
    input: &FeatureMap<T>,
    kernel: &KernelTensor<T>,
    upstream: &FeatureMap<T>,
    geom: ConvGeometry,
) -> Result<(FeatureMap<T>, KernelTensor<T>)> {
    if input.channels() != kernel.in_channels() {
        return Err(dim_err!(
            "input has {} channels, kernel expects {}",
            input.channels(),
            kernel.in_channels()
        ));
    }
    let plan = ConvPlan::new(input.shape(), 1, kernel.size(), kernel.out_channels(), geom)?;
    let (dx, dw) = plan.backward(input, kernel.data(), upstream)?;
    let dk = KernelTensor::from_vec(kernel.size(), kernel.in_channels(), kernel.out_channels(), dw)?;
    Ok((dx, dk))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
        FeatureMap::from_fn(n, c, h, w, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn rand_kernel(rng: &mut ChaCha8Rng, k: usize, cin: usize, cout: usize) -> KernelTensor<f64> {
        KernelTensor::from_fn(k, cin, cout, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_map(&mut rng, 2, 3, 4, 5);
        let y = conv2d_forward(&x, &KernelTensor::identity(3).unwrap(), ConvGeometry::new(1, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_kernel_on_constant_input() {
        let c = 0.75;
        let x = FeatureMap::from_fn(1, 2, 5, 5, |_, _, _, _| c).unwrap();
        let w = KernelTensor::from_fn(3, 2, 1, |_, _, _, _| 1.0).unwrap();
        let y = conv2d_forward(&x, &w, ConvGeometry::same(3)).unwrap();
        let oracle_y = oracle::conv2d_naive(&x, &w, ConvGeometry::same(3)).unwrap();
        assert_eq!(oracle_y.at(0, 0, 2, 2), 18.0 * c);
        assert_eq!(y.at(0, 0, 2, 2), 18.0 * c);
        // corner sees 2x2 taps only
        assert_eq!(y.at(0, 0, 0, 0), 8.0 * c);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_map(&mut rng, 2, 4, 5, 5);
        let w = rand_kernel(&mut rng, 3, 4, 4);
        for geom in [ConvGeometry::same(3), ConvGeometry::new(2, 1), ConvGeometry::new(1, 0)] {
            let fast = conv2d_forward(&x, &w, geom).unwrap();
            let slow = oracle::conv2d_naive(&x, &w, geom).unwrap();
            assert!(oracle::max_rel_err(fast.data(), slow.data()) <= 1e-12, "{geom:?}");
        }
    }

    #[test]
    fn shape_errors() {
        let x = FeatureMap::<f32>::zeros(1, 3, 4, 4).unwrap();
        let w = KernelTensor::<f32>::zeros(3, 2, 2).unwrap();
        assert!(matches!(
            conv2d_forward(&x, &w, ConvGeometry::same(3)),
            Err(crate::DgError::Dimension(_))
        ));
        let w = KernelTensor::<f32>::zeros(7, 3, 2).unwrap();
        assert!(matches!(
            conv2d_forward(&x, &w, ConvGeometry::new(1, 0)),
            Err(crate::DgError::Config(_))
        ));
        let w = KernelTensor::<f32>::zeros(3, 3, 2).unwrap();
        let bad_up = FeatureMap::<f32>::zeros(1, 2, 3, 3).unwrap();
        assert!(conv2d_backward(&x, &w, &bad_up, ConvGeometry::same(3)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_map(&mut rng, 2, 3, 4, 4);
        let w = rand_kernel(&mut rng, 3, 3, 2);
        let up = FeatureMap::zeros(2, 2, 4, 4).unwrap();
        let (dx, dw) = conv2d_backward(&x, &w, &up, ConvGeometry::same(3)).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(dw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_loss_kernel_gradient_is_shifted_input_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_map(&mut rng, 2, 2, 4, 4);
        let w = rand_kernel(&mut rng, 3, 2, 3);
        let geom = ConvGeometry::same(3);
        let up = FeatureMap::from_fn(2, 3, 4, 4, |_, _, _, _| 1.0).unwrap();
        let (_, dw) = conv2d_backward(&x, &w, &up, geom).unwrap();
        let fd = oracle::fd_kernel_grad(&w, 1e-5, |k| {
            conv2d_forward(&x, k, geom).unwrap().data().iter().sum()
        });
        assert!(oracle::max_rel_err(dw.data(), fd.data()) <= 1e-6);
        // closed form: sum of input channel p over positions shifted by (m, n)
        for m in 0..3 {
            for n in 0..3 {
                for p in 0..2 {
                    let mut expect = 0.0;
                    for s in 0..2 {
                        for i in 0..4isize {
                            for j in 0..4isize {
                                let (ii, jj) = (i + m as isize - 1, j + n as isize - 1);
                                if (0..4).contains(&ii) && (0..4).contains(&jj) {
                                    expect += x.at(s, p, ii as usize, jj as usize);
                                }
                            }
                        }
                    }
                    for q in 0..3 {
                        assert!((dw.at(m, n, p, q) - expect).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for geom in [ConvGeometry::same(3), ConvGeometry::new(2, 1)] {
            let x = rand_map(&mut rng, 2, 3, 5, 5);
            let w = rand_kernel(&mut rng, 3, 3, 2);
            let (ho, wo) = geom.output_dims(5, 5, 3).unwrap();
            let v = rand_map(&mut rng, 2, 2, ho, wo);
            let loss = |x: &FeatureMap<f64>, w: &KernelTensor<f64>| conv2d_forward(x, w, geom).unwrap().dot(&v);
            let (dx, dw) = conv2d_backward(&x, &w, &v, geom).unwrap();
            let fdx = oracle::fd_map_grad(&x, 1e-5, |x| loss(x, &w));
            let fdw = oracle::fd_kernel_grad(&w, 1e-5, |w| loss(&x, w));
            assert!(oracle::max_rel_err(dx.data(), fdx.data()) <= 1e-4);
            assert!(oracle::max_rel_err(dw.data(), fdw.data()) <= 1e-4);
        }
    }

    #[test]
    fn backward_independent_of_thread_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = FeatureMap::<f32>::from_fn(19, 4, 6, 6, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let w = KernelTensor::<f32>::from_fn(3, 4, 4, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let up = FeatureMap::<f32>::from_fn(19, 4, 6, 6, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| conv2d_backward(&x, &w, &up, ConvGeometry::same(3)).unwrap())
        };
        let (a_dx, a_dw) = run(1);
        let (b_dx, b_dw) = run(3);
        assert_eq!(a_dx, b_dx);
        assert_eq!(a_dw, b_dw);
    }
}
