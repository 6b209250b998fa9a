//! Non-convolutional primitives with hand-written backward passes.

use super::FeatureMap;
use crate::error::{dim_err, DgError, Result};
use crate::scalar::Scalar;

pub fn relu_forward<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < T::ZERO {
            *v = T::ZERO;
        }
    }
    y
}

/// `output` is the forward result; gradient passes where it is positive.
pub fn relu_backward<T: Scalar>(output: &FeatureMap<T>, upstream: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if !output.same_shape(upstream) {
        return Err(dim_err!("relu upstream {:?} vs output {:?}", upstream.shape(), output.shape()));
    }
    let mut dx = upstream.clone();
    for (d, &y) in dx.data_mut().iter_mut().zip(output.data()) {
        if y <= T::ZERO {
            *d = T::ZERO;
        }
    }
    Ok(dx)
}

pub fn add_assign<T: Scalar>(acc: &mut FeatureMap<T>, other: &FeatureMap<T>) -> Result<()> {
    if !acc.same_shape(other) {
        return Err(dim_err!("cannot add {:?} to {:?}", other.shape(), acc.shape()));
    }
    for (a, &b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
    Ok(())
}

/// Batch normalization over `(N, H, W)` per channel, with running statistics
/// for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// Weight kept on the old running value per update.
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    xhat: FeatureMap<T>,
    inv_std: Vec<f64>,
}

pub struct BatchNormGrads<T> {
    pub input: FeatureMap<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::ONE; channels],
            beta: vec![T::ZERO; channels],
            running_mean: vec![T::ZERO; channels],
            running_var: vec![T::ONE; channels],
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &FeatureMap<T>) -> Result<()> {
        if x.channels() != self.channels() {
            return Err(dim_err!(
                "batch norm over {} channels got input with {}",
                self.channels(),
                x.channels()
            ));
        }
        Ok(())
    }

    pub fn forward_train(&mut self, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, BatchNormCache<T>)> {
        self.check(x)?;
        let (n, c, _, _) = x.shape();
        let plane = x.plane_len();
        let count = (n * plane) as f64;
        let mut y = x.clone();
        let mut xhat = x.clone();
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            for s in 0..n {
                let base = x.index(s, ch, 0, 0);
                sum += x.data()[base..base + plane].iter().map(|v| v.to_f64()).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0;
            for s in 0..n {
                let base = x.index(s, ch, 0, 0);
                sq += x.data()[base..base + plane]
                    .iter()
                    .map(|v| (v.to_f64() - mean).powi(2))
                    .sum::<f64>();
            }
            let var = sq / count;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = istd;
            let (g, b) = (self.gamma[ch].to_f64(), self.beta[ch].to_f64());
            for s in 0..n {
                let base = x.index(s, ch, 0, 0);
                for off in base..base + plane {
                    let h = (x.data()[off].to_f64() - mean) * istd;
                    xhat.data_mut()[off] = T::from_f64(h);
                    y.data_mut()[off] = T::from_f64(g * h + b);
                }
            }
            let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
            let mom = self.momentum;
            self.running_mean[ch] = T::from_f64(mom * self.running_mean[ch].to_f64() + (1.0 - mom) * mean);
            self.running_var[ch] = T::from_f64(mom * self.running_var[ch].to_f64() + (1.0 - mom) * unbiased);
        }
        Ok((y, BatchNormCache { xhat, inv_std }))
    }

    pub fn forward_eval(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.check(x)?;
        let (n, c, _, _) = x.shape();
        let plane = x.plane_len();
        let mut y = x.clone();
        for ch in 0..c {
            let istd = 1.0 / (self.running_var[ch].to_f64() + self.eps).sqrt();
            let scale = self.gamma[ch].to_f64() * istd;
            let shift = self.beta[ch].to_f64() - self.running_mean[ch].to_f64() * scale;
            let (scale, shift) = (T::from_f64(scale), T::from_f64(shift));
            for s in 0..n {
                let base = x.index(s, ch, 0, 0);
                for v in &mut y.data_mut()[base..base + plane] {
                    *v = *v * scale + shift;
                }
            }
        }
        Ok(y)
    }

    pub fn backward(&self, cache: &BatchNormCache<T>, upstream: &FeatureMap<T>) -> Result<BatchNormGrads<T>> {
        if !cache.xhat.same_shape(upstream) {
            return Err(dim_err!(
                "batch norm upstream {:?} vs cached {:?}",
                upstream.shape(),
                cache.xhat.shape()
            ));
        }
        let (n, c, _, _) = upstream.shape();
        let plane = upstream.plane_len();
        let count = (n * plane) as f64;
        let mut dx = upstream.clone();
        let mut dgamma = vec![T::ZERO; c];
        let mut dbeta = vec![T::ZERO; c];
        for ch in 0..c {
            let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
            for s in 0..n {
                let base = upstream.index(s, ch, 0, 0);
                for off in base..base + plane {
                    let dy = upstream.data()[off].to_f64();
                    sum_dy += dy;
                    sum_dy_xhat += dy * cache.xhat.data()[off].to_f64();
                }
            }
            dgamma[ch] = T::from_f64(sum_dy_xhat);
            dbeta[ch] = T::from_f64(sum_dy);
            let k = self.gamma[ch].to_f64() * cache.inv_std[ch] / count;
            for s in 0..n {
                let base = upstream.index(s, ch, 0, 0);
                for off in base..base + plane {
                    let dy = upstream.data()[off].to_f64();
                    let h = cache.xhat.data()[off].to_f64();
                    dx.data_mut()[off] = T::from_f64(k * (count * dy - sum_dy - h * sum_dy_xhat));
                }
            }
        }
        Ok(BatchNormGrads {
            input: dx,
            gamma: dgamma,
            beta: dbeta,
        })
    }
}

/// Global average pooling to `(N, C, 1, 1)`.
pub fn avgpool_global_forward<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let (n, c, _, _) = x.shape();
    let plane = x.plane_len();
    let mut y = FeatureMap::zeros(n, c, 1, 1).expect("nonzero dims");
    for s in 0..n {
        for ch in 0..c {
            let base = x.index(s, ch, 0, 0);
            let sum: f64 = x.data()[base..base + plane].iter().map(|v| v.to_f64()).sum();
            y.set(s, ch, 0, 0, T::from_f64(sum / plane as f64));
        }
    }
    y
}

pub fn avgpool_global_backward<T: Scalar>(
    input_shape: (usize, usize, usize, usize),
    upstream: &FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    let (n, c, h, w) = input_shape;
    if upstream.shape() != (n, c, 1, 1) {
        return Err(dim_err!("avgpool upstream {:?} for input {:?}", upstream.shape(), input_shape));
    }
    let scale = T::from_f64(1.0 / (h * w) as f64);
    FeatureMap::from_fn(n, c, h, w, |s, ch, _, _| upstream.at(s, ch, 0, 0) * scale)
}

/// Max pooling; the cache records the flat argmax index of every output.
pub fn maxpool_forward<T: Scalar>(
    x: &FeatureMap<T>,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(FeatureMap<T>, Vec<usize>)> {
    let (n, c, h, w) = x.shape();
    let (ho, wo) = super::ConvGeometry::new(stride, padding).output_dims(h, w, k)?;
    let mut y = FeatureMap::zeros(n, c, ho, wo)?;
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for s in 0..n {
        for ch in 0..c {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut best = None::<(T, usize)>;
                    for m in 0..k {
                        for q in 0..k {
                            let ii = (oi * stride + m) as isize - padding as isize;
                            let jj = (oj * stride + q) as isize - padding as isize;
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                continue;
                            }
                            let idx = x.index(s, ch, ii as usize, jj as usize);
                            let v = x.data()[idx];
                            if best.is_none_or(|(b, _)| v > b) {
                                best = Some((v, idx));
                            }
                        }
                    }
                    let (v, idx) = best.ok_or_else(|| dim_err!("empty pooling window"))?;
                    y.set(s, ch, oi, oj, v);
                    arg.push(idx);
                }
            }
        }
    }
    Ok((y, arg))
}

pub fn maxpool_backward<T: Scalar>(
    input_shape: (usize, usize, usize, usize),
    argmax: &[usize],
    upstream: &FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    if argmax.len() != upstream.data().len() {
        return Err(dim_err!("maxpool cache length {} vs upstream {}", argmax.len(), upstream.data().len()));
    }
    let (n, c, h, w) = input_shape;
    let mut dx = FeatureMap::zeros(n, c, h, w)?;
    for (&idx, &g) in argmax.iter().zip(upstream.data()) {
        dx.data_mut()[idx] += g;
    }
    Ok(dx)
}

/// Fully connected layer; `weight` is `in x out` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub struct LinearGrads<T> {
    pub input: FeatureMap<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![T::ZERO; inputs * outputs],
            bias: vec![T::ZERO; outputs],
        }
    }

    fn check(&self, x: &FeatureMap<T>) -> Result<()> {
        if x.sample_len() != self.inputs {
            return Err(dim_err!(
                "linear layer expects {} features per sample, got {}",
                self.inputs,
                x.sample_len()
            ));
        }
        Ok(())
    }

    /// Flattens each sample and returns `(N, outputs, 1, 1)`.
    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.check(x)?;
        let n = x.batch();
        let mut y = FeatureMap::zeros(n, self.outputs, 1, 1)?;
        for s in 0..n {
            y.data_mut()[s * self.outputs..(s + 1) * self.outputs].copy_from_slice(&self.bias);
        }
        T::gemm(
            n,
            self.inputs,
            self.outputs,
            T::ONE,
            x.data(),
            self.inputs as isize,
            1,
            &self.weight,
            self.outputs as isize,
            1,
            T::ONE,
            y.data_mut(),
            self.outputs as isize,
            1,
        );
        Ok(y)
    }

    pub fn backward(&self, x: &FeatureMap<T>, upstream: &FeatureMap<T>) -> Result<LinearGrads<T>> {
        self.check(x)?;
        let n = x.batch();
        if upstream.shape() != (n, self.outputs, 1, 1) {
            return Err(dim_err!("linear upstream {:?}, expected ({n}, {}, 1, 1)", upstream.shape(), self.outputs));
        }
        let (i, o) = (self.inputs as isize, self.outputs as isize);
        let mut dw = vec![T::ZERO; self.inputs * self.outputs];
        // dW (in x out) = x^T (in x N) * dy (N x out)
        T::gemm(self.inputs, n, self.outputs, T::ONE, x.data(), 1, i, upstream.data(), o, 1, T::ZERO, &mut dw, o, 1);
        let mut db = vec![T::ZERO; self.outputs];
        for s in 0..n {
            for (b, &g) in db.iter_mut().zip(&upstream.data()[s * self.outputs..(s + 1) * self.outputs]) {
                *b += g;
            }
        }
        let (_, c, h, w) = x.shape();
        let mut dx = FeatureMap::zeros(n, c, h, w)?;
        // dx (N x in) = dy (N x out) * W^T (out x in)
        T::gemm(n, self.outputs, self.inputs, T::ONE, upstream.data(), o, 1, &self.weight, 1, o, T::ZERO, dx.data_mut(), i, 1);
        Ok(LinearGrads {
            input: dx,
            weight: dw,
            bias: db,
        })
    }
}

pub struct XentOutput<T> {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// Gradient of the mean loss with respect to the logits.
    pub grad: FeatureMap<T>,
    pub correct: usize,
}

/// Softmax followed by cross-entropy; logits are `(N, classes, 1, 1)`.
pub fn softmax_xent<T: Scalar>(logits: &FeatureMap<T>, labels: &[u32]) -> Result<XentOutput<T>> {
    let n = logits.batch();
    let classes = logits.sample_len();
    if labels.len() != n {
        return Err(dim_err!("{} labels for batch of {n}", labels.len()));
    }
    let mut grad = FeatureMap::zeros(n, logits.channels(), logits.height(), logits.width())?;
    let mut total = 0.0;
    let mut correct = 0;
    for (s, &label) in labels.iter().enumerate() {
        let label = label as usize;
        if label >= classes {
            return Err(DgError::Data(format!("label {label} out of range for {classes} classes")));
        }
        let row = &logits.data()[s * classes..(s + 1) * classes];
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v.to_f64() - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[label].to_f64();
        let argmax = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v.to_f64() > best.1 { (i, v.to_f64()) } else { best })
            .0;
        if argmax == label {
            correct += 1;
        }
        let g = &mut grad.data_mut()[s * classes..(s + 1) * classes];
        for (c, gv) in g.iter_mut().enumerate() {
            let p = (row[c].to_f64() - lse).exp();
            let t = if c == label { 1.0 } else { 0.0 };
            *gv = T::from_f64((p - t) / n as f64);
        }
    }
    Ok(XentOutput {
        loss: total / n as f64,
        grad,
        correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(seed: u64, n: usize, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_fn(n, c, h, w, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn relu_definition() {
        let x = FeatureMap::from_vec(1, 2, 1, 1, vec![-1.0f32, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 2.0]);
        let up = FeatureMap::from_vec(1, 2, 1, 1, vec![5.0f32, 7.0]).unwrap();
        assert_eq!(relu_backward(&relu_forward(&x), &up).unwrap().data(), &[0.0, 7.0]);
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = FeatureMap::from_vec(2, 10, 1, 1, vec![0.3f64; 20]).unwrap();
        let out = softmax_xent(&logits, &[3, 7]).unwrap();
        assert!((out.loss - 10f64.ln()).abs() < 1e-12);
        assert!(softmax_xent(&logits, &[3, 10]).is_err());
        assert!(softmax_xent(&logits, &[3]).is_err());
    }

    #[test]
    fn xent_gradient_matches_fd() {
        let x = rand_map(1, 3, 5, 1, 1);
        let labels = [0, 4, 2];
        let out = softmax_xent(&x, &labels).unwrap();
        let fd = oracle::fd_map_grad(&x, 1e-5, |x| softmax_xent(x, &labels).unwrap().loss);
        assert!(oracle::max_rel_err(out.grad.data(), fd.data()) <= 1e-4);
    }

    #[test]
    fn batchnorm_backward_matches_fd() {
        let x = rand_map(2, 4, 8, 3, 3);
        let v = rand_map(3, 4, 8, 3, 3);
        let mut bn = BatchNorm::<f64>::new(8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for ch in 0..8 {
            bn.gamma[ch] = rng.random_range(0.5..1.5);
            bn.beta[ch] = rng.random_range(-0.5..0.5);
        }
        let (_, cache) = bn.forward_train(&x).unwrap();
        let grads = bn.backward(&cache, &v).unwrap();
        let loss = |bn: &BatchNorm<f64>, x: &FeatureMap<f64>| bn.clone().forward_train(x).unwrap().0.dot(&v);
        let fdx = oracle::fd_map_grad(&x, 1e-5, |x| loss(&bn, x));
        assert!(oracle::max_rel_err(grads.input.data(), fdx.data()) <= 1e-4);
        let fdg = oracle::fd_vec_grad(&bn.gamma, 1e-5, |g| {
            let mut b = bn.clone();
            b.gamma = g.to_vec();
            loss(&b, &x)
        });
        assert!(oracle::max_rel_err(&grads.gamma, &fdg) <= 1e-4);
        let fdb = oracle::fd_vec_grad(&bn.beta, 1e-5, |g| {
            let mut b = bn.clone();
            b.beta = g.to_vec();
            loss(&b, &x)
        });
        assert!(oracle::max_rel_err(&grads.beta, &fdb) <= 1e-4);
    }

    #[test]
    fn batchnorm_running_stats_use_momentum() {
        let x = FeatureMap::from_vec(2, 1, 1, 1, vec![1.0f64, 3.0]).unwrap();
        let mut bn = BatchNorm::<f64>::new(1);
        bn.forward_train(&x).unwrap();
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-12);
        // unbiased variance 2.0
        assert!((bn.running_var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn linear_and_pool_backward_match_fd() {
        let x = rand_map(5, 3, 4, 2, 2);
        let mut lin = Linear::<f64>::zeros(16, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        lin.weight.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        lin.bias.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        let v = rand_map(7, 3, 3, 1, 1);
        let g = lin.backward(&x, &v).unwrap();
        let fdx = oracle::fd_map_grad(&x, 1e-5, |x| lin.forward(x).unwrap().dot(&v));
        assert!(oracle::max_rel_err(g.input.data(), fdx.data()) <= 1e-4);
        let fdw = oracle::fd_vec_grad(&lin.weight, 1e-5, |w| {
            let mut l = lin.clone();
            l.weight = w.to_vec();
            l.forward(&x).unwrap().dot(&v)
        });
        assert!(oracle::max_rel_err(&g.weight, &fdw) <= 1e-4);

        let vp = rand_map(8, 3, 4, 1, 1);
        let dp = avgpool_global_backward(x.shape(), &vp).unwrap();
        let fdp = oracle::fd_map_grad(&x, 1e-5, |x| avgpool_global_forward(x).dot(&vp));
        assert!(oracle::max_rel_err(dp.data(), fdp.data()) <= 1e-4);

        let (y, arg) = maxpool_forward(&x, 2, 2, 0).unwrap();
        let vm = rand_map(9, 3, 4, y.height(), y.width());
        let dm = maxpool_backward(x.shape(), &arg, &vm).unwrap();
        let fdm = oracle::fd_map_grad(&x, 1e-5, |x| maxpool_forward(x, 2, 2, 0).unwrap().0.dot(&vm));
        assert!(oracle::max_rel_err(dm.data(), fdm.data()) <= 1e-4);
    }
}
