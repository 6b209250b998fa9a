//! Dynamic grouping convolution: a convolution whose kernel taps are masked
//! elementwise by the gate-derived relationship matrix `U`.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::gates::{
    build_relationship_matrix_rect, contract_du, group_count, layer_complexity_rect, BinaryGates,
    ChannelLayout, GateVector, RelationshipMatrix,
};
use crate::scalar::Scalar;
use crate::tensor::{conv2d_backward, conv2d_forward, ConvGeometry, FeatureMap, KernelTensor};

#[derive(Clone, Debug)]
pub struct DGConvLayer<T> {
    kernel: KernelTensor<T>,
    gates: GateVector,
    geom: ConvGeometry,
    layout: ChannelLayout,
    /// Always equals `build_relationship_matrix_rect(binarize(gates))`.
    relation: RelationshipMatrix,
}

/// Gradients of a DGConv layer.
#[derive(Clone, Debug)]
pub struct DGConvGrads<T> {
    pub input: FeatureMap<T>,
    /// Masked by `U`: entries where `U = 0` are exactly zero.
    pub kernel: KernelTensor<T>,
    /// `∂L/∂g̃` from the task loss, passed straight through the sign.
    pub gates: Vec<f64>,
}

/// Per-gate gradient split by source.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateGradient {
    pub task: Vec<f64>,
    pub penalty: Vec<f64>,
}

impl GateGradient {
    pub fn zeros(k: usize) -> Self {
        Self {
            task: vec![0.0; k],
            penalty: vec![0.0; k],
        }
    }

    pub fn total(&self) -> Vec<f64> {
        self.task.iter().zip(&self.penalty).map(|(a, b)| a + b).collect()
    }
}

impl<T: Scalar> DGConvLayer<T> {
    pub fn new(kernel: KernelTensor<T>, gates: GateVector, geom: ConvGeometry) -> Result<Self> {
        let (layout, k) = ChannelLayout::for_channels(kernel.in_channels(), kernel.out_channels())?;
        if gates.len() != k {
            return Err(dim_err!(
                "{}x{} layer needs {k} gates, got {}",
                kernel.in_channels(),
                kernel.out_channels(),
                gates.len()
            ));
        }
        let relation = build_relationship_matrix_rect(&gates.binarize()?, kernel.in_channels(), kernel.out_channels())?;
        Ok(Self {
            kernel,
            gates,
            geom,
            layout,
            relation,
        })
    }

    /// Zero kernel with all gates at zero (binarized to ones: a dense layer).
    pub fn with_channels(cin: usize, cout: usize, k: usize, geom: ConvGeometry) -> Result<Self> {
        let kernel = KernelTensor::zeros(k, cin, cout)?;
        let gates = GateVector::for_channels(cin.min(cout))?;
        Self::new(kernel, gates, geom)
    }

    pub fn kernel(&self) -> &KernelTensor<T> {
        &self.kernel
    }

    pub fn kernel_mut(&mut self) -> &mut KernelTensor<T> {
        &mut self.kernel
    }

    pub fn gates(&self) -> &GateVector {
        &self.gates
    }

    pub fn binary_gates(&self) -> &BinaryGates {
        self.relation.gates()
    }

    pub fn relationship(&self) -> &RelationshipMatrix {
        &self.relation
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geom
    }

    pub fn layout(&self) -> ChannelLayout {
        self.layout
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.out_channels()
    }

    pub fn group_count(&self) -> usize {
        group_count(self.binary_gates())
    }

    /// Active connections, the number of ones in `U`.
    pub fn complexity(&self) -> u64 {
        layer_complexity_rect(self.binary_gates(), self.in_channels(), self.out_channels())
            .expect("validated at construction")
    }

    /// Mutates the continuous gates; `U` is rebuilt only if a binarized gate
    /// flipped. Returns whether it was rebuilt.
    pub fn update_gates(&mut self, f: impl FnOnce(&mut [f64])) -> Result<bool> {
        let mut next = self.gates.clone();
        f(next.values_mut());
        let binary = next.binarize()?;
        self.gates = next;
        if &binary == self.relation.gates() {
            return Ok(false);
        }
        self.relation = build_relationship_matrix_rect(&binary, self.in_channels(), self.out_channels())?;
        Ok(true)
    }

    pub fn set_gates(&mut self, values: &[f64]) -> Result<bool> {
        if values.len() != self.gates.len() {
            return Err(dim_err!("expected {} gate values, got {}", self.gates.len(), values.len()));
        }
        self.update_gates(|g| g.copy_from_slice(values))
    }

    /// `U ⊙ ω` for every tap.
    pub fn effective_kernel(&self) -> KernelTensor<T> {
        let u = &self.relation;
        self.kernel.masked(|p, q| u.get(p, q))
    }

    pub fn forward(&self, input: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        conv2d_forward(input, &self.effective_kernel(), self.geom)
    }

    pub fn backward(&self, input: &FeatureMap<T>, upstream: &FeatureMap<T>) -> Result<DGConvGrads<T>> {
        let (dx, plain) = conv2d_backward(input, &self.effective_kernel(), upstream, self.geom)?;
        let (cin, cout) = (self.in_channels(), self.out_channels());
        let u = &self.relation;

        // dL/dU[p, q] = Σ_taps dL/dW_eff ⊙ ω
        let mut dl_du = vec![0.0f64; cin * cout];
        for t in 0..plain.taps() {
            for ((acc, &gw), &w) in dl_du.iter_mut().zip(plain.tap(t)).zip(self.kernel.tap(t)) {
                *acc += gw.to_f64() * w.to_f64();
            }
        }
        let gates = contract_du(u.gates(), self.layout, cin, cout, &dl_du);
        let grad_kernel = plain.masked(|p, q| u.get(p, q));
        Ok(DGConvGrads {
            input: dx,
            kernel: grad_kernel,
            gates,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::{du_dgk_relaxed, relaxed_relationship};
    use crate::oracle;
    use crate::tensor::{GroupSpec, GroupedKernel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_layer(seed: u64, c: usize, k: usize, gates: &[f64]) -> (DGConvLayer<f64>, FeatureMap<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernel = KernelTensor::from_fn(k, c, c, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let layer = DGConvLayer::new(kernel, GateVector::new(gates.to_vec()).unwrap(), ConvGeometry::same(k)).unwrap();
        let x = FeatureMap::from_fn(2, c, 4, 4, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap();
        (layer, x)
    }

    #[test]
    fn all_ones_gates_is_regular_conv() {
        let (layer, x) = random_layer(1, 8, 3, &[0.1, 0.0, 2.0]);
        let y = layer.forward(&x).unwrap();
        let dense = conv2d_forward(&x, layer.kernel(), layer.geometry()).unwrap();
        assert_eq!(y, dense);
        assert_eq!(layer.effective_kernel(), *layer.kernel());
    }

    #[test]
    fn all_zero_gates_is_depthwise() {
        let (layer, x) = random_layer(2, 8, 3, &[-0.1, -1e-8, -2.0]);
        let y = layer.forward(&x).unwrap();
        let dw = GroupedKernel::from_dense(layer.kernel(), GroupSpec::new(8, 8, 8).unwrap()).unwrap();
        let y_dw = crate::tensor::group_conv_forward(&x, &dw, layer.geometry()).unwrap();
        assert!(oracle::max_rel_err(y.data(), y_dw.data()) <= 1e-12);
        let eff = layer.effective_kernel();
        for t in 0..9 {
            for p in 0..8 {
                for q in 0..8 {
                    if p != q {
                        assert_eq!(eff.tap(t)[p * 8 + q], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn one_by_one_masked_example() {
        // g = [1, 0], C = 4: U = 1 ⊗ I
        let (layer, x) = random_layer(3, 4, 1, &[0.3, -0.3]);
        let masked = layer.kernel().masked(|p, q| p % 2 == q % 2);
        let y = layer.forward(&x).unwrap();
        let y_ref = oracle::conv2d_naive(&x, &masked, layer.geometry()).unwrap();
        assert!(oracle::max_rel_err(y.data(), y_ref.data()) <= 1e-6);
    }

    #[test]
    fn effective_kernel_nnz_equals_complexity() {
        for bits in [[0.1, -0.1, 0.1], [-1.0, -1.0, 1.0], [-1.0; 3], [1.0; 3]] {
            let (layer, _) = random_layer(4, 8, 3, &bits);
            let eff = layer.effective_kernel();
            for t in 0..9 {
                let nnz = eff.tap(t).iter().filter(|&&v| v != 0.0).count() as u64;
                assert_eq!(nnz, layer.complexity());
            }
            assert_eq!(layer.effective_kernel().masked(|_, _| true), eff);
        }
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let (layer, x) = random_layer(5, 4, 3, &[0.5, -0.5]);
        let up = FeatureMap::zeros(2, 4, 4, 4).unwrap();
        let g = layer.backward(&x, &up).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.kernel.data().iter().all(|&v| v == 0.0));
        assert!(g.gates.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for case in 0..6 {
            let gates: Vec<f64> = (0..3).map(|_| if rng.random_bool(0.5) { 0.4 } else { -0.4 }).collect();
            let (layer, x) = random_layer(100 + case, 8, 3, &gates);
            let v = FeatureMap::from_fn(2, 8, 4, 4, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap();
            let grads = layer.backward(&x, &v).unwrap();

            let fdx = oracle::fd_map_grad(&x, 1e-5, |x| layer.forward(x).unwrap().dot(&v));
            assert!(oracle::max_rel_err(grads.input.data(), fdx.data()) <= 1e-4);

            let fdw = oracle::fd_kernel_grad(layer.kernel(), 1e-5, |w| {
                let mut l = layer.clone();
                *l.kernel_mut() = w.clone();
                l.forward(&x).unwrap().dot(&v)
            });
            assert!(oracle::max_rel_err(grads.kernel.data(), fdw.data()) <= 1e-4);

            // relaxed construction, evaluated at the binarized point
            let g0: Vec<f64> = layer.binary_gates().as_slice().iter().map(|&b| b as u8 as f64).collect();
            let relaxed_loss = |g: &[f64]| {
                let u = relaxed_relationship(g);
                let w = KernelTensor::from_fn(3, 8, 8, |m, n, p, q| layer.kernel().at(m, n, p, q) * u[p * 8 + q]).unwrap();
                conv2d_forward(&x, &w, layer.geometry()).unwrap().dot(&v)
            };
            let fdg = oracle::fd_vec_grad(&g0, 1e-5, relaxed_loss);
            assert!(oracle::max_rel_err(&grads.gates, &fdg) <= 1e-3, "{:?} vs {:?}", grads.gates, fdg);
        }
    }

    #[test]
    fn contraction_matches_dense_derivatives() {
        let (layer, x) = random_layer(9, 8, 3, &[-0.2, 0.2, -0.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let v = FeatureMap::from_fn(2, 8, 4, 4, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let grads = layer.backward(&x, &v).unwrap();
        let (_, plain) = conv2d_backward(&x, &layer.effective_kernel(), &v, layer.geometry()).unwrap();
        let g0: Vec<f64> = vec![0.0, 1.0, 0.0];
        for k in 0..3 {
            let du = du_dgk_relaxed(&g0, k).unwrap();
            let mut expect = 0.0;
            for t in 0..9 {
                for e in 0..64 {
                    expect += plain.tap(t)[e] * layer.kernel().tap(t)[e] * du[e];
                }
            }
            assert!((grads.gates[k] - expect).abs() <= 1e-10 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn gradient_masking_is_exact() {
        let (layer, x) = random_layer(6, 8, 3, &[-0.5, 0.5, -0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let v = FeatureMap::from_fn(2, 8, 4, 4, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let g = layer.backward(&x, &v).unwrap();
        let u = layer.relationship();
        for t in 0..9 {
            for p in 0..8 {
                for q in 0..8 {
                    if !u.get(p, q) {
                        assert_eq!(g.kernel.tap(t)[p * 8 + q], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn sign_flip_rebuilds_relationship() {
        let (mut layer, _) = random_layer(7, 4, 1, &[1e-8, 1e-8]);
        assert_eq!(layer.group_count(), 1);
        assert!(!layer.update_gates(|g| g[0] += 0.5).unwrap());
        assert!(layer.update_gates(|g| g[1] = -1e-8).unwrap());
        assert_eq!(layer.group_count(), 2);
        assert_eq!(layer.relationship().gates().to_bits(), vec![1, 0]);
        assert!(layer.update_gates(|g| g[0] = f64::NAN).is_err());
    }

    #[test]
    fn gate_gradient_independent_of_magnitude() {
        let (a, x) = random_layer(8, 4, 3, &[1e-8, -1e-8]);
        let (b, _) = random_layer(8, 4, 3, &[5.0, -3.0]);
        let v = FeatureMap::from_fn(2, 4, 4, 4, |s, c, i, j| (s + c + i + j) as f64 * 0.1).unwrap();
        assert_eq!(a.backward(&x, &v).unwrap().gates, b.backward(&x, &v).unwrap().gates);
    }

    #[test]
    fn non_square_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let kernel = KernelTensor::from_fn(1, 4, 8, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let layer = DGConvLayer::new(kernel, GateVector::new(vec![0.2, -0.2]).unwrap(), ConvGeometry::new(1, 0)).unwrap();
        assert_eq!(layer.complexity(), 16);
        let x = FeatureMap::from_fn(1, 4, 3, 3, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let v = FeatureMap::from_fn(1, 8, 3, 3, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let grads = layer.backward(&x, &v).unwrap();
        let g0 = [1.0, 0.0];
        let fdg = oracle::fd_vec_grad(&g0, 1e-5, |g| {
            let u = relaxed_relationship(g);
            let w = KernelTensor::from_fn(1, 4, 8, |m, n, p, q| layer.kernel().at(m, n, p, q) * u[p * 4 + q / 2]).unwrap();
            conv2d_forward(&x, &w, layer.geometry()).unwrap().dot(&v)
        });
        assert!(oracle::max_rel_err(&grads.gates, &fdg) <= 1e-3);
        assert!(DGConvLayer::<f32>::with_channels(4, 12, 3, ConvGeometry::same(3)).is_err());
    }
}
