//! Groupable ResNeXt-style networks: bottleneck blocks whose 3x3 middle
//! convolution is dense, a fixed group convolution, or a DGConv layer.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::compiler::{compile, savings_report, CompiledLayer, SavingsReport};
use crate::dgconv::{DGConvLayer, GateGradient};
use crate::error::{config_err, DgError, Result};
use crate::gates::{log2_exact, BinaryGates, GateVector};
use crate::scalar::Scalar;
use crate::tensor::layers::{
    add_assign, avgpool_global_backward, avgpool_global_forward, maxpool_backward, maxpool_forward, relu_backward,
    relu_forward, BatchNorm, BatchNormCache, Linear,
};
use crate::tensor::{
    conv2d_backward, conv2d_forward, group_conv_backward, group_conv_forward, ConvGeometry, FeatureMap, GroupSpec,
    GroupedKernel, KernelTensor,
};

/// How the middle 3x3 convolution of every bottleneck is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ConvMode {
    Dense,
    FixedGroup(usize),
    Dgconv,
}

impl FromStr for ConvMode {
    type Err = DgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(ConvMode::Dense),
            "dgconv" => Ok(ConvMode::Dgconv),
            other => {
                let groups = other
                    .strip_prefix("group:")
                    .and_then(|g| g.parse::<usize>().ok())
                    .filter(|&g| g > 0)
                    .ok_or_else(|| config_err!("unknown convolution mode {other:?} (dense | dgconv | group:<G>)"))?;
                Ok(ConvMode::FixedGroup(groups))
            }
        }
    }
}

impl fmt::Display for ConvMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConvMode::Dense => f.write_str("dense"),
            ConvMode::Dgconv => f.write_str("dgconv"),
            ConvMode::FixedGroup(g) => write!(f, "group:{g}"),
        }
    }
}

impl TryFrom<String> for ConvMode {
    type Error = DgError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ConvMode> for String {
    fn from(m: ConvMode) -> String {
        m.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StemKind {
    /// 3x3 stride-1 convolution, for 32x32 inputs.
    Cifar,
    /// 7x7 stride-2 convolution followed by 3x3 stride-2 max pooling.
    Imagenet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub classes: usize,
    pub stem: StemKind,
    pub stem_width: usize,
    /// Width of each stage's middle convolution.
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    /// Block output width is `stage width * expansion`.
    pub expansion: usize,
    pub mode: ConvMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Three stages of widths 16/32/64, two blocks each, 32x32 RGB input.
    pub fn desk() -> Self {
        Self {
            input_channels: 3,
            input_size: 32,
            classes: 10,
            stem: StemKind::Cifar,
            stem_width: 16,
            stage_widths: vec![16, 32, 64],
            blocks_per_stage: vec![2, 2, 2],
            expansion: 2,
            mode: ConvMode::Dgconv,
        }
    }

    /// The 50-layer Groupable-ResNeXt topology at 224x224.
    pub fn resnext50() -> Self {
        Self {
            input_channels: 3,
            input_size: 224,
            classes: 1000,
            stem: StemKind::Imagenet,
            stem_width: 64,
            stage_widths: vec![128, 256, 512, 1024],
            blocks_per_stage: vec![3, 4, 6, 3],
            expansion: 2,
            mode: ConvMode::Dgconv,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.input_size == 0 || self.classes == 0 || self.stem_width == 0 {
            return Err(config_err!("input channels, input size, classes and stem width must be positive"));
        }
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.blocks_per_stage.len() {
            return Err(config_err!(
                "{} stage widths for {} block counts",
                self.stage_widths.len(),
                self.blocks_per_stage.len()
            ));
        }
        if self.expansion == 0 || self.blocks_per_stage.iter().any(|&b| b == 0) {
            return Err(config_err!("expansion and block counts must be positive"));
        }
        for &w in &self.stage_widths {
            match self.mode {
                ConvMode::Dgconv => {
                    log2_exact(w).map_err(|_| config_err!("dgconv stage width {w} is not a power of two"))?;
                }
                ConvMode::FixedGroup(g) => {
                    if w % g != 0 {
                        return Err(config_err!("group count {g} does not divide stage width {w}"));
                    }
                }
                ConvMode::Dense => {
                    if w == 0 {
                        return Err(config_err!("stage widths must be positive"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Middle-convolution widths, one per block, in network order.
    pub fn middle_widths(&self) -> Vec<usize> {
        self.stage_widths
            .iter()
            .zip(&self.blocks_per_stage)
            .flat_map(|(&w, &b)| std::iter::repeat_n(w, b))
            .collect()
    }

    /// Parameter counts implied by the configuration alone.
    pub fn expected_counts(&self) -> ParamCounts {
        let stem_k = match self.stem {
            StemKind::Cifar => 3,
            StemKind::Imagenet => 7,
        };
        let mut weights = stem_k * stem_k * self.input_channels * self.stem_width + 2 * self.stem_width;
        let mut gates = 0;
        let mut in_ch = self.stem_width;
        for (s, (&w, &blocks)) in self.stage_widths.iter().zip(&self.blocks_per_stage).enumerate() {
            let out = w * self.expansion;
            for b in 0..blocks {
                let stride = if b == 0 && s > 0 { 2 } else { 1 };
                weights += in_ch * w + 2 * w;
                weights += match self.mode {
                    ConvMode::Dense | ConvMode::Dgconv => 9 * w * w,
                    ConvMode::FixedGroup(g) => 9 * w * w / g,
                } + 2 * w;
                weights += w * out + 2 * out;
                if stride != 1 || in_ch != out {
                    weights += in_ch * out + 2 * out;
                }
                if self.mode == ConvMode::Dgconv {
                    gates += w.trailing_zeros() as usize;
                }
                in_ch = out;
            }
        }
        weights += in_ch * self.classes + self.classes;
        ParamCounts { weights, gates }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    /// Kernels, normalization affine parameters, classifier weights and bias.
    pub weights: usize,
    /// Continuous gate values.
    pub gates: usize,
}

/// Whether weight decay applies to a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Gate,
}

/// A named tensor for checkpoint I/O.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32 { dims: Vec<usize>, data: Vec<f32> },
    F64 { dims: Vec<usize>, data: Vec<f64> },
    U32 { dims: Vec<usize>, data: Vec<u32> },
}

impl TensorData {
    pub fn dims(&self) -> &[usize] {
        match self {
            TensorData::F32 { dims, .. } | TensorData::F64 { dims, .. } | TensorData::U32 { dims, .. } => dims,
        }
    }

    fn f32_of<T: Scalar>(dims: Vec<usize>, v: &[T]) -> Self {
        TensorData::F32 {
            dims,
            data: v.iter().map(|x| x.to_f64() as f32).collect(),
        }
    }
}

#[derive(Clone, Debug)]
struct Conv<T> {
    kernel: KernelTensor<T>,
    grad: KernelTensor<T>,
    geom: ConvGeometry,
}

impl<T: Scalar> Conv<T> {
    fn new(k: usize, cin: usize, cout: usize, geom: ConvGeometry) -> Result<Self> {
        Ok(Self {
            kernel: KernelTensor::zeros(k, cin, cout)?,
            grad: KernelTensor::zeros(k, cin, cout)?,
            geom,
        })
    }

    fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        conv2d_forward(x, &self.kernel, self.geom)
    }

    fn backward(&mut self, x: &FeatureMap<T>, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let (dx, dk) = conv2d_backward(x, &self.kernel, dy, self.geom)?;
        self.grad = dk;
        Ok(dx)
    }
}

#[derive(Clone, Debug)]
struct Norm<T> {
    bn: BatchNorm<T>,
    grad_gamma: Vec<T>,
    grad_beta: Vec<T>,
}

impl<T: Scalar> Norm<T> {
    fn new(c: usize) -> Self {
        Self {
            bn: BatchNorm::new(c),
            grad_gamma: vec![T::ZERO; c],
            grad_beta: vec![T::ZERO; c],
        }
    }

    fn backward(&mut self, cache: &BatchNormCache<T>, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let g = self.bn.backward(cache, dy)?;
        self.grad_gamma = g.gamma;
        self.grad_beta = g.beta;
        Ok(g.input)
    }
}

/// The middle convolution of a bottleneck block.
#[derive(Clone, Debug)]
pub enum MiddleConv<T> {
    Dense(KernelTensor<T>, ConvGeometry),
    Grouped(GroupedKernel<T>, ConvGeometry),
    Dynamic(DGConvLayer<T>),
    /// Forward-only lowering of a trained DGConv layer.
    Compiled(CompiledLayer<T>),
}

#[derive(Clone, Debug)]
enum MiddleGrad<T> {
    Dense(KernelTensor<T>),
    Grouped(GroupedKernel<T>),
    Dynamic { kernel: KernelTensor<T>, gates: GateGradient },
    None,
}

impl<T: Scalar> MiddleConv<T> {
    fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        match self {
            MiddleConv::Dense(k, g) => conv2d_forward(x, k, *g),
            MiddleConv::Grouped(k, g) => group_conv_forward(x, k, *g),
            MiddleConv::Dynamic(l) => l.forward(x),
            MiddleConv::Compiled(c) => c.forward(x),
        }
    }

    fn zero_grad(&self) -> MiddleGrad<T> {
        match self {
            MiddleConv::Dense(k, _) => MiddleGrad::Dense(KernelTensor::zeros(k.size(), k.in_channels(), k.out_channels()).expect("dims")),
            MiddleConv::Grouped(k, _) => MiddleGrad::Grouped(GroupedKernel::zeros(k.size(), k.spec()).expect("dims")),
            MiddleConv::Dynamic(l) => MiddleGrad::Dynamic {
                kernel: KernelTensor::zeros(l.kernel().size(), l.in_channels(), l.out_channels()).expect("dims"),
                gates: GateGradient::zeros(l.gates().len()),
            },
            MiddleConv::Compiled(_) => MiddleGrad::None,
        }
    }

    pub fn dgconv(&self) -> Option<&DGConvLayer<T>> {
        match self {
            MiddleConv::Dynamic(l) => Some(l),
            _ => None,
        }
    }

    pub fn compiled(&self) -> Option<&CompiledLayer<T>> {
        match self {
            MiddleConv::Compiled(c) => Some(c),
            _ => None,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            MiddleConv::Dense(k, _) => k.in_channels(),
            MiddleConv::Grouped(k, _) => k.spec().in_channels(),
            MiddleConv::Dynamic(l) => l.in_channels(),
            MiddleConv::Compiled(c) => c.in_channels(),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            MiddleConv::Dense(k, _) => k.out_channels(),
            MiddleConv::Grouped(k, _) => k.spec().out_channels(),
            MiddleConv::Dynamic(l) => l.out_channels(),
            MiddleConv::Compiled(c) => c.out_channels(),
        }
    }

    pub fn groups(&self) -> usize {
        match self {
            MiddleConv::Dense(..) => 1,
            MiddleConv::Grouped(k, _) => k.spec().groups(),
            MiddleConv::Dynamic(l) => l.group_count(),
            MiddleConv::Compiled(c) => c.groups(),
        }
    }

    /// Nonzero connections per tap.
    pub fn connections(&self) -> u64 {
        match self {
            MiddleConv::Dense(k, _) => (k.in_channels() * k.out_channels()) as u64,
            MiddleConv::Grouped(k, _) => {
                let s = k.spec();
                (s.in_channels() * s.out_channels() / s.groups()) as u64
            }
            MiddleConv::Dynamic(l) => l.complexity(),
            MiddleConv::Compiled(c) => c.connections(),
        }
    }
}

#[derive(Clone, Debug)]
struct Bottleneck<T> {
    conv1: Conv<T>,
    norm1: Norm<T>,
    mid: MiddleConv<T>,
    mid_grad: MiddleGrad<T>,
    norm2: Norm<T>,
    conv3: Conv<T>,
    norm3: Norm<T>,
    shortcut: Option<(Conv<T>, Norm<T>)>,
}

struct BlockCache<T> {
    x: FeatureMap<T>,
    bn1: BatchNormCache<T>,
    a1: FeatureMap<T>,
    bn2: BatchNormCache<T>,
    a2: FeatureMap<T>,
    bn3: BatchNormCache<T>,
    shortcut_bn: Option<BatchNormCache<T>>,
    out: FeatureMap<T>,
}

impl<T: Scalar> Bottleneck<T> {
    fn forward_train(&mut self, x: FeatureMap<T>) -> Result<(FeatureMap<T>, BlockCache<T>)> {
        let h = self.conv1.forward(&x)?;
        let (h, bn1) = self.norm1.bn.forward_train(&h)?;
        let a1 = relu_forward(&h);
        let h = self.mid.forward(&a1)?;
        let (h, bn2) = self.norm2.bn.forward_train(&h)?;
        let a2 = relu_forward(&h);
        let h = self.conv3.forward(&a2)?;
        let (mut h, bn3) = self.norm3.bn.forward_train(&h)?;
        let shortcut_bn = match &mut self.shortcut {
            Some((conv, norm)) => {
                let s = conv.forward(&x)?;
                let (s, c) = norm.bn.forward_train(&s)?;
                add_assign(&mut h, &s)?;
                Some(c)
            }
            None => {
                add_assign(&mut h, &x)?;
                None
            }
        };
        let out = relu_forward(&h);
        Ok((
            out.clone(),
            BlockCache {
                x,
                bn1,
                a1,
                bn2,
                a2,
                bn3,
                shortcut_bn,
                out,
            },
        ))
    }

    fn forward_eval(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let h = relu_forward(&self.norm1.bn.forward_eval(&self.conv1.forward(x)?)?);
        let h = relu_forward(&self.norm2.bn.forward_eval(&self.mid.forward(&h)?)?);
        let mut h = self.norm3.bn.forward_eval(&self.conv3.forward(&h)?)?;
        match &self.shortcut {
            Some((conv, norm)) => add_assign(&mut h, &norm.bn.forward_eval(&conv.forward(x)?)?)?,
            None => add_assign(&mut h, x)?,
        }
        Ok(relu_forward(&h))
    }

    fn backward(&mut self, cache: BlockCache<T>, dout: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let dh = relu_backward(&cache.out, dout)?;
        let mut dx = match (&mut self.shortcut, &cache.shortcut_bn) {
            (Some((conv, norm)), Some(c)) => {
                let ds = norm.backward(c, &dh)?;
                conv.backward(&cache.x, &ds)?
            }
            _ => dh.clone(),
        };
        let d = self.norm3.backward(&cache.bn3, &dh)?;
        let d = self.conv3.backward(&cache.a2, &d)?;
        let d = relu_backward(&cache.a2, &d)?;
        let d = self.norm2.backward(&cache.bn2, &d)?;
        let d = match &self.mid {
            MiddleConv::Dense(k, g) => {
                let (dx, dk) = conv2d_backward(&cache.a1, k, &d, *g)?;
                self.mid_grad = MiddleGrad::Dense(dk);
                dx
            }
            MiddleConv::Grouped(k, g) => {
                let (dx, dk) = group_conv_backward(&cache.a1, k, &d, *g)?;
                self.mid_grad = MiddleGrad::Grouped(dk);
                dx
            }
            MiddleConv::Dynamic(l) => {
                let grads = l.backward(&cache.a1, &d)?;
                self.mid_grad = MiddleGrad::Dynamic {
                    kernel: grads.kernel,
                    gates: GateGradient {
                        penalty: vec![0.0; grads.gates.len()],
                        task: grads.gates,
                    },
                };
                grads.input
            }
            MiddleConv::Compiled(_) => {
                return Err(DgError::Unsupported("backward through a compiled layer".into()));
            }
        };
        let d = relu_backward(&cache.a1, &d)?;
        let d = self.norm1.backward(&cache.bn1, &d)?;
        let d = self.conv1.backward(&cache.x, &d)?;
        add_assign(&mut dx, &d)?;
        Ok(dx)
    }
}

/// Activations retained by [`Model::forward_train`] for the backward pass.
pub struct ModelCache<T> {
    input: FeatureMap<T>,
    stem_bn: BatchNormCache<T>,
    stem_act: FeatureMap<T>,
    pool_arg: Option<Vec<usize>>,
    blocks: Vec<BlockCache<T>>,
    pooled: FeatureMap<T>,
    final_shape: (usize, usize, usize, usize),
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    stem: Conv<T>,
    stem_norm: Norm<T>,
    blocks: Vec<Bottleneck<T>>,
    fc: Linear<T>,
    fc_grad_w: Vec<T>,
    fc_grad_b: Vec<T>,
}

fn he_fill<T: Scalar>(values: &mut [T], fan_in: usize, rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    for v in values {
        *v = T::from_f64(normal.sample(rng));
    }
}

impl<T: Scalar> Model<T> {
    /// Builds the network with He-initialized kernels and all gates at zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (stem_k, stem_geom) = match config.stem {
            StemKind::Cifar => (3, ConvGeometry::same(3)),
            StemKind::Imagenet => (7, ConvGeometry::new(2, 3)),
        };
        let mut stem = Conv::new(stem_k, config.input_channels, config.stem_width, stem_geom)?;
        he_fill(stem.kernel.data_mut(), stem_k * stem_k * config.input_channels, &mut rng);

        let mut blocks = Vec::new();
        let mut in_ch = config.stem_width;
        for (s, (&w, &count)) in config.stage_widths.iter().zip(&config.blocks_per_stage).enumerate() {
            let out = w * config.expansion;
            for b in 0..count {
                let stride = if b == 0 && s > 0 { 2 } else { 1 };
                let mut conv1 = Conv::new(1, in_ch, w, ConvGeometry::new(1, 0))?;
                he_fill(conv1.kernel.data_mut(), in_ch, &mut rng);
                let geom = ConvGeometry::new(stride, 1);
                let mid = match config.mode {
                    ConvMode::Dense => {
                        let mut k = KernelTensor::zeros(3, w, w)?;
                        he_fill(k.data_mut(), 9 * w, &mut rng);
                        MiddleConv::Dense(k, geom)
                    }
                    ConvMode::FixedGroup(g) => {
                        let mut k = GroupedKernel::zeros(3, GroupSpec::new(g, w, w)?)?;
                        he_fill(k.data_mut(), 9 * w / g, &mut rng);
                        MiddleConv::Grouped(k, geom)
                    }
                    ConvMode::Dgconv => {
                        let mut k = KernelTensor::zeros(3, w, w)?;
                        he_fill(k.data_mut(), 9 * w, &mut rng);
                        MiddleConv::Dynamic(DGConvLayer::new(k, GateVector::for_channels(w)?, geom)?)
                    }
                };
                let mut conv3 = Conv::new(1, w, out, ConvGeometry::new(1, 0))?;
                he_fill(conv3.kernel.data_mut(), w, &mut rng);
                let shortcut = if stride != 1 || in_ch != out {
                    let mut c = Conv::new(1, in_ch, out, ConvGeometry::new(stride, 0))?;
                    he_fill(c.kernel.data_mut(), in_ch, &mut rng);
                    Some((c, Norm::new(out)))
                } else {
                    None
                };
                let mid_grad = mid.zero_grad();
                blocks.push(Bottleneck {
                    conv1,
                    norm1: Norm::new(w),
                    mid,
                    mid_grad,
                    norm2: Norm::new(w),
                    conv3,
                    norm3: Norm::new(out),
                    shortcut,
                });
                in_ch = out;
            }
        }
        let mut fc = Linear::zeros(in_ch, config.classes);
        let bound = 1.0 / (in_ch as f64).sqrt();
        for v in &mut fc.weight {
            *v = T::from_f64(rng.random_range(-bound..bound));
        }
        Ok(Self {
            fc_grad_w: vec![T::ZERO; fc.weight.len()],
            fc_grad_b: vec![T::ZERO; fc.bias.len()],
            stem_norm: Norm::new(config.stem_width),
            config,
            stem,
            blocks,
            fc,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn middle(&self, block: usize) -> &MiddleConv<T> {
        &self.blocks[block].mid
    }

    pub fn forward_train(&mut self, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, ModelCache<T>)> {
        self.check_input(x)?;
        let h = self.stem.forward(x)?;
        let (h, stem_bn) = self.stem_norm.bn.forward_train(&h)?;
        let stem_act = relu_forward(&h);
        let (mut h, pool_arg) = match self.config.stem {
            StemKind::Cifar => (stem_act.clone(), None),
            StemKind::Imagenet => {
                let (p, arg) = maxpool_forward(&stem_act, 3, 2, 1)?;
                (p, Some(arg))
            }
        };
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (out, cache) = block.forward_train(h)?;
            caches.push(cache);
            h = out;
        }
        let final_shape = h.shape();
        let pooled = avgpool_global_forward(&h);
        let logits = self.fc.forward(&pooled)?;
        Ok((
            logits,
            ModelCache {
                input: x.clone(),
                stem_bn,
                stem_act,
                pool_arg,
                blocks: caches,
                pooled,
                final_shape,
            },
        ))
    }

    pub fn forward_eval(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.check_input(x)?;
        let mut h = relu_forward(&self.stem_norm.bn.forward_eval(&self.stem.forward(x)?)?);
        if self.config.stem == StemKind::Imagenet {
            h = maxpool_forward(&h, 3, 2, 1)?.0;
        }
        for block in &self.blocks {
            h = block.forward_eval(&h)?;
        }
        self.fc.forward(&avgpool_global_forward(&h))
    }

    fn check_input(&self, x: &FeatureMap<T>) -> Result<()> {
        let c = &self.config;
        if (x.channels(), x.height(), x.width()) != (c.input_channels, c.input_size, c.input_size) {
            return Err(DgError::Dimension(format!(
                "model expects ({}, {s}, {s}) inputs, got {:?}",
                c.input_channels,
                x.shape(),
                s = c.input_size
            )));
        }
        Ok(())
    }

    /// Computes all parameter gradients from `dlogits`, overwriting previous ones.
    /// DGConv gate gradients land in the task slot; the penalty slot is reset.
    pub fn backward(&mut self, cache: ModelCache<T>, dlogits: &FeatureMap<T>) -> Result<()> {
        let g = self.fc.backward(&cache.pooled, dlogits)?;
        self.fc_grad_w = g.weight;
        self.fc_grad_b = g.bias;
        let mut d = avgpool_global_backward(cache.final_shape, &g.input)?;
        for (block, bc) in self.blocks.iter_mut().zip(cache.blocks).rev() {
            d = block.backward(bc, &d)?;
        }
        if let Some(arg) = &cache.pool_arg {
            d = maxpool_backward(cache.stem_act.shape(), arg, &d)?;
        }
        let d = relu_backward(&cache.stem_act, &d)?;
        let d = self.stem_norm.backward(&cache.stem_bn, &d)?;
        self.stem.backward(&cache.input, &d)?;
        Ok(())
    }

    /// DGConv layers in network order.
    pub fn dgconv_layers(&self) -> Vec<&DGConvLayer<T>> {
        self.blocks.iter().filter_map(|b| b.mid.dgconv()).collect()
    }

    pub fn dgconv_names(&self) -> Vec<String> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.mid.dgconv().is_some() || b.mid.compiled().is_some())
            .map(|(i, _)| format!("blocks.{i}.mid"))
            .collect()
    }

    /// Gate gradients of each DGConv layer, in network order.
    pub fn gate_gradients_mut(&mut self) -> Vec<&mut GateGradient> {
        self.blocks
            .iter_mut()
            .filter_map(|b| match &mut b.mid_grad {
                MiddleGrad::Dynamic { gates, .. } => Some(gates),
                _ => None,
            })
            .collect()
    }

    pub fn gate_gradients(&self) -> Vec<&GateGradient> {
        self.blocks
            .iter()
            .filter_map(|b| match &b.mid_grad {
                MiddleGrad::Dynamic { gates, .. } => Some(gates),
                _ => None,
            })
            .collect()
    }

    /// Applies `f` to every DGConv layer's continuous gates.
    pub fn update_gates(&mut self, mut f: impl FnMut(usize, &mut [f64])) -> Result<()> {
        let mut idx = 0;
        for b in &mut self.blocks {
            if let MiddleConv::Dynamic(l) = &mut b.mid {
                l.update_gates(|g| f(idx, g))?;
                idx += 1;
            }
        }
        Ok(())
    }

    /// Visits every trainable weight tensor (not gates) with its gradient.
    pub fn visit_weights(&mut self, f: &mut dyn FnMut(&str, &mut [T], &[T])) {
        f("stem.weight", self.stem.kernel.data_mut(), self.stem.grad.data());
        f("stem_norm.gamma", &mut self.stem_norm.bn.gamma, &self.stem_norm.grad_gamma);
        f("stem_norm.beta", &mut self.stem_norm.bn.beta, &self.stem_norm.grad_beta);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            f(&format!("{p}.conv1.weight"), b.conv1.kernel.data_mut(), b.conv1.grad.data());
            visit_norm(f, &format!("{p}.norm1"), &mut b.norm1);
            match (&mut b.mid, &b.mid_grad) {
                (MiddleConv::Dense(k, _), MiddleGrad::Dense(g)) => f(&format!("{p}.mid.weight"), k.data_mut(), g.data()),
                (MiddleConv::Grouped(k, _), MiddleGrad::Grouped(g)) => f(&format!("{p}.mid.weight"), k.data_mut(), g.data()),
                (MiddleConv::Dynamic(l), MiddleGrad::Dynamic { kernel, .. }) => {
                    f(&format!("{p}.mid.weight"), l.kernel_mut().data_mut(), kernel.data())
                }
                _ => {}
            }
            visit_norm(f, &format!("{p}.norm2"), &mut b.norm2);
            f(&format!("{p}.conv3.weight"), b.conv3.kernel.data_mut(), b.conv3.grad.data());
            visit_norm(f, &format!("{p}.norm3"), &mut b.norm3);
            if let Some((conv, norm)) = &mut b.shortcut {
                f(&format!("{p}.shortcut.weight"), conv.kernel.data_mut(), conv.grad.data());
                visit_norm(f, &format!("{p}.shortcut_norm"), norm);
            }
        }
        f("fc.weight", &mut self.fc.weight, &self.fc_grad_w);
        f("fc.bias", &mut self.fc.bias, &self.fc_grad_b);
    }

    pub fn param_counts(&mut self) -> ParamCounts {
        let mut weights = 0;
        self.visit_weights(&mut |_, v, _| weights += v.len());
        let gates = self.dgconv_layers().iter().map(|l| l.gates().len()).sum();
        ParamCounts { weights, gates }
    }

    /// `(name, gates, C_in, C_out)` of every DGConv or compiled layer.
    pub fn grouping_layers(&self) -> Vec<(String, BinaryGates, usize, usize)> {
        let names = self.dgconv_names();
        let mut out = Vec::new();
        let mut i = 0;
        for b in &self.blocks {
            match &b.mid {
                MiddleConv::Dynamic(l) => {
                    out.push((names[i].clone(), l.binary_gates().clone(), l.in_channels(), l.out_channels()));
                    i += 1;
                }
                MiddleConv::Compiled(c) => {
                    // gates are not kept after compilation; recover a gate vector
                    // with the same group count for reporting
                    let k = c.in_channels().min(c.out_channels()).trailing_zeros() as usize;
                    let zeros = c.groups().trailing_zeros() as usize;
                    let bits = (0..k).map(|j| j >= zeros).collect();
                    out.push((names[i].clone(), BinaryGates::new(bits), c.in_channels(), c.out_channels()));
                    i += 1;
                }
                _ => {}
            }
        }
        out
    }

    /// Group count of every middle convolution, in network order.
    pub fn middle_groups(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.mid.groups()).collect()
    }

    pub fn savings_report(&self, uniform_groups: usize) -> Result<SavingsReport> {
        savings_report(&self.grouping_layers(), uniform_groups)
    }

    /// Replaces every DGConv layer by its compiled group-convolution form.
    pub fn compile(&self) -> Result<Self> {
        let mut out = self.clone();
        for (i, b) in out.blocks.iter_mut().enumerate() {
            if let MiddleConv::Dynamic(l) = &b.mid {
                let c = compile(l).map_err(|e| DgError::Unsupported(format!("layer blocks.{i}.mid: {e}")))?;
                b.mid = MiddleConv::Compiled(c);
                b.mid_grad = MiddleGrad::None;
            }
        }
        Ok(out)
    }

    pub fn is_compiled(&self) -> bool {
        self.blocks.iter().any(|b| b.mid.compiled().is_some())
    }

    /// All persistent state as named tensors: weights and running statistics
    /// in f32, continuous gates in f64, compiled permutations as u32.
    pub fn named_tensors(&self) -> Vec<(String, TensorData)> {
        let mut out = Vec::new();
        let kdims = |k: &KernelTensor<T>| vec![k.size(), k.size(), k.in_channels(), k.out_channels()];
        out.push(("stem.weight".into(), TensorData::f32_of(kdims(&self.stem.kernel), self.stem.kernel.data())));
        push_norm(&mut out, "stem_norm", &self.stem_norm.bn);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            out.push((format!("{p}.conv1.weight"), TensorData::f32_of(kdims(&b.conv1.kernel), b.conv1.kernel.data())));
            push_norm(&mut out, &format!("{p}.norm1"), &b.norm1.bn);
            match &b.mid {
                MiddleConv::Dense(k, _) => out.push((format!("{p}.mid.weight"), TensorData::f32_of(kdims(k), k.data()))),
                MiddleConv::Grouped(k, _) => {
                    let s = k.spec();
                    let dims = vec![s.groups(), k.size(), k.size(), s.in_per_group(), s.out_per_group()];
                    out.push((format!("{p}.mid.weight"), TensorData::f32_of(dims, k.data())));
                }
                MiddleConv::Dynamic(l) => {
                    out.push((format!("{p}.mid.weight"), TensorData::f32_of(kdims(l.kernel()), l.kernel().data())));
                    out.push((
                        format!("{p}.mid.gates"),
                        TensorData::F64 {
                            dims: vec![l.gates().len()],
                            data: l.gates().values().to_vec(),
                        },
                    ));
                }
                MiddleConv::Compiled(c) => {
                    let k = c.kernel();
                    let s = k.spec();
                    let dims = vec![s.groups(), k.size(), k.size(), s.in_per_group(), s.out_per_group()];
                    out.push((format!("{p}.mid.compiled.weight"), TensorData::f32_of(dims, k.data())));
                    let perm = |v: &[usize]| TensorData::U32 {
                        dims: vec![v.len()],
                        data: v.iter().map(|&x| x as u32).collect(),
                    };
                    out.push((format!("{p}.mid.compiled.in_perm"), perm(c.in_perm())));
                    out.push((format!("{p}.mid.compiled.out_perm"), perm(c.out_perm())));
                }
            }
            push_norm(&mut out, &format!("{p}.norm2"), &b.norm2.bn);
            out.push((format!("{p}.conv3.weight"), TensorData::f32_of(kdims(&b.conv3.kernel), b.conv3.kernel.data())));
            push_norm(&mut out, &format!("{p}.norm3"), &b.norm3.bn);
            if let Some((conv, norm)) = &b.shortcut {
                out.push((format!("{p}.shortcut.weight"), TensorData::f32_of(kdims(&conv.kernel), conv.kernel.data())));
                push_norm(&mut out, &format!("{p}.shortcut_norm"), &norm.bn);
            }
        }
        out.push(("fc.weight".into(), TensorData::f32_of(vec![self.fc.inputs, self.fc.outputs], &self.fc.weight)));
        out.push(("fc.bias".into(), TensorData::f32_of(vec![self.fc.outputs], &self.fc.bias)));
        out
    }

    /// Rebuilds a model from its configuration and named tensors. Every
    /// tensor the configuration implies must be present with matching shape;
    /// extra tensors are rejected.
    pub fn from_named_tensors(config: ModelConfig, tensors: &[(String, TensorData)]) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let mut lookup: std::collections::BTreeMap<&str, &TensorData> = std::collections::BTreeMap::new();
        for (name, t) in tensors {
            if lookup.insert(name.as_str(), t).is_some() {
                return Err(DgError::Data(format!("duplicate tensor {name}")));
            }
        }
        let mut used = std::collections::BTreeSet::new();

        // compiled layers replace DGConv layers when their tensors are present
        for (i, b) in model.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}.mid.compiled");
            if !lookup.contains_key(format!("{p}.weight").as_str()) {
                continue;
            }
            let geom = match &b.mid {
                MiddleConv::Dynamic(l) => l.geometry(),
                _ => return Err(DgError::Data(format!("compiled tensors for non-dgconv block {i}"))),
            };
            let w = take(&lookup, &mut used, &format!("{p}.weight"))?;
            let (dims, data) = as_f32(w, &format!("{p}.weight"))?;
            if dims.len() != 5 {
                return Err(DgError::Data(format!("{p}.weight must have 5 dims")));
            }
            let (groups, k) = (dims[0], dims[1]);
            let spec = GroupSpec::new(groups, dims[3] * groups, dims[4] * groups)?;
            let kernel = GroupedKernel::from_vec(k, spec, data.iter().map(|&v| T::from_f64(v as f64)).collect())?;
            let perm = |name: &str, used: &mut std::collections::BTreeSet<String>| -> Result<Vec<usize>> {
                match take(&lookup, used, name)? {
                    TensorData::U32 { data, .. } => Ok(data.iter().map(|&v| v as usize).collect()),
                    _ => Err(DgError::Data(format!("{name} must be u32"))),
                }
            };
            let in_perm = perm(&format!("{p}.in_perm"), &mut used)?;
            let out_perm = perm(&format!("{p}.out_perm"), &mut used)?;
            let connections = (spec.in_per_group() * spec.out_per_group() * groups) as u64;
            b.mid = MiddleConv::Compiled(CompiledLayer::from_parts(in_perm, out_perm, kernel, geom, connections)?);
            b.mid_grad = MiddleGrad::None;
        }

        let expected = model.named_tensors();
        for (name, template) in &expected {
            if name.contains(".mid.compiled.") {
                continue;
            }
            let t = take(&lookup, &mut used, name)?;
            if t.dims() != template.dims() {
                return Err(DgError::Data(format!(
                    "tensor {name} has dims {:?}, expected {:?}",
                    t.dims(),
                    template.dims()
                )));
            }
            model.assign(name, t)?;
        }
        if let Some(extra) = lookup.keys().find(|k| !used.contains(**k)) {
            return Err(DgError::Data(format!("unexpected tensor {extra}")));
        }
        Ok(model)
    }

    fn assign(&mut self, name: &str, t: &TensorData) -> Result<()> {
        if name.ends_with(".mid.gates") {
            let TensorData::F64 { data, .. } = t else {
                return Err(DgError::Data(format!("{name} must be f64")));
            };
            let idx: usize = name
                .strip_prefix("blocks.")
                .and_then(|r| r.split('.').next())
                .and_then(|i| i.parse().ok())
                .ok_or_else(|| DgError::Data(format!("bad gate tensor name {name}")))?;
            return match &mut self.blocks[idx].mid {
                MiddleConv::Dynamic(l) => l.set_gates(data).map(|_| ()),
                _ => Err(DgError::Data(format!("{name} names a non-dgconv layer"))),
            };
        }
        let (_, data) = as_f32(t, name)?;
        let found = std::cell::Cell::new(false);
        let write = |target: &mut [T]| {
            for (d, &s) in target.iter_mut().zip(data) {
                *d = T::from_f64(s as f64);
            }
            found.set(true);
        };
        self.visit_weights(&mut |n, v, _| {
            if n == name {
                write(v)
            }
        });
        if !found.get() {
            self.visit_buffers(&mut |n, v| {
                if n == name {
                    write(v)
                }
            });
        }
        if found.get() {
            Ok(())
        } else {
            Err(DgError::Data(format!("no parameter named {name}")))
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        let norm = |f: &mut dyn FnMut(&str, &mut [T]), p: &str, bn: &mut BatchNorm<T>| {
            f(&format!("{p}.running_mean"), &mut bn.running_mean);
            f(&format!("{p}.running_var"), &mut bn.running_var);
        };
        norm(f, "stem_norm", &mut self.stem_norm.bn);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            norm(f, &format!("blocks.{i}.norm1"), &mut b.norm1.bn);
            norm(f, &format!("blocks.{i}.norm2"), &mut b.norm2.bn);
            norm(f, &format!("blocks.{i}.norm3"), &mut b.norm3.bn);
            if let Some((_, n)) = &mut b.shortcut {
                norm(f, &format!("blocks.{i}.shortcut_norm"), &mut n.bn);
            }
        }
    }
}

fn take<'a>(
    lookup: &std::collections::BTreeMap<&str, &'a TensorData>,
    used: &mut std::collections::BTreeSet<String>,
    name: &str,
) -> Result<&'a TensorData> {
    let t = lookup
        .get(name)
        .copied()
        .ok_or_else(|| DgError::Data(format!("missing tensor {name}")))?;
    used.insert(name.to_string());
    Ok(t)
}

fn as_f32<'a>(t: &'a TensorData, name: &str) -> Result<(&'a [usize], &'a [f32])> {
    match t {
        TensorData::F32 { dims, data } => Ok((dims, data)),
        _ => Err(DgError::Data(format!("{name} must be f32"))),
    }
}

fn visit_norm<T: Scalar>(f: &mut dyn FnMut(&str, &mut [T], &[T]), prefix: &str, n: &mut Norm<T>) {
    f(&format!("{prefix}.gamma"), &mut n.bn.gamma, &n.grad_gamma);
    f(&format!("{prefix}.beta"), &mut n.bn.beta, &n.grad_beta);
}

fn push_norm<T: Scalar>(out: &mut Vec<(String, TensorData)>, prefix: &str, bn: &BatchNorm<T>) {
    let c = vec![bn.channels()];
    out.push((format!("{prefix}.gamma"), TensorData::f32_of(c.clone(), &bn.gamma)));
    out.push((format!("{prefix}.beta"), TensorData::f32_of(c.clone(), &bn.beta)));
    out.push((format!("{prefix}.running_mean"), TensorData::f32_of(c.clone(), &bn.running_mean)));
    out.push((format!("{prefix}.running_var"), TensorData::f32_of(c, &bn.running_var)));
}
