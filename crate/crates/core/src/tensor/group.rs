use super::conv::{ConvGeometry, ConvPlan};
use super::{FeatureMap, KernelTensor};
use crate::error::{config_err, dim_err, Result};
use crate::scalar::Scalar;

/// Contiguous channel grouping: input channel `p` belongs to group
/// `p / (C_in / G)`, output channel `q` to group `q / (C_out / G)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupSpec {
    groups: usize,
    cin: usize,
    cout: usize,
}

impl GroupSpec {
    pub fn new(groups: usize, cin: usize, cout: usize) -> Result<Self> {
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(config_err!(
                "group count {groups} does not evenly divide C_in={cin}, C_out={cout}"
            ));
        }
        Ok(Self { groups, cin, cout })
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    pub fn in_per_group(&self) -> usize {
        self.cin / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.cout / self.groups
    }

    pub fn input_group(&self, p: usize) -> usize {
        p / self.in_per_group()
    }

    pub fn output_group(&self, q: usize) -> usize {
        q / self.out_per_group()
    }

    /// Block-diagonal connectivity of this grouping.
    pub fn connects(&self, p: usize, q: usize) -> bool {
        self.input_group(p) == self.output_group(q)
    }
}

/// Per-group compact kernels: `G` blocks of shape `k x k x C_in/G x C_out/G`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedKernel<T> {
    spec: GroupSpec,
    k: usize,
    data: Vec<T>,
}

impl<T: Scalar> GroupedKernel<T> {
    pub fn zeros(k: usize, spec: GroupSpec) -> Result<Self> {
        if k == 0 {
            return Err(dim_err!("kernel size must be >= 1"));
        }
        let len = k * k * spec.cin * spec.cout / spec.groups;
        Ok(Self {
            spec,
            k,
            data: vec![T::ZERO; len],
        })
    }

    pub fn from_vec(k: usize, spec: GroupSpec, data: Vec<T>) -> Result<Self> {
        let out = Self::zeros(k, spec)?;
        if data.len() != out.data.len() {
            return Err(dim_err!(
                "grouped kernel needs {} values, got {}",
                out.data.len(),
                data.len()
            ));
        }
        Ok(Self { data, ..out })
    }

    /// Keeps only the diagonal blocks of a full-shape kernel.
    pub fn from_dense(kernel: &KernelTensor<T>, spec: GroupSpec) -> Result<Self> {
        if (kernel.in_channels(), kernel.out_channels()) != (spec.cin, spec.cout) {
            return Err(dim_err!(
                "kernel channels ({}, {}) do not match group spec ({}, {})",
                kernel.in_channels(),
                kernel.out_channels(),
                spec.cin,
                spec.cout
            ));
        }
        let k = kernel.size();
        let mut out = Self::zeros(k, spec)?;
        let (ci, co) = (spec.in_per_group(), spec.out_per_group());
        for g in 0..spec.groups {
            for m in 0..k {
                for n in 0..k {
                    for pl in 0..ci {
                        for ql in 0..co {
                            let v = kernel.at(m, n, g * ci + pl, g * co + ql);
                            out.set(g, m, n, pl, ql, v);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Full-shape kernel with zeros outside the diagonal blocks.
    pub fn to_dense(&self) -> KernelTensor<T> {
        let spec = self.spec;
        let (ci, co) = (spec.in_per_group(), spec.out_per_group());
        let mut out = KernelTensor::zeros(self.k, spec.cin, spec.cout).expect("valid dims");
        for g in 0..spec.groups {
            for m in 0..self.k {
                for n in 0..self.k {
                    for pl in 0..ci {
                        for ql in 0..co {
                            out.set(m, n, g * ci + pl, g * co + ql, self.at(g, m, n, pl, ql));
                        }
                    }
                }
            }
        }
        out
    }

    pub fn spec(&self) -> GroupSpec {
        self.spec
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn block_len(&self) -> usize {
        self.data.len() / self.spec.groups
    }

    #[inline]
    fn index(&self, g: usize, m: usize, n: usize, pl: usize, ql: usize) -> usize {
        let (ci, co) = (self.spec.in_per_group(), self.spec.out_per_group());
        g * self.block_len() + ((m * self.k + n) * ci + pl) * co + ql
    }

    pub fn at(&self, g: usize, m: usize, n: usize, pl: usize, ql: usize) -> T {
        self.data[self.index(g, m, n, pl, ql)]
    }

    pub fn set(&mut self, g: usize, m: usize, n: usize, pl: usize, ql: usize, v: T) {
        let idx = self.index(g, m, n, pl, ql);
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
}

/// Group convolution: the concatenation, in group order, of independent
/// convolutions over each channel group.
pub fn group_conv_forward<T: Scalar>(
    input: &FeatureMap<T>,
    kernel: &GroupedKernel<T>,
    geom: ConvGeometry,
) -> Result<FeatureMap<T>> {
    let spec = kernel.spec();
    if input.channels() != spec.cin {
        return Err(dim_err!(
            "input has {} channels, group kernel expects {}",
            input.channels(),
            spec.cin
        ));
    }
    let plan = ConvPlan::new(input.shape(), spec.groups, kernel.size(), spec.cout, geom)?;
    plan.forward(input, kernel.data())
}

pub fn group_conv_backward<T: Scalar>(
    input: &FeatureMap<T>,
    kernel: &GroupedKernel<T>,
    upstream: &FeatureMap<T>,
    geom: ConvGeometry,
) -> Result<(FeatureMap<T>, GroupedKernel<T>)> {
    let spec = kernel.spec();
    if input.channels() != spec.cin {
        return Err(dim_err!(
            "input has {} channels, group kernel expects {}",
            input.channels(),
            spec.cin
        ));
    }
    let plan = ConvPlan::new(input.shape(), spec.groups, kernel.size(), spec.cout, geom)?;
    let (dx, dw) = plan.backward(input, kernel.data(), upstream)?;
    Ok((dx, GroupedKernel::from_vec(kernel.size(), spec, dw)?))
}
