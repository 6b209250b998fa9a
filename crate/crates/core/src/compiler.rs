//! Lowers a trained DGConv layer to input permutation, standard group
//! convolution, and output permutation.

use serde::{Deserialize, Serialize};

use crate::dgconv::DGConvLayer;
use crate::error::{dim_err, DgError, Result};
use crate::gates::{channel_group, channel_rank, group_count, layer_complexity_rect, BinaryGates, ChannelLayout};
use crate::scalar::Scalar;
use crate::tensor::{group_conv_forward, ConvGeometry, FeatureMap, GroupSpec, GroupedKernel};

#[derive(Clone, Debug, PartialEq)]
pub struct CompiledLayer<T> {
    /// Grouped input position `i` reads original channel `in_perm[i]`.
    in_perm: Vec<usize>,
    /// Grouped output position `j` is written to original channel `out_perm[j]`.
    out_perm: Vec<usize>,
    kernel: GroupedKernel<T>,
    geom: ConvGeometry,
    connections: u64,
}

fn check_perm(perm: &[usize], len: usize) -> Result<()> {
    let mut seen = vec![false; len];
    if perm.len() != len {
        return Err(dim_err!("permutation of length {} for {len} channels", perm.len()));
    }
    for &p in perm {
        if p >= len || std::mem::replace(&mut seen[p], true) {
            return Err(DgError::Value(format!("invalid permutation entry {p}")));
        }
    }
    Ok(())
}

/// Channels of each side ordered by (group id, position within group).
fn grouped_order(g: &BinaryGates, len: usize, to_square: impl Fn(usize) -> usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by_key(|&c| {
        let s = to_square(c);
        (channel_group(g, s), channel_rank(g, s), c)
    });
    order
}

impl<T: Scalar> CompiledLayer<T> {
    pub fn from_parts(
        in_perm: Vec<usize>,
        out_perm: Vec<usize>,
        kernel: GroupedKernel<T>,
        geom: ConvGeometry,
        connections: u64,
    ) -> Result<Self> {
        let spec = kernel.spec();
        check_perm(&in_perm, spec.in_channels())?;
        check_perm(&out_perm, spec.out_channels())?;
        let expect = (spec.in_per_group() * spec.out_per_group() * spec.groups()) as u64;
        if connections != expect {
            return Err(DgError::Value(format!(
                "declared {connections} connections, grouping implies {expect}"
            )));
        }
        Ok(Self {
            in_perm,
            out_perm,
            kernel,
            geom,
            connections,
        })
    }

    pub fn in_perm(&self) -> &[usize] {
        &self.in_perm
    }

    pub fn out_perm(&self) -> &[usize] {
        &self.out_perm
    }

    pub fn kernel(&self) -> &GroupedKernel<T> {
        &self.kernel
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geom
    }

    pub fn groups(&self) -> usize {
        self.kernel.spec().groups()
    }

    pub fn connections(&self) -> u64 {
        self.connections
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.spec().in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.spec().out_channels()
    }

    /// Stored kernel weights.
    pub fn parameter_count(&self) -> usize {
        self.kernel.data().len()
    }

    pub fn forward(&self, input: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let x = input.gather_channels(&self.in_perm)?;
        let y = group_conv_forward(&x, &self.kernel, self.geom)?;
        y.scatter_channels(&self.out_perm)
    }
}

pub fn compile<T: Scalar>(layer: &DGConvLayer<T>) -> Result<CompiledLayer<T>> {
    let g = layer.binary_gates();
    let layout = layer.layout();
    let (cin, cout) = (layer.in_channels(), layer.out_channels());
    let u = layer.relationship();
    let groups = group_count(g);
    let in_perm = grouped_order(g, cin, |p| layout.square_row(p));
    let out_perm = grouped_order(g, cout, |q| layout.square_col(q));
    let spec = GroupSpec::new(groups, cin, cout)?;
    let (ci, co) = (spec.in_per_group(), spec.out_per_group());

    let connections = layer_complexity_rect(g, cin, cout)?;
    if u.count_ones() != (groups * ci * co) as u64 {
        return Err(DgError::Invariant(format!(
            "relationship matrix has {} ones, {groups} groups of {ci}x{co} expected",
            u.count_ones()
        )));
    }
    let w = layer.kernel();
    let k = w.size();
    let mut kernel = GroupedKernel::zeros(k, spec)?;
    for gi in 0..groups {
        for pl in 0..ci {
            let p = in_perm[gi * ci + pl];
            for ql in 0..co {
                let q = out_perm[gi * co + ql];
                if !u.get(p, q) {
                    return Err(DgError::Invariant(format!(
                        "channels {p} -> {q} share group {gi} but are disconnected"
                    )));
                }
                for m in 0..k {
                    for n in 0..k {
                        kernel.set(gi, m, n, pl, ql, w.at(m, n, p, q));
                    }
                }
            }
        }
    }
    CompiledLayer::from_parts(in_perm, out_perm, kernel, layer.geometry(), connections)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSavings {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub connections: u64,
    pub dense_connections: u64,
    pub uniform_connections: u64,
    pub ratio_vs_dense: f64,
    pub ratio_vs_uniform: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavingsReport {
    pub layers: Vec<LayerSavings>,
    /// Group count of the uniform baseline (clamped per layer to its width).
    pub uniform_groups: usize,
    pub total_connections: u64,
    pub dense_connections: u64,
    pub uniform_connections: u64,
    /// Relative FLOPs of the grouped layers, `ζ / Σ C_in C_out`.
    pub ratio_vs_dense: f64,
    pub ratio_vs_uniform: f64,
}

/// Connection and relative-FLOPs accounting for a set of DGConv layers
/// given as `(name, gates, C_in, C_out)`.
pub fn savings_report(
    layers: &[(String, BinaryGates, usize, usize)],
    uniform_groups: usize,
) -> Result<SavingsReport> {
    if uniform_groups == 0 {
        return Err(DgError::Config("uniform baseline needs at least one group".into()));
    }
    let mut out = Vec::with_capacity(layers.len());
    for (name, g, cin, cout) in layers {
        let (_, _) = ChannelLayout::for_channels(*cin, *cout)?;
        let connections = layer_complexity_rect(g, *cin, *cout)?;
        let dense = (*cin * *cout) as u64;
        let ug = uniform_groups.min(*cin).min(*cout);
        let uniform = dense / ug as u64;
        out.push(LayerSavings {
            name: name.clone(),
            in_channels: *cin,
            out_channels: *cout,
            groups: group_count(g),
            connections,
            dense_connections: dense,
            uniform_connections: uniform,
            ratio_vs_dense: connections as f64 / dense as f64,
            ratio_vs_uniform: connections as f64 / uniform as f64,
        });
    }
    let total: u64 = out.iter().map(|l| l.connections).sum();
    let dense: u64 = out.iter().map(|l| l.dense_connections).sum();
    let uniform: u64 = out.iter().map(|l| l.uniform_connections).sum();
    let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok(SavingsReport {
        layers: out,
        uniform_groups,
        total_connections: total,
        dense_connections: dense,
        uniform_connections: uniform,
        ratio_vs_dense: ratio(total, dense),
        ratio_vs_uniform: ratio(total, uniform),
    })
}
