//! Resource-constrained objective: network complexity `ζ`, target `o`, and the
//! weighted-product multiplier `(o / ζ)^a`.

use serde::{Deserialize, Serialize};

use crate::dgconv::DGConvLayer;
use crate::error::{config_err, DgError, Result};
use crate::gates::{layer_complexity_rect, BinaryGates};
use crate::scalar::Scalar;

pub const DEFAULT_ALPHA: f64 = -0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityBudget {
    /// Complexity scale divisor.
    pub b: f64,
    /// Target complexity `Σ C_ℓ² / b`.
    pub o: f64,
    /// Penalty exponent used while `ζ > o`.
    pub alpha: f64,
    pub channels: Vec<usize>,
}

impl ComplexityBudget {
    pub fn new(b: f64, alpha: f64, channels: Vec<usize>) -> Result<Self> {
        if !(alpha < 0.0) {
            return Err(config_err!("penalty exponent must be negative, got {alpha}"));
        }
        let o = budget_from_b(b, &channels)?;
        Ok(Self { b, o, alpha, channels })
    }

    /// Dense connection count `Σ C_ℓ²`.
    pub fn dense_connections(&self) -> u64 {
        self.channels.iter().map(|&c| (c * c) as u64).sum()
    }
}

/// `o = Σ_ℓ C_ℓ² / b`.
pub fn budget_from_b(b: f64, channels: &[usize]) -> Result<f64> {
    if !(b > 0.0) || !b.is_finite() {
        return Err(config_err!("complexity divisor b must be positive and finite, got {b}"));
    }
    Ok(channels.iter().map(|&c| (c * c) as f64).sum::<f64>() / b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityState {
    pub per_layer: Vec<u64>,
    pub total: u64,
    pub o: f64,
    /// `0` when the budget is met, `alpha` otherwise.
    pub exponent: f64,
    /// `(o / ζ)^exponent`.
    pub multiplier: f64,
}

impl ComplexityState {
    pub fn from_layers(per_layer: Vec<u64>, o: f64, alpha: f64) -> Self {
        let total: u64 = per_layer.iter().sum();
        let exponent = if (total as f64) <= o { 0.0 } else { alpha };
        let multiplier = if exponent == 0.0 {
            1.0
        } else {
            (exponent * (o.ln() - (total as f64).ln())).exp()
        };
        Self {
            per_layer,
            total,
            o,
            exponent,
            multiplier,
        }
    }

    pub fn satisfied(&self) -> bool {
        self.exponent == 0.0
    }
}

pub fn network_complexity<T: Scalar>(layers: &[&DGConvLayer<T>], budget: &ComplexityBudget) -> ComplexityState {
    let per_layer = layers.iter().map(|l| l.complexity()).collect();
    ComplexityState::from_layers(per_layer, budget.o, budget.alpha)
}

/// Same as [`network_complexity`] from bare `(gates, C_in, C_out)` triples.
pub fn network_complexity_from_gates(
    layers: &[(BinaryGates, usize, usize)],
    budget: &ComplexityBudget,
) -> Result<ComplexityState> {
    let per_layer = layers
        .iter()
        .map(|(g, cin, cout)| layer_complexity_rect(g, *cin, *cout))
        .collect::<Result<Vec<_>>>()?;
    Ok(ComplexityState::from_layers(per_layer, budget.o, budget.alpha))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PenalizedLoss {
    pub total: f64,
    /// `d total / d task_loss`, the multiplier.
    pub task_scale: f64,
    /// `d total / d g̃_k` per layer, through the straight-through estimator.
    pub gate_grads: Vec<Vec<f64>>,
}

/// `total = task_loss · (o / ζ)^a`, with `a` fixed from the current `ζ`.
///
/// `gates[ℓ]` must be the binary gates that produced `state.per_layer[ℓ]`.
pub fn penalized_loss(task_loss: f64, state: &ComplexityState, gates: &[&BinaryGates]) -> Result<PenalizedLoss> {
    if !(task_loss >= 0.0) || !task_loss.is_finite() {
        return Err(DgError::Value(format!("task loss must be finite and >= 0, got {task_loss}")));
    }
    if state.total == 0 {
        return Err(DgError::Invariant("network complexity is zero".into()));
    }
    if gates.len() != state.per_layer.len() {
        return Err(DgError::Dimension(format!(
            "{} gate vectors for {} layers",
            gates.len(),
            state.per_layer.len()
        )));
    }
    let a = state.exponent;
    let zeta = state.total as f64;
    let total = if task_loss == 0.0 || a == 0.0 {
        task_loss
    } else {
        (task_loss.ln() + a * (state.o.ln() - zeta.ln())).exp()
    };
    let gate_grads = gates
        .iter()
        .zip(&state.per_layer)
        .map(|(g, &zl)| {
            g.as_slice()
                .iter()
                .map(|&bit| {
                    if a == 0.0 || total == 0.0 {
                        return 0.0;
                    }
                    // ∂ζ/∂g_k = ζ_ℓ / (1 + g_k)
                    let share = (zl as f64).ln() - zeta.ln() - (1.0 + bit as u8 as f64).ln();
                    total * -a * share.exp()
                })
                .collect()
        })
        .collect();
    Ok(PenalizedLoss {
        total,
        task_scale: state.multiplier,
        gate_grads,
    })
}
