//! Dynamic grouping convolution (DGConv).
//!
//! A DGConv layer masks every kernel tap by a binary relationship matrix
//! `U = U_1 ⊗ ... ⊗ U_K` whose 2x2 factors are chosen by `K = log2(C)` learned
//! gates: a gate at 1 selects the all-ones factor, a gate at 0 the identity.
//! The gates are trained with a straight-through estimator together with the
//! kernels, under a weighted-product complexity penalty, and a trained layer
//! lowers to an ordinary group convolution between two channel permutations.

pub mod app;
pub mod compiler;
pub mod complexity;
pub mod data;
pub mod dgconv;
mod error;
pub mod gates;
pub mod io;
pub mod model;
pub mod oracle;
mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use compiler::{compile, savings_report, CompiledLayer, SavingsReport};
pub use complexity::{budget_from_b, network_complexity, penalized_loss, ComplexityBudget, ComplexityState};
pub use dgconv::{DGConvGrads, DGConvLayer, GateGradient};
pub use data::{DataConfig, DataSource, Dataset};
pub use error::{DgError, Result};
pub use gates::{
    binarize, block_diagonal_permutation, build_relationship_matrix, du_dgk, group_count, layer_complexity,
    nnz_oracle, BinaryGates, GateVector, GroupingReport, RelationshipMatrix,
};
pub use io::checkpoint::Checkpoint;
pub use io::config::RunConfig;
pub use model::{ConvMode, Model, ModelConfig};
pub use scalar::{Num, Scalar};
pub use tensor::{ConvGeometry, FeatureMap, GroupSpec, GroupedKernel, KernelTensor};
pub use train::{cosine_lr, init_gates, train, BudgetConfig, DynamicsLog, TrainConfig};
