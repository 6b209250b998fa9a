//! Gate algebra: binarization of continuous gates, the Kronecker-structured
//! relationship matrix `U`, group counting, connection counting, the
//! permutation that exposes `U` as contiguous groups, and `dU/dg_k`.
//!
//! Channel-index convention: with `K` factors, factor `k` (0-based) addresses
//! bit `K - 1 - k` of a channel index, so the first factor is the most
//! significant bit, matching `U = U_1 ⊗ U_2 ⊗ ... ⊗ U_K`.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, DgError, Result};

/// Continuous, learnable gate values `g̃`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateVector {
    tilde_g: Vec<f64>,
}

impl GateVector {
    pub fn new(tilde_g: Vec<f64>) -> Result<Self> {
        check_finite(&tilde_g)?;
        Ok(Self { tilde_g })
    }

    /// `log2(channels)` gates, all zero (which binarizes to all ones).
    pub fn for_channels(channels: usize) -> Result<Self> {
        let k = log2_exact(channels)?;
        Ok(Self {
            tilde_g: vec![0.0; k],
        })
    }

    pub fn len(&self) -> usize {
        self.tilde_g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tilde_g.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.tilde_g
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.tilde_g
    }

    pub fn binarize(&self) -> Result<BinaryGates> {
        binarize(&self.tilde_g)
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(DgError::Value(format!(
            "gate {i} is not finite ({})",
            values[i]
        ))),
        None => Ok(()),
    }
}

/// Binary gate vector `g ∈ {0,1}^K`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryGates(Vec<bool>);

impl BinaryGates {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    /// Gates from a bit slice of 0/1 values; anything nonzero counts as 1.
    pub fn from_bits(bits: &[u8]) -> Self {
        Self(bits.iter().map(|&b| b != 0).collect())
    }

    pub fn all(k: usize, value: bool) -> Self {
        Self(vec![value; k])
    }

    /// The `index`-th of all `2^K` gate vectors, first gate as the most
    /// significant bit.
    pub fn enumerate(k: usize, index: usize) -> Self {
        Self((0..k).map(|j| (index >> (k - 1 - j)) & 1 == 1).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, k: usize) -> bool {
        self.0[k]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn to_bits(&self) -> Vec<u8> {
        self.0.iter().map(|&b| b as u8).collect()
    }

    pub fn ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn zeros(&self) -> usize {
        self.len() - self.ones()
    }

    /// Size of the square relationship matrix, `2^K`.
    pub fn channels(&self) -> usize {
        1 << self.len()
    }

    pub fn factors(&self) -> Vec<Factor> {
        self.0
            .iter()
            .map(|&b| if b { Factor::Ones } else { Factor::Identity })
            .collect()
    }

    #[inline]
    fn bit_of(&self, k: usize) -> usize {
        1 << (self.len() - 1 - k)
    }

    /// Index bits addressed by identity factors; channels connect only if
    /// they agree on all of these bits.
    pub fn identity_mask(&self) -> usize {
        (0..self.len())
            .filter(|&k| !self.0[k])
            .fold(0, |m, k| m | self.bit_of(k))
    }

    pub fn ones_mask(&self) -> usize {
        (0..self.len())
            .filter(|&k| self.0[k])
            .fold(0, |m, k| m | self.bit_of(k))
    }

    /// Product `Π (1 + g_k)`: the row and column sum of `U`.
    pub fn row_sum(&self) -> u64 {
        1u64 << self.ones()
    }
}

/// `g_k = 1` iff `g̃_k >= 0`.
pub fn binarize(tilde_g: &[f64]) -> Result<BinaryGates> {
    check_finite(tilde_g)?;
    Ok(BinaryGates(tilde_g.iter().map(|&v| v >= 0.0).collect()))
}

/// A 2x2 Kronecker factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Factor {
    /// All-ones matrix, selected by `g_k = 1`.
    Ones,
    /// Identity matrix, selected by `g_k = 0`.
    Identity,
}

impl Factor {
    fn entry(self, i: usize, j: usize) -> bool {
        match self {
            Factor::Ones => true,
            Factor::Identity => i == j,
        }
    }
}

/// How a `C_in x C_out` layer relates to the square `2^K` construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelLayout {
    Square,
    /// `C_out = r * C_in`: `U = U_sq ⊗ 1_{1 x r}`.
    Widen(usize),
    /// `C_in = r * C_out`: the transpose of the widening construction.
    Narrow(usize),
}

impl ChannelLayout {
    /// Validates power-of-two channel counts and returns `(layout, K)`.
    pub fn for_channels(cin: usize, cout: usize) -> Result<(Self, usize)> {
        let ki = log2_exact(cin)?;
        let ko = log2_exact(cout)?;
        let layout = match ki.cmp(&ko) {
            std::cmp::Ordering::Equal => ChannelLayout::Square,
            std::cmp::Ordering::Less => ChannelLayout::Widen(cout / cin),
            std::cmp::Ordering::Greater => ChannelLayout::Narrow(cin / cout),
        };
        Ok((layout, ki.min(ko)))
    }

    /// Square-construction index of input channel `p`.
    #[inline]
    pub fn square_row(self, p: usize) -> usize {
        match self {
            ChannelLayout::Narrow(r) => p / r,
            _ => p,
        }
    }

    /// Square-construction index of output channel `q`.
    #[inline]
    pub fn square_col(self, q: usize) -> usize {
        match self {
            ChannelLayout::Widen(r) => q / r,
            _ => q,
        }
    }

    pub fn ratio(self) -> usize {
        match self {
            ChannelLayout::Square => 1,
            ChannelLayout::Widen(r) | ChannelLayout::Narrow(r) => r,
        }
    }
}

/// `log2(c)` if `c` is a positive power of two, else a configuration error.
pub fn log2_exact(c: usize) -> Result<usize> {
    if c == 0 || !c.is_power_of_two() {
        return Err(config_err!("channel count {c} is not a power of two"));
    }
    Ok(c.trailing_zeros() as usize)
}

/// Binary `C_in x C_out` relationship matrix, stored as a row-major packed bitset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationshipMatrix {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    bits: Vec<u64>,
    gates: BinaryGates,
    layout: ChannelLayout,
}

impl RelationshipMatrix {
    fn from_dense(rows: usize, cols: usize, dense: &[bool], gates: BinaryGates, layout: ChannelLayout) -> Self {
        let words_per_row = cols.div_ceil(64);
        let mut bits = vec![0u64; rows * words_per_row];
        for p in 0..rows {
            for q in 0..cols {
                if dense[p * cols + q] {
                    bits[p * words_per_row + q / 64] |= 1 << (q % 64);
                }
            }
        }
        Self {
            rows,
            cols,
            words_per_row,
            bits,
            gates,
            layout,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn gates(&self) -> &BinaryGates {
        &self.gates
    }

    pub fn layout(&self) -> ChannelLayout {
        self.layout
    }

    pub fn factors(&self) -> Vec<Factor> {
        self.gates.factors()
    }

    #[inline]
    pub fn get(&self, p: usize, q: usize) -> bool {
        (self.bits[p * self.words_per_row + q / 64] >> (q % 64)) & 1 == 1
    }

    /// Popcount over the packed rows.
    pub fn count_ones(&self) -> u64 {
        self.bits.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn to_dense<T: crate::Scalar>(&self) -> Vec<T> {
        let mut out = vec![T::ZERO; self.rows * self.cols];
        for p in 0..self.rows {
            for q in 0..self.cols {
                if self.get(p, q) {
                    out[p * self.cols + q] = T::ONE;
                }
            }
        }
        out
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|p| (0..p).all(|q| self.get(p, q) == self.get(q, p)))
    }

    pub fn has_unit_diagonal(&self) -> bool {
        (0..self.rows.min(self.cols)).all(|p| self.get(p, p))
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.rows)
            .map(|p| (0..self.cols).filter(|&q| self.get(p, q)).count() as u64)
            .collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.cols)
            .map(|q| (0..self.rows).filter(|&p| self.get(p, q)).count() as u64)
            .collect()
    }
}

fn kron_bool(a: &[bool], ar: usize, ac: usize, b: &[bool], br: usize, bc: usize) -> Vec<bool> {
    let (rows, cols) = (ar * br, ac * bc);
    let mut out = vec![false; rows * cols];
    for i in 0..ar {
        for j in 0..ac {
            if !a[i * ac + j] {
                continue;
            }
            for r in 0..br {
                for s in 0..bc {
                    out[(i * br + r) * cols + j * bc + s] = b[r * bc + s];
                }
            }
        }
    }
    out
}

/// `U = ⊗_k (g_k 1 + (1 - g_k) I)`, a `2^K x 2^K` matrix.
pub fn build_relationship_matrix(g: &BinaryGates) -> RelationshipMatrix {
    let (dense, n) = square_dense(g);
    RelationshipMatrix::from_dense(n, n, &dense, g.clone(), ChannelLayout::Square)
}

fn square_dense(g: &BinaryGates) -> (Vec<bool>, usize) {
    let mut acc = vec![true];
    let mut n = 1;
    for factor in g.factors() {
        let f: Vec<bool> = (0..4).map(|e| factor.entry(e / 2, e % 2)).collect();
        acc = kron_bool(&acc, n, n, &f, 2, 2);
        n *= 2;
    }
    (acc, n)
}

/// Relationship matrix for a possibly non-square `C_in x C_out` layer.
pub fn build_relationship_matrix_rect(g: &BinaryGates, cin: usize, cout: usize) -> Result<RelationshipMatrix> {
    let (layout, k) = ChannelLayout::for_channels(cin, cout)?;
    if k != g.len() {
        return Err(config_err!(
            "{} gates given for a {cin}x{cout} layer that needs {k}",
            g.len()
        ));
    }
    let (sq, n) = square_dense(g);
    let dense = match layout {
        ChannelLayout::Square => sq,
        ChannelLayout::Widen(r) => kron_bool(&sq, n, n, &vec![true; r], 1, r),
        ChannelLayout::Narrow(r) => {
            let wide = kron_bool(&sq, n, n, &vec![true; r], 1, r);
            // transpose n x (n r) into (n r) x n
            let mut t = vec![false; wide.len()];
            for i in 0..n {
                for j in 0..n * r {
                    t[j * n + i] = wide[i * n * r + j];
                }
            }
            t
        }
    };
    Ok(RelationshipMatrix::from_dense(cin, cout, &dense, g.clone(), layout))
}

/// Number of groups, `2^(K - Σ g_k)`.
pub fn group_count(g: &BinaryGates) -> usize {
    1 << g.zeros()
}

/// Active connections `C · Π (1 + g_k)` of a square layer with `C = 2^K`.
pub fn layer_complexity(g: &BinaryGates, channels: usize) -> Result<u64> {
    let k = log2_exact(channels)?;
    if k != g.len() {
        return Err(config_err!(
            "{channels} channels need {k} gates, got {}",
            g.len()
        ));
    }
    Ok(channels as u64 * g.row_sum())
}

/// Active connections of a possibly non-square layer: `max(C_in, C_out) · Π (1 + g_k)`.
pub fn layer_complexity_rect(g: &BinaryGates, cin: usize, cout: usize) -> Result<u64> {
    let (_, k) = ChannelLayout::for_channels(cin, cout)?;
    if k != g.len() {
        return Err(config_err!("{cin}x{cout} layer needs {k} gates, got {}", g.len()));
    }
    Ok(cin.max(cout) as u64 * g.row_sum())
}

/// Brute-force count of ones, entry by entry.
pub fn nnz_oracle(u: &RelationshipMatrix) -> u64 {
    let mut count = 0;
    for p in 0..u.rows() {
        for q in 0..u.cols() {
            if u.get(p, q) {
                count += 1;
            }
        }
    }
    count
}

/// Group id of square-construction channel `c`: its identity-factor bits,
/// packed in factor order.
pub fn channel_group(g: &BinaryGates, c: usize) -> usize {
    let k = g.len();
    (0..k)
        .filter(|&j| !g.get(j))
        .fold(0, |id, j| (id << 1) | ((c >> (k - 1 - j)) & 1))
}

/// Position of square-construction channel `c` inside its group: its
/// ones-factor bits, packed in factor order.
pub fn channel_rank(g: &BinaryGates, c: usize) -> usize {
    let k = g.len();
    (0..k)
        .filter(|&j| g.get(j))
        .fold(0, |id, j| (id << 1) | ((c >> (k - 1 - j)) & 1))
}

/// Channel order grouping connected channels contiguously: `perm[i]` is the
/// original channel placed at position `i`. Sorting key is (group id, rank).
pub fn block_diagonal_permutation(g: &BinaryGates) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..g.channels()).collect();
    perm.sort_by_key(|&c| (channel_group(g, c), channel_rank(g, c)));
    perm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupingReport {
    pub group_count: usize,
    /// Channels of each group, ascending, groups ordered by id.
    pub members: Vec<Vec<usize>>,
    pub zeta_layer: u64,
    pub permutation: Vec<usize>,
}

pub fn grouping_report(g: &BinaryGates) -> GroupingReport {
    let groups = group_count(g);
    let mut members = vec![Vec::new(); groups];
    for c in 0..g.channels() {
        members[channel_group(g, c)].push(c);
    }
    GroupingReport {
        group_count: groups,
        members,
        zeta_layer: g.channels() as u64 * g.row_sum(),
        permutation: block_diagonal_permutation(g),
    }
}

/// If `entry` describes a matrix whose rows and columns can be reordered into
/// equal-sized all-ones diagonal blocks, returns `(row_order, col_order, groups)`.
pub fn find_block_structure(
    rows: usize,
    cols: usize,
    entry: impl Fn(usize, usize) -> bool,
) -> Option<(Vec<usize>, Vec<usize>, usize)> {
    // union-find over rows (0..rows) and cols (rows..rows+cols)
    let mut parent: Vec<usize> = (0..rows + cols).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for p in 0..rows {
        for q in 0..cols {
            if entry(p, q) {
                let (a, b) = (find(&mut parent, p), find(&mut parent, rows + q));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut comp_of = vec![usize::MAX; rows + cols];
    let mut roots = Vec::new();
    for v in 0..rows + cols {
        let r = find(&mut parent, v);
        let id = match roots.iter().position(|&x| x == r) {
            Some(i) => i,
            None => {
                roots.push(r);
                roots.len() - 1
            }
        };
        comp_of[v] = id;
    }
    let groups = roots.len();
    let mut row_members = vec![Vec::new(); groups];
    let mut col_members = vec![Vec::new(); groups];
    for p in 0..rows {
        row_members[comp_of[p]].push(p);
    }
    for q in 0..cols {
        col_members[comp_of[rows + q]].push(q);
    }
    let (rs, cs) = (row_members[0].len(), col_members[0].len());
    for g in 0..groups {
        if row_members[g].len() != rs || col_members[g].len() != cs || rs == 0 || cs == 0 {
            return None;
        }
        for &p in &row_members[g] {
            for &q in &col_members[g] {
                if !entry(p, q) {
                    return None;
                }
            }
        }
    }
    Some((row_members.concat(), col_members.concat(), groups))
}

fn kron_real(a: &[f64], an: usize, b: &[f64], bn: usize) -> Vec<f64> {
    let n = an * bn;
    let mut out = vec![0.0; n * n];
    for i in 0..an {
        for j in 0..an {
            let v = a[i * an + j];
            if v == 0.0 {
                continue;
            }
            for r in 0..bn {
                for s in 0..bn {
                    out[(i * bn + r) * n + j * bn + s] = v * b[r * bn + s];
                }
            }
        }
    }
    out
}

/// Real-valued relaxation `U(g) = ⊗_k (g_k 1 + (1 - g_k) I)` for arbitrary real `g`.
pub fn relaxed_relationship(g: &[f64]) -> Vec<f64> {
    relaxed_with(g, None)
}

fn relaxed_with(g: &[f64], replace: Option<usize>) -> Vec<f64> {
    let mut acc = vec![1.0];
    let mut n = 1;
    for (k, &gk) in g.iter().enumerate() {
        let f = if replace == Some(k) {
            [0.0, 1.0, 1.0, 0.0]
        } else {
            [1.0, gk, gk, 1.0]
        };
        acc = kron_real(&acc, n, &f, 2);
        n *= 2;
    }
    acc
}

/// `∂U/∂g_k` of the relaxed construction at real `g`: factor `k` replaced by
/// `1 - I`. Returns a dense `2^K x 2^K` row-major matrix.
pub fn du_dgk_relaxed(g: &[f64], k: usize) -> Result<Vec<f64>> {
    if k >= g.len() {
        return Err(DgError::Index { index: k, len: g.len() });
    }
    Ok(relaxed_with(g, Some(k)))
}

pub fn du_dgk(g: &BinaryGates, k: usize) -> Result<Vec<f64>> {
    let real: Vec<f64> = g.as_slice().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    du_dgk_relaxed(&real, k)
}

/// Contracts `dL/dU` (`C_in x C_out`, row-major) with every `∂U/∂g_k` at the
/// binary point. Entry `(p, q)` of `∂U/∂g_k` is 1 exactly when the square
/// indices differ in factor `k`'s bit and agree on every other identity bit.
pub fn contract_du(g: &BinaryGates, layout: ChannelLayout, cin: usize, cout: usize, dl_du: &[f64]) -> Vec<f64> {
    let k = g.len();
    let id_mask = g.identity_mask();
    let mut grad = vec![0.0; k];
    for p in 0..cin {
        let sp = layout.square_row(p);
        for q in 0..cout {
            let x = sp ^ layout.square_col(q);
            let outside = x & id_mask;
            let v = dl_du[p * cout + q];
            if v == 0.0 {
                continue;
            }
            for (j, slot) in grad.iter_mut().enumerate() {
                let bit = 1usize << (k - 1 - j);
                if x & bit != 0 && outside & !bit == 0 {
                    *slot += v;
                }
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(bits: &[u8]) -> BinaryGates {
        BinaryGates::from_bits(bits)
    }

    #[test]
    fn binarize_sign_convention() {
        assert_eq!(binarize(&[-1e-8]).unwrap(), g(&[0]));
        assert_eq!(binarize(&[1e-8]).unwrap(), g(&[1]));
        assert_eq!(binarize(&[0.0]).unwrap(), g(&[1]));
        assert_eq!(binarize(&[-0.0]).unwrap(), g(&[1]));
        assert_eq!(binarize(&[0.5, -0.2, 0.0]).unwrap(), g(&[1, 0, 1]));
        assert!(matches!(binarize(&[f64::NAN]), Err(DgError::Value(_))));
    }

    #[test]
    fn paper_structural_examples() {
        let u = build_relationship_matrix(&g(&[1, 1, 0]));
        assert_eq!((u.rows(), u.cols()), (8, 8));
        assert_eq!(group_count(&g(&[1, 1, 0])), 2);
        // 1 ⊗ 1 ⊗ I connects channels with equal last bit: non-adjacent members
        assert!(u.get(0, 2) && u.get(0, 6) && !u.get(0, 1));
        let u = build_relationship_matrix(&g(&[0, 1, 0]));
        assert_eq!(group_count(&g(&[0, 1, 0])), 4);
        assert!(u.get(0, 2) && !u.get(0, 1) && !u.get(0, 4));
        assert_eq!(nnz_oracle(&u), 16);
    }

    #[test]
    fn identity_and_ones_limits() {
        let u = build_relationship_matrix(&g(&[0, 0, 0]));
        for p in 0..8 {
            for q in 0..8 {
                assert_eq!(u.get(p, q), p == q);
            }
        }
        let u = build_relationship_matrix(&g(&[1, 1, 1]));
        assert_eq!(nnz_oracle(&u), 64);
        assert_eq!(group_count(&g(&[])), 1);
        assert_eq!(group_count(&g(&[0, 0, 0])), 8);
        let u = build_relationship_matrix(&g(&[]));
        assert_eq!((u.rows(), u.cols(), nnz_oracle(&u)), (1, 1, 1));
    }

    #[test]
    fn complexity_closed_form() {
        assert_eq!(layer_complexity(&g(&[1, 1, 0]), 8).unwrap(), 32);
        assert_eq!(layer_complexity(&g(&[0, 0, 0]), 8).unwrap(), 8);
        assert_eq!(layer_complexity(&g(&[1, 1, 1]), 8).unwrap(), 64);
        assert!(matches!(layer_complexity(&g(&[1, 1, 1]), 12), Err(DgError::Config(_))));
        assert!(layer_complexity(&g(&[1, 1]), 8).is_err());
    }

    #[test]
    fn kronecker_matches_entrywise_product() {
        for k in 0..=5 {
            for idx in 0..1 << k {
                let gates = BinaryGates::enumerate(k, idx);
                let u = build_relationship_matrix(&gates);
                let factors = gates.factors();
                for p in 0..u.rows() {
                    for q in 0..u.cols() {
                        let expect = factors.iter().enumerate().all(|(j, f)| {
                            let b = k - 1 - j;
                            f.entry((p >> b) & 1, (q >> b) & 1)
                        });
                        assert_eq!(u.get(p, q), expect);
                    }
                }
                assert_eq!(u.count_ones(), nnz_oracle(&u));
            }
        }
    }

    #[test]
    fn permutation_examples() {
        assert_eq!(block_diagonal_permutation(&g(&[1, 1])), vec![0, 1, 2, 3]);
        assert_eq!(block_diagonal_permutation(&g(&[1, 0])), vec![0, 2, 1, 3]);
        let report = grouping_report(&g(&[1, 0]));
        assert_eq!(report.members, vec![vec![0, 2], vec![1, 3]]);
        assert_eq!(report.zeta_layer, 8);
    }

    #[test]
    fn permuted_u_is_block_diagonal_exhaustive() {
        for k in 0..=5 {
            for idx in 0..1 << k {
                let gates = BinaryGates::enumerate(k, idx);
                let u = build_relationship_matrix(&gates);
                let perm = block_diagonal_permutation(&gates);
                let groups = group_count(&gates);
                let block = u.rows() / groups;
                for a in 0..u.rows() {
                    for b in 0..u.cols() {
                        assert_eq!(u.get(perm[a], perm[b]), a / block == b / block, "g={gates:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn block_structure_detection() {
        let gates = g(&[0, 1, 0]);
        let u = build_relationship_matrix(&gates);
        let (_, _, groups) = find_block_structure(8, 8, |p, q| u.get(p, q)).unwrap();
        assert_eq!(groups, 4);
        // unstructured pattern: rows with differing supports that overlap
        let bad = [
            [1, 1, 0, 0],
            [0, 1, 1, 0],
            [0, 0, 1, 1],
            [1, 0, 0, 1],
        ];
        assert!(find_block_structure(4, 4, |p, q| bad[p][q] == 1).is_none());
        // unequal block sizes
        let uneven = [[1, 1, 0], [1, 1, 0], [0, 0, 1]];
        assert!(find_block_structure(3, 3, |p, q| uneven[p][q] == 1).is_none());
    }

    #[test]
    fn rect_construction() {
        let gates = g(&[1, 0]);
        let wide = build_relationship_matrix_rect(&gates, 4, 8).unwrap();
        let sq = build_relationship_matrix(&gates);
        for p in 0..4 {
            for q in 0..8 {
                assert_eq!(wide.get(p, q), sq.get(p, q / 2));
            }
        }
        assert_eq!(nnz_oracle(&wide), layer_complexity_rect(&gates, 4, 8).unwrap());
        let narrow = build_relationship_matrix_rect(&gates, 8, 4).unwrap();
        for p in 0..8 {
            for q in 0..4 {
                assert_eq!(narrow.get(p, q), wide.get(q, p));
            }
        }
        assert_eq!(nnz_oracle(&narrow), layer_complexity_rect(&gates, 8, 4).unwrap());
        assert!(build_relationship_matrix_rect(&gates, 4, 12).is_err());
        assert!(build_relationship_matrix_rect(&g(&[1]), 4, 8).is_err());
    }

    #[test]
    fn du_dgk_single_factor() {
        assert_eq!(du_dgk(&g(&[0]), 0).unwrap(), vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(du_dgk(&g(&[1]), 0).unwrap(), vec![0.0, 1.0, 1.0, 0.0]);
        assert!(matches!(du_dgk(&g(&[1]), 1), Err(DgError::Index { .. })));
    }

    #[test]
    fn du_dgk_two_factors_is_off_identity_kron_ones() {
        // (1 - I) ⊗ 1
        let d = du_dgk(&g(&[0, 1]), 0).unwrap();
        let expect = [
            0., 0., 1., 1., //
            0., 0., 1., 1., //
            1., 1., 0., 0., //
            1., 1., 0., 0.,
        ];
        assert_eq!(d, expect);
    }

    #[test]
    fn parameter_count_is_log2_channels() {
        assert_eq!(GateVector::for_channels(1024).unwrap().len(), 10);
        assert_eq!(GateVector::for_channels(1).unwrap().len(), 0);
        assert!(GateVector::for_channels(1000).is_err());
    }
}
