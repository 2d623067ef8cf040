//! Heterogeneous-rank LoRA adapter representation.
//!
//! A frozen weight matrix `W ∈ R^{m×n}` carries a trainable low-rank update
//! `ΔW = B·A` with `A ∈ R^{r×n}` and `B ∈ R^{m×r}`. Clients may use different
//! ranks; the padding and truncation here keep a dimension index stable across
//! rank changes: padding appends zero rows/columns at the tail and truncation
//! removes from the tail, so dimension `d` always refers to the same row of A
//! (and column of B) regardless of the rank it is viewed at.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// One layer's low-rank update: `A` (rank × in_dim) and `B` (out_dim × rank).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraPair {
    a: Matrix,
    b: Matrix,
}

impl LoraPair {
    /// Validate shapes and finiteness, then wrap.
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if a.rows() != b.cols() {
            return Err(Error::ShapeMismatch {
                context: "LoraPair::new",
                expected: format!("b with {} cols", a.rows()),
                got: format!("{} cols", b.cols()),
            });
        }
        if a.rows() == 0 || a.cols() == 0 || b.rows() == 0 {
            return Err(Error::InvalidRank {
                rank: a.rows(),
                reason: "rank, in_dim and out_dim must all be at least 1",
            });
        }
        for m in [&a, &b] {
            if let Some((row, col)) = m.first_non_finite() {
                return Err(Error::NonFinite { row, col });
            }
        }
        Ok(Self { a, b })
    }

    /// Zero adapter of the given shape (`B = 0` so the delta is exactly zero).
    pub fn zeros(rank: usize, out_dim: usize, in_dim: usize) -> Self {
        Self {
            a: Matrix::zeros(rank, in_dim),
            b: Matrix::zeros(out_dim, rank),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    /// Mutable access for training; entry updates only, shapes are fixed.
    pub fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }
}

/// The full update `ΔW = B·A`, shape (out_dim × in_dim).
pub fn delta(pair: &LoraPair) -> Matrix {
    pair.b
        .matmul(&pair.a)
        .expect("LoraPair invariant guarantees conformable shapes")
}

/// Grow a pair to `target_rank` by appending zero rows to A and zero columns
/// to B. The delta is unchanged exactly: appended dimensions contribute
/// structural zeros, not rounded ones.
pub fn zero_pad(pair: &LoraPair, target_rank: usize) -> Result<LoraPair> {
    let rank = pair.rank();
    if target_rank < rank {
        return Err(Error::PadToSmallerRank {
            rank,
            target: target_rank,
        });
    }
    if target_rank == rank {
        return Ok(pair.clone());
    }
    let mut a = Matrix::zeros(target_rank, pair.in_dim());
    for r in 0..rank {
        a.row_mut(r).copy_from_slice(pair.a.row(r));
    }
    let mut b = Matrix::zeros(pair.out_dim(), target_rank);
    for i in 0..pair.out_dim() {
        b.row_mut(i)[..rank].copy_from_slice(pair.b.row(i));
    }
    LoraPair::new(a, b)
}

/// Keep the leading `target_rank` rows of A and columns of B.
pub fn truncate(pair: &LoraPair, target_rank: usize) -> Result<LoraPair> {
    let rank = pair.rank();
    if target_rank > rank || target_rank < 1 {
        return Err(Error::BadTruncation {
            rank,
            target: target_rank,
        });
    }
    if target_rank == rank {
        return Ok(pair.clone());
    }
    let mut a = Matrix::zeros(target_rank, pair.in_dim());
    for r in 0..target_rank {
        a.row_mut(r).copy_from_slice(pair.a.row(r));
    }
    let mut b = Matrix::zeros(pair.out_dim(), target_rank);
    for i in 0..pair.out_dim() {
        b.row_mut(i).copy_from_slice(&pair.b.row(i)[..target_rank]);
    }
    LoraPair::new(a, b)
}

/// An ordered set of per-layer pairs sharing one rank.
///
/// Rank heterogeneity lives across clients; within one stack every layer uses
/// the same rank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterStack {
    layers: Vec<LoraPair>,
}

impl AdapterStack {
    pub fn new(layers: Vec<LoraPair>) -> Result<Self> {
        let first = layers.first().ok_or(Error::EmptyDataset)?;
        let rank = first.rank();
        for (i, l) in layers.iter().enumerate() {
            if l.rank() != rank {
                return Err(Error::ShapeMismatch {
                    context: "AdapterStack::new",
                    expected: format!("rank {rank}"),
                    got: format!("rank {} at layer {i}", l.rank()),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn rank(&self) -> usize {
        self.layers[0].rank()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer(&self, y: usize) -> &LoraPair {
        &self.layers[y]
    }

    pub fn layer_mut(&mut self, y: usize) -> &mut LoraPair {
        &mut self.layers[y]
    }

    pub fn layers(&self) -> &[LoraPair] {
        &self.layers
    }

    /// Per-layer (out_dim, in_dim).
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .map(|l| (l.out_dim(), l.in_dim()))
            .collect()
    }

    /// Per-layer full deltas `B_y · A_y`.
    pub fn deltas(&self) -> Vec<Matrix> {
        self.layers.iter().map(delta).collect()
    }

    pub fn zero_pad(&self, target_rank: usize) -> Result<AdapterStack> {
        let layers = self
            .layers
            .iter()
            .map(|l| zero_pad(l, target_rank))
            .collect::<Result<Vec<_>>>()?;
        AdapterStack::new(layers)
    }

    pub fn truncate(&self, target_rank: usize) -> Result<AdapterStack> {
        let layers = self
            .layers
            .iter()
            .map(|l| truncate(l, target_rank))
            .collect::<Result<Vec<_>>>()?;
        AdapterStack::new(layers)
    }
}

/// The server-side adapter at the global rank, stamped with the round that
/// produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalAdapterState {
    pub stack: AdapterStack,
    pub round: usize,
}

impl GlobalAdapterState {
    pub fn rank(&self) -> usize {
        self.stack.rank()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::frobenius_norm;
    use proptest::prelude::*;

    fn pair_from(b_rows: &[Vec<f64>], a_rows: &[Vec<f64>]) -> LoraPair {
        LoraPair::new(
            Matrix::from_rows(a_rows).unwrap(),
            Matrix::from_rows(b_rows).unwrap(),
        )
        .unwrap()
    }

    fn det_pair(rank: usize, out_dim: usize, in_dim: usize, salt: u64) -> LoraPair {
        let a = Matrix::from_fn(rank, in_dim, |i, j| {
            ((i * in_dim + j) as f64 * 0.61 + salt as f64).sin()
        });
        let b = Matrix::from_fn(out_dim, rank, |i, j| {
            ((i * rank + j) as f64 * 0.43 + salt as f64 * 1.7).cos()
        });
        LoraPair::new(a, b).unwrap()
    }

    #[test]
    fn delta_zero_b_annihilates() {
        let pair = LoraPair::new(
            Matrix::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap(),
            Matrix::zeros(2, 1),
        )
        .unwrap();
        assert!(delta(&pair).is_zero());
    }

    #[test]
    fn delta_rank_one_outer_product() {
        // b = (1, 2)ᵀ, a = (3, 4) → [[3,4],[6,8]]
        let pair = pair_from(&[vec![1.0], vec![2.0]], &[vec![3.0, 4.0]]);
        let d = delta(&pair);
        assert_eq!(d.data(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn delta_matches_triple_loop_oracle() {
        let pair = det_pair(2, 3, 4, 11);
        let d = delta(&pair);
        for i in 0..3 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..2 {
                    acc += pair.b().get(i, k) * pair.a().get(k, j);
                }
                assert!((d.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_pad_identity_at_same_rank() {
        let pair = det_pair(2, 3, 3, 1);
        assert_eq!(zero_pad(&pair, 2).unwrap(), pair);
    }

    #[test]
    fn zero_pad_appends_zero_rows() {
        let pair = det_pair(1, 2, 3, 2);
        let padded = zero_pad(&pair, 3).unwrap();
        assert_eq!(padded.rank(), 3);
        assert!(padded.a().row(1).iter().all(|&v| v == 0.0));
        assert!(padded.a().row(2).iter().all(|&v| v == 0.0));
        assert_eq!(delta(&padded), delta(&pair));
    }

    #[test]
    fn zero_pad_rejects_smaller_rank() {
        let pair = det_pair(3, 2, 2, 3);
        assert!(matches!(
            zero_pad(&pair, 2),
            Err(Error::PadToSmallerRank { .. })
        ));
    }

    #[test]
    fn truncate_identity_and_inverse_of_pad() {
        let pair = det_pair(3, 4, 5, 4);
        assert_eq!(truncate(&pair, 3).unwrap(), pair);
        let padded = zero_pad(&pair, 7).unwrap();
        assert_eq!(truncate(&padded, 3).unwrap(), pair);
    }

    #[test]
    fn truncate_keeps_leading_blocks() {
        let pair = det_pair(4, 3, 5, 5);
        let cut = truncate(&pair, 2).unwrap();
        // Oracle: build the pair from leading blocks by hand.
        let a2 = Matrix::from_rows(&[pair.a().row(0).to_vec(), pair.a().row(1).to_vec()]).unwrap();
        let b2 = Matrix::from_fn(3, 2, |i, j| pair.b().get(i, j));
        let expect = LoraPair::new(a2, b2).unwrap();
        assert_eq!(delta(&cut), delta(&expect));
    }

    #[test]
    fn truncate_rejects_bad_targets() {
        let pair = det_pair(2, 2, 2, 6);
        assert!(truncate(&pair, 3).is_err());
        assert!(truncate(&pair, 0).is_err());
    }

    #[test]
    fn stack_requires_uniform_rank() {
        let l0 = det_pair(2, 3, 3, 7);
        let l1 = det_pair(3, 3, 3, 8);
        assert!(AdapterStack::new(vec![l0.clone(), l1]).is_err());
        assert!(AdapterStack::new(vec![l0.clone(), l0]).is_ok());
    }

    #[test]
    fn pair_rejects_nonfinite() {
        let a = Matrix::from_rows(&[vec![f64::NAN, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert!(matches!(LoraPair::new(a, b), Err(Error::NonFinite { .. })));
    }

    proptest! {
        #[test]
        fn pad_preserves_delta_exactly(
            rank in 1usize..4,
            out_dim in 1usize..5,
            in_dim in 1usize..5,
            extra in 0usize..4,
            salt in 0u64..1000,
        ) {
            let pair = det_pair(rank, out_dim, in_dim, salt);
            let padded = zero_pad(&pair, rank + extra).unwrap();
            // Structural zeros: equality is exact, no tolerance.
            prop_assert_eq!(delta(&padded), delta(&pair));
            prop_assert_eq!(truncate(&padded, rank).unwrap(), pair);
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            salt in 0u64..1000,
            c in 0.01f64..100.0,
        ) {
            let x = det_pair(2, 3, 4, salt).a().clone();
            let y = det_pair(2, 3, 4, salt + 1).a().clone();
            let xy = crate::matrix::cosine_similarity(&x, &y).unwrap();
            let yx = crate::matrix::cosine_similarity(&y, &x).unwrap();
            prop_assert!((xy - yx).abs() < 1e-12);

            let mut cx = x.clone();
            cx.scale(c);
            let scaled = crate::matrix::cosine_similarity(&cx, &y).unwrap();
            prop_assert!((xy - scaled).abs() < 1e-12);
        }

        #[test]
        fn delta_is_bilinear(salt in 0u64..1000) {
            let b = det_pair(2, 3, 4, salt);
            let a1 = det_pair(2, 3, 4, salt + 1);
            let a2 = det_pair(2, 3, 4, salt + 2);

            let mut a_sum = a1.a().clone();
            a_sum.add_scaled(a2.a(), 1.0);
            let combined = LoraPair::new(a_sum, b.b().clone()).unwrap();

            let lhs = delta(&combined);
            let d1 = delta(&LoraPair::new(a1.a().clone(), b.b().clone()).unwrap());
            let d2 = delta(&LoraPair::new(a2.a().clone(), b.b().clone()).unwrap());
            let mut rhs = d1;
            rhs.add_scaled(&d2, 1.0);

            let mut diff = lhs;
            diff.add_scaled(&rhs, -1.0);
            prop_assert!(frobenius_norm(&diff) < 1e-12);
        }
    }
}
