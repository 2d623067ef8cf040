//! Server-side aggregation strategies.
//!
//! Four strategies share one upload format (a rank-`r_k` [`AdapterStack`] per
//! sampled client) and differ in how they combine it:
//!
//! * `fedilora` — dimension-wise reweighting: row `d` of the global A (and
//!   column `d` of the global B) is averaged only over the clients whose rank
//!   covers `d`, with data-size weights renormalized over that subset. No
//!   zero-padding dilution.
//! * `hetlora` — zero-pad to the global rank, then a plain weighted average
//!   with per-layer weights proportional to each client's update norm.
//!   Padded zeros dilute high dimensions.
//! * `fedavg` — zero-pad, then a plain data-size-weighted average of A and B.
//!   At homogeneous ranks this is exactly classic adapter averaging.
//! * `flora` — scaled stacking of the raw factors into one wide pair whose
//!   product is the data-size-weighted sum of the client deltas; the result
//!   is a full delta, not a redistributable pair.
//!
//! All reductions iterate clients in ascending `client_id` order, so results
//! do not depend on arrival order or parallel scheduling.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{delta, zero_pad, AdapterStack, GlobalAdapterState, LoraPair};
use crate::matrix::{frobenius_norm, Matrix};

/// One sampled client's upload.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// Local training-set size |D_k|; drives the FedAvg weight.
    pub data_size: usize,
    pub stack: AdapterStack,
}

/// Aggregation strategy, selected by name from the experiment config.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    FediLora,
    HetLora,
    Flora,
    FedAvg,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::FediLora,
        Strategy::HetLora,
        Strategy::Flora,
        Strategy::FedAvg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FediLora => "fedilora",
            Strategy::HetLora => "hetlora",
            Strategy::Flora => "flora",
            Strategy::FedAvg => "fedavg",
        }
    }

    /// Whether the server keeps a redistributable global pair (as opposed to
    /// folding a merged delta into the frozen base).
    pub fn redistributes_pairs(self) -> bool {
        !matches!(self, Strategy::Flora)
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedilora" => Ok(Strategy::FediLora),
            "hetlora" => Ok(Strategy::HetLora),
            "flora" => Ok(Strategy::Flora),
            "fedavg" => Ok(Strategy::FedAvg),
            other => Err(Error::InvalidConfig(format!(
                "unknown strategy {other:?}; expected one of fedilora, hetlora, flora, fedavg"
            ))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-dimension contributor weights for dimension-wise aggregation.
///
/// `per_dimension[d - 1]` lists `(client_id, weight)` for every client whose
/// rank covers dimension `d`, weights renormalized to sum to 1 over that
/// subset. An empty list marks a no-contributor dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct DimensionWeightPlan {
    pub global_rank: usize,
    pub per_dimension: Vec<Vec<(usize, f64)>>,
}

impl DimensionWeightPlan {
    /// Contributors for dimension `d` (1-based, matching the mask definition).
    pub fn dimension(&self, d: usize) -> &[(usize, f64)] {
        &self.per_dimension[d - 1]
    }
}

fn sorted_by_id(updates: &[ClientUpdate]) -> Vec<&ClientUpdate> {
    let mut refs: Vec<&ClientUpdate> = updates.iter().collect();
    refs.sort_by_key(|u| u.client_id);
    refs
}

fn validate_updates(updates: &[ClientUpdate]) -> Result<()> {
    let first = updates.first().ok_or(Error::NoClients)?;
    let shapes = first.stack.layer_shapes();
    for u in updates {
        if u.data_size == 0 {
            return Err(Error::InvalidConfig(format!(
                "client {} has empty local data",
                u.client_id
            )));
        }
        if u.stack.layer_shapes() != shapes {
            return Err(Error::ShapeMismatch {
                context: "aggregation",
                expected: format!("{shapes:?}"),
                got: format!("{:?} from client {}", u.stack.layer_shapes(), u.client_id),
            });
        }
    }
    Ok(())
}

/// FedAvg weights `p_k = |D_k| / Σ_j |D_j|`.
pub fn fedavg_weights(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return Err(Error::NoClients);
    }
    let total: u64 = updates.iter().map(|u| u.data_size as u64).sum();
    Ok(updates
        .iter()
        .map(|u| u.data_size as f64 / total as f64)
        .collect())
}

/// Build the per-dimension weight plan for the sampled updates.
///
/// A client contributes to dimension `d` iff `d <= r_k`. The weight of client
/// `k` at `d` is its data-size share among the contributors to `d`; both
/// numerator and denominator are taken from the raw integer sizes so that the
/// homogeneous-rank case reduces to the plain FedAvg weights bit for bit.
pub fn build_dimension_plan(
    updates: &[ClientUpdate],
    global_rank: usize,
) -> Result<DimensionWeightPlan> {
    if updates.is_empty() {
        return Err(Error::NoClients);
    }
    let sorted = sorted_by_id(updates);
    if let Some(u) = sorted.iter().find(|u| u.stack.rank() > global_rank) {
        return Err(Error::InvalidRank {
            rank: u.stack.rank(),
            reason: "client rank exceeds the global rank",
        });
    }
    let mut per_dimension = Vec::with_capacity(global_rank);
    for d in 1..=global_rank {
        let contributors: Vec<&&ClientUpdate> =
            sorted.iter().filter(|u| u.stack.rank() >= d).collect();
        let mass: u64 = contributors.iter().map(|u| u.data_size as u64).sum();
        let row = contributors
            .iter()
            .map(|u| (u.client_id, u.data_size as f64 / mass as f64))
            .collect();
        per_dimension.push(row);
    }
    Ok(DimensionWeightPlan {
        global_rank,
        per_dimension,
    })
}

/// Dimension-wise reweighted aggregation of heterogeneous-rank uploads.
///
/// Row `d` of each layer's global A is the plan-weighted sum of the
/// contributors' row `d`; column `d` of the global B likewise. Dimensions no
/// sampled client covers keep the previous global's row and column, so a
/// round that happens to sample only low-rank clients cannot erase the high
/// dimensions.
pub fn aggregate_dimension_wise(
    updates: &[ClientUpdate],
    previous_global: &GlobalAdapterState,
    global_rank: usize,
) -> Result<GlobalAdapterState> {
    validate_updates(updates)?;
    if previous_global.rank() != global_rank {
        return Err(Error::InvalidRank {
            rank: previous_global.rank(),
            reason: "previous global adapter does not match the global rank",
        });
    }
    let plan = build_dimension_plan(updates, global_rank)?;
    let sorted = sorted_by_id(updates);
    let n_layers = previous_global.stack.len();
    if sorted[0].stack.len() != n_layers {
        return Err(Error::ShapeMismatch {
            context: "aggregate_dimension_wise",
            expected: format!("{n_layers} layers"),
            got: format!("{}", sorted[0].stack.len()),
        });
    }

    let mut layers = Vec::with_capacity(n_layers);
    for y in 0..n_layers {
        let prev = previous_global.stack.layer(y);
        let (out_dim, in_dim) = (prev.out_dim(), prev.in_dim());
        let mut a = Matrix::zeros(global_rank, in_dim);
        let mut b = Matrix::zeros(out_dim, global_rank);
        for d in 1..=global_rank {
            let contributors = plan.dimension(d);
            if contributors.is_empty() {
                a.row_mut(d - 1).copy_from_slice(prev.a().row(d - 1));
                for i in 0..out_dim {
                    b.set(i, d - 1, prev.b().get(i, d - 1));
                }
                continue;
            }
            for &(client_id, weight) in contributors {
                let u = sorted
                    .iter()
                    .find(|u| u.client_id == client_id)
                    .expect("plan ids come from the same update set");
                let ua = u.stack.layer(y).a();
                let ub = u.stack.layer(y).b();
                for (acc, v) in a.row_mut(d - 1).iter_mut().zip(ua.row(d - 1)) {
                    *acc += weight * v;
                }
                for i in 0..out_dim {
                    let cur = b.get(i, d - 1);
                    b.set(i, d - 1, cur + weight * ub.get(i, d - 1));
                }
            }
        }
        layers.push(LoraPair::new(a, b)?);
    }
    Ok(GlobalAdapterState {
        stack: AdapterStack::new(layers)?,
        round: previous_global.round + 1,
    })
}

/// Classic FedAvg over full deltas: `ΔW_global = Σ_k p_k · B_k A_k` per layer.
pub fn aggregate_fedavg_delta(updates: &[ClientUpdate]) -> Result<Vec<Matrix>> {
    validate_updates(updates)?;
    let sorted = sorted_by_id(updates);
    let weights = fedavg_weights_sorted(&sorted);
    let n_layers = sorted[0].stack.len();
    let mut out = Vec::with_capacity(n_layers);
    for y in 0..n_layers {
        let (out_dim, in_dim) = {
            let l = sorted[0].stack.layer(y);
            (l.out_dim(), l.in_dim())
        };
        let mut acc = Matrix::zeros(out_dim, in_dim);
        for (u, &w) in sorted.iter().zip(&weights) {
            acc.add_scaled(&delta(u.stack.layer(y)), w);
        }
        out.push(acc);
    }
    Ok(out)
}

fn fedavg_weights_sorted(sorted: &[&ClientUpdate]) -> Vec<f64> {
    let total: u64 = sorted.iter().map(|u| u.data_size as u64).sum();
    sorted
        .iter()
        .map(|u| u.data_size as f64 / total as f64)
        .collect()
}

/// Zero-pad every upload to `global_rank`, then average A and B with the
/// given per-layer weights. `weights[k][y]` belongs to `sorted` client `k`
/// at layer `y`. This is the shared machinery behind `hetlora` and the
/// pair-averaging `fedavg` strategy; padded zeros participate in the average,
/// which is exactly the dilution the dimension-wise scheme removes.
fn aggregate_zero_pad(
    sorted: &[&ClientUpdate],
    global_rank: usize,
    weights: &[Vec<f64>],
    round: usize,
) -> Result<GlobalAdapterState> {
    let n_layers = sorted[0].stack.len();
    let mut layers = Vec::with_capacity(n_layers);
    for y in 0..n_layers {
        let (out_dim, in_dim) = {
            let l = sorted[0].stack.layer(y);
            (l.out_dim(), l.in_dim())
        };
        let mut a = Matrix::zeros(global_rank, in_dim);
        let mut b = Matrix::zeros(out_dim, global_rank);
        for (k, u) in sorted.iter().enumerate() {
            let padded = zero_pad(u.stack.layer(y), global_rank)?;
            a.add_scaled(padded.a(), weights[k][y]);
            b.add_scaled(padded.b(), weights[k][y]);
        }
        layers.push(LoraPair::new(a, b)?);
    }
    Ok(GlobalAdapterState {
        stack: AdapterStack::new(layers)?,
        round,
    })
}

/// Sparsity-weighted zero-pad aggregation.
///
/// Per layer, client weights are proportional to the Frobenius norm of the
/// client's full update `B_k A_k`, normalized to sum to 1 across the sampled
/// clients (uniform fallback when every norm is zero). The padded matrices
/// are then averaged directly, with no per-dimension renormalization.
pub fn aggregate_hetlora(
    updates: &[ClientUpdate],
    global_rank: usize,
    round: usize,
) -> Result<GlobalAdapterState> {
    validate_updates(updates)?;
    let sorted = sorted_by_id(updates);
    let n_layers = sorted[0].stack.len();

    let mut weights = vec![vec![0.0; n_layers]; sorted.len()];
    for y in 0..n_layers {
        let norms: Vec<f64> = sorted
            .iter()
            .map(|u| frobenius_norm(&delta(u.stack.layer(y))))
            .collect();
        let total: f64 = norms.iter().sum();
        for (k, &n) in norms.iter().enumerate() {
            weights[k][y] = if total == 0.0 {
                1.0 / sorted.len() as f64
            } else {
                n / total
            };
        }
    }
    aggregate_zero_pad(&sorted, global_rank, &weights, round)
}

/// Zero-pad aggregation with plain data-size weights: classic adapter
/// averaging extended to heterogeneous ranks by padding.
pub fn aggregate_fedavg_pairs(
    updates: &[ClientUpdate],
    global_rank: usize,
    round: usize,
) -> Result<GlobalAdapterState> {
    validate_updates(updates)?;
    let sorted = sorted_by_id(updates);
    let p = fedavg_weights_sorted(&sorted);
    let n_layers = sorted[0].stack.len();
    let weights: Vec<Vec<f64>> = p.iter().map(|&w| vec![w; n_layers]).collect();
    aggregate_zero_pad(&sorted, global_rank, &weights, round)
}

/// Stacking aggregation: per layer, the `√p_k`-scaled A factors are stacked
/// vertically and the `√p_k`-scaled B factors horizontally, and the product
/// of the two stacks is returned as a full delta. Algebraically this equals
/// `Σ_k p_k B_k A_k`; the stacked pair is not redistributed.
pub fn aggregate_flora(updates: &[ClientUpdate]) -> Result<Vec<Matrix>> {
    validate_updates(updates)?;
    let sorted = sorted_by_id(updates);
    let weights = fedavg_weights_sorted(&sorted);
    let n_layers = sorted[0].stack.len();
    let mut out = Vec::with_capacity(n_layers);
    for y in 0..n_layers {
        let mut a_stack: Option<Matrix> = None;
        let mut b_stack: Option<Matrix> = None;
        for (u, &w) in sorted.iter().zip(&weights) {
            let s = w.sqrt();
            let mut a = u.stack.layer(y).a().clone();
            a.scale(s);
            let mut b = u.stack.layer(y).b().clone();
            b.scale(s);
            a_stack = Some(match a_stack {
                None => a,
                Some(prev) => Matrix::vstack(&prev, &a)?,
            });
            b_stack = Some(match b_stack {
                None => b,
                Some(prev) => Matrix::hstack(&prev, &b)?,
            });
        }
        let a_stack = a_stack.expect("validated nonempty");
        let b_stack = b_stack.expect("validated nonempty");
        out.push(b_stack.matmul(&a_stack)?);
    }
    Ok(out)
}
