//! Round orchestration: sample, distribute, train, edit, upload, aggregate.
//!
//! One round under the pair-redistributing strategies (`fedilora`, `hetlora`,
//! `fedavg`) is: sample `ceil(sample_rate · K)` clients, hand each the global
//! adapter truncated to its rank, train locally, edit (from round 1 on),
//! aggregate the uploads into the next global pair. Under `flora` the server
//! never redistributes a pair: each round's stacked delta is folded into an
//! effective frozen base copy and sampled clients restart from seeded fresh
//! adapters. Editing needs a previous global pair to compare against, so it
//! applies only to the pair-redistributing strategies.
//!
//! Every random choice draws from a stream derived from (base seed, round,
//! client), so swapping the aggregation strategy perturbs neither the data
//! partition nor the sampling sequence nor any client's training randomness.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregate_dimension_wise, aggregate_fedavg_pairs, aggregate_flora, aggregate_hetlora,
    ClientUpdate, Strategy,
};
use crate::config::ExperimentConfig;
use crate::editing::{edit_client, EditReport};
use crate::error::Result;
use crate::lora::{AdapterStack, GlobalAdapterState};
use crate::matrix::{frobenius_norm, Matrix};
use crate::rng;
use crate::toytask::{
    evaluate, generate_federation, local_train, AdapterView, Federation, FrozenNetwork,
    MultimodalSample,
};

const TAG_NET: u64 = 0x0001;
const TAG_GLOBAL_INIT: u64 = 0x0002;
const TAG_FRESH: u64 = 0x0003;

/// The model a client keeps between rounds: its last post-edit adapter and,
/// under `flora`, the merged base it was trained against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientModel {
    pub stack: AdapterStack,
    pub base_delta: Option<Vec<Matrix>>,
}

/// Full simulation state across rounds.
#[derive(Clone, Debug)]
pub struct ServerState {
    pub config: ExperimentConfig,
    pub net: FrozenNetwork,
    pub federation: Federation,
    /// Current global adapter pair (pair-redistributing strategies).
    pub global: GlobalAdapterState,
    /// Accumulated merged delta (flora).
    pub merged_delta: Vec<Matrix>,
    /// Per-client kept models for personalized evaluation.
    pub kept: Vec<ClientModel>,
    pub round: usize,
}

/// Per-round telemetry. Serialized form excludes the wall time, so two runs
/// of one config serialize identically.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub sampled_clients: Vec<usize>,
    /// Per-layer Frobenius norm of the global adapter after aggregation:
    /// `sqrt(‖A‖² + ‖B‖²)` per layer for pair strategies, the merged delta's
    /// norm per layer under flora.
    pub adapter_norms: Vec<f64>,
    /// Edit reports for this round's sampled clients (round >= 1, pair
    /// strategies only; mode `none` still reports similarities).
    pub edit_reports: Vec<EditReport>,
    pub global_loss: f64,
    pub personalized_loss: f64,
    /// Measured, not persisted: excluded so reruns are byte-identical.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl RoundRecord {
    /// Root-sum-square of the per-layer norms.
    pub fn total_adapter_norm(&self) -> f64 {
        self.adapter_norms.iter().map(|n| n * n).sum::<f64>().sqrt()
    }
}

/// Streaming consumer of round records; metrics files flush here per round.
pub trait RoundSink {
    fn on_round(&mut self, record: &RoundRecord) -> Result<()>;
}

/// Sink that drops everything.
pub struct NullSink;

impl RoundSink for NullSink {
    fn on_round(&mut self, _record: &RoundRecord) -> Result<()> {
        Ok(())
    }
}

/// Build the initial state: frozen network, federation data, the seeded
/// initial global adapter at the experiment-wide global rank, and every
/// client's kept model primed with its truncated view of that adapter.
pub fn init_state(config: &ExperimentConfig) -> Result<ServerState> {
    config.validate()?;
    let net = FrozenNetwork::generate(
        rng::derive_seed(config.seeds.init, &[TAG_NET]),
        &config.dims,
    )?;
    let federation = generate_federation(config.seeds.data, &config.dataset_spec())?;
    let global_rank = config.global_rank();
    let global = GlobalAdapterState {
        stack: net.init_stack(
            global_rank,
            rng::derive_seed(config.seeds.init, &[TAG_GLOBAL_INIT]),
            config.adapter_init_scale,
        ),
        round: 0,
    };
    let merged_delta = (0..config.dims.layers)
        .map(|y| {
            let (o, i) = config.dims.layer_shape(y);
            Matrix::zeros(o, i)
        })
        .collect::<Vec<_>>();
    let kept = config
        .rank_assignment
        .iter()
        .map(|&r| {
            Ok(ClientModel {
                stack: global.stack.truncate(r)?,
                base_delta: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ServerState {
        config: config.clone(),
        net,
        federation,
        global,
        merged_delta,
        kept,
        round: 0,
    })
}

/// Sample `clients_per_round` distinct client ids for round `t`, ascending.
pub fn sample_clients(config: &ExperimentConfig, t: usize) -> Vec<usize> {
    let k = config.n_clients;
    let m = config.clients_per_round();
    let mut r = rng::stream(config.seeds.sampling, &[t as u64]);
    let mut ids: Vec<usize> = (0..k).collect();
    for i in 0..m {
        let j = i + r.gen_range(0..k - i);
        ids.swap(i, j);
    }
    let mut sampled = ids[..m].to_vec();
    sampled.sort_unstable();
    sampled
}

/// The adapter a sampled client starts the round from.
///
/// Pair strategies hand out the global truncated to the client rank; `flora`
/// hands out a fresh seeded stack (`B = 0`) because the stacked global is
/// never redistributed.
pub fn distribute_stack(state: &ServerState, client_id: usize, t: usize) -> Result<AdapterStack> {
    let rank = state.config.rank_assignment[client_id];
    if state.config.strategy.redistributes_pairs() {
        state.global.stack.truncate(rank)
    } else {
        Ok(state.net.init_stack(
            rank,
            rng::derive_seed(
                state.config.seeds.init,
                &[TAG_FRESH, t as u64, client_id as u64],
            ),
            state.config.adapter_init_scale,
        ))
    }
}

fn effective_net(state: &ServerState) -> FrozenNetwork {
    state
        .net
        .with_added_deltas(&state.merged_delta)
        .expect("merged delta shapes track the network")
}

/// Global-model loss on a held-out test set: the global pair merged into the
/// frozen base (pair strategies) or the accumulated delta (flora).
pub fn evaluate_global(state: &ServerState, test_set: &[MultimodalSample]) -> Result<f64> {
    if state.config.strategy.redistributes_pairs() {
        evaluate(
            &state.net,
            &AdapterView::Pairs(&state.global.stack),
            test_set,
        )
    } else {
        evaluate(
            &state.net,
            &AdapterView::Deltas(&state.merged_delta),
            test_set,
        )
    }
}

/// Data-size-weighted mean of every client's loss on its own test split,
/// using the model the client actually keeps (post-edit, pre-upload).
pub fn evaluate_personalized(state: &ServerState) -> Result<f64> {
    let total: u64 = state
        .federation
        .clients
        .iter()
        .map(|c| c.data_size() as u64)
        .sum();
    let mut acc = 0.0;
    for (client, model) in state.federation.clients.iter().zip(&state.kept) {
        let loss = match &model.base_delta {
            None => evaluate(&state.net, &AdapterView::Pairs(&model.stack), &client.test)?,
            Some(base) => {
                let net = state.net.with_added_deltas(base)?;
                evaluate(&net, &AdapterView::Pairs(&model.stack), &client.test)?
            }
        };
        acc += (client.data_size() as f64 / total as f64) * loss;
    }
    Ok(acc)
}

/// Execute round `t`: returns the advanced state and its telemetry record.
pub fn run_round(mut state: ServerState, t: usize) -> Result<(ServerState, RoundRecord)> {
    let started = Instant::now();
    let config = state.config.clone();
    let sampled = sample_clients(&config, t);

    let mut updates = Vec::with_capacity(sampled.len());
    let mut edit_reports = Vec::new();
    let train_net = if config.strategy.redistributes_pairs() {
        state.net.clone()
    } else {
        effective_net(&state)
    };
    for &client_id in &sampled {
        let dataset = &state.federation.clients[client_id];
        let start_stack = distribute_stack(&state, client_id, t)?;
        let train_seed = rng::derive_seed(config.seeds.training, &[t as u64, client_id as u64]);
        let (trained, _trace) = local_train(
            &train_net,
            &start_stack,
            dataset,
            config.train.steps,
            config.train.lr,
            config.train.batch,
            train_seed,
        )?;

        let final_stack = if t >= 1 && config.strategy.redistributes_pairs() {
            let (edited, report) =
                edit_client(&trained, &state.global, client_id, t, &config.edit)?;
            edit_reports.push(report);
            edited
        } else {
            trained
        };

        state.kept[client_id] = ClientModel {
            stack: final_stack.clone(),
            base_delta: if config.strategy.redistributes_pairs() {
                None
            } else {
                Some(state.merged_delta.clone())
            },
        };
        updates.push(ClientUpdate {
            client_id,
            data_size: dataset.data_size(),
            stack: final_stack,
        });
    }

    let global_rank = config.global_rank();
    match config.strategy {
        Strategy::FediLora => {
            state.global = aggregate_dimension_wise(&updates, &state.global, global_rank)?;
        }
        Strategy::HetLora => {
            state.global = aggregate_hetlora(&updates, global_rank, t + 1)?;
        }
        Strategy::FedAvg => {
            state.global = aggregate_fedavg_pairs(&updates, global_rank, t + 1)?;
        }
        Strategy::Flora => {
            let delta = aggregate_flora(&updates)?;
            for (acc, d) in state.merged_delta.iter_mut().zip(&delta) {
                acc.add_scaled(d, 1.0);
            }
            state.global.round = t + 1;
        }
    }
    state.round = t + 1;

    let adapter_norms: Vec<f64> = if config.strategy.redistributes_pairs() {
        state
            .global
            .stack
            .layers()
            .iter()
            .map(|l| {
                let na = frobenius_norm(l.a());
                let nb = frobenius_norm(l.b());
                (na * na + nb * nb).sqrt()
            })
            .collect()
    } else {
        state.merged_delta.iter().map(frobenius_norm).collect()
    };

    let global_loss = evaluate_global(&state, &state.federation.global_test)?;
    let personalized_loss = evaluate_personalized(&state)?;

    let record = RoundRecord {
        round: t,
        sampled_clients: sampled,
        adapter_norms,
        edit_reports,
        global_loss,
        personalized_loss,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((state, record))
}

/// Run the configured number of rounds, streaming each record to `sink`.
pub fn run_experiment(
    config: &ExperimentConfig,
    sink: &mut dyn RoundSink,
) -> Result<(ServerState, Vec<RoundRecord>)> {
    let mut state = init_state(config)?;
    let mut records = Vec::with_capacity(config.rounds);
    for t in 0..config.rounds {
        let (next, record) = run_round(state, t)?;
        state = next;
        sink.on_round(&record)?;
        records.push(record);
    }
    Ok((state, records))
}

/// Convenience wrapper without streaming.
pub fn run_experiment_collect(
    config: &ExperimentConfig,
) -> Result<(ServerState, Vec<RoundRecord>)> {
    run_experiment(config, &mut NullSink)
}
