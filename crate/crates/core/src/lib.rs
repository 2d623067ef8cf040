//! Deterministic federated-LoRA simulation library.
//!
//! Clients fine-tune low-rank adapters of heterogeneous ranks on a synthetic
//! two-modality task with optional missing-modality corruption; the server
//! combines their uploads with one of four aggregation strategies and, from
//! round 1 on, clients may repair their least-aligned layer by blending it
//! toward the previous global adapter.
//!
//! Modules:
//! - [`matrix`], [`lora`] — dense f64 matrices and the adapter algebra
//!   (delta, zero-pad, truncate, cosine similarity, Frobenius norm);
//! - [`aggregation`] — dimension-wise reweighting plus the zero-pad,
//!   stacking, and plain-averaging baselines;
//! - [`editing`] — similarity scoring, Min-K layer selection, blending;
//! - [`toytask`] — synthetic data, frozen network, exact-gradient training;
//! - [`fedsim`] — round orchestration and evaluation;
//! - [`config`], [`telemetry`] — experiment configuration and metrics
//!   persistence (CSV + JSON, streamed per round).
//!
//! Everything is a pure function of the config's four seeds: identical
//! configs produce byte-identical metrics files.

pub mod aggregation;
pub mod config;
pub mod editing;
pub mod error;
pub mod fedsim;
pub mod lora;
pub mod matrix;
pub mod rng;
pub mod telemetry;
pub mod toytask;

pub use aggregation::{ClientUpdate, DimensionWeightPlan, Strategy};
pub use config::{ExperimentConfig, SeedBundle, TrainConfig};
pub use editing::{EditConfig, EditMode, EditReport};
pub use error::{Error, Result};
pub use fedsim::{RoundRecord, RoundSink, ServerState};
pub use lora::{delta, truncate, zero_pad, AdapterStack, GlobalAdapterState, LoraPair};
pub use matrix::{cosine_similarity, frobenius_norm, Matrix};
pub use toytask::{ClientDataset, Federation, FrozenNetwork, HeadKind, MultimodalSample, TaskDims};
