//! Client-side layer-wise adapter editing.
//!
//! After local training, each client scores every layer by the cosine
//! similarity between its local A matrix and the previous round's global A
//! (truncated to the client's rank), picks the `k` least similar layers, and
//! blends each selected layer toward the global with coefficient equal to the
//! layer's own similarity: `A ← γ·A_local + (1−γ)·A_global`. A dissimilar
//! layer is therefore pulled strongly toward the global, an aligned layer is
//! barely touched.
//!
//! Cosine can be negative; the blend coefficient is clamped to [0, 1] before
//! use, so a strongly dissimilar layer degenerates to full replacement. The
//! similarity of an all-zero A is defined as 1.0, which keeps degenerate
//! layers out of the selection entirely.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{truncate, AdapterStack, GlobalAdapterState};
use crate::matrix::cosine_similarity;

/// Which matrices of a selected layer get blended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    AOnly,
    BOnly,
    Both,
    None,
}

impl EditMode {
    pub const ALL: [EditMode; 4] = [
        EditMode::AOnly,
        EditMode::BOnly,
        EditMode::Both,
        EditMode::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EditMode::AOnly => "a_only",
            EditMode::BOnly => "b_only",
            EditMode::Both => "both",
            EditMode::None => "none",
        }
    }

    pub fn edits_a(self) -> bool {
        matches!(self, EditMode::AOnly | EditMode::Both)
    }

    pub fn edits_b(self) -> bool {
        matches!(self, EditMode::BOnly | EditMode::Both)
    }
}

impl std::str::FromStr for EditMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a_only" => Ok(EditMode::AOnly),
            "b_only" => Ok(EditMode::BOnly),
            "both" => Ok(EditMode::Both),
            "none" => Ok(EditMode::None),
            other => Err(Error::InvalidConfig(format!(
                "unknown edit mode {other:?}; expected a_only, b_only, both or none"
            ))),
        }
    }
}

impl std::fmt::Display for EditMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Editing configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    /// Which matrices to blend. Default: A only.
    #[serde(default = "default_mode")]
    pub mode: EditMode,
    /// How many least-similar layers to edit. Default: 1.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Fixed blend coefficient replacing the per-layer similarity.
    /// 0.0 replaces the layer outright, 0.5 blends halfway.
    #[serde(default)]
    pub gamma_override: Option<f64>,
}

fn default_mode() -> EditMode {
    EditMode::AOnly
}

fn default_k() -> usize {
    1
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            mode: EditMode::AOnly,
            k: 1,
            gamma_override: None,
        }
    }
}

/// What an edit pass saw and did for one client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub client_id: usize,
    pub round: usize,
    /// Per-layer cosine similarities γ_1..γ_Y.
    pub similarities: Vec<f64>,
    /// Index of the minimum similarity (ties go to the lowest index).
    pub min_layer: usize,
    /// Layers actually blended, ascending by similarity. Empty for mode none.
    pub selected_layers: Vec<usize>,
    /// Clamped blend coefficient applied at `min_layer`; absent for mode none.
    pub applied_gamma: Option<f64>,
    pub mode: EditMode,
}

/// Per-layer cosine similarity between the local A matrices and the previous
/// global's A matrices truncated to `client_rank`. A layer where either side
/// is all-zero scores 1.0 and is thereby excluded from selection.
pub fn layer_similarities(
    local: &AdapterStack,
    global_prev: &GlobalAdapterState,
    client_rank: usize,
) -> Result<Vec<f64>> {
    if local.len() != global_prev.stack.len() {
        return Err(Error::ShapeMismatch {
            context: "layer_similarities",
            expected: format!("{} layers", global_prev.stack.len()),
            got: format!("{}", local.len()),
        });
    }
    if local.rank() != client_rank {
        return Err(Error::InvalidRank {
            rank: local.rank(),
            reason: "local stack rank does not match client rank",
        });
    }
    let mut out = Vec::with_capacity(local.len());
    for y in 0..local.len() {
        let g = truncate(global_prev.stack.layer(y), client_rank)?;
        let sim = match cosine_similarity(local.layer(y).a(), g.a()) {
            Ok(v) => v,
            Err(Error::ZeroMatrix) => 1.0,
            Err(e) => return Err(e),
        };
        out.push(sim);
    }
    Ok(out)
}

/// Indices of the `k` smallest similarities, ascending by similarity, ties
/// broken by lowest layer index.
pub fn select_layers(similarities: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..similarities.len()).collect();
    order.sort_by(|&i, &j| {
        similarities[i]
            .partial_cmp(&similarities[j])
            .expect("similarities are finite")
            .then(i.cmp(&j))
    });
    order.truncate(k);
    order
}

/// Blend one layer of `local` toward the previous global:
/// `A ← γ·A_local + (1−γ)·A_global` when the mode covers A, analogously for
/// B. Other layers are returned untouched, bit for bit.
pub fn apply_edit(
    local: &AdapterStack,
    global_prev: &GlobalAdapterState,
    layer: usize,
    gamma: f64,
    mode: EditMode,
) -> Result<AdapterStack> {
    if layer >= local.len() {
        return Err(Error::LayerOutOfRange {
            index: layer,
            len: local.len(),
        });
    }
    let mut edited = local.clone();
    // γ = 1 is the identity and γ = 0 a verbatim replacement; handling them
    // as exact copies keeps those endpoints free of rounding.
    if mode == EditMode::None || gamma == 1.0 {
        return Ok(edited);
    }
    let g = truncate(global_prev.stack.layer(layer), local.rank())?;
    let target = edited.layer_mut(layer);
    if mode.edits_a() {
        let a = target.a_mut();
        if gamma == 0.0 {
            a.data_mut().copy_from_slice(g.a().data());
        } else {
            a.scale(gamma);
            a.add_scaled(g.a(), 1.0 - gamma);
        }
    }
    if mode.edits_b() {
        let b = target.b_mut();
        if gamma == 0.0 {
            b.data_mut().copy_from_slice(g.b().data());
        } else {
            b.scale(gamma);
            b.add_scaled(g.b(), 1.0 - gamma);
        }
    }
    Ok(edited)
}

/// Full edit pass: score layers, select the `k` least similar, blend each
/// selected layer with its own clamped similarity (or the configured
/// override). Requires `round >= 1`; there is no previous global to compare
/// against before the first aggregation.
pub fn edit_client(
    local: &AdapterStack,
    global_prev: &GlobalAdapterState,
    client_id: usize,
    round: usize,
    config: &EditConfig,
) -> Result<(AdapterStack, EditReport)> {
    if round == 0 {
        return Err(Error::InvalidConfig(
            "editing requires round >= 1".to_string(),
        ));
    }
    if config.k > local.len() {
        return Err(Error::InvalidConfig(format!(
            "edit_k {} exceeds layer count {}",
            config.k,
            local.len()
        )));
    }
    if let Some(g) = config.gamma_override {
        if !(0.0..=1.0).contains(&g) {
            return Err(Error::InvalidConfig(format!(
                "gamma_override {g} outside [0, 1]"
            )));
        }
    }
    let similarities = layer_similarities(local, global_prev, local.rank())?;
    let min_layer = select_layers(&similarities, 1)[0];

    if config.mode == EditMode::None {
        let report = EditReport {
            client_id,
            round,
            similarities,
            min_layer,
            selected_layers: Vec::new(),
            applied_gamma: None,
            mode: EditMode::None,
        };
        return Ok((local.clone(), report));
    }

    let selected = select_layers(&similarities, config.k);
    let mut edited = local.clone();
    let mut gamma_at_min = None;
    for &layer in &selected {
        let gamma = config
            .gamma_override
            .unwrap_or_else(|| similarities[layer].clamp(0.0, 1.0));
        if layer == min_layer {
            gamma_at_min = Some(gamma);
        }
        edited = apply_edit(&edited, global_prev, layer, gamma, config.mode)?;
    }
    let report = EditReport {
        client_id,
        round,
        similarities,
        min_layer,
        selected_layers: selected,
        applied_gamma: gamma_at_min,
        mode: config.mode,
    };
    Ok((edited, report))
}
