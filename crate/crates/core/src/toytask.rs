//! Desk-scale synthetic task: a frozen tanh network with per-layer LoRA
//! adapters, two-modality inputs, and missing-modality injection.
//!
//! Inputs are a pair of real vectors ("image" and "text" slots). Targets
//! depend jointly on both modalities through two linear maps plus a masked
//! elementwise cross-term, so zeroing one modality genuinely destroys part of
//! the signal. Missingness is a training-data corruption: a seeded subset of
//! train samples has one modality zeroed and its presence flag cleared, while
//! every test split stays fully modal so that metrics measure what the model
//! lost, not what the test input lost.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{AdapterStack, LoraPair};
use crate::matrix::Matrix;
use crate::rng;

/// What the frozen readout produces and how loss is measured.
///
/// Regression is the default: MSE against the real target vector.
/// Classification treats the readout as logits over `target` classes with
/// softmax cross-entropy; the class of a sample is the argmax of its target
/// vector, so the same generated data serves both heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    Regression,
    Classification,
}

/// Architecture and data dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDims {
    /// Length of the first modality vector.
    pub modality_a: usize,
    /// Length of the second modality vector.
    pub modality_b: usize,
    /// Width of every hidden layer.
    pub hidden: usize,
    /// Regression target length (class count under a classification head).
    pub target: usize,
    /// Number of LoRA-bearing layers Y.
    pub layers: usize,
    /// Readout kind; regression unless configured otherwise.
    #[serde(default)]
    pub head: HeadKind,
}

impl Default for TaskDims {
    fn default() -> Self {
        Self {
            modality_a: 8,
            modality_b: 8,
            hidden: 16,
            target: 4,
            layers: 6,
            head: HeadKind::Regression,
        }
    }
}

impl TaskDims {
    pub fn input(&self) -> usize {
        self.modality_a + self.modality_b
    }

    /// (out_dim, in_dim) of layer `y`.
    pub fn layer_shape(&self, y: usize) -> (usize, usize) {
        let in_dim = if y == 0 { self.input() } else { self.hidden };
        (self.hidden, in_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modality_a == 0
            || self.modality_b == 0
            || self.hidden == 0
            || self.target == 0
            || self.layers == 0
        {
            return Err(Error::InvalidConfig(
                "task dimensions must all be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// One sample: two modality vectors, presence flags, regression target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSample {
    pub modality_a: Vec<f64>,
    pub modality_b: Vec<f64>,
    pub present_a: bool,
    pub present_b: bool,
    pub target: Vec<f64>,
}

impl MultimodalSample {
    fn input(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.modality_a.len() + self.modality_b.len());
        x.extend_from_slice(&self.modality_a);
        x.extend_from_slice(&self.modality_b);
        x
    }
}

/// A client's local data: train split (possibly corrupted), fully-modal test
/// split, and the parameters that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: Vec<MultimodalSample>,
    pub test: Vec<MultimodalSample>,
    pub missing_ratio: f64,
    pub partition_seed: u64,
}

impl ClientDataset {
    /// |D_k|: the local training-set size used for FedAvg weighting.
    pub fn data_size(&self) -> usize {
        self.train.len()
    }
}

/// All client datasets plus the held-out global test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Federation {
    pub clients: Vec<ClientDataset>,
    pub global_test: Vec<MultimodalSample>,
}

impl Federation {
    /// Serialize to pretty JSON for reproducibility audits.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Data-generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_clients: usize,
    /// Total samples across the n_clients subsets and the global test set.
    pub total_samples: usize,
    /// Smallest subset size.
    pub min_subset: usize,
    /// Train fraction of each client subset (the rest is the test split).
    pub train_fraction: f64,
    /// Fraction of each client's train samples with one modality dropped.
    pub missing_ratio: f64,
    /// Scale of the cross-modal projection relative to the per-modality maps.
    /// This sets how much of the label signal is jointly carried, i.e. how
    /// much dropping one modality actually destroys.
    pub cross_gain: f64,
    pub dims: TaskDims,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_clients: 10,
            total_samples: 1100,
            min_subset: 20,
            train_fraction: 0.8,
            missing_ratio: 0.0,
            cross_gain: 1.0,
            dims: TaskDims::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.n_clients == 0 {
            return Err(Error::InvalidConfig("n_clients must be >= 1".to_string()));
        }
        if !(0.0..=1.0).contains(&self.missing_ratio) {
            return Err(Error::InvalidRatio(self.missing_ratio));
        }
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return Err(Error::InvalidConfig(
                "train_fraction must lie strictly between 0 and 1".to_string(),
            ));
        }
        if !(self.cross_gain > 0.0 && self.cross_gain.is_finite()) {
            return Err(Error::InvalidConfig(
                "cross_gain must be positive and finite".to_string(),
            ));
        }
        let subsets = self.n_clients + 1;
        if self.total_samples < subsets * self.min_subset {
            return Err(Error::InvalidConfig(format!(
                "total_samples {} cannot cover {} subsets of at least {}",
                self.total_samples, subsets, self.min_subset
            )));
        }
        Ok(())
    }
}

/// The fixed label rule: `t = M_a·a + M_b·b + 0.5·P·(a ⊙ b ⊙ m)`.
///
/// `m` is a fixed 0/1 mask over the shared modality dimensions, so the
/// cross-term carries signal that neither modality determines alone.
struct LabelRule {
    map_a: Matrix,
    map_b: Matrix,
    cross_proj: Matrix,
    cross_mask: Vec<f64>,
}

impl LabelRule {
    fn generate(seed: u64, dims: &TaskDims, cross_gain: f64) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let cross_len = dims.modality_a.min(dims.modality_b);
        let mut r = rng::stream(seed, &[0x4c41_4245]);
        let scale_a = 1.0 / (dims.modality_a as f64).sqrt();
        let scale_b = 1.0 / (dims.modality_b as f64).sqrt();
        let scale_x = cross_gain / (cross_len as f64).sqrt();
        let map_a = Matrix::from_fn(dims.target, dims.modality_a, |_, _| {
            normal.sample(&mut r) * scale_a
        });
        let map_b = Matrix::from_fn(dims.target, dims.modality_b, |_, _| {
            normal.sample(&mut r) * scale_b
        });
        let cross_proj = Matrix::from_fn(dims.target, cross_len, |_, _| {
            normal.sample(&mut r) * scale_x
        });
        let cross_mask: Vec<f64> = (0..cross_len)
            .map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        Self {
            map_a,
            map_b,
            cross_proj,
            cross_mask,
        }
    }

    fn target(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut t = self.map_a.matvec(a);
        for (acc, v) in t.iter_mut().zip(self.map_b.matvec(b)) {
            *acc += v;
        }
        let cross: Vec<f64> = self
            .cross_mask
            .iter()
            .enumerate()
            .map(|(i, &m)| a[i] * b[i] * m)
            .collect();
        for (acc, v) in t.iter_mut().zip(self.cross_proj.matvec(&cross)) {
            *acc += 0.5 * v;
        }
        t
    }
}

/// Generate the full federation deterministically from `seed`.
///
/// Subset sizes are a seeded random partition of `total_samples` into
/// `n_clients + 1` pieces of at least `min_subset`; the last piece is the
/// global test set. Client subsets split 8:2 into train and test (per the
/// default `train_fraction`), and missingness at `spec.missing_ratio` is
/// injected into the train split only.
pub fn generate_federation(seed: u64, spec: &DatasetSpec) -> Result<Federation> {
    spec.validate()?;
    let dims = &spec.dims;
    let rule = LabelRule::generate(seed, dims, spec.cross_gain);
    let subsets = spec.n_clients + 1;

    // Random subset sizes: minimum floor plus a proportional share of the rest.
    let mut size_rng = rng::stream(seed, &[0x5349_5a45]);
    let spare = spec.total_samples - subsets * spec.min_subset;
    let props: Vec<f64> = (0..subsets).map(|_| size_rng.gen::<f64>()).collect();
    let prop_total: f64 = props.iter().sum();
    let mut sizes: Vec<usize> = props
        .iter()
        .map(|p| spec.min_subset + ((p / prop_total) * spare as f64).floor() as usize)
        .collect();
    let mut assigned: usize = sizes.iter().sum();
    let mut i = 0;
    while assigned < spec.total_samples {
        sizes[i % subsets] += 1;
        assigned += 1;
        i += 1;
    }

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut sample_rng = rng::stream(seed, &[0x5341_4d50]);
    let mut draw = |n: usize| -> Vec<MultimodalSample> {
        (0..n)
            .map(|_| {
                let a: Vec<f64> = (0..dims.modality_a)
                    .map(|_| normal.sample(&mut sample_rng))
                    .collect();
                let b: Vec<f64> = (0..dims.modality_b)
                    .map(|_| normal.sample(&mut sample_rng))
                    .collect();
                let target = rule.target(&a, &b);
                MultimodalSample {
                    modality_a: a,
                    modality_b: b,
                    present_a: true,
                    present_b: true,
                    target,
                }
            })
            .collect()
    };

    let mut clients = Vec::with_capacity(spec.n_clients);
    for (k, &size) in sizes.iter().take(spec.n_clients).enumerate() {
        let pool = draw(size);
        let train_n = ((size as f64) * spec.train_fraction).round() as usize;
        let train_n = train_n.clamp(1, size - 1);
        let train = pool[..train_n].to_vec();
        let test = pool[train_n..].to_vec();
        let clean = ClientDataset {
            client_id: k,
            train,
            test,
            missing_ratio: 0.0,
            partition_seed: seed,
        };
        let injected = if spec.missing_ratio > 0.0 {
            inject_missing(
                &clean,
                spec.missing_ratio,
                rng::derive_seed(seed, &[0x4d49_5353, k as u64]),
            )?
        } else {
            clean
        };
        clients.push(injected);
    }
    let global_test = draw(sizes[spec.n_clients]);
    Ok(Federation {
        clients,
        global_test,
    })
}

/// Corrupt `ceil(ratio · train_len)` training samples, each dropping exactly
/// one modality chosen uniformly; the test split is untouched. Targets stay as
/// computed from the clean sample, which is what makes missingness hurt.
pub fn inject_missing(dataset: &ClientDataset, ratio: f64, seed: u64) -> Result<ClientDataset> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidRatio(ratio));
    }
    let mut out = dataset.clone();
    out.missing_ratio = ratio;
    if ratio == 0.0 {
        return Ok(out);
    }
    let n = out.train.len();
    let n_corrupt = (ratio * n as f64).ceil() as usize;
    let mut r = rng::stream(seed, &[0x4452_4f50]);
    let mut indices: Vec<usize> = (0..n).collect();
    // Fisher–Yates; the first n_corrupt entries are the corrupted set.
    for i in 0..n.saturating_sub(1) {
        let j = i + r.gen_range(0..n - i);
        indices.swap(i, j);
    }
    for &idx in indices.iter().take(n_corrupt) {
        let sample = &mut out.train[idx];
        if r.gen_bool(0.5) {
            sample.modality_a.iter_mut().for_each(|v| *v = 0.0);
            sample.present_a = false;
        } else {
            sample.modality_b.iter_mut().for_each(|v| *v = 0.0);
            sample.present_b = false;
        }
    }
    Ok(out)
}

/// Frozen base network: Y tanh layers plus a linear readout. Weights are
/// fixed at construction; only LoRA adapters ever train.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenNetwork {
    dims: TaskDims,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    head: Matrix,
}

impl FrozenNetwork {
    /// Seeded Gaussian initialization, `1/sqrt(in_dim)` per-layer scale.
    pub fn generate(seed: u64, dims: &TaskDims) -> Result<Self> {
        dims.validate()?;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut r = rng::stream(seed, &[0x4e45_5457]);
        let mut weights = Vec::with_capacity(dims.layers);
        let mut biases = Vec::with_capacity(dims.layers);
        for y in 0..dims.layers {
            let (out_dim, in_dim) = dims.layer_shape(y);
            let scale = 1.0 / (in_dim as f64).sqrt();
            weights.push(Matrix::from_fn(out_dim, in_dim, |_, _| {
                normal.sample(&mut r) * scale
            }));
            biases.push((0..out_dim).map(|_| normal.sample(&mut r) * 0.1).collect());
        }
        let head_scale = 1.0 / (dims.hidden as f64).sqrt();
        let head = Matrix::from_fn(dims.target, dims.hidden, |_, _| {
            normal.sample(&mut r) * head_scale
        });
        Ok(Self {
            dims: *dims,
            weights,
            biases,
            head,
        })
    }

    pub fn dims(&self) -> &TaskDims {
        &self.dims
    }

    pub fn weight(&self, y: usize) -> &Matrix {
        &self.weights[y]
    }

    /// A zero adapter stack (`B = 0`) at the given rank for this network.
    pub fn zero_stack(&self, rank: usize) -> AdapterStack {
        let layers = (0..self.dims.layers)
            .map(|y| {
                let (out_dim, in_dim) = self.dims.layer_shape(y);
                LoraPair::zeros(rank, out_dim, in_dim)
            })
            .collect();
        AdapterStack::new(layers).expect("layers >= 1 by TaskDims::validate")
    }

    /// Fresh adapter stack: `A` seeded Gaussian scaled by
    /// `init_scale / sqrt(in_dim)`, `B = 0`, so the initial delta is exactly
    /// zero. `init_scale = 1` is the standard scheme; smaller values keep the
    /// random init from drowning out the trained signal when adapters are
    /// compared by cosine similarity at this model scale.
    pub fn init_stack(&self, rank: usize, seed: u64, init_scale: f64) -> AdapterStack {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut r = rng::stream(seed, &[0x494e_4954]);
        let layers = (0..self.dims.layers)
            .map(|y| {
                let (out_dim, in_dim) = self.dims.layer_shape(y);
                let scale = init_scale / (in_dim as f64).sqrt();
                let a = Matrix::from_fn(rank, in_dim, |_, _| normal.sample(&mut r) * scale);
                LoraPair::new(a, Matrix::zeros(out_dim, rank)).expect("valid shapes")
            })
            .collect();
        AdapterStack::new(layers).expect("layers >= 1 by TaskDims::validate")
    }

    /// A copy of this network with `deltas[y]` folded into each layer weight.
    /// This is how a merged global update becomes the clients' frozen view
    /// under strategies that do not redistribute adapter pairs.
    pub fn with_added_deltas(&self, deltas: &[Matrix]) -> Result<FrozenNetwork> {
        if deltas.len() != self.dims.layers {
            return Err(Error::ShapeMismatch {
                context: "FrozenNetwork::with_added_deltas",
                expected: format!("{} deltas", self.dims.layers),
                got: format!("{}", deltas.len()),
            });
        }
        let mut out = self.clone();
        for (w, d) in out.weights.iter_mut().zip(deltas) {
            w.add_scaled(d, 1.0);
        }
        Ok(out)
    }

    fn check_stack(&self, stack: &AdapterStack) -> Result<()> {
        let expect: Vec<(usize, usize)> = (0..self.dims.layers)
            .map(|y| self.dims.layer_shape(y))
            .collect();
        if stack.layer_shapes() != expect {
            return Err(Error::ShapeMismatch {
                context: "FrozenNetwork forward",
                expected: format!("{expect:?}"),
                got: format!("{:?}", stack.layer_shapes()),
            });
        }
        Ok(())
    }

    fn check_deltas(&self, deltas: &[Matrix]) -> Result<()> {
        let got: Vec<(usize, usize)> = deltas.iter().map(|d| (d.rows(), d.cols())).collect();
        let expect: Vec<(usize, usize)> = (0..self.dims.layers)
            .map(|y| self.dims.layer_shape(y))
            .collect();
        if got != expect {
            return Err(Error::ShapeMismatch {
                context: "FrozenNetwork delta forward",
                expected: format!("{expect:?}"),
                got: format!("{got:?}"),
            });
        }
        Ok(())
    }
}

/// Model view: adapters as factor pairs, or pre-merged per-layer deltas.
/// `Deltas` may also carry a base offset alone (e.g. a server-held merged
/// update) — the two forms evaluate identically up to rounding.
pub enum AdapterView<'a> {
    Pairs(&'a AdapterStack),
    Deltas(&'a [Matrix]),
}

struct ForwardTrace {
    /// Layer inputs h_0..h_{Y-1} (h_0 is the concatenated sample).
    inputs: Vec<Vec<f64>>,
    /// Low-rank intermediates u_y = A_y · h_{y-1} (pair view only).
    low_rank: Vec<Vec<f64>>,
    /// Layer activations h_1..h_Y.
    activations: Vec<Vec<f64>>,
    prediction: Vec<f64>,
}

fn forward_trace(
    net: &FrozenNetwork,
    view: &AdapterView,
    sample: &MultimodalSample,
) -> ForwardTrace {
    let mut h = sample.input();
    let mut inputs = Vec::with_capacity(net.dims.layers);
    let mut low_rank = Vec::with_capacity(net.dims.layers);
    let mut activations = Vec::with_capacity(net.dims.layers);
    for y in 0..net.dims.layers {
        inputs.push(h.clone());
        let mut z = net.weights[y].matvec(&h);
        match view {
            AdapterView::Pairs(stack) => {
                let pair = stack.layer(y);
                let u = pair.a().matvec(&h);
                let v = pair.b().matvec(&u);
                low_rank.push(u);
                for (zi, vi) in z.iter_mut().zip(&v) {
                    *zi += vi;
                }
            }
            AdapterView::Deltas(deltas) => {
                let v = deltas[y].matvec(&h);
                for (zi, vi) in z.iter_mut().zip(&v) {
                    *zi += vi;
                }
            }
        }
        for (zi, b) in z.iter_mut().zip(&net.biases[y]) {
            *zi += b;
        }
        h = z.iter().map(|v| v.tanh()).collect();
        activations.push(h.clone());
    }
    let prediction = net.head.matvec(&h);
    ForwardTrace {
        inputs,
        low_rank,
        activations,
        prediction,
    }
}

/// Forward pass: `h_y = tanh((W_y + B_y A_y) h_{y-1} + bias_y)`, prediction
/// is the frozen linear readout of the last activation.
pub fn forward(
    net: &FrozenNetwork,
    stack: &AdapterStack,
    sample: &MultimodalSample,
) -> Result<Vec<f64>> {
    net.check_stack(stack)?;
    Ok(forward_trace(net, &AdapterView::Pairs(stack), sample).prediction)
}

/// Forward pass with pre-merged per-layer deltas.
pub fn forward_with_deltas(
    net: &FrozenNetwork,
    deltas: &[Matrix],
    sample: &MultimodalSample,
) -> Result<Vec<f64>> {
    net.check_deltas(deltas)?;
    Ok(forward_trace(net, &AdapterView::Deltas(deltas), sample).prediction)
}

/// Class index of a sample under a classification head: the argmax of its
/// target vector (ties to the lowest index).
pub fn class_of(target: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in target.iter().enumerate() {
        if v > target[best] {
            best = i;
        }
    }
    best
}

fn mse_loss(prediction: &[f64], target: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (p, t) in prediction.iter().zip(target) {
        let e = p - t;
        acc += e * e;
    }
    acc / target.len() as f64
}

fn cross_entropy_loss(logits: &[f64], class: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[class]
}

fn sample_loss(head: HeadKind, prediction: &[f64], target: &[f64]) -> f64 {
    match head {
        HeadKind::Regression => mse_loss(prediction, target),
        HeadKind::Classification => cross_entropy_loss(prediction, class_of(target)),
    }
}

/// Mean loss over a dataset slice for either adapter view: MSE under the
/// regression head, softmax cross-entropy under classification.
pub fn evaluate(
    net: &FrozenNetwork,
    view: &AdapterView,
    samples: &[MultimodalSample],
) -> Result<f64> {
    evaluate_with_accuracy(net, view, samples).map(|(loss, _)| loss)
}

/// Mean loss plus, under a classification head, the fraction of samples
/// whose argmax logit matches the label.
pub fn evaluate_with_accuracy(
    net: &FrozenNetwork,
    view: &AdapterView,
    samples: &[MultimodalSample],
) -> Result<(f64, Option<f64>)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    match view {
        AdapterView::Pairs(stack) => net.check_stack(stack)?,
        AdapterView::Deltas(deltas) => net.check_deltas(deltas)?,
    }
    let head = net.dims.head;
    let mut acc = 0.0;
    let mut correct = 0usize;
    for s in samples {
        let trace = forward_trace(net, view, s);
        acc += sample_loss(head, &trace.prediction, &s.target);
        if head == HeadKind::Classification && class_of(&trace.prediction) == class_of(&s.target) {
            correct += 1;
        }
    }
    let loss = acc / samples.len() as f64;
    let accuracy = match head {
        HeadKind::Regression => None,
        HeadKind::Classification => Some(correct as f64 / samples.len() as f64),
    };
    Ok((loss, accuracy))
}

/// Gradients of the batch-mean MSE with respect to every layer's A and B,
/// by exact backpropagation through the tanh chain. The frozen weights,
/// biases and head receive no gradient.
fn batch_gradients(
    net: &FrozenNetwork,
    stack: &AdapterStack,
    batch: &[&MultimodalSample],
) -> (Vec<Matrix>, Vec<Matrix>, f64) {
    let n_layers = net.dims.layers;
    let mut grad_a: Vec<Matrix> = (0..n_layers)
        .map(|y| {
            let l = stack.layer(y);
            Matrix::zeros(l.rank(), l.in_dim())
        })
        .collect();
    let mut grad_b: Vec<Matrix> = (0..n_layers)
        .map(|y| {
            let l = stack.layer(y);
            Matrix::zeros(l.out_dim(), l.rank())
        })
        .collect();
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    let head = net.dims.head;
    for sample in batch {
        let trace = forward_trace(net, &AdapterView::Pairs(stack), sample);
        loss += sample_loss(head, &trace.prediction, &sample.target) * scale;

        let dpred: Vec<f64> = match head {
            // d(mean sq err)/d(pred_i) = 2 (pred_i - t_i) / target_dim.
            HeadKind::Regression => trace
                .prediction
                .iter()
                .zip(&sample.target)
                .map(|(p, t)| 2.0 * (p - t) / (sample.target.len() as f64) * scale)
                .collect(),
            // d(cross entropy)/d(logit_i) = softmax_i - onehot_i.
            HeadKind::Classification => {
                let class = class_of(&sample.target);
                let max = trace
                    .prediction
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = trace.prediction.iter().map(|l| (l - max).exp()).collect();
                let denom: f64 = exps.iter().sum();
                exps.iter()
                    .enumerate()
                    .map(|(i, e)| (e / denom - if i == class { 1.0 } else { 0.0 }) * scale)
                    .collect()
            }
        };
        let mut dh = net.head.transpose_matvec(&dpred);
        for y in (0..n_layers).rev() {
            let h_out = &trace.activations[y];
            let dz: Vec<f64> = dh
                .iter()
                .zip(h_out)
                .map(|(g, h)| g * (1.0 - h * h))
                .collect();
            let h_in = &trace.inputs[y];
            let u = &trace.low_rank[y];
            let pair = stack.layer(y);
            // dL/dB = dz · uᵀ ; dL/dA = (Bᵀ dz) · h_inᵀ
            grad_b[y].add_outer_scaled(&dz, u, 1.0);
            let du = pair.b().transpose_matvec(&dz);
            grad_a[y].add_outer_scaled(&du, h_in, 1.0);
            if y > 0 {
                // dL/dh_in = (W + BA)ᵀ dz = Wᵀ dz + Aᵀ (Bᵀ dz)
                let mut back = net.weights[y].transpose_matvec(&dz);
                for (bk, v) in back.iter_mut().zip(pair.a().transpose_matvec(&du)) {
                    *bk += v;
                }
                dh = back;
            }
        }
    }
    (grad_a, grad_b, loss)
}

/// Minibatch gradient descent on the adapter entries only.
///
/// Batches cycle through a seeded shuffle of the train split (reshuffled when
/// exhausted), so a run is a pure function of `(net, stack, dataset, steps,
/// lr, batch, seed)`. Returns the trained stack and the per-step batch loss
/// trace; a non-finite loss aborts with diagnostics.
pub fn local_train(
    net: &FrozenNetwork,
    stack: &AdapterStack,
    dataset: &ClientDataset,
    steps: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<(AdapterStack, Vec<f64>)> {
    if steps == 0 {
        return Err(Error::InvalidConfig("steps must be >= 1".to_string()));
    }
    if lr < 0.0 {
        return Err(Error::InvalidConfig(
            "learning rate must be >= 0".to_string(),
        ));
    }
    if dataset.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    net.check_stack(stack)?;
    let n = dataset.train.len();
    let batch = batch.max(1).min(n);
    let mut r = rng::stream(seed, &[0x5452_41494e]);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // force an initial shuffle

    let mut current = stack.clone();
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut pick_idx = Vec::with_capacity(batch);
        for _ in 0..batch {
            if cursor >= n {
                for i in 0..n.saturating_sub(1) {
                    let j = i + r.gen_range(0..n - i);
                    order.swap(i, j);
                }
                cursor = 0;
            }
            pick_idx.push(order[cursor]);
            cursor += 1;
        }
        // The batch is a set: a canonical accumulation order makes the step a
        // function of which samples were drawn, not the shuffle they came in.
        pick_idx.sort_unstable();
        let picks: Vec<&MultimodalSample> = pick_idx.iter().map(|&i| &dataset.train[i]).collect();
        let (grad_a, grad_b, loss) = batch_gradients(net, &current, &picks);
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        trace.push(loss);
        if lr > 0.0 {
            for y in 0..current.len() {
                let pair = current.layer_mut(y);
                pair.a_mut().add_scaled(&grad_a[y], -lr);
                pair.b_mut().add_scaled(&grad_b[y], -lr);
            }
        }
    }
    Ok((current, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dims() -> TaskDims {
        TaskDims {
            modality_a: 3,
            modality_b: 3,
            hidden: 5,
            target: 2,
            layers: 3,
            head: HeadKind::Regression,
        }
    }

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            n_clients: 3,
            total_samples: 120,
            min_subset: 20,
            train_fraction: 0.8,
            missing_ratio: 0.0,
            cross_gain: 1.0,
            dims: small_dims(),
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let f1 = generate_federation(7, &spec).unwrap();
        let f2 = generate_federation(7, &spec).unwrap();
        assert_eq!(f1, f2);
        let f3 = generate_federation(8, &spec).unwrap();
        assert_ne!(f1, f3);
    }

    #[test]
    fn generation_respects_sizes_and_split() {
        let spec = small_spec();
        let fed = generate_federation(3, &spec).unwrap();
        assert_eq!(fed.clients.len(), 3);
        let total: usize = fed
            .clients
            .iter()
            .map(|c| c.train.len() + c.test.len())
            .sum::<usize>()
            + fed.global_test.len();
        assert_eq!(total, 120);
        for c in &fed.clients {
            let n = c.train.len() + c.test.len();
            assert!(n >= 20);
            // 8:2 split up to rounding.
            let expect_train = ((n as f64) * 0.8).round() as usize;
            assert_eq!(c.train.len(), expect_train);
        }
    }

    #[test]
    fn zero_ratio_keeps_everything_present() {
        let fed = generate_federation(3, &small_spec()).unwrap();
        for c in &fed.clients {
            assert!(c.train.iter().all(|s| s.present_a && s.present_b));
            assert!(c.test.iter().all(|s| s.present_a && s.present_b));
        }
    }

    #[test]
    fn missing_counts_match_ceiling() {
        let mut spec = small_spec();
        spec.missing_ratio = 0.6;
        let fed = generate_federation(11, &spec).unwrap();
        for c in &fed.clients {
            let corrupted = c
                .train
                .iter()
                .filter(|s| !s.present_a || !s.present_b)
                .count();
            let expect = (0.6 * c.train.len() as f64).ceil() as usize;
            assert_eq!(corrupted, expect);
            // Test splits stay fully modal.
            assert!(c.test.iter().all(|s| s.present_a && s.present_b));
            // A dropped modality is actually zeroed.
            for s in &c.train {
                if !s.present_a {
                    assert!(s.modality_a.iter().all(|&v| v == 0.0));
                }
                if !s.present_b {
                    assert!(s.modality_b.iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn inject_missing_examples() {
        let fed = generate_federation(5, &small_spec()).unwrap();
        let ds = &fed.clients[0];

        let same = inject_missing(ds, 0.0, 99).unwrap();
        assert_eq!(&same.train, &ds.train);

        let all = inject_missing(ds, 1.0, 99).unwrap();
        assert!(all.train.iter().all(|s| s.present_a != s.present_b));

        assert!(matches!(
            inject_missing(ds, 1.5, 0),
            Err(Error::InvalidRatio(_))
        ));
    }

    #[test]
    fn inject_missing_matches_shuffle_oracle() {
        let fed = generate_federation(5, &small_spec()).unwrap();
        let ds = &fed.clients[1];
        let seed = 1234;
        let out = inject_missing(ds, 0.4, seed).unwrap();
        let corrupted: Vec<usize> = out
            .train
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.present_a || !s.present_b)
            .map(|(i, _)| i)
            .collect();

        // Reference oracle: replay the documented Fisher–Yates selection.
        let n = ds.train.len();
        let n_corrupt = (0.4 * n as f64).ceil() as usize;
        let mut r = rng::stream(seed, &[0x4452_4f50]);
        let mut indices: Vec<usize> = (0..n).collect();
        for i in 0..n - 1 {
            let j = i + r.gen_range(0..n - i);
            indices.swap(i, j);
        }
        let mut expect: Vec<usize> = indices[..n_corrupt].to_vec();
        expect.sort_unstable();
        assert_eq!(corrupted, expect);
    }

    #[test]
    fn forward_zero_stack_equals_frozen_network() {
        let dims = small_dims();
        let net = FrozenNetwork::generate(1, &dims).unwrap();
        let fed = generate_federation(2, &small_spec()).unwrap();
        let sample = &fed.global_test[0];
        let zero = net.zero_stack(3);
        let with_adapter = forward(&net, &zero, sample).unwrap();
        let deltas: Vec<Matrix> = (0..dims.layers)
            .map(|y| {
                let (o, i) = dims.layer_shape(y);
                Matrix::zeros(o, i)
            })
            .collect();
        let frozen_only = forward_with_deltas(&net, &deltas, sample).unwrap();
        assert_eq!(with_adapter, frozen_only);
    }

    #[test]
    fn forward_matches_hand_oracle() {
        // Single layer, 1+1 inputs, hidden 2, target 1: sized for hand work.
        let dims = TaskDims {
            modality_a: 1,
            modality_b: 1,
            hidden: 2,
            target: 1,
            layers: 1,
            head: HeadKind::Regression,
        };
        let mut net = FrozenNetwork::generate(0, &dims).unwrap();
        net.weights[0] = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        net.biases[0] = vec![0.1, -0.1];
        net.head = Matrix::from_rows(&[vec![2.0, 1.0]]).unwrap();
        let pair = LoraPair::new(
            Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap(),
            Matrix::from_rows(&[vec![1.0], vec![-1.0]]).unwrap(),
        )
        .unwrap();
        let stack = AdapterStack::new(vec![pair]).unwrap();
        let sample = MultimodalSample {
            modality_a: vec![0.3],
            modality_b: vec![-0.2],
            present_a: true,
            present_b: true,
            target: vec![0.0],
        };
        // Hand oracle: u = 0.5*0.3 + 0.5*(-0.2) = 0.05
        // z0 = 0.3 + 0.05 + 0.1 = 0.45 ; z1 = -0.2 - 0.05 - 0.1 = -0.35
        // pred = 2*tanh(0.45) + tanh(-0.35)
        let expect = 2.0 * 0.45f64.tanh() + (-0.35f64).tanh();
        let got = forward(&net, &stack, &sample).unwrap();
        assert!((got[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn forward_zero_input_is_bias_constant() {
        let dims = small_dims();
        let net = FrozenNetwork::generate(4, &dims).unwrap();
        let zero = net.zero_stack(2);
        let s1 = MultimodalSample {
            modality_a: vec![0.0; 3],
            modality_b: vec![0.0; 3],
            present_a: false,
            present_b: true,
            target: vec![0.0; 2],
        };
        let mut s2 = s1.clone();
        s2.target = vec![9.0; 2];
        // Prediction depends only on biases when the input is all-zero.
        assert_eq!(
            forward(&net, &zero, &s1).unwrap(),
            forward(&net, &zero, &s2).unwrap()
        );
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let dims = small_dims();
        let net = FrozenNetwork::generate(21, &dims).unwrap();
        let stack = net.init_stack(2, 22, 1.0);
        // Give B nonzero values so every gradient path is live.
        let mut stack = stack;
        for y in 0..stack.len() {
            let pair = stack.layer_mut(y);
            let (rows, cols) = (pair.b().rows(), pair.b().cols());
            for i in 0..rows {
                for j in 0..cols {
                    pair.b_mut()
                        .set(i, j, ((i * cols + j + y) as f64 * 0.7).sin() * 0.3);
                }
            }
        }
        let mut spec = small_spec();
        spec.total_samples = 100;
        let fed = generate_federation(23, &spec).unwrap();
        let batch: Vec<&MultimodalSample> = fed.clients[0].train.iter().take(5).collect();
        let (grad_a, grad_b, _) = batch_gradients(&net, &stack, &batch);

        let eps = 1e-5;
        let loss_of = |s: &AdapterStack| -> f64 {
            let mut acc = 0.0;
            for sample in &batch {
                let p = forward(&net, s, sample).unwrap();
                acc += sample_loss(HeadKind::Regression, &p, &sample.target);
            }
            acc / batch.len() as f64
        };
        for y in 0..stack.len() {
            for (matrix, grad) in [(true, &grad_a[y]), (false, &grad_b[y])] {
                for i in 0..grad.rows() {
                    for j in 0..grad.cols() {
                        let mut plus = stack.clone();
                        let mut minus = stack.clone();
                        {
                            let m = if matrix {
                                plus.layer_mut(y).a_mut()
                            } else {
                                plus.layer_mut(y).b_mut()
                            };
                            m.set(i, j, m.get(i, j) + eps);
                        }
                        {
                            let m = if matrix {
                                minus.layer_mut(y).a_mut()
                            } else {
                                minus.layer_mut(y).b_mut()
                            };
                            m.set(i, j, m.get(i, j) - eps);
                        }
                        let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                        let analytic = grad.get(i, j);
                        let denom = numeric.abs().max(analytic.abs()).max(1e-8);
                        assert!(
                            ((numeric - analytic) / denom).abs() < 1e-4,
                            "layer {y} {} ({i},{j}): analytic {analytic} vs numeric {numeric}",
                            if matrix { "A" } else { "B" },
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn train_with_zero_lr_is_inert() {
        let dims = small_dims();
        let net = FrozenNetwork::generate(31, &dims).unwrap();
        let stack = net.init_stack(2, 32, 1.0);
        let fed = generate_federation(33, &small_spec()).unwrap();
        let ds = &fed.clients[0];
        // Full batch so every step sees the same loss.
        let (out, trace) = local_train(&net, &stack, ds, 5, 0.0, ds.train.len(), 1).unwrap();
        assert_eq!(out, stack);
        for w in trace.windows(2) {
            assert_eq!(w[0], w[1]);
        }
    }

    #[test]
    fn train_fits_realizable_task() {
        let dims = small_dims();
        let net = FrozenNetwork::generate(41, &dims).unwrap();
        // Teacher: targets generated by the same frozen net with a known
        // adapter, so the student can in principle reach zero loss.
        let mut teacher = net.init_stack(2, 42, 1.0);
        for y in 0..teacher.len() {
            let pair = teacher.layer_mut(y);
            let (rows, cols) = (pair.b().rows(), pair.b().cols());
            for i in 0..rows {
                for j in 0..cols {
                    pair.b_mut()
                        .set(i, j, ((i + 2 * j + y) as f64 * 0.9).cos() * 0.4);
                }
            }
        }
        let mut fed = generate_federation(43, &small_spec()).unwrap();
        let ds = &mut fed.clients[0];
        for s in ds.train.iter_mut().chain(ds.test.iter_mut()) {
            s.target = forward(&net, &teacher, s).unwrap();
        }
        let student = net.init_stack(2, 44, 1.0);
        let initial = evaluate(&net, &AdapterView::Pairs(&student), &ds.train).unwrap();
        let (trained, trace) = local_train(&net, &student, ds, 200, 0.3, 16, 45).unwrap();
        let fin = evaluate(&net, &AdapterView::Pairs(&trained), &ds.train).unwrap();
        assert!(
            fin < 0.1 * initial,
            "final {fin} not below 10% of initial {initial} (trace tail {:?})",
            &trace[trace.len().saturating_sub(3)..]
        );
    }

    #[test]
    fn evaluate_is_deterministic_and_form_equivalent() {
        let dims = small_dims();
        let net = FrozenNetwork::generate(51, &dims).unwrap();
        let fed = generate_federation(52, &small_spec()).unwrap();
        let ds = &fed.clients[0];
        let (stack, _) =
            local_train(&net, &net.init_stack(3, 53, 1.0), ds, 30, 0.1, 8, 54).unwrap();

        let l1 = evaluate(&net, &AdapterView::Pairs(&stack), &ds.test).unwrap();
        let l2 = evaluate(&net, &AdapterView::Pairs(&stack), &ds.test).unwrap();
        assert_eq!(l1, l2);

        let deltas = stack.deltas();
        let l3 = evaluate(&net, &AdapterView::Deltas(&deltas), &ds.test).unwrap();
        assert!((l1 - l3).abs() < 1e-9, "pair {l1} vs delta {l3}");

        assert!(matches!(
            evaluate(&net, &AdapterView::Pairs(&stack), &[]),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn disjoint_subsets_by_construction() {
        // Samples are drawn sequentially from one stream and chunked, so two
        // clients can only share a sample if the stream repeated itself.
        let fed = generate_federation(61, &small_spec()).unwrap();
        let mut seen: Vec<&Vec<f64>> = Vec::new();
        for c in &fed.clients {
            for s in c.train.iter().chain(c.test.iter()) {
                assert!(!seen.contains(&&s.modality_a));
                seen.push(&s.modality_a);
            }
        }
    }

    #[test]
    fn federation_json_round_trip() {
        let fed = generate_federation(71, &small_spec()).unwrap();
        let json = fed.to_json().unwrap();
        let back = Federation::from_json(&json).unwrap();
        assert_eq!(fed, back);
    }

    #[test]
    fn classification_head_gradients_and_accuracy() {
        let mut dims = small_dims();
        dims.target = 3;
        dims.head = HeadKind::Classification;
        let net = FrozenNetwork::generate(81, &dims).unwrap();
        let spec = DatasetSpec {
            dims,
            total_samples: 120,
            n_clients: 3,
            ..small_spec()
        };
        let fed = generate_federation(82, &spec).unwrap();
        let ds = &fed.clients[0];
        let mut stack = net.init_stack(2, 83, 1.0);
        for y in 0..stack.len() {
            let pair = stack.layer_mut(y);
            let (rows, cols) = (pair.b().rows(), pair.b().cols());
            for i in 0..rows {
                for j in 0..cols {
                    pair.b_mut()
                        .set(i, j, ((i * cols + j + y) as f64 * 0.57).sin() * 0.3);
                }
            }
        }

        // One-step gradient vs central finite differences on the CE loss.
        let n = ds.train.len();
        let lr = 1e-2;
        let (stepped, _) = local_train(&net, &stack, ds, 1, lr, n, 1).unwrap();
        let eps = 1e-5;
        for y in 0..stack.len() {
            for i in 0..stack.layer(y).a().rows() {
                for j in 0..stack.layer(y).a().cols() {
                    let before = stack.layer(y).a().get(i, j);
                    let analytic = (before - stepped.layer(y).a().get(i, j)) / lr;
                    let mut plus = stack.clone();
                    let mut minus = stack.clone();
                    plus.layer_mut(y).a_mut().set(i, j, before + eps);
                    minus.layer_mut(y).a_mut().set(i, j, before - eps);
                    let lp = evaluate(&net, &AdapterView::Pairs(&plus), &ds.train).unwrap();
                    let lm = evaluate(&net, &AdapterView::Pairs(&minus), &ds.train).unwrap();
                    let numeric = (lp - lm) / (2.0 * eps);
                    let denom = numeric.abs().max(analytic.abs()).max(1e-8);
                    assert!(
                        ((numeric - analytic) / denom).abs() < 1e-4,
                        "CE grad mismatch at layer {y} A({i},{j}): {analytic} vs {numeric}"
                    );
                }
            }
        }

        // Accuracy is reported under classification and improves with training.
        let (loss0, acc0) =
            evaluate_with_accuracy(&net, &AdapterView::Pairs(&stack), &ds.test).unwrap();
        let acc0 = acc0.expect("classification reports accuracy");
        let (trained, _) = local_train(&net, &stack, ds, 400, 0.3, 16, 2).unwrap();
        let (loss1, acc1) =
            evaluate_with_accuracy(&net, &AdapterView::Pairs(&trained), &ds.train).unwrap();
        let acc1 = acc1.expect("classification reports accuracy");
        assert!(
            loss1 < loss0,
            "training should reduce CE loss ({loss0} -> {loss1})"
        );
        assert!(
            acc1 >= acc0,
            "training should not reduce train accuracy ({acc0} -> {acc1})"
        );
        assert!((0.0..=1.0).contains(&acc1));

        // Regression heads report no accuracy.
        let reg_net = FrozenNetwork::generate(84, &small_dims()).unwrap();
        let reg_fed = generate_federation(85, &small_spec()).unwrap();
        let reg_stack = reg_net.init_stack(2, 86, 1.0);
        let (_, acc) = evaluate_with_accuracy(
            &reg_net,
            &AdapterView::Pairs(&reg_stack),
            &reg_fed.clients[0].test,
        )
        .unwrap();
        assert!(acc.is_none());
    }

    #[test]
    fn modality_sensitivity_across_seeds() {
        // Training with both modalities beats training with 100% missingness
        // on fully-modal test data, averaged over seeds.
        let dims = small_dims();
        let mut full_total = 0.0;
        let mut missing_total = 0.0;
        for seed in 0..5u64 {
            let spec = DatasetSpec {
                n_clients: 1,
                total_samples: 260,
                ..small_spec()
            };
            let net = FrozenNetwork::generate(seed, &dims).unwrap();
            let fed = generate_federation(seed + 100, &spec).unwrap();
            let clean = &fed.clients[0];
            let corrupted = inject_missing(clean, 1.0, seed + 200).unwrap();
            let init = net.init_stack(3, seed + 300, 1.0);
            let (m_full, _) = local_train(&net, &init, clean, 250, 0.2, 16, seed + 400).unwrap();
            let (m_miss, _) =
                local_train(&net, &init, &corrupted, 250, 0.2, 16, seed + 400).unwrap();
            full_total += evaluate(&net, &AdapterView::Pairs(&m_full), &clean.test).unwrap();
            missing_total += evaluate(&net, &AdapterView::Pairs(&m_miss), &clean.test).unwrap();
        }
        assert!(
            full_total < missing_total,
            "full-modality {full_total} should beat all-missing {missing_total}"
        );
    }
}
