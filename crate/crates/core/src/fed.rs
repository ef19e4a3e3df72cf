//! Federated training over sketched weights.
//!
//! One round runs a fixed pipeline. The server draws fresh operators for the
//! round and broadcasts each hidden layer as `(H, H W)`; sampled clients run
//! a full-batch pass over their local shard against the sketched weights and
//! upload the `c x n` gradients; the server sums the uploads, applies `H^T`
//! once per layer, averages, and folds the result into an error-feedback +
//! momentum + Top-k update of the full weights. The unsketched output layer
//! takes a plain gradient step at the same learning rate.
//!
//! Rounds are strictly sequential. Client updates inside a round are pure
//! functions of the broadcast and the client's shard, so their execution
//! order cannot change results; this implementation runs them in ascending
//! client id. All randomness (operator tables, client sampling, partitions)
//! derives from the root seed through tagged child streams, so a run is
//! fully reproducible from `(config, root seed)`.
//!
//! Clients hold no state between rounds; the error and momentum accumulators
//! live on the server and survive the per-round redraw of sketch operators.

use crate::error::{Error, Result};
use crate::nn::{
    backward, backward_multi, backward_sketched, forward, forward_multi, forward_sketched,
    Example, Label, Loss, NetworkState, SketchedNetwork,
};
use crate::numerics::{argmax, Matrix};
use crate::seeding::child_seed;
use crate::sketch::{wire, SketchMode, SketchOperator};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Stream tags keeping derived seeds disjoint across purposes.
const STREAM_SKETCH: u64 = 1;
const STREAM_SAMPLE: u64 = 2;
const STREAM_PARTITION: u64 = 3;

/// How many entries the Top-k filter keeps per layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TopkBudget {
    /// Keep `ceil(fraction * len)` entries; fraction in `(0, 1]`.
    Fraction(f64),
    /// Keep exactly this many entries.
    Count(usize),
    /// Keep everything; disables sparsification.
    Full,
}

impl TopkBudget {
    pub fn validate(&self) -> Result<()> {
        match self {
            TopkBudget::Fraction(f) => {
                if !(*f > 0.0 && *f <= 1.0) {
                    return Err(Error::arg(
                        "TopkBudget",
                        format!("fraction must lie in (0, 1], got {f}"),
                    ));
                }
            }
            TopkBudget::Count(0) => {
                return Err(Error::arg("TopkBudget", "count must be positive"));
            }
            _ => {}
        }
        Ok(())
    }

    /// Concrete k for a layer of `len` entries.
    pub fn count_for(&self, len: usize) -> Result<usize> {
        if len == 0 {
            return Err(Error::EmptyInput { op: "TopkBudget::count_for" });
        }
        match self {
            TopkBudget::Fraction(f) => {
                self.validate()?;
                Ok(((f * len as f64).ceil() as usize).clamp(1, len))
            }
            TopkBudget::Count(k) => {
                if *k == 0 || *k > len {
                    return Err(Error::arg(
                        "TopkBudget",
                        format!("count {k} out of range for {len} entries"),
                    ));
                }
                Ok(*k)
            }
            TopkBudget::Full => Ok(len),
        }
    }
}

/// Whether a run trains on sketched weights or on the dense weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sketched,
    Baseline,
}

/// How client uploads combine into the round gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// Plain mean over sampled clients.
    Uniform,
    /// Mean weighted by local dataset size.
    BySize,
}

/// Hyperparameters and switches for a federated run.
#[derive(Debug, Clone)]
pub struct FedConfig {
    pub eta: f64,
    pub rho: f64,
    pub budget: TopkBudget,
    /// Sketch length as a fraction `c/d` of each layer's compressed
    /// dimension, in `(0, 1]`.
    pub sketch_ratio: f64,
    /// Sketches per layer (`k`); values above 1 switch to median recovery.
    pub sketch_count: usize,
    pub sketch_mode: SketchMode,
    pub mode: Mode,
    pub weighting: Weighting,
    /// Route `k = 1` through the multi-sketch code path instead of the
    /// single-sketch one. The two are bit-identical; this switch exists so
    /// that equivalence is testable end to end.
    pub force_multi: bool,
    /// Apply a plain SGD step to the unsketched output layer each round.
    pub train_output: bool,
    pub loss: Loss,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::arg("FedConfig", format!("learning rate {} not positive", self.eta)));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::arg("FedConfig", format!("momentum {} outside [0, 1)", self.rho)));
        }
        self.budget.validate()?;
        if !(self.sketch_ratio > 0.0 && self.sketch_ratio <= 1.0) {
            return Err(Error::arg(
                "FedConfig",
                format!("sketch ratio {} outside (0, 1]", self.sketch_ratio),
            ));
        }
        if self.sketch_count == 0 {
            return Err(Error::arg("FedConfig", "sketch count must be positive"));
        }
        if self.sketch_mode == SketchMode::Identity && self.sketch_ratio != 1.0 {
            return Err(Error::arg(
                "FedConfig",
                "identity hashing requires sketch ratio 1.0",
            ));
        }
        Ok(())
    }

    /// Sketch length for a layer compressing dimension `d`.
    pub fn sketch_len(&self, d: usize) -> usize {
        ((self.sketch_ratio * d as f64).round() as usize).clamp(1, d)
    }
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            eta: 0.001,
            rho: 0.9,
            budget: TopkBudget::Fraction(0.10),
            sketch_ratio: 0.5,
            sketch_count: 1,
            sketch_mode: SketchMode::Random,
            mode: Mode::Sketched,
            weighting: Weighting::Uniform,
            force_multi: false,
            train_output: true,
            loss: Loss::SquaredError,
        }
    }
}

/// Server-side optimizer state: per-layer error and momentum accumulators,
/// both starting at zero and shaped like the full weights.
#[derive(Debug, Clone)]
pub struct ServerOptState {
    pub eta: f64,
    pub rho: f64,
    pub budget: TopkBudget,
    pub error: Vec<Matrix>,
    pub momentum: Vec<Matrix>,
}

impl ServerOptState {
    pub fn new(net: &NetworkState, eta: f64, rho: f64, budget: TopkBudget) -> Result<Self> {
        if !(eta.is_finite() && eta > 0.0) {
            return Err(Error::arg("ServerOptState", "learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::arg("ServerOptState", "momentum must lie in [0, 1)"));
        }
        budget.validate()?;
        let error = net.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
        let momentum = net.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
        Ok(ServerOptState { eta, rho, budget, error, momentum })
    }
}

/// How a client's shard was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistributionTag {
    /// The undivided source dataset.
    Full,
    Iid,
    LabelShard,
    SinglePoint,
}

/// One client's local dataset.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub examples: Vec<Example>,
    pub distribution: DistributionTag,
}

impl ClientDataset {
    /// Builds a shard, checking it is nonempty with uniform feature shapes.
    pub fn new(examples: Vec<Example>, distribution: DistributionTag) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyInput { op: "ClientDataset" });
        }
        let shape = feature_shape(&examples[0]);
        for (i, ex) in examples.iter().enumerate() {
            if feature_shape(ex) != shape {
                return Err(Error::shape(
                    "ClientDataset",
                    format!("example {i} has a different feature shape than example 0"),
                ));
            }
        }
        Ok(ClientDataset { examples, distribution })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

fn feature_shape(ex: &Example) -> (usize, usize) {
    match &ex.x {
        crate::nn::Features::Flat(v) => (v.len(), 0),
        crate::nn::Features::Image(m) => (m.rows(), m.cols()),
    }
}

/// Partitioning strategies for splitting one dataset across clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionStrategy {
    /// Shuffle and deal round-robin.
    Iid,
    /// Sort by label, cut into `2 * clients` contiguous shards, give each
    /// client two: strongly non-iid local label distributions.
    LabelShard,
    /// One example per client; requires exactly as many examples as clients.
    SinglePoint,
}

fn label_key(y: &Label) -> f64 {
    match y {
        Label::Scalar(v) => *v,
        Label::Class(k) => *k as f64,
    }
}

/// Splits `data` into `clients` disjoint shards covering the input.
pub fn partition(
    data: &ClientDataset,
    clients: usize,
    strategy: PartitionStrategy,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if clients == 0 {
        return Err(Error::arg("partition", "at least one client required"));
    }
    let n = data.examples.len();
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, &[STREAM_PARTITION]));
    let assignments: Vec<Vec<usize>> = match strategy {
        PartitionStrategy::Iid => {
            if n < clients {
                return Err(Error::arg(
                    "partition",
                    format!("{n} examples cannot give each of {clients} clients at least one"),
                ));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut out = vec![Vec::new(); clients];
            for (i, idx) in order.into_iter().enumerate() {
                out[i % clients].push(idx);
            }
            out
        }
        PartitionStrategy::LabelShard => {
            let shards_needed = 2 * clients;
            if n < shards_needed {
                return Err(Error::arg(
                    "partition",
                    format!("{n} examples cannot fill {shards_needed} label shards"),
                ));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                label_key(&data.examples[a].y)
                    .total_cmp(&label_key(&data.examples[b].y))
                    .then(a.cmp(&b))
            });
            let base = n / shards_needed;
            let extra = n % shards_needed;
            let mut shards = Vec::with_capacity(shards_needed);
            let mut cursor = 0;
            for s in 0..shards_needed {
                let size = base + usize::from(s < extra);
                shards.push(order[cursor..cursor + size].to_vec());
                cursor += size;
            }
            shards.shuffle(&mut rng);
            (0..clients)
                .map(|i| {
                    let mut got = shards[2 * i].clone();
                    got.extend_from_slice(&shards[2 * i + 1]);
                    got
                })
                .collect()
        }
        PartitionStrategy::SinglePoint => {
            if n != clients {
                return Err(Error::arg(
                    "partition",
                    format!("single-point needs exactly one example per client, got {n} for {clients}"),
                ));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            order.into_iter().map(|idx| vec![idx]).collect()
        }
    };
    let tag = match strategy {
        PartitionStrategy::Iid => DistributionTag::Iid,
        PartitionStrategy::LabelShard => DistributionTag::LabelShard,
        PartitionStrategy::SinglePoint => DistributionTag::SinglePoint,
    };
    assignments
        .into_iter()
        .map(|ids| {
            ClientDataset::new(ids.into_iter().map(|i| data.examples[i].clone()).collect(), tag)
        })
        .collect()
}

/// Per-layer selection sets from a multi-sketch pass: for each entry, the
/// sorted sketch indices the median routed through.
pub type SelectionSets = Vec<Vec<Vec<usize>>>;

/// One client's upload for a round: per layer, one `c x n` gradient per
/// sketch, plus the dense output-layer gradient. The baseline mode reuses
/// this shape with a single full-size matrix per layer.
#[derive(Debug, Clone)]
pub struct ClientUpload {
    pub round: u64,
    pub client_id: usize,
    pub dataset_size: usize,
    pub layers: Vec<Vec<Matrix>>,
    pub output: Matrix,
    /// Summed (not averaged) loss over the client's examples.
    pub loss_sum: f64,
    /// Smallest median-selection margin seen across examples; `None` on the
    /// single-sketch and baseline paths.
    pub min_selection_margin: Option<f64>,
    /// Selection sets, recorded only for single-example clients running more
    /// than one sketch (the regime where cross-client disagreement is a
    /// meaningful monitor).
    pub selection: Option<SelectionSets>,
}

/// Full-batch mean gradient over the client's shard against the single
/// sketch per layer.
pub fn client_update(
    sknet: &SketchedNetwork,
    data: &ClientDataset,
    loss: Loss,
    round: u64,
    client_id: usize,
) -> Result<ClientUpload> {
    if data.is_empty() {
        return Err(Error::EmptyInput { op: "client_update" });
    }
    let mut layers: Option<Vec<Matrix>> = None;
    let mut output: Option<Matrix> = None;
    let mut loss_sum = 0.0;
    for ex in &data.examples {
        let (_, tape) = forward_sketched(sknet, &ex.x)?;
        loss_sum += loss.value(tape.prediction(), &ex.y)?;
        let g = backward_sketched(sknet, &tape, &ex.y, loss)?;
        accumulate(&mut layers, g.layers)?;
        accumulate_one(&mut output, g.output)?;
    }
    let scale = 1.0 / data.len() as f64;
    let mut layers = layers.expect("nonempty dataset");
    for m in &mut layers {
        m.scale(scale);
    }
    let mut output = output.expect("nonempty dataset");
    output.scale(scale);
    Ok(ClientUpload {
        round,
        client_id,
        dataset_size: data.len(),
        layers: layers.into_iter().map(|m| vec![m]).collect(),
        output,
        loss_sum,
        min_selection_margin: None,
        selection: None,
    })
}

/// Full-batch mean gradients over the client's shard against all `k`
/// sketches per layer, using median-recovery forward passes. With `k = 1`
/// this is bit-identical to [`client_update`].
pub fn multi_sketch_client_update(
    sknet: &SketchedNetwork,
    data: &ClientDataset,
    loss: Loss,
    round: u64,
    client_id: usize,
) -> Result<ClientUpload> {
    if data.is_empty() {
        return Err(Error::EmptyInput { op: "multi_sketch_client_update" });
    }
    let k = sknet.sketch_count();
    let mut layers: Option<Vec<Vec<Matrix>>> = None;
    let mut output: Option<Matrix> = None;
    let mut loss_sum = 0.0;
    let mut min_margin = f64::INFINITY;
    let mut selection = None;
    for ex in &data.examples {
        let (_, tape) = forward_multi(sknet, &ex.x)?;
        loss_sum += loss.value(tape.prediction(), &ex.y)?;
        min_margin = min_margin.min(tape.min_selection_margin());
        if k > 1 && data.len() == 1 {
            selection = Some(
                tape.picks()
                    .iter()
                    .map(|p| {
                        p.entries
                            .iter()
                            .map(|e| {
                                let mut ids: Vec<usize> =
                                    e.iter().map(|&(j, _)| j).collect();
                                ids.sort_unstable();
                                ids
                            })
                            .collect()
                    })
                    .collect(),
            );
        }
        let g = backward_multi(sknet, &tape, &ex.y, loss)?;
        accumulate_groups(&mut layers, g.layers)?;
        accumulate_one(&mut output, g.output)?;
    }
    let scale = 1.0 / data.len() as f64;
    let mut layers = layers.expect("nonempty dataset");
    for group in &mut layers {
        for m in group {
            m.scale(scale);
        }
    }
    let mut output = output.expect("nonempty dataset");
    output.scale(scale);
    Ok(ClientUpload {
        round,
        client_id,
        dataset_size: data.len(),
        layers,
        output,
        loss_sum,
        min_selection_margin: Some(min_margin),
        selection,
    })
}

fn accumulate(acc: &mut Option<Vec<Matrix>>, grads: Vec<Matrix>) -> Result<()> {
    match acc {
        None => *acc = Some(grads),
        Some(cur) => {
            for (a, g) in cur.iter_mut().zip(grads) {
                a.add_assign(&g)?;
            }
        }
    }
    Ok(())
}

fn accumulate_groups(acc: &mut Option<Vec<Vec<Matrix>>>, grads: Vec<Vec<Matrix>>) -> Result<()> {
    match acc {
        None => *acc = Some(grads),
        Some(cur) => {
            for (ag, gg) in cur.iter_mut().zip(grads) {
                for (a, g) in ag.iter_mut().zip(gg) {
                    a.add_assign(&g)?;
                }
            }
        }
    }
    Ok(())
}

fn accumulate_one(acc: &mut Option<Matrix>, g: Matrix) -> Result<()> {
    match acc {
        None => *acc = Some(g),
        Some(cur) => cur.add_assign(&g)?,
    }
    Ok(())
}

/// Dense-path client update for the uncompressed baseline.
fn dense_client_update(
    net: &NetworkState,
    data: &ClientDataset,
    loss: Loss,
    round: u64,
    client_id: usize,
) -> Result<ClientUpload> {
    if data.is_empty() {
        return Err(Error::EmptyInput { op: "client_update" });
    }
    let mut layers: Option<Vec<Matrix>> = None;
    let mut output: Option<Matrix> = None;
    let mut loss_sum = 0.0;
    for ex in &data.examples {
        let (_, tape) = forward(net, &ex.x)?;
        loss_sum += loss.value(tape.prediction(), &ex.y)?;
        let g = backward(net, &tape, &ex.y, loss)?;
        accumulate(&mut layers, g.layers)?;
        accumulate_one(&mut output, g.output)?;
    }
    let scale = 1.0 / data.len() as f64;
    let mut layers = layers.expect("nonempty dataset");
    for m in &mut layers {
        m.scale(scale);
    }
    let mut output = output.expect("nonempty dataset");
    output.scale(scale);
    Ok(ClientUpload {
        round,
        client_id,
        dataset_size: data.len(),
        layers: layers.into_iter().map(|m| vec![m]).collect(),
        output,
        loss_sum,
        min_selection_margin: None,
        selection: None,
    })
}

/// The recovered round gradient and bookkeeping from one aggregation.
#[derive(Debug, Clone)]
pub struct AggregatedRound {
    /// Per-layer full-size gradients `(1/N) sum_j H_j^T sum_i g_ij`.
    pub layers: Vec<Matrix>,
    pub output: Matrix,
    /// Per-example mean training loss over every example the sampled
    /// clients processed.
    pub mean_loss: f64,
    pub examples_seen: usize,
}

fn check_uploads(
    ops: &[Vec<SketchOperator>],
    uploads: &[ClientUpload],
    round: u64,
) -> Result<()> {
    if uploads.is_empty() {
        return Err(Error::EmptyInput { op: "aggregate" });
    }
    for up in uploads {
        if up.round != round {
            return Err(Error::arg(
                "aggregate",
                format!("upload from client {} is for round {}, not {round}", up.client_id, up.round),
            ));
        }
        if up.layers.len() != ops.len() {
            return Err(Error::shape(
                "aggregate",
                format!("upload has {} layers, operators have {}", up.layers.len(), ops.len()),
            ));
        }
        for (l, (group, layer_ops)) in up.layers.iter().zip(ops).enumerate() {
            if group.len() != layer_ops.len() {
                return Err(Error::arg(
                    "aggregate",
                    format!(
                        "layer {l}: upload carries {} sketches, server expects {}",
                        group.len(),
                        layer_ops.len()
                    ),
                ));
            }
            for (g, op) in group.iter().zip(layer_ops) {
                if g.rows() != op.sketch_len() {
                    return Err(Error::shape(
                        "aggregate",
                        format!(
                            "layer {l}: gradient has {} rows, operator sketch length is {}",
                            g.rows(),
                            op.sketch_len()
                        ),
                    ));
                }
            }
        }
    }
    Ok(())
}

fn client_weight(up: &ClientUpload, weighting: Weighting) -> f64 {
    match weighting {
        Weighting::Uniform => 1.0,
        Weighting::BySize => up.dataset_size as f64,
    }
}

/// Recovers the round gradient from multi-sketch uploads: per layer and per
/// sketch, sums the `c x n` gradients over clients first, applies `H_j^T`
/// once, sums over sketches, and finally divides by the client weight total.
pub fn multi_sketch_recover(
    ops: &[Vec<SketchOperator>],
    uploads: &[ClientUpload],
    round: u64,
    weighting: Weighting,
) -> Result<AggregatedRound> {
    check_uploads(ops, uploads, round)?;
    let denom: f64 = uploads.iter().map(|u| client_weight(u, weighting)).sum();
    let mut layers = Vec::with_capacity(ops.len());
    for (l, layer_ops) in ops.iter().enumerate() {
        let mut layer_acc: Option<Matrix> = None;
        for (j, op) in layer_ops.iter().enumerate() {
            let mut sketch_acc: Option<Matrix> = None;
            for up in uploads {
                let w = client_weight(up, weighting);
                let contrib = if w == 1.0 {
                    up.layers[l][j].clone()
                } else {
                    up.layers[l][j].scaled(w)
                };
                accumulate_one(&mut sketch_acc, contrib)?;
            }
            let recovered = op.unsketch_matrix(&sketch_acc.expect("nonempty uploads"))?;
            accumulate_one(&mut layer_acc, recovered)?;
        }
        let mut g = layer_acc.expect("at least one sketch");
        g.scale(1.0 / denom);
        layers.push(g);
    }
    let mut out_acc: Option<Matrix> = None;
    for up in uploads {
        let w = client_weight(up, weighting);
        let contrib = if w == 1.0 { up.output.clone() } else { up.output.scaled(w) };
        accumulate_one(&mut out_acc, contrib)?;
    }
    let mut output = out_acc.expect("nonempty uploads");
    output.scale(1.0 / denom);
    let examples_seen: usize = uploads.iter().map(|u| u.dataset_size).sum();
    let mean_loss = uploads.iter().map(|u| u.loss_sum).sum::<f64>() / examples_seen as f64;
    Ok(AggregatedRound { layers, output, mean_loss, examples_seen })
}

/// Single-sketch aggregation: `(1/N) H^T sum_i g_i` per layer. Thin wrapper
/// over [`multi_sketch_recover`] after checking every layer holds exactly
/// one sketch.
pub fn aggregate(
    ops: &[Vec<SketchOperator>],
    uploads: &[ClientUpload],
    round: u64,
    weighting: Weighting,
) -> Result<AggregatedRound> {
    if ops.iter().any(|g| g.len() != 1) {
        return Err(Error::arg("aggregate", "every layer must carry exactly one operator"));
    }
    multi_sketch_recover(ops, uploads, round, weighting)
}

/// Baseline aggregation: plain weighted mean of dense uploads.
fn aggregate_dense(
    uploads: &[ClientUpload],
    round: u64,
    weighting: Weighting,
) -> Result<AggregatedRound> {
    if uploads.is_empty() {
        return Err(Error::EmptyInput { op: "aggregate" });
    }
    let depth = uploads[0].layers.len();
    for up in uploads {
        if up.round != round {
            return Err(Error::arg(
                "aggregate",
                format!("upload from client {} is for round {}, not {round}", up.client_id, up.round),
            ));
        }
        if up.layers.len() != depth || up.layers.iter().any(|g| g.len() != 1) {
            return Err(Error::shape("aggregate", "baseline uploads must hold one dense matrix per layer"));
        }
    }
    let denom: f64 = uploads.iter().map(|u| client_weight(u, weighting)).sum();
    let mut layers = Vec::with_capacity(depth);
    for l in 0..depth {
        let mut acc: Option<Matrix> = None;
        for up in uploads {
            let w = client_weight(up, weighting);
            let contrib = if w == 1.0 {
                up.layers[l][0].clone()
            } else {
                up.layers[l][0].scaled(w)
            };
            accumulate_one(&mut acc, contrib)?;
        }
        let mut g = acc.expect("nonempty uploads");
        g.scale(1.0 / denom);
        layers.push(g);
    }
    let mut out_acc: Option<Matrix> = None;
    for up in uploads {
        let w = client_weight(up, weighting);
        let contrib = if w == 1.0 { up.output.clone() } else { up.output.scaled(w) };
        accumulate_one(&mut out_acc, contrib)?;
    }
    let mut output = out_acc.expect("nonempty uploads");
    output.scale(1.0 / denom);
    let examples_seen: usize = uploads.iter().map(|u| u.dataset_size).sum();
    let mean_loss = uploads.iter().map(|u| u.loss_sum).sum::<f64>() / examples_seen as f64;
    Ok(AggregatedRound { layers, output, mean_loss, examples_seen })
}

/// The `k` largest-magnitude entries of `values`, ties broken toward the
/// lowest index. Returned in ascending index order as `(index, value)`.
pub fn topk(values: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    if values.is_empty() {
        return Err(Error::EmptyInput { op: "topk" });
    }
    if k == 0 || k > values.len() {
        return Err(Error::arg("topk", format!("k={k} out of range for {} entries", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("topk"));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .expect("topk: finite values")
            .then(a.cmp(&b))
    });
    let mut selected = order[..k].to_vec();
    selected.sort_unstable();
    Ok(selected.into_iter().map(|i| (i, values[i])).collect())
}

/// A per-layer sparse update: the entries Top-k kept, against the layer's
/// flattened (row-major) indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseUpdate {
    pub rows: usize,
    pub cols: usize,
    /// `(flat index, value)`, ascending by index.
    pub entries: Vec<(usize, f64)>,
}

impl SparseUpdate {
    pub fn to_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for &(idx, v) in &self.entries {
            m.data_mut()[idx] = v;
        }
        m
    }
}

/// Diagnostics from one server step, per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    /// `||z_t||_F` of the pre-truncation update.
    pub z_norms: Vec<f64>,
    /// `max_i z_i^2 / ||z||^2`: how concentrated the update is (0 when z=0).
    pub heavy_ratios: Vec<f64>,
    /// `||Delta_t||_F` of the applied sparse update.
    pub delta_norms: Vec<f64>,
    /// `||e_t||_F` of the retained error after the step.
    pub error_norms: Vec<f64>,
}

/// One error-feedback + momentum + Top-k server step over all hidden layers:
/// `u = rho u + g`, `z = eta u + e`, `Delta = TopK(z)`, `e = z - Delta`,
/// `W -= Delta`. The split is by construction exact: `Delta + e == z` entry
/// for entry, with no arithmetic on the retained values.
pub fn ef_topk_step(
    net: &mut NetworkState,
    state: &mut ServerOptState,
    grads: &[Matrix],
) -> Result<(Vec<SparseUpdate>, StepStats)> {
    if grads.len() != net.weights.len() {
        return Err(Error::shape(
            "ef_topk_step",
            format!("{} gradients for {} layers", grads.len(), net.weights.len()),
        ));
    }
    for (l, (g, w)) in grads.iter().zip(&net.weights).enumerate() {
        if g.rows() != w.rows() || g.cols() != w.cols() {
            return Err(Error::shape(
                "ef_topk_step",
                format!("layer {l}: gradient {}x{} against weight {}x{}", g.rows(), g.cols(), w.rows(), w.cols()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::non_finite("ef_topk_step"));
        }
    }
    let depth = grads.len();
    let mut deltas = Vec::with_capacity(depth);
    let mut stats = StepStats {
        z_norms: Vec::with_capacity(depth),
        heavy_ratios: Vec::with_capacity(depth),
        delta_norms: Vec::with_capacity(depth),
        error_norms: Vec::with_capacity(depth),
    };
    for l in 0..depth {
        let u = &mut state.momentum[l];
        u.scale(state.rho);
        u.add_assign(&grads[l])?;
        let mut z = u.scaled(state.eta);
        z.add_assign(&state.error[l])?;
        let len = z.rows() * z.cols();
        let k = state.budget.count_for(len)?;
        let entries = topk(z.data(), k)?;
        let mut e = z.clone();
        for &(idx, _) in &entries {
            e.data_mut()[idx] = 0.0;
        }
        {
            let wdata = net.weights[l].data_mut();
            for &(idx, v) in &entries {
                wdata[idx] -= v;
            }
        }
        let zn = z.frobenius_norm();
        let heavy = if zn > 0.0 {
            z.data().iter().map(|v| v * v).fold(f64::NEG_INFINITY, f64::max) / (zn * zn)
        } else {
            0.0
        };
        let dn = entries.iter().map(|&(_, v)| v * v).sum::<f64>().sqrt();
        stats.z_norms.push(zn);
        stats.heavy_ratios.push(heavy);
        stats.delta_norms.push(dn);
        stats.error_norms.push(e.frobenius_norm());
        state.error[l] = e;
        deltas.push(SparseUpdate { rows: z.rows(), cols: z.cols(), entries });
    }
    Ok((deltas, stats))
}

/// Plain SGD step on the unsketched output layer.
pub fn output_step(net: &mut NetworkState, eta: f64, grad: &Matrix) -> Result<()> {
    if !grad.is_finite() {
        return Err(Error::non_finite("output_step"));
    }
    net.output.sub_assign(&grad.scaled(eta))
}

/// Cumulative communication totals. Values count transmitted numbers under
/// the protocol's accounting (per layer per client: `c*n + d` down for the
/// payload plus the operator's `d` table entries, `c*n` up); bytes count the
/// wire encoding (24-byte descriptor plus 4-byte floats). The baseline
/// counterfactual charges the dense `d*n` both ways. The output layer moves
/// uncompressed in every mode and is charged in neither column.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CommLedger {
    pub downlink_values: u64,
    pub uplink_values: u64,
    pub downlink_bytes: u64,
    pub uplink_bytes: u64,
    pub baseline_downlink_values: u64,
    pub baseline_uplink_values: u64,
    pub rounds_charged: u64,
}

impl CommLedger {
    pub fn apply(&mut self, charges: &RoundCharges) {
        self.downlink_values += charges.down_values;
        self.uplink_values += charges.up_values;
        self.downlink_bytes += charges.down_bytes;
        self.uplink_bytes += charges.up_bytes;
        self.baseline_downlink_values += charges.baseline_down_values;
        self.baseline_uplink_values += charges.baseline_up_values;
        self.rounds_charged += 1;
    }

    /// Downlink compression ratio: baseline values over charged values.
    pub fn compression_down(&self) -> f64 {
        self.baseline_downlink_values as f64 / self.downlink_values as f64
    }

    /// Uplink compression ratio.
    pub fn compression_up(&self) -> f64 {
        self.baseline_uplink_values as f64 / self.uplink_values as f64
    }
}

/// One round's communication charges, with per-layer breakdowns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundCharges {
    pub per_layer_down: Vec<u64>,
    pub per_layer_up: Vec<u64>,
    pub down_values: u64,
    pub up_values: u64,
    pub down_bytes: u64,
    pub up_bytes: u64,
    pub baseline_down_values: u64,
    pub baseline_up_values: u64,
}

/// Charges for a sketched round: per layer per client per sketch,
/// `c*n + d` values down and `c*n` values up.
pub fn sketched_round_charges(
    dims: &[(usize, usize)],
    sketch_lens: &[usize],
    sketch_count: usize,
    n_clients: usize,
) -> Result<RoundCharges> {
    if dims.len() != sketch_lens.len() {
        return Err(Error::shape(
            "sketched_round_charges",
            format!("{} layers but {} sketch lengths", dims.len(), sketch_lens.len()),
        ));
    }
    if sketch_count == 0 || n_clients == 0 {
        return Err(Error::arg("sketched_round_charges", "counts must be positive"));
    }
    let mult = (sketch_count * n_clients) as u64;
    let mut per_layer_down = Vec::with_capacity(dims.len());
    let mut per_layer_up = Vec::with_capacity(dims.len());
    let mut down_bytes = 0u64;
    let mut up_bytes = 0u64;
    let mut baseline = 0u64;
    for (&(d, n), &c) in dims.iter().zip(sketch_lens) {
        per_layer_down.push(mult * (c * n + d) as u64);
        per_layer_up.push(mult * (c * n) as u64);
        let wire = mult * wire::sketched_weight_bytes(c, n) as u64;
        down_bytes += wire;
        up_bytes += wire;
        baseline += (n_clients * d * n) as u64;
    }
    Ok(RoundCharges {
        down_values: per_layer_down.iter().sum(),
        up_values: per_layer_up.iter().sum(),
        per_layer_down,
        per_layer_up,
        down_bytes,
        up_bytes,
        baseline_down_values: baseline,
        baseline_up_values: baseline,
    })
}

/// Charges for an uncompressed round: the dense `d*n` values per layer per
/// client, both directions.
pub fn baseline_round_charges(dims: &[(usize, usize)], n_clients: usize) -> RoundCharges {
    let mut per_layer = Vec::with_capacity(dims.len());
    let mut bytes = 0u64;
    for &(d, n) in dims {
        per_layer.push((n_clients * d * n) as u64);
        bytes += (n_clients * (wire::HEADER_BYTES + 4 * d * n)) as u64;
    }
    let total: u64 = per_layer.iter().sum();
    RoundCharges {
        per_layer_down: per_layer.clone(),
        per_layer_up: per_layer,
        down_values: total,
        up_values: total,
        down_bytes: bytes,
        up_bytes: bytes,
        baseline_down_values: total,
        baseline_up_values: total,
    }
}

/// Running empirical estimates for the update-concentration and regularity
/// assumptions the convergence analysis rests on.
#[derive(Debug, Clone, Serialize)]
pub struct AssumptionMonitors {
    /// Running max of the aggregated squared gradient norm (hidden layers).
    pub max_grad_sq: f64,
    /// Running max over rounds and layers of `||W||_F`.
    pub max_weight_norm: f64,
    /// Most recent round's min-over-layers update concentration
    /// `max_i z_i^2 / ||z||^2`.
    pub last_update_heavy_ratio: f64,
    /// Running min over rounds of that concentration: the worst observed
    /// heavy-hitter presence in the server update.
    pub min_update_heavy_ratio: f64,
    /// Running max over rounds and layers of `||W||_F^2 / max_j W_j^2`: how
    /// many coordinates the weight mass is spread over.
    pub max_weight_spread: f64,
    /// Running max of `||g_t - g_{t-1}||_F / ||W_t - W_{t-1}||_F`, a crude
    /// smoothness constant estimate.
    pub max_smoothness: f64,
    /// Most recent cross-client selection disagreement rate (multi-sketch,
    /// single-example clients only).
    pub last_selection_disagreement: Option<f64>,
    #[serde(skip)]
    prev: Option<(Vec<Matrix>, Vec<Matrix>)>,
}

impl Default for AssumptionMonitors {
    fn default() -> Self {
        AssumptionMonitors {
            max_grad_sq: 0.0,
            max_weight_norm: 0.0,
            last_update_heavy_ratio: 0.0,
            min_update_heavy_ratio: f64::INFINITY,
            max_weight_spread: 0.0,
            max_smoothness: 0.0,
            last_selection_disagreement: None,
            prev: None,
        }
    }
}

impl AssumptionMonitors {
    /// Called with the pre-step weights and the round's recovered gradients.
    fn observe_gradients(&mut self, net: &NetworkState, grads: &[Matrix]) {
        let grad_sq: f64 = grads.iter().map(|g| g.frobenius_norm().powi(2)).sum();
        self.max_grad_sq = self.max_grad_sq.max(grad_sq);
        for w in &net.weights {
            let norm = w.frobenius_norm();
            self.max_weight_norm = self.max_weight_norm.max(norm);
            let top = w.max_abs();
            if top > 0.0 {
                self.max_weight_spread = self.max_weight_spread.max(norm * norm / (top * top));
            }
        }
        if let Some((prev_w, prev_g)) = &self.prev {
            let mut dw_sq = 0.0;
            for (a, b) in net.weights.iter().zip(prev_w) {
                let mut d = a.clone();
                if d.sub_assign(b).is_ok() {
                    dw_sq += d.frobenius_norm().powi(2);
                }
            }
            let mut dg_sq = 0.0;
            for (a, b) in grads.iter().zip(prev_g) {
                let mut d = a.clone();
                if d.sub_assign(b).is_ok() {
                    dg_sq += d.frobenius_norm().powi(2);
                }
            }
            if dw_sq > 0.0 {
                self.max_smoothness = self.max_smoothness.max((dg_sq / dw_sq).sqrt());
            }
        }
        self.prev = Some((net.weights.clone(), grads.to_vec()));
    }

    fn observe_step(&mut self, stats: &StepStats, disagreement: Option<f64>) {
        let round_ratio =
            stats.heavy_ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        if round_ratio.is_finite() {
            self.last_update_heavy_ratio = round_ratio;
            self.min_update_heavy_ratio = self.min_update_heavy_ratio.min(round_ratio);
        }
        if disagreement.is_some() {
            self.last_selection_disagreement = disagreement;
        }
    }
}

/// The coordinating server: full weights, optimizer state, ledger, monitors.
#[derive(Debug, Clone)]
pub struct Server {
    pub net: NetworkState,
    pub opt: ServerOptState,
    pub config: FedConfig,
    pub round: u64,
    pub root_seed: u64,
    pub ledger: CommLedger,
    pub monitors: AssumptionMonitors,
    /// Running minimum over rounds of the summed squared gradient norm.
    pub min_grad_sq: f64,
}

impl Server {
    pub fn new(net: NetworkState, config: FedConfig, root_seed: u64) -> Result<Self> {
        config.validate()?;
        let opt = ServerOptState::new(&net, config.eta, config.rho, config.budget)?;
        Ok(Server {
            net,
            opt,
            config,
            round: 0,
            root_seed,
            ledger: CommLedger::default(),
            monitors: AssumptionMonitors::default(),
            min_grad_sq: f64::INFINITY,
        })
    }

    /// Draws this round's operators (fresh per round from the seed tree) and
    /// sketches the current weights under them.
    pub fn broadcast(&self) -> Result<(SketchedNetwork, Vec<Vec<SketchOperator>>)> {
        if !self.net.weights.iter().all(|w| w.is_finite()) || !self.net.output.is_finite() {
            return Err(Error::non_finite("broadcast"));
        }
        let dims = self.net.spec.sketched_layer_dims();
        let mut ops = Vec::with_capacity(dims.len());
        for (l, &(d, _)) in dims.iter().enumerate() {
            let c = self.config.sketch_len(d);
            let group = (0..self.config.sketch_count)
                .map(|j| match self.config.sketch_mode {
                    SketchMode::Identity => Ok(SketchOperator::identity(d)),
                    SketchMode::Random => SketchOperator::new(
                        d,
                        c,
                        child_seed(self.root_seed, &[STREAM_SKETCH, self.round, l as u64, j as u64]),
                    ),
                })
                .collect::<Result<Vec<_>>>()?;
            ops.push(group);
        }
        let sknet = SketchedNetwork::sketch(&self.net, ops.clone())?;
        Ok((sknet, ops))
    }
}

/// What one round did: sampled clients, loss, gradient norms, update
/// concentration, cumulative traffic. Every recorded float is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: u64,
    pub sampled_clients: Vec<usize>,
    pub mean_loss: f64,
    /// `||g||_F` of each recovered layer gradient.
    pub grad_norms: Vec<f64>,
    pub output_grad_norm: f64,
    /// Summed squared layer-gradient norm this round.
    pub grad_sq: f64,
    /// Running minimum of `grad_sq` so far, including this round.
    pub min_grad_sq: f64,
    /// Per-layer `max_i z_i^2/||z||^2` of the server update.
    pub heavy_ratios: Vec<f64>,
    /// The least concentrated layer's ratio (the binding one).
    pub hh_ratio: f64,
    pub down_values: u64,
    pub up_values: u64,
    pub down_bytes: u64,
    pub up_bytes: u64,
    /// Smallest median-selection margin across clients, when finite.
    pub selection_margin: Option<f64>,
    /// Cross-client selection disagreement rate, when measured.
    pub selection_disagreement: Option<f64>,
}

impl RoundReport {
    fn check_finite(&self) -> Result<()> {
        let mut vals = vec![self.mean_loss, self.output_grad_norm, self.grad_sq, self.min_grad_sq, self.hh_ratio];
        vals.extend_from_slice(&self.grad_norms);
        vals.extend_from_slice(&self.heavy_ratios);
        if let Some(m) = self.selection_margin {
            vals.push(m);
        }
        if let Some(d) = self.selection_disagreement {
            vals.push(d);
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("RoundReport"));
        }
        Ok(())
    }
}

fn selection_disagreement(uploads: &[ClientUpload]) -> Option<f64> {
    let sels: Vec<&SelectionSets> = uploads.iter().filter_map(|u| u.selection.as_ref()).collect();
    if sels.len() != uploads.len() || sels.len() < 2 {
        return None;
    }
    let mut total = 0u64;
    let mut differing = 0u64;
    for l in 0..sels[0].len() {
        for e in 0..sels[0][l].len() {
            total += 1;
            let first = &sels[0][l][e];
            if sels.iter().any(|s| &s[l][e] != first) {
                differing += 1;
            }
        }
    }
    if total == 0 {
        return None;
    }
    Some(differing as f64 / total as f64)
}

/// Runs one full round: sample, broadcast, client updates, aggregate, server
/// step. Deterministic given the server state and its root seed.
pub fn run_round(
    server: &mut Server,
    clients: &[ClientDataset],
    sample_size: usize,
) -> Result<RoundReport> {
    if clients.is_empty() {
        return Err(Error::EmptyInput { op: "run_round" });
    }
    if sample_size == 0 || sample_size > clients.len() {
        return Err(Error::arg(
            "run_round",
            format!("sample size {sample_size} out of range for {} clients", clients.len()),
        ));
    }
    let t = server.round;
    let mut rng =
        ChaCha8Rng::seed_from_u64(child_seed(server.root_seed, &[STREAM_SAMPLE, t]));
    let mut sampled = rand::seq::index::sample(&mut rng, clients.len(), sample_size).into_vec();
    sampled.sort_unstable();

    let loss = server.config.loss;
    let weighting = server.config.weighting;
    let dims = server.net.spec.sketched_layer_dims();
    let (agg, margin, disagreement, charges) = match server.config.mode {
        Mode::Baseline => {
            let mut uploads = Vec::with_capacity(sample_size);
            for &id in &sampled {
                uploads.push(dense_client_update(&server.net, &clients[id], loss, t, id)?);
            }
            let agg = aggregate_dense(&uploads, t, weighting)?;
            (agg, None, None, baseline_round_charges(&dims, sample_size))
        }
        Mode::Sketched => {
            let (sknet, ops) = server.broadcast()?;
            let multi = server.config.sketch_count > 1 || server.config.force_multi;
            let mut uploads = Vec::with_capacity(sample_size);
            for &id in &sampled {
                let up = if multi {
                    multi_sketch_client_update(&sknet, &clients[id], loss, t, id)?
                } else {
                    client_update(&sknet, &clients[id], loss, t, id)?
                };
                uploads.push(up);
            }
            let agg = multi_sketch_recover(&ops, &uploads, t, weighting)?;
            let margin = uploads
                .iter()
                .filter_map(|u| u.min_selection_margin)
                .fold(f64::INFINITY, f64::min);
            let margin = margin.is_finite().then_some(margin);
            let disagreement = selection_disagreement(&uploads);
            let sketch_lens: Vec<usize> = ops.iter().map(|g| g[0].sketch_len()).collect();
            let charges = sketched_round_charges(
                &dims,
                &sketch_lens,
                server.config.sketch_count,
                sample_size,
            )?;
            (agg, margin, disagreement, charges)
        }
    };
    server.ledger.apply(&charges);
    server.monitors.observe_gradients(&server.net, &agg.layers);
    let (_deltas, stats) = ef_topk_step(&mut server.net, &mut server.opt, &agg.layers)?;
    if server.config.train_output {
        output_step(&mut server.net, server.opt.eta, &agg.output)?;
    }
    server.monitors.observe_step(&stats, disagreement);

    let grad_norms: Vec<f64> = agg.layers.iter().map(|g| g.frobenius_norm()).collect();
    let grad_sq: f64 = grad_norms.iter().map(|x| x * x).sum();
    server.min_grad_sq = server.min_grad_sq.min(grad_sq);
    let hh_ratio = stats.heavy_ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let report = RoundReport {
        round: t,
        sampled_clients: sampled,
        mean_loss: agg.mean_loss,
        grad_norms,
        output_grad_norm: agg.output.frobenius_norm(),
        grad_sq,
        min_grad_sq: server.min_grad_sq,
        heavy_ratios: stats.heavy_ratios.clone(),
        hh_ratio,
        down_values: server.ledger.downlink_values,
        up_values: server.ledger.uplink_values,
        down_bytes: server.ledger.downlink_bytes,
        up_bytes: server.ledger.uplink_bytes,
        selection_margin: margin,
        selection_disagreement: disagreement,
    };
    report.check_finite()?;
    server.round = t + 1;
    Ok(report)
}

/// Mean loss and (for classification labels) accuracy of the dense weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalStats {
    pub mean_loss: f64,
    /// Fraction of examples whose argmax logit hits the class label; `None`
    /// when any label is a regression target.
    pub accuracy: Option<f64>,
}

pub fn evaluate(net: &NetworkState, examples: &[Example], loss: Loss) -> Result<EvalStats> {
    if examples.is_empty() {
        return Err(Error::EmptyInput { op: "evaluate" });
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut all_class = true;
    for ex in examples {
        let (pred, _) = forward(net, &ex.x)?;
        loss_sum += loss.value(&pred, &ex.y)?;
        match ex.y {
            Label::Class(k) => {
                if argmax(pred.data()) == Some(k) {
                    correct += 1;
                }
            }
            Label::Scalar(_) => all_class = false,
        }
    }
    Ok(EvalStats {
        mean_loss: loss_sum / examples.len() as f64,
        accuracy: all_class.then_some(correct as f64 / examples.len() as f64),
    })
}
