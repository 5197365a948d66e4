//! Relation-aware GraphSAGE over the multiplex intent graph, trained once
//! per target intent.
//!
//! Conv layer `t` maps states `H` to
//! `act([H | Σ_r M_r·W_r]·W + b)`, where `M_r` holds each node's mean state
//! over its incoming `r`-neighbors (zero without neighbors) and `W` stacks
//! `W_self` over `W_nb`. ReLU follows every conv layer except the last.
//! A linear head maps the target layer's final states to two logits.

use std::borrow::Cow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{MultiplexGraph, Relation};
use crate::matchers::{f1_on, Prediction, TrainTrace};
use crate::model::{IntentLabelMatrix, Split};
use crate::nn::loss::softmax_ce_rows;
use crate::nn::ops::{argmax, relu_backward, softmax};
use crate::nn::{adam_step, Checkpoint, DenseMatrix, Parameter, TrainHyper};

/// Allowed first-layer widths.
pub const H1_GRID: [usize; 9] = [100, 150, 200, 250, 300, 350, 400, 450, 500];

/// Widths of the conv layers: `h1` throughout for up to two layers; with
/// three, the second and third use `h1 / 2`.
pub fn layer_dims(h1: usize, layers: usize) -> Vec<usize> {
    (0..layers).map(|t| if layers >= 3 && t >= 1 { h1 / 2 } else { h1 }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `W_intra`, `W_inter`, each `d_in x d_in`.
    pub w_rel: [Parameter; 2],
    pub w_self: Parameter,
    pub w_nb: Parameter,
    pub b: Parameter,
}

impl ConvLayer {
    fn new(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w_intra = Parameter::xavier(d_in, d_in, rng);
        let w_inter = Parameter::xavier(d_in, d_in, rng);
        // One draw for the stacked update matrix, split into its halves.
        let w = Parameter::xavier(2 * d_in, d_out, rng).value;
        let top: Vec<usize> = (0..d_in).collect();
        let bottom: Vec<usize> = (d_in..2 * d_in).collect();
        ConvLayer {
            w_rel: [w_intra, w_inter],
            w_self: Parameter::new(w.select_rows(&top)),
            w_nb: Parameter::new(w.select_rows(&bottom)),
            b: Parameter::zeros(1, d_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w_self.value.rows
    }

    pub fn out_dim(&self) -> usize {
        self.w_self.value.cols
    }

    fn params(&mut self) -> Vec<&mut Parameter> {
        let [a, b] = &mut self.w_rel;
        vec![a, b, &mut self.w_self, &mut self.w_nb, &mut self.b]
    }
}

fn rel_index(rel: Relation) -> usize {
    match rel {
        Relation::Intra => 0,
        Relation::Inter => 1,
    }
}

fn add_into(acc: &mut [f64], x: &[f64], scale: f64) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += v * scale;
    }
}

/// Conv input rows `[h_v | mean intra | mean inter]`, one per node of
/// `rows` (every node when `None`). A relation without neighbors
/// contributes zeros.
pub fn stack_inputs(g: &MultiplexGraph, h: &DenseMatrix, rows: Option<&[usize]>) -> DenseMatrix {
    let d = h.cols;
    let p = g.num_intents();
    let n_out = rows.map_or(h.rows, <[usize]>::len);
    let mut x = DenseMatrix::zeros(n_out, 3 * d);
    for k in 0..n_out {
        let v = rows.map_or(k, |r| r[k]);
        let (own, rest) = x.row_mut(k).split_at_mut(d);
        let (intra, inter) = rest.split_at_mut(d);
        own.copy_from_slice(h.row(v));
        let src = g.intra_sources(v);
        if !src.is_empty() {
            let inv = 1.0 / src.len() as f64;
            for &u in src {
                add_into(intra, h.row(u), inv);
            }
        }
        if p > 1 {
            let inv = 1.0 / (p - 1) as f64;
            let (pair, _) = g.locate(v);
            for q in 0..p {
                let u = g.node(pair, q);
                if u != v {
                    add_into(inter, h.row(u), inv);
                }
            }
        }
    }
    x
}

/// Gradient of [`stack_inputs`] with respect to `h` (`n_in` rows).
fn stack_inputs_backward(g: &MultiplexGraph, dx: &DenseMatrix, rows: Option<&[usize]>, n_in: usize) -> DenseMatrix {
    let d = dx.cols / 3;
    let p = g.num_intents();
    let mut dh = DenseMatrix::zeros(n_in, d);
    for k in 0..dx.rows {
        let v = rows.map_or(k, |r| r[k]);
        let row = dx.row(k);
        add_into(dh.row_mut(v), &row[..d], 1.0);
        let src = g.intra_sources(v);
        if !src.is_empty() {
            let inv = 1.0 / src.len() as f64;
            for &u in src {
                add_into(dh.row_mut(u), &row[d..2 * d], inv);
            }
        }
        if p > 1 {
            let inv = 1.0 / (p - 1) as f64;
            let (pair, _) = g.locate(v);
            for q in 0..p {
                let u = g.node(pair, q);
                if u != v {
                    add_into(dh.row_mut(u), &row[2 * d..], inv);
                }
            }
        }
    }
    dh
}

/// `Σ_r m_r·W_r` for one node, computed directly from its neighbor lists.
pub fn aggregate_neighborhood(g: &MultiplexGraph, states: &DenseMatrix, node: usize, layer: &ConvLayer) -> Vec<f64> {
    let d = states.cols;
    let mut out = vec![0.0; layer.w_rel[0].value.cols];
    for rel in Relation::ALL {
        let nbrs = g.neighbor_sets(node, rel);
        if nbrs.is_empty() {
            continue;
        }
        let mut mean = vec![0.0; d];
        for &u in &nbrs {
            for (m, x) in mean.iter_mut().zip(states.row(u)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nbrs.len() as f64);
        let w = &layer.w_rel[rel_index(rel)].value;
        for (j, o) in out.iter_mut().enumerate() {
            *o += (0..d).map(|i| mean[i] * w.get(i, j)).sum::<f64>();
        }
    }
    out
}

struct LayerCache<'a> {
    /// Output rows computed by this layer; `None` means every node.
    rows: Option<Vec<usize>>,
    /// Stacked input from [`stack_inputs`].
    x: Cow<'a, DenseMatrix>,
    /// `[W_self; W_intra·W_nb; W_inter·W_nb]`
    w_cat: DenseMatrix,
    pre: DenseMatrix,
}

struct Forward<'a> {
    layers: Vec<LayerCache<'a>>,
    output: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlexerConfig {
    pub target_intent: usize,
    pub h1: usize,
    pub layers: usize,
    pub hyper: TrainHyper,
}

impl Default for FlexerConfig {
    fn default() -> Self {
        FlexerConfig { target_intent: 0, h1: 300, layers: 2, hyper: TrainHyper::default() }
    }
}

impl FlexerConfig {
    pub fn validate(&self, num_intents: usize) -> Result<()> {
        self.hyper.validate()?;
        if !H1_GRID.contains(&self.h1) {
            return Err(Error::Config(format!("h1 must be one of {H1_GRID:?}, got {}", self.h1)));
        }
        if !(1..=3).contains(&self.layers) {
            return Err(Error::Config(format!("layers must be 1, 2 or 3, got {}", self.layers)));
        }
        if self.target_intent >= num_intents {
            return Err(Error::Config(format!("target intent {} out of range for {num_intents} intents", self.target_intent)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlexerModel {
    pub convs: Vec<ConvLayer>,
    pub head_w: Parameter,
    pub head_b: Parameter,
}

impl FlexerModel {
    pub fn new(in_dim: usize, dims: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(dims.len());
        let mut d_in = in_dim;
        for &d_out in dims {
            convs.push(ConvLayer::new(d_in, d_out, &mut rng));
            d_in = d_out;
        }
        FlexerModel { convs, head_w: Parameter::xavier(d_in, 2, &mut rng), head_b: Parameter::zeros(1, 2) }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = self.convs.iter_mut().flat_map(|c| c.params()).collect();
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    fn stacked_weights(c: &ConvLayer) -> DenseMatrix {
        let mut w = c.w_self.value.data.clone();
        for r in &c.w_rel {
            w.extend_from_slice(&r.value.matmul(&c.w_nb.value).data);
        }
        DenseMatrix { rows: 3 * c.in_dim(), cols: c.out_dim(), data: w }
    }

    /// Rows the first layer computes: the target layer when it is also the
    /// last one, every node otherwise.
    fn first_rows(&self, g: &MultiplexGraph, target: Option<usize>) -> Option<Vec<usize>> {
        target.filter(|_| self.convs.len() == 1).map(|t| target_rows(g, t))
    }

    /// `x0` is the first layer's stacked input. With `target`, the last
    /// layer only computes that intent's nodes.
    fn forward<'a>(&self, g: &MultiplexGraph, x0: &'a DenseMatrix, target: Option<usize>) -> Forward<'a> {
        let last = self.convs.len() - 1;
        let mut layers: Vec<LayerCache<'a>> = Vec::with_capacity(self.convs.len());
        let mut h = DenseMatrix::zeros(0, 0);
        for (t, c) in self.convs.iter().enumerate() {
            let rows = if t == last { target.map(|q| target_rows(g, q)) } else { None };
            let x = if t == 0 { Cow::Borrowed(x0) } else { Cow::Owned(stack_inputs(g, &h, rows.as_deref())) };
            let w_cat = Self::stacked_weights(c);
            let mut pre = x.matmul(&w_cat);
            pre.add_row(&c.b.value);
            h = if t == last { pre.clone() } else { crate::nn::ops::relu(&pre) };
            layers.push(LayerCache { rows, x, w_cat, pre });
        }
        Forward { layers, output: h }
    }

    /// Final states of every node.
    pub fn states(&self, g: &MultiplexGraph) -> DenseMatrix {
        let x0 = stack_inputs(g, &g.features, None);
        self.forward(g, &x0, None).output
    }

    fn head(&self, states: &DenseMatrix) -> DenseMatrix {
        let mut z = states.matmul(&self.head_w.value);
        z.add_row(&self.head_b.value);
        z
    }

    fn first_input(&self, g: &MultiplexGraph, target: usize) -> DenseMatrix {
        stack_inputs(g, &g.features, self.first_rows(g, Some(target)).as_deref())
    }

    /// Logits for every pair under `target`, one row per pair.
    pub fn logits(&self, g: &MultiplexGraph, target: usize) -> DenseMatrix {
        let x0 = self.first_input(g, target);
        self.head(&self.forward(g, &x0, Some(target)).output)
    }

    pub fn predict(&self, g: &MultiplexGraph, target: usize) -> Prediction {
        prediction_from_logits(&self.logits(g, target))
    }

    /// Summed CE over `train` pairs of the target layer; fills every
    /// parameter's gradient and returns the loss with the pre-step logits.
    pub fn loss_and_grads(&mut self, g: &MultiplexGraph, labels: &[bool], train: &[usize], target: usize) -> (f64, DenseMatrix) {
        let x0 = self.first_input(g, target);
        self.loss_and_grads_with(g, &x0, labels, train, target)
    }

    fn loss_and_grads_with(&mut self, g: &MultiplexGraph, x0: &DenseMatrix, labels: &[bool], train: &[usize], target: usize) -> (f64, DenseMatrix) {
        let f = self.forward(g, x0, Some(target));
        let logits = self.head(&f.output);
        let (loss, dlogits) = softmax_ce_rows(&logits, labels, train, false);
        for p in self.params_mut() {
            p.zero_grad();
        }
        f.output.t_matmul_acc(&dlogits, &mut self.head_w.grad);
        self.head_b.grad.add_assign(&dlogits.col_sums());
        let mut dh = dlogits.matmul_t(&self.head_w.value);
        let last = self.convs.len() - 1;
        for t in (0..=last).rev() {
            let cache = &f.layers[t];
            let c = &mut self.convs[t];
            let dz = if t == last { dh } else { relu_backward(&cache.pre, &dh) };
            let (d_in, d_out) = (c.in_dim(), c.out_dim());
            let dw_cat = cache.x.t_matmul(&dz);
            let block = |i: usize| DenseMatrix { rows: d_in, cols: d_out, data: dw_cat.data[i * d_in * d_out..(i + 1) * d_in * d_out].to_vec() };
            c.w_self.grad.add_assign(&block(0));
            c.b.grad.add_assign(&dz.col_sums());
            for r in 0..2 {
                let du = block(r + 1);
                c.w_rel[r].grad.add_assign(&du.matmul_t(&c.w_nb.value));
                c.w_rel[r].value.t_matmul_acc(&du, &mut c.w_nb.grad);
            }
            dh = if t > 0 {
                let dx = dz.matmul_t(&cache.w_cat);
                stack_inputs_backward(g, &dx, cache.rows.as_deref(), f.layers[t - 1].pre.rows)
            } else {
                DenseMatrix::zeros(0, 0)
            };
        }
        (loss, logits)
    }

    pub fn to_checkpoint(&self, cfg: &FlexerConfig) -> Checkpoint {
        let dims: Vec<usize> = self.convs.iter().map(|c| c.out_dim()).collect();
        let mut ck = Checkpoint::new(serde_json::json!({
            "mode": "flexer", "in_dim": self.convs[0].in_dim(), "dims": dims, "config": cfg,
        }));
        for (t, c) in self.convs.iter().enumerate() {
            ck.push(format!("conv{t}.w_intra"), &c.w_rel[0].value);
            ck.push(format!("conv{t}.w_inter"), &c.w_rel[1].value);
            ck.push(format!("conv{t}.w_self"), &c.w_self.value);
            ck.push(format!("conv{t}.w_nb"), &c.w_nb.value);
            ck.push(format!("conv{t}.b"), &c.b.value);
        }
        ck.push("head.w", &self.head_w.value);
        ck.push("head.b", &self.head_b.value);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, FlexerConfig)> {
        if ck.config["mode"] != "flexer" {
            return Err(Error::data("checkpoint does not hold a graph model"));
        }
        let in_dim = ck.config["in_dim"].as_u64().ok_or_else(|| Error::MissingKey("checkpoint config `in_dim`".into()))? as usize;
        let dims: Vec<usize> = serde_json::from_value(ck.config["dims"].clone())?;
        let cfg: FlexerConfig = serde_json::from_value(ck.config["config"].clone())?;
        let mut convs = Vec::new();
        let mut d_in = in_dim;
        for (t, &d_out) in dims.iter().enumerate() {
            let get = |name: &str, shape| ck.tensor(&format!("conv{t}.{name}"), shape).map(Parameter::new);
            convs.push(ConvLayer {
                w_rel: [get("w_intra", (d_in, d_in))?, get("w_inter", (d_in, d_in))?],
                w_self: get("w_self", (d_in, d_out))?,
                w_nb: get("w_nb", (d_in, d_out))?,
                b: get("b", (1, d_out))?,
            });
            d_in = d_out;
        }
        let model = FlexerModel {
            convs,
            head_w: Parameter::new(ck.tensor("head.w", (d_in, 2))?),
            head_b: Parameter::new(ck.tensor("head.b", (1, 2))?),
        };
        Ok((model, cfg))
    }
}

fn target_rows(g: &MultiplexGraph, target: usize) -> Vec<usize> {
    (0..g.num_pairs()).map(|i| g.node(i, target)).collect()
}

/// Softmax likelihoods and argmax labels (ties go to non-match).
pub fn prediction_from_logits(logits: &DenseMatrix) -> Prediction {
    let probs = softmax(logits);
    Prediction {
        labels: (0..logits.rows).map(|i| argmax(logits.row(i)) == 1).collect(),
        scores: (0..logits.rows).map(|i| probs.get(i, 1)).collect(),
    }
}

/// Full-graph training on the target intent's train pairs; keeps the
/// weights of the epoch with the best validation F1.
pub fn train_flexer(g: &MultiplexGraph, labels: &IntentLabelMatrix, cfg: &FlexerConfig) -> Result<(FlexerModel, TrainTrace)> {
    cfg.validate(g.num_intents())?;
    if labels.num_pairs() != g.num_pairs() || labels.num_intents() != g.num_intents() {
        return Err(Error::Shape(format!(
            "labels cover {} pairs x {} intents, graph has {} x {}",
            labels.num_pairs(),
            labels.num_intents(),
            g.num_pairs(),
            g.num_intents()
        )));
    }
    let y = labels.column(cfg.target_intent);
    let train = labels.pairs_in(Split::Train);
    let valid = labels.pairs_in(Split::Valid);
    let pos = train.iter().filter(|&&i| y[i]).count();
    if pos == 0 || pos == train.len() {
        return Err(Error::data(format!(
            "intent {} has {pos} positive of {} training pairs; both classes are required",
            cfg.target_intent,
            train.len()
        )));
    }
    let mut model = FlexerModel::new(g.features.cols, &layer_dims(cfg.h1, cfg.layers), cfg.hyper.seed);
    let x0 = model.first_input(g, cfg.target_intent);
    let mut best = model.clone();
    let mut trace = TrainTrace { loss: Vec::new(), valid_score: Vec::new(), best_epoch: 0 };
    for epoch in 0..cfg.hyper.epochs {
        let (loss, logits) = model.loss_and_grads_with(g, &x0, &y, &train, cfg.target_intent);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("graph model loss at epoch {epoch}")));
        }
        let pred = prediction_from_logits(&logits).labels;
        let score = f1_on(&pred, &y, &valid);
        trace.loss.push(loss);
        trace.valid_score.push(score);
        if epoch == 0 || score > trace.valid_score[trace.best_epoch] {
            trace.best_epoch = epoch;
            best = model.clone();
        }
        adam_step(&mut model.params_mut(), &cfg.hyper);
    }
    Ok((best, trace))
}

/// Trains one model per intent on a shared graph and predicts every intent.
/// Intent `p` is initialized with seed `hyper.seed + p`.
pub fn run_mier(g: &MultiplexGraph, labels: &IntentLabelMatrix, h1: usize, layers: usize, hyper: &TrainHyper) -> Result<Vec<(FlexerModel, TrainTrace, Prediction)>> {
    (0..g.num_intents())
        .map(|p| {
            let cfg = FlexerConfig { target_intent: p, h1, layers, hyper: TrainHyper { seed: hyper.seed + p as u64, ..*hyper } };
            let (model, trace) = train_flexer(g, labels, &cfg)?;
            let pred = model.predict(g, p);
            Ok((model, trace, pred))
        })
        .collect()
}

/// Hyperparameter grid searched per intent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub h1: Vec<usize>,
    pub k: Vec<usize>,
    pub layers: Vec<usize>,
}

impl SweepGrid {
    /// Every allowed width, every neighbor count and both depths.
    pub fn full() -> Self {
        SweepGrid { h1: H1_GRID.to_vec(), k: crate::graph::K_GRID.to_vec(), layers: vec![2, 3] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h1.is_empty() || self.k.is_empty() || self.layers.is_empty() {
            return Err(Error::Config("sweep grid needs at least one value per axis".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub h1: usize,
    pub k: usize,
    pub layers: usize,
    pub intent: usize,
    pub valid_f1: f64,
    pub test_f1: f64,
    pub best_epoch: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<GridPoint>,
    /// Index into `points` of each intent's best validation score.
    pub selected: Vec<usize>,
    /// Per intent: best test F1 without intra-layer edges and with them,
    /// each chosen by validation F1. `None` when the grid lacks that side.
    pub knn_ablation: Vec<(Option<f64>, Option<f64>)>,
}

impl SweepResult {
    pub fn best(&self, intent: usize) -> &GridPoint {
        &self.points[self.selected[intent]]
    }
}

fn best_by_valid<'a>(pts: impl Iterator<Item = (usize, &'a GridPoint)>) -> Option<usize> {
    // Strictly greater keeps the first point on ties.
    pts.fold(None::<(usize, f64)>, |acc, (i, p)| match acc {
        Some((_, v)) if p.valid_f1 <= v => acc,
        _ => Some((i, p.valid_f1)),
    })
    .map(|(i, _)| i)
}

/// Exhaustive search; the graph is rebuilt once per `k`.
pub fn sweep(sets: &[crate::embedding::PairEmbeddingSet], labels: &IntentLabelMatrix, grid: &SweepGrid, graph_cfg: &crate::graph::GraphConfig, hyper: &TrainHyper) -> Result<SweepResult> {
    grid.validate()?;
    let test = labels.pairs_in(Split::Test);
    let mut points = Vec::new();
    for &k in &grid.k {
        let g = crate::graph::build_graph(sets, &crate::graph::GraphConfig { k, ..graph_cfg.clone() })?;
        for &layers in &grid.layers {
            for &h1 in &grid.h1 {
                for p in 0..g.num_intents() {
                    let started = std::time::Instant::now();
                    let cfg = FlexerConfig { target_intent: p, h1, layers, hyper: TrainHyper { seed: hyper.seed + p as u64, ..*hyper } };
                    let (model, trace) = train_flexer(&g, labels, &cfg)?;
                    let pred = model.predict(&g, p);
                    points.push(GridPoint {
                        h1,
                        k,
                        layers,
                        intent: p,
                        valid_f1: trace.valid_score[trace.best_epoch],
                        test_f1: f1_on(&pred.labels, &labels.column(p), &test),
                        best_epoch: trace.best_epoch,
                        seconds: started.elapsed().as_secs_f64(),
                    });
                }
            }
        }
    }
    let intents = labels.num_intents();
    let of = |p: usize| points.iter().enumerate().filter(move |(_, g)| g.intent == p);
    let selected = (0..intents).map(|p| best_by_valid(of(p)).expect("non-empty grid")).collect();
    let knn_ablation = (0..intents)
        .map(|p| {
            let side = |with: bool| best_by_valid(of(p).filter(|(_, g)| (g.k > 0) == with)).map(|i| points[i].test_f1);
            (side(false), side(true))
        })
        .collect();
    Ok(SweepResult { points, selected, knn_ablation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::PairEmbeddingSet;
    use crate::graph::{build_graph, GraphConfig};
    use crate::nn::gradcheck::check_gradient;
    use rand::Rng;

    fn random_graph(p: usize, n: usize, d: usize, k: usize, seed: u64) -> MultiplexGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sets: Vec<PairEmbeddingSet> = (0..p)
            .map(|q| PairEmbeddingSet::new(q, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        build_graph(&sets, &GraphConfig { k, ..Default::default() }).unwrap()
    }

    #[test]
    fn layer_widths() {
        assert_eq!(layer_dims(300, 2), vec![300, 300]);
        assert_eq!(layer_dims(300, 3), vec![300, 150, 150]);
        assert_eq!(layer_dims(100, 1), vec![100]);
    }

    #[test]
    fn aggregation_matches_per_node_oracle() {
        let g = random_graph(2, 3, 4, 1, 8);
        let m = FlexerModel::new(4, &[5], 1);
        let c = &m.convs[0];
        let x = stack_inputs(&g, &g.features, None);
        for v in 0..g.node_count() {
            let direct = aggregate_neighborhood(&g, &g.features, v, c);
            for j in 0..4 {
                let batched: f64 = (0..2).map(|r| (0..4).map(|i| x.get(v, 4 * (r + 1) + i) * c.w_rel[r].value.get(i, j)).sum::<f64>()).sum();
                assert!((direct[j] - batched).abs() < 1e-12);
            }
        }
        let rows = [5, 0, 3];
        let part = stack_inputs(&g, &g.features, Some(&rows));
        for (k, &v) in rows.iter().enumerate() {
            assert_eq!(part.row(k), x.row(v));
        }
    }

    #[test]
    fn isolated_node_aggregates_to_zero() {
        let g = random_graph(1, 4, 3, 0, 2);
        let m = FlexerModel::new(3, &[2], 0);
        assert!(aggregate_neighborhood(&g, &g.features, 1, &m.convs[0]).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let g = random_graph(2, 6, 3, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let labels: Vec<bool> = (0..6).map(|_| rng.gen_bool(0.5)).collect();
        let train = [0, 1, 2, 4];
        let mut model = FlexerModel::new(3, &[4, 3], 7);
        model.loss_and_grads(&g, &labels, &train, 1);
        let flat = |m: &mut FlexerModel| -> (Vec<f64>, Vec<f64>) {
            let mut v = Vec::new();
            let mut gr = Vec::new();
            for p in m.params_mut() {
                v.extend_from_slice(&p.value.data);
                gr.extend_from_slice(&p.grad.data);
            }
            (v, gr)
        };
        let (x, analytic) = flat(&mut model);
        let base = model.clone();
        let f = |theta: &[f64]| {
            let mut m = base.clone();
            let mut off = 0;
            for p in m.params_mut() {
                let len = p.value.data.len();
                p.value.data.copy_from_slice(&theta[off..off + len]);
                off += len;
            }
            m.loss_and_grads(&g, &labels, &train, 1).0
        };
        let report = check_gradient(&f, &x, &analytic, 1e-5);
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = FlexerModel::new(4, &layer_dims(100, 3), 3);
        let cfg = FlexerConfig { h1: 100, layers: 3, ..Default::default() };
        let ck = Checkpoint::from_bytes(&m.to_checkpoint(&cfg).to_bytes()).unwrap();
        let (back, cfg2) = FlexerModel::from_checkpoint(&ck).unwrap();
        assert_eq!(cfg2, cfg);
        let g = random_graph(2, 5, 4, 2, 1);
        assert_eq!(back.logits(&g, 1), m.logits(&g, 1));
    }

    #[test]
    fn training_selects_best_validation_epoch() {
        let g = random_graph(2, 40, 6, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let col0: Vec<bool> = (0..40).map(|i| g.features.get(i, 0) > 0.0).collect();
        let col1: Vec<bool> = (0..40).map(|i| col0[i] || rng.gen_bool(0.2)).collect();
        let splits = (0..40).map(|i| match i % 5 { 3 => Split::Valid, 4 => Split::Test, _ => Split::Train }).collect();
        let labels = IntentLabelMatrix::from_columns(&[col0, col1], splits).unwrap();
        let cfg = FlexerConfig { h1: 100, hyper: TrainHyper { epochs: 30, ..Default::default() }, ..Default::default() };
        let (_, trace) = train_flexer(&g, &labels, &cfg).unwrap();
        assert_eq!(trace.loss.len(), 30);
        assert!(trace.loss.iter().all(|l| l.is_finite()));
        assert!(trace.valid_score[trace.best_epoch] >= trace.valid_score[0]);
        assert!(trace.loss[29] < trace.loss[0]);

        let bad = IntentLabelMatrix::from_columns(&[vec![false; 40], vec![true; 40]], labels.splits().to_vec()).unwrap();
        assert_eq!(train_flexer(&g, &bad, &cfg).unwrap_err().kind(), crate::ErrorKind::Data);
        let bad_cfg = FlexerConfig { h1: 120, ..cfg.clone() };
        assert_eq!(train_flexer(&g, &labels, &bad_cfg).unwrap_err().kind(), crate::ErrorKind::Config);
    }

    /// Per-node forward written from neighbor lists, no batching.
    fn oracle_logits(m: &FlexerModel, g: &MultiplexGraph, target: usize) -> Vec<[f64; 2]> {
        let mut h: Vec<Vec<f64>> = (0..g.node_count()).map(|v| g.features.row(v).to_vec()).collect();
        let last = m.convs.len() - 1;
        for (t, c) in m.convs.iter().enumerate() {
            let d_out = c.out_dim();
            let mut next = Vec::with_capacity(h.len());
            for v in 0..h.len() {
                let mut cat = h[v].clone();
                let mut agg = vec![0.0; h[v].len()];
                for (r, rel) in Relation::ALL.into_iter().enumerate() {
                    let nb = g.neighbor_sets(v, rel);
                    for j in 0..agg.len() {
                        for i in 0..agg.len() {
                            let mean = if nb.is_empty() { 0.0 } else { nb.iter().map(|&u| h[u][i]).sum::<f64>() / nb.len() as f64 };
                            agg[j] += mean * c.w_rel[r].value.get(i, j);
                        }
                    }
                }
                cat.extend(agg);
                let d_in = h[v].len();
                let out: Vec<f64> = (0..d_out)
                    .map(|o| {
                        let z = c.b.value.get(0, o)
                            + (0..d_in).map(|i| cat[i] * c.w_self.value.get(i, o)).sum::<f64>()
                            + (0..d_in).map(|i| cat[d_in + i] * c.w_nb.value.get(i, o)).sum::<f64>();
                        if t == last { z } else { z.max(0.0) }
                    })
                    .collect();
                next.push(out);
            }
            h = next;
        }
        (0..g.num_pairs())
            .map(|i| {
                let x = &h[g.node(i, target)];
                let mut z = [m.head_b.value.get(0, 0), m.head_b.value.get(0, 1)];
                for (c, zc) in z.iter_mut().enumerate() {
                    *zc += x.iter().enumerate().map(|(j, v)| v * m.head_w.value.get(j, c)).sum::<f64>();
                }
                z
            })
            .collect()
    }

    #[test]
    fn forward_matches_per_node_oracle() {
        let g = random_graph(2, 4, 3, 1, 11);
        let m = FlexerModel::new(3, &[4, 2], 5);
        for target in 0..2 {
            let got = m.logits(&g, target);
            for (i, want) in oracle_logits(&m, &g, target).iter().enumerate() {
                assert!((got.get(i, 0) - want[0]).abs() < 1e-10);
                assert!((got.get(i, 1) - want[1]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn without_edges_single_layer_is_a_feed_forward_classifier() {
        let g = random_graph(1, 20, 5, 0, 3);
        let m = FlexerModel::new(5, &[6], 9);
        let c = &m.convs[0];
        let hidden = crate::nn::ops::linear(&g.features, &c.w_self.value, Some(&c.b.value));
        let logits = crate::nn::ops::linear(&hidden, &m.head_w.value, Some(&m.head_b.value));
        assert_eq!(m.logits(&g, 0), logits);
    }

    #[test]
    fn pair_order_does_not_matter() {
        let (p, n, d) = (3, 12, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<Vec<f32>> = (0..p).map(|_| (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let perm: Vec<usize> = (0..n).rev().collect();
        let make = |order: &[usize]| {
            let sets: Vec<PairEmbeddingSet> = (0..p)
                .map(|q| PairEmbeddingSet::new(q, d, order.iter().flat_map(|&i| data[q][i * d..(i + 1) * d].to_vec()).collect()).unwrap())
                .collect();
            build_graph(&sets, &GraphConfig { k: 3, ..Default::default() }).unwrap()
        };
        let ident: Vec<usize> = (0..n).collect();
        let (g, gp) = (make(&ident), make(&perm));
        let m = FlexerModel::new(d, &[5, 5], 2);
        let (a, b) = (m.logits(&g, 2), m.logits(&gp, 2));
        for (k, &i) in perm.iter().enumerate() {
            for c in 0..2 {
                assert!((a.get(i, c) - b.get(k, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn tied_logits_predict_non_match() {
        let z = DenseMatrix::from_rows(&[vec![0.0, 0.0], vec![-3.0, 3.0], vec![2.0, 1.0]]).unwrap();
        let pred = prediction_from_logits(&z);
        assert_eq!(pred.labels, vec![false, true, false]);
        assert!((pred.scores[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sweep_picks_by_validation() {
        let (p, n, d) = (2, 30, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sets: Vec<PairEmbeddingSet> =
            (0..p).map(|q| PairEmbeddingSet::new(q, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()).collect();
        let col0: Vec<bool> = (0..n).map(|i| sets[0].vector(i)[0] > 0.0).collect();
        let col1: Vec<bool> = (0..n).map(|i| sets[1].vector(i)[1] > 0.0 || col0[i]).collect();
        let splits = (0..n).map(|i| match i % 5 { 3 => Split::Valid, 4 => Split::Test, _ => Split::Train }).collect();
        let labels = IntentLabelMatrix::from_columns(&[col0, col1], splits).unwrap();
        let grid = SweepGrid { h1: vec![100], k: vec![0, 2], layers: vec![2] };
        let hyper = TrainHyper { epochs: 10, ..Default::default() };
        let res = sweep(&sets, &labels, &grid, &GraphConfig::default(), &hyper).unwrap();
        assert_eq!(res.points.len(), 4);
        for q in 0..p {
            let best = res.best(q);
            assert!(res.points.iter().filter(|g| g.intent == q).all(|g| g.valid_f1 <= best.valid_f1));
            assert!(res.knn_ablation[q].0.is_some() && res.knn_ablation[q].1.is_some());
        }
    }
}
