//! Per-intent binary matchers, the multi-label matcher, and extraction of
//! their hidden activations as intent-based pair representations.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::PairEmbeddingSet;
use crate::error::{Error, Result};
use crate::metrics::prf;
use crate::model::{IntentLabelMatrix, Resolution, Split};
use crate::nn::loss::{ce_loss, softmax_ce_rows, weighted_bce_rows};
use crate::nn::ops::{argmax, linear, relu, relu_backward, sigmoid_scalar, softmax};
use crate::nn::{adam_step, Checkpoint, DenseMatrix, Parameter, TrainHyper};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatcherConfig {
    pub hidden: usize,
    pub branch_hidden: usize,
    /// Minibatch size; 0 trains on the whole training split per step.
    pub batch_size: usize,
    /// Per-intent loss weights for the multi-label matcher; all 1 if empty.
    pub intent_weights: Vec<f64>,
    pub hyper: TrainHyper,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            hidden: 128,
            branch_hidden: 128,
            batch_size: 32,
            intent_weights: Vec::new(),
            hyper: TrainHyper::default(),
        }
    }
}

/// Labels and match likelihoods of one intent over all pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub labels: Vec<bool>,
    pub scores: Vec<f64>,
}

impl Prediction {
    pub fn resolution(&self, intent_id: usize) -> Resolution {
        Resolution::new(intent_id, self.labels.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i))
    }
}

/// Per-epoch mean training loss and validation score, with the epoch whose
/// weights were kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub loss: Vec<f64>,
    pub valid_score: Vec<f64>,
    pub best_epoch: usize,
}

impl TrainTrace {
    fn new() -> Self {
        TrainTrace { loss: Vec::new(), valid_score: Vec::new(), best_epoch: 0 }
    }

    /// Records an epoch; returns true when it is the new best (ties keep the
    /// earlier epoch).
    fn push(&mut self, loss: f64, score: f64) -> bool {
        self.loss.push(loss);
        self.valid_score.push(score);
        let best = self.valid_score.len() == 1 || score > self.valid_score[self.best_epoch];
        if best {
            self.best_epoch = self.valid_score.len() - 1;
        }
        best
    }
}

/// F1 of `pred` against `gold` on `rows`.
pub fn f1_on(pred: &[bool], gold: &[bool], rows: &[usize]) -> f64 {
    let pick = |v: &[bool]| Resolution::new(0, rows.iter().copied().filter(|&i| v[i]));
    let mut conv = BTreeSet::new();
    prf(&pick(pred), &pick(gold), rows, &mut conv).map(|s| s.f1).unwrap_or(0.0)
}

fn minibatches(train: &[usize], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order = train.to_vec();
    order.shuffle(rng);
    let size = if batch == 0 { order.len() } else { batch };
    order.chunks(size.max(1)).map(|c| c.to_vec()).collect()
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Weight and bias of one dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Parameter,
    pub b: Parameter,
}

impl Dense {
    fn new(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Dense { w: Parameter::xavier(fan_in, fan_out, rng), b: Parameter::zeros(1, fan_out) }
    }

    fn forward(&self, x: &DenseMatrix) -> DenseMatrix {
        linear(x, &self.w.value, Some(&self.b.value))
    }

    /// Accumulates parameter gradients; returns `dx` when asked.
    fn backward(&mut self, x: &DenseMatrix, dy: &DenseMatrix, need_dx: bool) -> Option<DenseMatrix> {
        x.t_matmul_acc(dy, &mut self.w.grad);
        self.b.grad.add_assign(&dy.col_sums());
        need_dx.then(|| dy.matmul_t(&self.w.value))
    }

    fn params(&mut self) -> [&mut Parameter; 2] {
        [&mut self.w, &mut self.b]
    }

    fn save(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.push(format!("{prefix}.w"), &self.w.value);
        ck.push(format!("{prefix}.b"), &self.b.value);
    }

    fn load(ck: &Checkpoint, prefix: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Dense {
            w: Parameter::new(ck.tensor(&format!("{prefix}.w"), (fan_in, fan_out))?),
            b: Parameter::new(ck.tensor(&format!("{prefix}.b"), (1, fan_out))?),
        })
    }
}

/// `d → r` ReLU `→ 2` classifier for one intent.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMatcher {
    pub hidden: Dense,
    pub out: Dense,
}

impl BinaryMatcher {
    pub fn new(input_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = seeded(seed, 0);
        BinaryMatcher { hidden: Dense::new(input_dim, hidden, &mut rng), out: Dense::new(hidden, 2, &mut rng) }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.w.value.rows
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.w.value.cols
    }

    /// Post-ReLU hidden activation.
    pub fn representation(&self, x: &DenseMatrix) -> DenseMatrix {
        relu(&self.hidden.forward(x))
    }

    pub fn logits(&self, x: &DenseMatrix) -> DenseMatrix {
        self.out.forward(&self.representation(x))
    }

    /// Argmax of the softmax (ties go to non-match) and the match probability.
    pub fn predict(&self, x: &DenseMatrix) -> Prediction {
        let logits = self.logits(x);
        let probs = softmax(&logits);
        Prediction {
            labels: (0..logits.rows).map(|i| argmax(logits.row(i)) == 1).collect(),
            scores: (0..probs.rows).map(|i| probs.get(i, 1)).collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.hidden.params().into_iter().chain(self.out.params()).collect()
    }

    /// Mean CE over `batch`; fills every parameter's gradient.
    pub fn loss_and_grads(&mut self, x: &DenseMatrix, labels: &[bool], batch: &[usize]) -> f64 {
        let xb = x.select_rows(batch);
        let yb: Vec<bool> = batch.iter().map(|&i| labels[i]).collect();
        let pre = self.hidden.forward(&xb);
        let h = relu(&pre);
        let logits = self.out.forward(&h);
        let rows: Vec<usize> = (0..batch.len()).collect();
        let (loss, dlogits) = softmax_ce_rows(&logits, &yb, &rows, true);
        for p in self.params_mut() {
            p.zero_grad();
        }
        let dh = self.out.backward(&h, &dlogits, true).unwrap();
        self.hidden.backward(&xb, &relu_backward(&pre, &dh), false);
        loss
    }

    /// One Adam step on the mean CE over `batch`; returns the loss.
    fn step(&mut self, x: &DenseMatrix, labels: &[bool], batch: &[usize], hyper: &TrainHyper) -> f64 {
        let loss = self.loss_and_grads(x, labels, batch);
        adam_step(&mut self.params_mut(), hyper);
        loss
    }

    fn save(&self, ck: &mut Checkpoint, prefix: &str) {
        self.hidden.save(ck, &format!("{prefix}.hidden"));
        self.out.save(ck, &format!("{prefix}.out"));
    }

    fn load(ck: &Checkpoint, prefix: &str, d: usize, r: usize) -> Result<Self> {
        Ok(BinaryMatcher {
            hidden: Dense::load(ck, &format!("{prefix}.hidden"), d, r)?,
            out: Dense::load(ck, &format!("{prefix}.out"), r, 2)?,
        })
    }
}

fn check_inputs(x: &DenseMatrix, labels: &IntentLabelMatrix) -> Result<(Vec<usize>, Vec<usize>)> {
    if x.rows != labels.num_pairs() {
        return Err(Error::Shape(format!("{} embedding rows for {} labeled pairs", x.rows, labels.num_pairs())));
    }
    let train = labels.pairs_in(Split::Train);
    if train.is_empty() {
        return Err(Error::data("no training pairs"));
    }
    Ok((train, labels.pairs_in(Split::Valid)))
}

/// Trains one binary matcher on `labels` and keeps the weights of the epoch
/// with the best validation F1.
pub fn train_binary(
    x: &DenseMatrix,
    labels: &[bool],
    train: &[usize],
    valid: &[usize],
    cfg: &MatcherConfig,
    seed: u64,
) -> Result<(BinaryMatcher, TrainTrace)> {
    cfg.hyper.validate()?;
    let mut model = BinaryMatcher::new(x.cols, cfg.hidden, seed);
    let mut rng = seeded(seed, 1);
    let mut trace = TrainTrace::new();
    let mut best = model.clone();
    for epoch in 0..cfg.hyper.epochs {
        let batches = minibatches(train, cfg.batch_size, &mut rng);
        let mut total = 0.0;
        for b in &batches {
            total += model.step(x, labels, b, &cfg.hyper) * b.len() as f64;
        }
        let loss = total / train.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
        }
        let pred = model.predict(&x.select_rows(valid)).labels;
        let gold: Vec<bool> = valid.iter().map(|&i| labels[i]).collect();
        let rows: Vec<usize> = (0..valid.len()).collect();
        if trace.push(loss, f1_on(&pred, &gold, &rows)) {
            best = model.clone();
        }
    }
    Ok((best, trace))
}

/// One independently trained binary matcher per intent.
#[derive(Debug, Clone)]
pub struct InParallel {
    pub matchers: Vec<BinaryMatcher>,
    pub traces: Vec<TrainTrace>,
}

impl InParallel {
    pub fn predict(&self, sets: &[PairEmbeddingSet]) -> Vec<Prediction> {
        self.matchers.iter().zip(sets).map(|(m, s)| m.predict(&s.to_matrix())).collect()
    }

    /// Hidden activations of each intent's matcher.
    pub fn representations(&self, sets: &[PairEmbeddingSet]) -> Result<Vec<PairEmbeddingSet>> {
        self.matchers
            .iter()
            .zip(sets)
            .enumerate()
            .map(|(p, (m, s))| PairEmbeddingSet::from_matrix(p, &m.representation(&s.to_matrix())))
            .collect()
    }

    pub fn to_checkpoint(&self, cfg: &MatcherConfig) -> Checkpoint {
        let d = self.matchers[0].input_dim();
        let mut ck = Checkpoint::new(serde_json::json!({
            "mode": "in-parallel", "intents": self.matchers.len(), "input_dim": d, "config": cfg,
        }));
        for (p, m) in self.matchers.iter().enumerate() {
            m.save(&mut ck, &format!("intent{p}"));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, MatcherConfig)> {
        let (p, d, cfg) = header(ck, "in-parallel")?;
        let matchers = (0..p)
            .map(|q| BinaryMatcher::load(ck, &format!("intent{q}"), d, cfg.hidden))
            .collect::<Result<_>>()?;
        Ok((InParallel { matchers, traces: Vec::new() }, cfg))
    }
}

fn header(ck: &Checkpoint, mode: &str) -> Result<(usize, usize, MatcherConfig)> {
    let c = &ck.config;
    if c["mode"] != mode {
        return Err(Error::data(format!("checkpoint holds a `{}` model, expected `{mode}`", c["mode"])));
    }
    let num = |k: &str| c[k].as_u64().map(|v| v as usize).ok_or_else(|| Error::MissingKey(format!("checkpoint config `{k}`")));
    let cfg: MatcherConfig = serde_json::from_value(c["config"].clone())?;
    Ok((num("intents")?, num("input_dim")?, cfg))
}

/// Trains one binary matcher per intent on that intent's embeddings.
pub fn train_in_parallel(sets: &[PairEmbeddingSet], labels: &IntentLabelMatrix, cfg: &MatcherConfig) -> Result<InParallel> {
    if sets.len() != labels.num_intents() {
        return Err(Error::Shape(format!("{} embedding sets for {} intents", sets.len(), labels.num_intents())));
    }
    let mut matchers = Vec::new();
    let mut traces = Vec::new();
    for (p, set) in sets.iter().enumerate() {
        let x = set.to_matrix();
        let (train, valid) = check_inputs(&x, labels)?;
        let y = labels.column(p);
        if !train.iter().any(|&i| y[i]) {
            return Err(Error::data(format!("intent {p} has no positive training pairs")));
        }
        log::info!("training in-parallel matcher for intent {p}");
        let (m, t) = train_binary(&x, &y, &train, &valid, cfg, cfg.hyper.seed.wrapping_add(p as u64))?;
        matchers.push(m);
        traces.push(t);
    }
    Ok(InParallel { matchers, traces })
}

/// Copies the equivalence prediction to each of `p` intents.
pub fn naive_multi_intent(equivalence: &Prediction, p: usize) -> Vec<Prediction> {
    vec![equivalence.clone(); p]
}

/// Shared trunk with one branch and one logit per intent.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLabelMatcher {
    pub trunk: Dense,
    pub branches: Vec<Dense>,
    pub heads: Vec<Dense>,
}

struct MultiForward {
    trunk_pre: DenseMatrix,
    trunk: DenseMatrix,
    branch_pre: Vec<DenseMatrix>,
    branch: Vec<DenseMatrix>,
    logits: DenseMatrix,
}

/// Loss applied to the multi-label logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LabelLoss {
    WeightedBce,
    /// `ce_loss(σ(z), y)`; single-intent only.
    SigmoidCe,
}

impl MultiLabelMatcher {
    pub fn new(input_dim: usize, hidden: usize, branch_hidden: usize, intents: usize, seed: u64) -> Self {
        let mut rng = seeded(seed, 0);
        let trunk = Dense::new(input_dim, hidden, &mut rng);
        let mut branches = Vec::new();
        let mut heads = Vec::new();
        for _ in 0..intents {
            branches.push(Dense::new(hidden, branch_hidden, &mut rng));
            heads.push(Dense::new(branch_hidden, 1, &mut rng));
        }
        MultiLabelMatcher { trunk, branches, heads }
    }

    pub fn intents(&self) -> usize {
        self.heads.len()
    }

    fn forward(&self, x: &DenseMatrix) -> MultiForward {
        let trunk_pre = self.trunk.forward(x);
        let trunk = relu(&trunk_pre);
        let mut logits = DenseMatrix::zeros(x.rows, self.intents());
        let mut branch_pre = Vec::new();
        let mut branch = Vec::new();
        for (p, (b, h)) in self.branches.iter().zip(&self.heads).enumerate() {
            let pre = b.forward(&trunk);
            let act = relu(&pre);
            let z = h.forward(&act);
            for i in 0..x.rows {
                logits.set(i, p, z.get(i, 0));
            }
            branch_pre.push(pre);
            branch.push(act);
        }
        MultiForward { trunk_pre, trunk, branch_pre, branch, logits }
    }

    pub fn logits(&self, x: &DenseMatrix) -> DenseMatrix {
        self.forward(x).logits
    }

    /// `σ(z) ≥ 0.5` per intent, so a logit of exactly 0 is a match.
    pub fn predict(&self, x: &DenseMatrix) -> Vec<Prediction> {
        let logits = self.logits(x);
        (0..self.intents())
            .map(|p| {
                let scores: Vec<f64> = (0..logits.rows).map(|i| sigmoid_scalar(logits.get(i, p))).collect();
                Prediction { labels: scores.iter().map(|&s| s >= 0.5).collect(), scores }
            })
            .collect()
    }

    /// Post-ReLU branch activation of every intent.
    pub fn representations(&self, x: &DenseMatrix) -> Result<Vec<PairEmbeddingSet>> {
        let f = self.forward(x);
        f.branch.iter().enumerate().map(|(p, b)| PairEmbeddingSet::from_matrix(p, b)).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = self.trunk.params().into_iter().collect();
        for (b, h) in self.branches.iter_mut().zip(self.heads.iter_mut()) {
            out.extend(b.params());
            out.extend(h.params());
        }
        out
    }

    /// Mean weighted BCE over `batch`; fills every parameter's gradient.
    pub fn loss_and_grads(&mut self, x: &DenseMatrix, labels: &[Vec<bool>], w: &[f64], batch: &[usize]) -> Result<f64> {
        self.loss_and_grads_with(x, labels, w, batch, LabelLoss::WeightedBce)
    }

    fn step(&mut self, x: &DenseMatrix, labels: &[Vec<bool>], w: &[f64], batch: &[usize], loss_kind: LabelLoss, hyper: &TrainHyper) -> Result<f64> {
        let loss = self.loss_and_grads_with(x, labels, w, batch, loss_kind)?;
        adam_step(&mut self.params_mut(), hyper);
        Ok(loss)
    }

    fn loss_and_grads_with(&mut self, x: &DenseMatrix, labels: &[Vec<bool>], w: &[f64], batch: &[usize], loss_kind: LabelLoss) -> Result<f64> {
        let xb = x.select_rows(batch);
        let yb: Vec<Vec<bool>> = batch.iter().map(|&i| labels[i].clone()).collect();
        let f = self.forward(&xb);
        let rows: Vec<usize> = (0..batch.len()).collect();
        let (loss, dlogits) = match loss_kind {
            LabelLoss::WeightedBce => weighted_bce_rows(&f.logits, &yb, w, &rows)?,
            LabelLoss::SigmoidCe => {
                let n = rows.len() as f64;
                let mut g = DenseMatrix::zeros(rows.len(), 1);
                let mut total = 0.0;
                for &r in &rows {
                    let s = sigmoid_scalar(f.logits.get(r, 0));
                    total += ce_loss(s, yb[r][0]);
                    g.set(r, 0, (s - yb[r][0] as u8 as f64) / n);
                }
                (total / n, g)
            }
        };
        for p in self.params_mut() {
            p.zero_grad();
        }
        let mut dtrunk = DenseMatrix::zeros(xb.rows, f.trunk.cols);
        for p in 0..self.intents() {
            let dz = DenseMatrix::from_vec(xb.rows, 1, (0..xb.rows).map(|i| dlogits.get(i, p)).collect())?;
            let da = self.heads[p].backward(&f.branch[p], &dz, true).unwrap();
            let dpre = relu_backward(&f.branch_pre[p], &da);
            dtrunk.add_assign(&self.branches[p].backward(&f.trunk, &dpre, true).unwrap());
        }
        self.trunk.backward(&xb, &relu_backward(&f.trunk_pre, &dtrunk), false);
        Ok(loss)
    }

    pub fn to_checkpoint(&self, cfg: &MatcherConfig) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "mode": "multi-label", "intents": self.intents(), "input_dim": self.trunk.w.value.rows, "config": cfg,
        }));
        self.trunk.save(&mut ck, "trunk");
        for p in 0..self.intents() {
            self.branches[p].save(&mut ck, &format!("branch{p}"));
            self.heads[p].save(&mut ck, &format!("head{p}"));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, MatcherConfig)> {
        let (p, d, cfg) = header(ck, "multi-label")?;
        let trunk = Dense::load(ck, "trunk", d, cfg.hidden)?;
        let mut branches = Vec::new();
        let mut heads = Vec::new();
        for q in 0..p {
            branches.push(Dense::load(ck, &format!("branch{q}"), cfg.hidden, cfg.branch_hidden)?);
            heads.push(Dense::load(ck, &format!("head{q}"), cfg.branch_hidden, 1)?);
        }
        Ok((MultiLabelMatcher { trunk, branches, heads }, cfg))
    }
}

pub(crate) fn train_multilabel_with(
    set: &PairEmbeddingSet,
    labels: &IntentLabelMatrix,
    cfg: &MatcherConfig,
    loss_kind: LabelLoss,
) -> Result<(MultiLabelMatcher, TrainTrace)> {
    cfg.hyper.validate()?;
    let x = set.to_matrix();
    let (train, valid) = check_inputs(&x, labels)?;
    let p = labels.num_intents();
    if loss_kind == LabelLoss::SigmoidCe && p != 1 {
        return Err(Error::InvalidArgument("sigmoid CE loss needs exactly one intent".into()));
    }
    let w = if cfg.intent_weights.is_empty() { vec![1.0; p] } else { cfg.intent_weights.clone() };
    if w.len() != p {
        return Err(Error::Config(format!("{} intent weights for {p} intents", w.len())));
    }
    let rows: Vec<Vec<bool>> = (0..labels.num_pairs()).map(|i| labels.row(i).to_vec()).collect();
    for q in 0..p {
        if !train.iter().any(|&i| rows[i][q]) {
            return Err(Error::data(format!("intent {q} has no positive training pairs")));
        }
    }
    let mut model = MultiLabelMatcher::new(x.cols, cfg.hidden, cfg.branch_hidden, p, cfg.hyper.seed);
    let mut rng = seeded(cfg.hyper.seed, 1);
    let mut trace = TrainTrace::new();
    let mut best = model.clone();
    let xv = x.select_rows(&valid);
    let vrows: Vec<usize> = (0..valid.len()).collect();
    for epoch in 0..cfg.hyper.epochs {
        let mut total = 0.0;
        for b in minibatches(&train, cfg.batch_size, &mut rng) {
            total += model.step(&x, &rows, &w, &b, loss_kind, &cfg.hyper)? * b.len() as f64;
        }
        let loss = total / train.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
        }
        let preds = model.predict(&xv);
        let score = (0..p)
            .map(|q| {
                let gold: Vec<bool> = valid.iter().map(|&i| rows[i][q]).collect();
                f1_on(&preds[q].labels, &gold, &vrows)
            })
            .sum::<f64>()
            / p as f64;
        if trace.push(loss, score) {
            best = model.clone();
        }
    }
    Ok((best, trace))
}

/// Trains the multi-label matcher with the weighted BCE loss; epochs are
/// selected by mean validation F1 over intents.
pub fn train_multilabel(set: &PairEmbeddingSet, labels: &IntentLabelMatrix, cfg: &MatcherConfig) -> Result<(MultiLabelMatcher, TrainTrace)> {
    train_multilabel_with(set, labels, cfg, LabelLoss::WeightedBce)
}

/// Which trained model supplies the intent-based representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Extraction {
    /// Hidden layer of each intent's own binary matcher.
    #[default]
    Independent,
    /// Per-intent branch of the multi-label matcher.
    MultiTask,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn separable(n: usize, d: usize, seed: u64) -> (DenseMatrix, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut x = DenseMatrix::zeros(n, d);
        let mut y = Vec::new();
        for i in 0..n {
            loop {
                let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let s: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum();
                if s.abs() > 0.2 {
                    x.row_mut(i).copy_from_slice(&row);
                    y.push(s > 0.0);
                    break;
                }
            }
        }
        (x, y)
    }

    fn labels_from(cols: &[Vec<bool>], n: usize) -> IntentLabelMatrix {
        let splits = (0..n).map(|i| match i % 5 { 3 => Split::Valid, 4 => Split::Test, _ => Split::Train }).collect();
        IntentLabelMatrix::from_columns(cols, splits).unwrap()
    }

    #[test]
    fn binary_argmax_prefers_non_match_on_ties() {
        let mut m = BinaryMatcher::new(2, 2, 0);
        // Identity hidden layer; output logits equal the inputs once ReLU'd.
        m.hidden.w.value = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        m.out.w.value = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let x = DenseMatrix::from_rows(&[vec![2.0, 0.0], vec![0.5, 0.5], vec![0.0, 1.0]]).unwrap();
        let p = m.predict(&x);
        assert_eq!(p.labels, vec![false, false, true]);
        assert!((p.scores[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn logits_two_minus_one_is_non_match() {
        assert_eq!(argmax(&[2.0, -1.0]), 0);
    }

    #[test]
    fn multilabel_zero_logit_is_match() {
        let mut m = MultiLabelMatcher::new(3, 4, 4, 2, 1);
        for h in &mut m.heads {
            h.w.value.fill(0.0);
            h.b.value.fill(0.0);
        }
        m.heads[1].b.value.fill(-0.1);
        let x = DenseMatrix::from_rows(&[vec![0.3, -0.2, 0.9]]).unwrap();
        let p = m.predict(&x);
        assert_eq!(p[0].labels, vec![true]);
        assert_eq!(p[0].scores, vec![0.5]);
        assert_eq!(p[1].labels, vec![false]);
    }

    #[test]
    fn separable_data_reaches_perfect_train_f1() {
        let (x, y) = separable(200, 8, 3);
        let train: Vec<usize> = (0..150).collect();
        let valid: Vec<usize> = (150..200).collect();
        let cfg = MatcherConfig { hidden: 16, ..Default::default() };
        // Selecting on the training split itself returns the best train F1.
        let (m, _) = train_binary(&x, &y, &train, &train, &cfg, 0).unwrap();
        assert_eq!(f1_on(&m.predict(&x).labels, &y, &train), 1.0);
        let (_, trace) = train_binary(&x, &y, &train, &valid, &cfg, 0).unwrap();
        assert_eq!(trace.loss.len(), 150);
        // Selected validation score is the maximum seen.
        let max = trace.valid_score.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(trace.valid_score[trace.best_epoch], max);
        assert!(trace.valid_score[trace.best_epoch] >= trace.valid_score[0]);
    }

    #[test]
    fn multilabel_learns_separable_intents() {
        let (x, y0) = separable(200, 8, 4);
        // Second intent from another hyperplane over the same inputs.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y1: Vec<bool> = (0..200).map(|i| x.row(i).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() > 0.0).collect();
        let labels = labels_from(&[y0.clone(), y1.clone()], 200);
        let set = PairEmbeddingSet::from_matrix(0, &x).unwrap();
        let cfg = MatcherConfig { hidden: 32, branch_hidden: 16, ..Default::default() };
        let (m, _) = train_multilabel(&set, &labels, &cfg).unwrap();
        let preds = m.predict(&x);
        let train = labels.pairs_in(Split::Train);
        assert!(f1_on(&preds[0].labels, &y0, &train) > 0.95);
        assert!(f1_on(&preds[1].labels, &y1, &train) > 0.95);
        let reps = m.representations(&x).unwrap();
        assert_eq!(reps.len(), 2);
        assert_eq!(reps[1].dim(), 16);
    }

    #[test]
    fn single_intent_trace_matches_cross_entropy_of_sigmoid() {
        let (x, y) = separable(120, 6, 7);
        // Label noise keeps the logits away from saturation.
        let y: Vec<bool> = y.iter().enumerate().map(|(i, &b)| if i % 7 == 0 { !b } else { b }).collect();
        let labels = labels_from(&[y], 120);
        let set = PairEmbeddingSet::from_matrix(0, &x).unwrap();
        let cfg = MatcherConfig { hidden: 8, branch_hidden: 8, hyper: TrainHyper { epochs: 40, ..Default::default() }, ..Default::default() };
        let (_, bce) = train_multilabel_with(&set, &labels, &cfg, LabelLoss::WeightedBce).unwrap();
        let (_, ce) = train_multilabel_with(&set, &labels, &cfg, LabelLoss::SigmoidCe).unwrap();
        assert_eq!(bce.loss.len(), 40);
        for (a, b) in bce.loss.iter().zip(&ce.loss) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn intent_without_training_positives_is_an_error() {
        let (x, y) = separable(50, 4, 1);
        let labels = labels_from(&[y, vec![false; 50]], 50);
        let sets = vec![PairEmbeddingSet::from_matrix(0, &x).unwrap(), PairEmbeddingSet::from_matrix(1, &x).unwrap()];
        let err = train_in_parallel(&sets, &labels, &MatcherConfig::default()).unwrap_err();
        assert!(err.to_string().contains("intent 1"), "{err}");
        assert!(train_multilabel(&sets[0], &labels, &MatcherConfig::default()).is_err());
    }

    #[test]
    fn in_parallel_checkpoint_round_trip_and_naive_copy() {
        let (x, y) = separable(60, 4, 2);
        let labels = labels_from(&[y.clone(), y.iter().map(|b| !b).collect()], 60);
        let sets = vec![PairEmbeddingSet::from_matrix(0, &x).unwrap(), PairEmbeddingSet::from_matrix(1, &x).unwrap()];
        let cfg = MatcherConfig { hidden: 8, hyper: TrainHyper { epochs: 5, ..Default::default() }, ..Default::default() };
        let model = train_in_parallel(&sets, &labels, &cfg).unwrap();
        let ck = Checkpoint::from_bytes(&model.to_checkpoint(&cfg).to_bytes()).unwrap();
        let (back, cfg2) = InParallel::from_checkpoint(&ck).unwrap();
        assert_eq!(cfg2, cfg);
        let weights = |m: &InParallel| -> Vec<DenseMatrix> {
            m.matchers.iter().flat_map(|b| [&b.hidden.w, &b.hidden.b, &b.out.w, &b.out.b]).map(|p| p.value.clone()).collect()
        };
        assert_eq!(weights(&back), weights(&model));
        assert!(MultiLabelMatcher::from_checkpoint(&ck).is_err());

        let preds = model.predict(&sets);
        let naive = naive_multi_intent(&preds[0], 3);
        for p in &naive {
            assert_eq!(p.resolution(0).matched, preds[0].resolution(0).matched);
        }
        let reps = model.representations(&sets).unwrap();
        assert_eq!(reps[0].dim(), 8);
        assert_eq!(reps, model.representations(&sets).unwrap());
    }
}
