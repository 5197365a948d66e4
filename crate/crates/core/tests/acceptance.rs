//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 4 6`.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use mier_core::embedding::PairEmbeddingSet;
use mier_core::flexer::{layer_dims, train_flexer, FlexerConfig, FlexerModel};
use mier_core::graph::{build_graph, knn_bruteforce, GraphConfig, MultiplexGraph};
use mier_core::matchers::{f1_on, BinaryMatcher, MultiLabelMatcher};
use mier_core::metrics::{mi_average, residual_error};
use mier_core::model::{IntentLabelMatrix, Split};
use mier_core::nn::loss::{ce_loss, softmax_ce_rows, weighted_bce_grad, weighted_bce_loss};
use mier_core::nn::matrix::DenseMatrix;
use mier_core::nn::ops::{
    linear, linear_backward, relu, relu_backward, sigmoid, sigmoid_backward, softmax, softmax_backward,
};
use mier_core::nn::param::{adam_step, Parameter, TrainHyper};
use mier_core::pipeline::{run_pipeline, PipelineConfig, FLEXER, IN_PARALLEL, REPORT_NAME};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    /// `None` means skipped.
    pass: Option<bool>,
    detail: String,
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn verdict(pass: bool, detail: String) -> Outcome {
    Outcome { pass: Some(pass), detail }
}

fn main() -> ExitCode {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 9] = [
        (1, "metric values", metric_values),
        (2, "graph counts", graph_counts),
        (3, "kNN oracle", knn_oracle),
        (4, "gradient checks", gradient_checks),
        (5, "loss values", loss_values),
        (6, "degenerate graph", degenerate_graph),
        (7, "synthetic MIER and determinism", synthetic_mier),
        (9, "performance envelope", performance),
        (10, "published positive rates", published_rates),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !only.is_empty() && !only.contains(&id) && !(id == 7 && only.contains(&8)) {
            continue;
        }
        let start = Instant::now();
        let out = run();
        let secs = start.elapsed().as_secs_f64();
        let tag = match out.pass {
            Some(true) => "PASS",
            Some(false) => {
                failed += 1;
                "FAIL"
            }
            None => "SKIP",
        };
        println!("{tag} [{id}] {name} ({secs:.1}s)");
        for line in out.detail.lines() {
            println!("    {line}");
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(-scale..scale)).collect()).unwrap()
}

fn random_sets(r: &mut ChaCha8Rng, n: usize, p: usize, dim: usize) -> Vec<PairEmbeddingSet> {
    (0..p)
        .map(|q| PairEmbeddingSet::new(q, dim, (0..n * dim).map(|_| r.gen_range(-1.0f32..1.0)).collect()).unwrap())
        .collect()
}

// 1 -------------------------------------------------------------------------

fn metric_values() -> Outcome {
    let residual = residual_error(0.958, 0.901).unwrap();
    let mean = mi_average(&[0.958, 0.956, 0.972, 0.988, 0.944]).unwrap();
    let ok = (residual - 57.6).abs() <= 0.1 && (mean - 0.964).abs() <= 0.0005;
    verdict(ok, format!("residual_error(.958, .901) = {residual:.4} (57.6 ± 0.1); mi_average = {mean:.5} (.964 ± .0005)"))
}

// 2 -------------------------------------------------------------------------

fn counts_match(g: &MultiplexGraph, n: usize, p: usize, k: usize) -> bool {
    g.node_count() == n * p
        && g.inter_edge_count() == n * p * (p - 1)
        && g.inter_edges().iter().map(|s| s.edges.len()).sum::<usize>() == n * p * (p - 1)
        && g.intra_edge_count() == n * p * k
        && g.intra_edges().len() == n * p * k
}

fn graph_counts() -> Outcome {
    let mut r = rng(2);
    let g = build_graph(&random_sets(&mut r, 11, 3, 8), &GraphConfig { k: 3, ..GraphConfig::default() }).unwrap();
    let fixed = (g.node_count(), g.inter_edge_count(), g.intra_edge_count());
    let mut ok = fixed == (33, 66, 99) && counts_match(&g, 11, 3, 3);
    let mut bad = Vec::new();
    for _ in 0..50 {
        let n = r.gen_range(2..40);
        let p = r.gen_range(1..7);
        let k = r.gen_range(0..n);
        let g = build_graph(&random_sets(&mut r, n, p, 4), &GraphConfig { k, ..GraphConfig::default() }).unwrap();
        if !counts_match(&g, n, p, k) {
            bad.push(format!("(n={n}, P={p}, k={k})"));
        }
    }
    ok &= bad.is_empty();
    verdict(
        ok,
        format!(
            "(n=11, P=3, k=3): {} nodes, {} inter-layer, {} intra-layer edges\n50 random triples: {} mismatches {}",
            fixed.0,
            fixed.1,
            fixed.2,
            bad.len(),
            bad.join(" ")
        ),
    )
}

// 3 -------------------------------------------------------------------------

/// Full sort of every other point by (squared distance, index).
fn knn_quadratic(x: &DenseMatrix, k: usize) -> Vec<Vec<usize>> {
    let n = x.rows;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut all = Vec::with_capacity(n - 1);
        for j in 0..n {
            if j == i {
                continue;
            }
            let mut d = 0.0;
            for c in 0..x.cols {
                let diff = x.get(i, c) - x.get(j, c);
                d += diff * diff;
            }
            all.push((d, j));
        }
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out.push(all.into_iter().take(k).map(|(_, j)| j).collect());
    }
    out
}

fn knn_oracle() -> Outcome {
    let start = Instant::now();
    let x = random_matrix(&mut rng(3), 200, 16, 1.0);
    let mut lines = Vec::new();
    let mut ok = true;
    for k in [2, 6, 10] {
        let same = knn_bruteforce(&x, k) == knn_quadratic(&x, k);
        ok &= same;
        lines.push(format!("k = {k}: {}", if same { "identical" } else { "differs" }));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 5.0;
    lines.push(format!("{secs:.2}s (budget 5s)"));
    verdict(ok, lines.join("\n"))
}

// 4 -------------------------------------------------------------------------

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

#[derive(Default)]
struct FdStats {
    checked: usize,
    /// Coordinates whose finite difference straddles a ReLU kink.
    kinks: usize,
    max_err: f64,
    worst: String,
}

impl FdStats {
    /// Central differences against `analytic`. With `kinks_allowed`, a
    /// coordinate that misses the tolerance is excluded when the one-sided
    /// slopes disagree by at least the central-difference error, which is
    /// what a kink inside the stencil produces and a wrong gradient does not.
    fn check(&mut self, label: &str, f: &dyn Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], kinks_allowed: bool) {
        assert_eq!(x.len(), analytic.len(), "{label}: gradient length");
        let mut v = x.to_vec();
        let f0 = f(x);
        for i in 0..x.len() {
            v[i] = x[i] + FD_STEP;
            let up = f(&v);
            v[i] = x[i] - FD_STEP;
            let down = f(&v);
            v[i] = x[i];
            let central = (up - down) / (2.0 * FD_STEP);
            let err = (analytic[i] - central).abs() / analytic[i].abs().max(central.abs()).max(1e-6);
            self.checked += 1;
            if err >= FD_TOL && kinks_allowed {
                let fwd = (up - f0) / FD_STEP;
                let bwd = (f0 - down) / FD_STEP;
                if (fwd - bwd).abs() >= (central - analytic[i]).abs() {
                    self.kinks += 1;
                    continue;
                }
            }
            if err > self.max_err {
                self.max_err = err;
                self.worst = format!("{label} coordinate {i}: analytic {:.6e}, numeric {central:.6e}", analytic[i]);
            }
        }
    }
}

fn flatten(ps: Vec<&mut Parameter>) -> (Vec<f64>, Vec<f64>) {
    let mut values = Vec::new();
    let mut grads = Vec::new();
    for p in ps {
        values.extend_from_slice(&p.value.data);
        grads.extend_from_slice(&p.grad.data);
    }
    (values, grads)
}

fn assign(ps: Vec<&mut Parameter>, v: &[f64]) {
    let mut at = 0;
    for p in ps {
        let n = p.value.data.len();
        p.value.data.copy_from_slice(&v[at..at + n]);
        at += n;
    }
    assert_eq!(at, v.len());
}

fn weighted_sum(y: &DenseMatrix, c: &DenseMatrix) -> f64 {
    y.data.iter().zip(&c.data).map(|(a, b)| a * b).sum()
}

fn concat(parts: &[&DenseMatrix]) -> Vec<f64> {
    parts.iter().flat_map(|m| m.data.iter().copied()).collect()
}

fn random_labels(r: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    (0..n).map(|_| r.gen_bool(0.4)).collect()
}

fn check_linear(r: &mut ChaCha8Rng, s: &mut FdStats) {
    let (x, w, b, c) = (random_matrix(r, 3, 4, 1.0), random_matrix(r, 4, 5, 1.0), random_matrix(r, 1, 5, 1.0), random_matrix(r, 3, 5, 1.0));
    let f = |v: &[f64]| {
        let x = DenseMatrix::from_vec(3, 4, v[..12].to_vec()).unwrap();
        let w = DenseMatrix::from_vec(4, 5, v[12..32].to_vec()).unwrap();
        let b = DenseMatrix::from_vec(1, 5, v[32..].to_vec()).unwrap();
        weighted_sum(&linear(&x, &w, Some(&b)), &c)
    };
    let (dx, dw, db) = linear_backward(&x, &w, &c);
    s.check("linear", &f, &concat(&[&x, &w, &b]), &concat(&[&dx, &dw, &db]), false);
}

fn check_activations(r: &mut ChaCha8Rng, relu_s: &mut FdStats, sig_s: &mut FdStats, soft_s: &mut FdStats) {
    let x = random_matrix(r, 4, 5, 2.0);
    let c = random_matrix(r, 4, 5, 1.0);
    let shaped = |v: &[f64]| DenseMatrix::from_vec(4, 5, v.to_vec()).unwrap();
    relu_s.check("relu", &|v| weighted_sum(&relu(&shaped(v)), &c), &x.data, &relu_backward(&x, &c).data, true);
    sig_s.check("sigmoid", &|v| weighted_sum(&sigmoid(&shaped(v)), &c), &x.data, &sigmoid_backward(&sigmoid(&x), &c).data, false);
    soft_s.check("softmax", &|v| weighted_sum(&softmax(&shaped(v)), &c), &x.data, &softmax_backward(&softmax(&x), &c).data, false);
}

fn check_losses(r: &mut ChaCha8Rng, ce_s: &mut FdStats, bce_s: &mut FdStats, point: usize) {
    let z = random_matrix(r, 6, 2, 3.0);
    let y = random_labels(r, 6);
    let rows: Vec<usize> = (0..6).filter(|_| r.gen_bool(0.7)).collect();
    let mean = point.is_multiple_of(2);
    let f = |v: &[f64]| softmax_ce_rows(&DenseMatrix::from_vec(6, 2, v.to_vec()).unwrap(), &y, &rows, mean).0;
    ce_s.check("softmax CE", &f, &z.data, &softmax_ce_rows(&z, &y, &rows, mean).1.data, false);

    let p = r.gen_range(1..5);
    let logits: Vec<f64> = (0..p).map(|_| r.gen_range(-4.0..4.0)).collect();
    let t = random_labels(r, p);
    let w: Vec<f64> = (0..p).map(|_| r.gen_range(0.5..2.0)).collect();
    let f = |v: &[f64]| weighted_bce_loss(v, &t, &w).unwrap();
    bce_s.check("weighted BCE", &f, &logits, &weighted_bce_grad(&logits, &t, &w).unwrap(), false);
}

fn randomize_biases(r: &mut ChaCha8Rng, ps: Vec<&mut Parameter>) {
    for p in ps.into_iter().filter(|p| p.value.rows == 1) {
        p.value = random_matrix(r, 1, p.value.cols, 0.1);
    }
}

fn check_matchers(r: &mut ChaCha8Rng, bin_s: &mut FdStats, ml_s: &mut FdStats) {
    let x = random_matrix(r, 8, 5, 1.0);
    let y = random_labels(r, 8);
    let batch: Vec<usize> = (0..8).filter(|_| r.gen_bool(0.75)).chain([0]).collect();
    let mut m = BinaryMatcher::new(5, 4, r.gen());
    // Zero initial biases put rows with a dead input exactly on a kink.
    randomize_biases(r, m.params_mut());
    m.loss_and_grads(&x, &y, &batch);
    let (v, g) = flatten(m.params_mut());
    let f = |v: &[f64]| {
        let mut c = m.clone();
        assign(c.params_mut(), v);
        c.loss_and_grads(&x, &y, &batch)
    };
    bin_s.check("binary matcher", &f, &v, &g, true);

    let labels: Vec<Vec<bool>> = (0..8).map(|_| random_labels(r, 2)).collect();
    let w = [1.0, r.gen_range(0.5..2.0)];
    let mut m = MultiLabelMatcher::new(5, 4, 3, 2, r.gen());
    randomize_biases(r, m.params_mut());
    m.loss_and_grads(&x, &labels, &w, &batch).unwrap();
    let (v, g) = flatten(m.params_mut());
    let f = |v: &[f64]| {
        let mut c = m.clone();
        assign(c.params_mut(), v);
        c.loss_and_grads(&x, &labels, &w, &batch).unwrap()
    };
    ml_s.check("multi-label matcher", &f, &v, &g, true);
}

fn check_flexer(r: &mut ChaCha8Rng, s: &mut FdStats, dims: &[usize]) {
    let n = r.gen_range(4..=10);
    let k = r.gen_range(1..4).min(n - 1);
    let g = build_graph(&random_sets(r, n, 2, 4), &GraphConfig { k, ..GraphConfig::default() }).unwrap();
    let y = random_labels(r, n);
    let mut train: Vec<usize> = (1..n).filter(|_| r.gen_bool(0.7)).collect();
    train.insert(0, 0);
    let target = r.gen_range(0..2);
    let mut m = FlexerModel::new(4, dims, r.gen());
    randomize_biases(r, m.params_mut());
    m.loss_and_grads(&g, &y, &train, target);
    let (v, grad) = flatten(m.params_mut());
    let f = |v: &[f64]| {
        let mut c = m.clone();
        assign(c.params_mut(), v);
        c.loss_and_grads(&g, &y, &train, target).0
    };
    s.check(&format!("graph model L={}", dims.len()), &f, &v, &grad, true);
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut r = rng(4);
    let names = [
        "linear", "relu", "sigmoid", "softmax", "softmax CE", "weighted BCE", "binary matcher",
        "multi-label matcher", "graph conv layer (L=1)", "graph model (P=2, L=2)",
    ];
    let mut stats: Vec<FdStats> = names.iter().map(|_| FdStats::default()).collect();
    for point in 0..100 {
        let [lin, rel, sig, soft, ce, bce, bin, ml, conv, full] = &mut stats[..] else { unreachable!() };
        check_linear(&mut r, lin);
        check_activations(&mut r, rel, sig, soft);
        check_losses(&mut r, ce, bce, point);
        check_matchers(&mut r, bin, ml);
        check_flexer(&mut r, conv, &[3]);
        check_flexer(&mut r, full, &[4, 3]);
    }
    let secs = start.elapsed().as_secs_f64();
    let mut ok = secs < 30.0;
    let mut lines = Vec::new();
    for (name, s) in names.iter().zip(&stats) {
        // Kink exclusions must stay rare or they could hide a real error.
        let pass = s.max_err < FD_TOL && s.kinks * 100 <= s.checked;
        ok &= pass;
        lines.push(format!(
            "{name}: {} coordinates, max rel err {:.2e}, {} kink exclusions{}",
            s.checked,
            s.max_err,
            s.kinks,
            if pass { String::new() } else { format!(" <- {}", s.worst) }
        ));
    }
    lines.push(format!("100 random points per layer, {secs:.1}s (budget 30s)"));
    verdict(ok, lines.join("\n"))
}

// 5 -------------------------------------------------------------------------

fn loss_values() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let ce = ce_loss(0.5, true);
    let bce = weighted_bce_loss(&[0.0, 0.0], &[true, false], &[1.0, 1.0]).unwrap();
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let z: f64 = r.gen_range(-12.0..12.0);
        let y = r.gen_bool(0.5);
        let sig = 1.0 / (1.0 + (-z).exp());
        worst = worst.max((weighted_bce_loss(&[z], &[y], &[1.0]).unwrap() - ce_loss(sig, y)).abs());
    }
    let ok = (ce - ln2).abs() <= 1e-9 && (bce - ln2).abs() <= 1e-9 && worst <= 1e-9;
    verdict(
        ok,
        format!(
            "ce_loss(0.5, 1) - ln 2 = {:.1e}; weighted BCE (0,0)/(1,0) - ln 2 = {:.1e}; P=1 BCE vs CE(sigmoid) max |diff| over 1000 logits = {worst:.1e}",
            ce - ln2,
            bce - ln2
        ),
    )
}

// 6 -------------------------------------------------------------------------

/// Argmax with ties to non-match.
fn argmax_labels(logits: &DenseMatrix) -> Vec<bool> {
    (0..logits.rows).map(|i| logits.get(i, 1) > logits.get(i, 0)).collect()
}

/// Two dense layers with no activation in between, trained full-batch on
/// summed CE with the best validation epoch kept.
struct FeedForward {
    hidden_w: Parameter,
    hidden_b: Parameter,
    out_w: Parameter,
    out_b: Parameter,
}

impl FeedForward {
    fn logits(&self, x: &DenseMatrix) -> DenseMatrix {
        let h = linear(x, &self.hidden_w.value, Some(&self.hidden_b.value));
        linear(&h, &self.out_w.value, Some(&self.out_b.value))
    }

    fn params(&mut self) -> [&mut Parameter; 4] {
        [&mut self.hidden_w, &mut self.hidden_b, &mut self.out_w, &mut self.out_b]
    }

    fn train(mut self, x: &DenseMatrix, y: &[bool], train: &[usize], valid: &[usize], hyper: &TrainHyper) -> (DenseMatrix, usize) {
        let mut best = (self.logits(x), 0, f64::NEG_INFINITY);
        for epoch in 0..hyper.epochs {
            let h = linear(x, &self.hidden_w.value, Some(&self.hidden_b.value));
            let logits = linear(&h, &self.out_w.value, Some(&self.out_b.value));
            let (_, dl) = softmax_ce_rows(&logits, y, train, false);
            let (dh, dow, dob) = linear_backward(&h, &self.out_w.value, &dl);
            let (_, dhw, dhb) = linear_backward(x, &self.hidden_w.value, &dh);
            for (p, g) in self.params().into_iter().zip([dhw, dhb, dow, dob]) {
                p.grad = g;
            }
            let score = f1_on(&argmax_labels(&logits), y, valid);
            if score > best.2 {
                best = (logits, epoch, score);
            }
            adam_step(&mut self.params(), hyper);
        }
        (best.0, best.1)
    }
}

fn degenerate_graph() -> Outcome {
    let mut r = rng(6);
    let (n, d) = (100, 32);
    let set = random_sets(&mut r, n, 1, d).remove(0);
    let x = set.to_matrix();
    let direction: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let y: Vec<bool> = (0..n).map(|i| x.row(i).iter().zip(&direction).map(|(a, b)| a * b).sum::<f64>() > 0.5).collect();
    let splits: Vec<Split> = (0..n).map(|i| [Split::Train, Split::Train, Split::Train, Split::Valid, Split::Test][i % 5]).collect();
    let labels = IntentLabelMatrix::new(1, y.iter().map(|&v| vec![v]).collect(), splits).unwrap();
    let g = build_graph(&[set], &GraphConfig { k: 0, ..GraphConfig::default() }).unwrap();
    let cfg = FlexerConfig { target_intent: 0, h1: 100, layers: 1, hyper: TrainHyper { epochs: 60, seed: 11, ..TrainHyper::default() } };

    let model = FlexerModel::new(d, &layer_dims(cfg.h1, cfg.layers), cfg.hyper.seed);
    let reference = FeedForward {
        hidden_w: Parameter::new(model.convs[0].w_self.value.clone()),
        hidden_b: Parameter::new(model.convs[0].b.value.clone()),
        out_w: Parameter::new(model.head_w.value.clone()),
        out_b: Parameter::new(model.head_b.value.clone()),
    };
    let init_same = model.logits(&g, 0) == reference.logits(&x);

    let (trained, trace) = train_flexer(&g, &labels, &cfg).unwrap();
    let train = labels.pairs_in(Split::Train);
    let valid = labels.pairs_in(Split::Valid);
    let (ref_logits, ref_best) = reference.train(&x, &y, &train, &valid, &cfg.hyper);
    let graph_logits = trained.logits(&g, 0);
    let trained_same = graph_logits == ref_logits && trace.best_epoch == ref_best;
    let same_predictions = argmax_labels(&graph_logits) == argmax_labels(&ref_logits);
    let positives = argmax_labels(&graph_logits).iter().filter(|&&v| v).count();
    verdict(
        init_same && trained_same && same_predictions,
        format!(
            "{n} pairs, k=0, P=1, one layer of width {}: initial logits bit-identical: {init_same}\n\
             after {} epochs (best epoch {} vs {ref_best}): logits bit-identical: {trained_same}, predictions identical: {same_predictions} ({positives} predicted matches)",
            cfg.h1, cfg.hyper.epochs, trace.best_epoch
        ),
    )
}

// 7 and 8 ------------------------------------------------------------------

fn synthetic_config(out_dir: &std::path::Path) -> PipelineConfig {
    let text = format!(
        r#"
[run]
seeds = [0, 1, 2, 3, 4]
out_dir = "{}"

[bench]
source = "synthetic"

[bench.synthetic]
target_pairs = 2000
intents = 3

[embed]
dim = 1024
fields = ["title"]

[baseline]
methods = ["in-parallel"]

[graph]
k = 4

[flexer]
h1 = 100
layers = 2

[eval]
baseline = "in-parallel"
"#,
        out_dir.display()
    );
    PipelineConfig::from_toml(&text).unwrap()
}

fn synthetic_mier() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let first_dir = tmp.path().join("first");
    let start = Instant::now();
    let out = match run_pipeline(&synthetic_config(&first_dir)) {
        Ok(o) => o,
        Err(e) => return verdict(false, format!("pipeline failed: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let summary = |name: &str| out.report.summary.iter().find(|m| m.name == name).expect("method summarized");
    let (ip, fx) = (summary(IN_PARALLEL), summary(FLEXER));
    let mut lines = vec!["seed  in-parallel MI-F  graph MI-F  PE in-parallel  PE graph".to_string()];
    let mut f_wins = 0;
    let mut pe_wins = 0;
    for (i, seed) in out.report.seeds.iter().map(|s| s.seed).enumerate() {
        let (ip_pe, fx_pe) = (ip.preventable_error[i], fx.preventable_error[i]);
        f_wins += (fx.mi_f1[i] >= ip.mi_f1[i]) as usize;
        pe_wins += matches!((ip_pe, fx_pe), (Some(a), Some(b)) if b <= a) as usize;
        let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        lines.push(format!("{seed:>4}  {:>16.4}  {:>10.4}  {:>14}  {:>8}", ip.mi_f1[i], fx.mi_f1[i], show(ip_pe), show(fx_pe)));
    }
    let ip_floor = ip.mi_f1.iter().all(|&v| v >= 0.90);
    let crit7 = ip_floor && f_wins >= 4 && pe_wins >= 4 && secs < 600.0;
    lines.push(format!(
        "in-parallel MI-F >= 0.90 in every seed: {ip_floor} (mean {:.4}); graph MI-F >= in-parallel in {f_wins}/5 seeds; PE <= in {pe_wins}/5 seeds",
        ip.mean_mi_f1
    ));
    lines.push(format!("criterion 7: {} in {secs:.0}s (budget 600s)", if crit7 { "PASS" } else { "FAIL" }));

    let second_dir = tmp.path().join("second");
    let crit8 = match run_pipeline(&synthetic_config(&second_dir)) {
        Ok(_) => {
            let a = fs::read(first_dir.join(REPORT_NAME)).unwrap();
            let b = fs::read(second_dir.join(REPORT_NAME)).unwrap();
            lines.push(format!("criterion 8: repeat in a fresh directory, report.json byte-identical: {} ({} bytes)", a == b, a.len()));
            a == b
        }
        Err(e) => {
            lines.push(format!("criterion 8: repeat failed: {e}"));
            false
        }
    };
    verdict(crit7 && crit8, lines.join("\n"))
}

// 9 -------------------------------------------------------------------------

fn performance() -> Outcome {
    let mut r = rng(9);
    let (n, p, d) = (5000, 3, 128);
    let sets = random_sets(&mut r, n, p, d);
    let t = Instant::now();
    let g = build_graph(&sets, &GraphConfig { k: 4, ..GraphConfig::default() }).unwrap();
    let graph_secs = t.elapsed().as_secs_f64();
    let rows: Vec<Vec<bool>> = (0..n).map(|_| (0..p).map(|_| r.gen_bool(0.2)).collect()).collect();
    let splits: Vec<Split> = (0..n).map(|i| [Split::Train, Split::Train, Split::Train, Split::Valid, Split::Test][i % 5]).collect();
    let labels = IntentLabelMatrix::new(p, rows, splits).unwrap();
    let cfg = FlexerConfig { target_intent: 0, h1: 100, layers: 2, hyper: TrainHyper::default() };
    let t = Instant::now();
    let (model, _) = train_flexer(&g, &labels, &cfg).unwrap();
    let pred = model.predict(&g, 0);
    let train_secs = t.elapsed().as_secs_f64();
    assert_eq!(pred.labels.len(), n);

    let big = random_sets(&mut r, 15000, p, d);
    let t = Instant::now();
    let g = build_graph(&big, &GraphConfig { k: 10, ..GraphConfig::default() }).unwrap();
    let knn_secs = t.elapsed().as_secs_f64();
    assert_eq!(g.intra_edge_count(), 15000 * p * 10);

    let ok = train_secs < 60.0 && knn_secs < 900.0;
    verdict(
        ok,
        format!(
            "{n} pairs x {p} intents, {d}-d features, 150 epochs, 2 layers (h1 = 100): train + test {train_secs:.1}s (budget 60s); graph build {graph_secs:.1}s\n\
             exhaustive kNN (k = 10) on 15000 vectors x {p} intents, {d}-d: {knn_secs:.1}s (budget 900s)"
        ),
    )
}

// 10 ------------------------------------------------------------------------

/// Equivalence-intent positive rates per split, in percent.
const PUBLISHED_EQ_RATES: [(Split, f64); 3] = [(Split::Train, 15.1), (Split::Valid, 16.2), (Split::Test, 15.4)];

fn published_rates() -> Outcome {
    let Some(path) = std::env::var_os("MIER_PUBLISHED_LABELS").map(PathBuf::from) else {
        return Outcome { pass: None, detail: "set MIER_PUBLISHED_LABELS to an ingested AmazonMI labels.jsonl to run".into() };
    };
    let labels = match mier_core::io::read_labels(&path) {
        Ok(l) => l,
        Err(e) => return verdict(false, format!("{}: {e}", path.display())),
    };
    let rates = mier_core::benchmark::positive_rate_report(&labels);
    let mut ok = true;
    let mut lines = Vec::new();
    for (split, expected) in PUBLISHED_EQ_RATES {
        let got = 100.0 * rates.intents[0][&split];
        ok &= (got - expected).abs() <= 2.0;
        lines.push(format!("{}: {got:.1}% (expected {expected}% ± 2)", split.as_str()));
    }
    verdict(ok, lines.join("\n"))
}
