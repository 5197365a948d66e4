//! Config-driven end-to-end runs: benchmark, embeddings, baselines, graph,
//! graph model, evaluation. Each stage writes into a directory named after
//! the hash of its configuration and inputs, so unchanged stages are reused.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::benchmark::{build_benchmark, generate_synthetic, BenchConfig, Benchmark, SynthConfig};
use crate::embedding::{embed_lexical, export_embeddings, import_embeddings, EmbedConfig, MANIFEST_NAME};
use crate::error::{Error, Result};
use crate::flexer::{layer_dims, sweep, train_flexer, FlexerConfig, FlexerModel, SweepGrid};
use crate::graph::{build_graph, GraphConfig, MultiplexGraph};
use crate::io;
use crate::matchers::{
    naive_multi_intent, train_in_parallel, train_multilabel, Extraction, MatcherConfig, Prediction,
};
use crate::metrics::{build_report, render_report, EvalReport, IntentInfo, MethodPredictions, REPORT_SCHEMA_VERSION};
use crate::model::{IntentLabelMatrix, IntentSpec, Split};
use crate::nn::{Checkpoint, TrainHyper};

pub const ENV_OUT_DIR: &str = "MIER_OUT_DIR";
pub const ENV_THREADS: &str = "MIER_THREADS";

/// Dotted keys every pipeline config must set.
pub const REQUIRED_KEYS: [&str; 8] =
    ["run.seeds", "bench.source", "embed.dim", "graph.k", "flexer.h1", "flexer.layers", "eval.baseline", "baseline.methods"];

pub const IN_PARALLEL: &str = "in-parallel";
pub const MULTI_LABEL: &str = "multi-label";
pub const NAIVE: &str = "naive";
pub const FLEXER: &str = "flexer";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub run: RunSection,
    pub bench: BenchSection,
    pub embed: EmbedSection,
    pub baseline: BaselineSection,
    pub graph: GraphSection,
    pub flexer: FlexerSection,
    #[serde(default)]
    pub train: TrainHyper,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub threads: Option<usize>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchSource {
    Synthetic,
    Records,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub source: BenchSource,
    /// Generator settings; the run seed replaces `seed`.
    #[serde(default)]
    pub synthetic: SynthConfig,
    #[serde(default)]
    pub records: Option<PathBuf>,
    #[serde(default)]
    pub rules: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedSection {
    pub dim: usize,
    #[serde(default)]
    pub fields: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    /// Methods to score besides the graph model; must include
    /// `in-parallel`, which always supplies predictions for comparison.
    pub methods: Vec<String>,
    #[serde(default)]
    pub extraction: Extraction,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_hidden")]
    pub branch_hidden: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_hidden() -> usize {
    128
}

fn default_batch() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    pub k: usize,
    #[serde(default)]
    pub project: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlexerSection {
    pub h1: usize,
    pub layers: usize,
    /// Per-intent grid search by validation F1; overrides `h1`, `layers`
    /// and `graph.k` when set.
    #[serde(default)]
    pub grid: Option<GridChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridChoice {
    Named(String),
    Explicit(SweepGrid),
}

impl GridChoice {
    pub fn resolve(&self) -> Result<SweepGrid> {
        match self {
            GridChoice::Named(name) => named_grid(name),
            GridChoice::Explicit(g) => Ok(g.clone()),
        }
    }
}

/// `default` is the full search space; `quick` a four-point subset.
pub fn named_grid(name: &str) -> Result<SweepGrid> {
    match name {
        "default" => Ok(SweepGrid::full()),
        "quick" => Ok(SweepGrid { h1: vec![100, 300], k: vec![0, 4], layers: vec![2] }),
        other => Err(Error::Config(format!("unknown grid `{other}` (expected `default` or `quick`)"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub baseline: String,
}

fn lookup<'a>(v: &'a toml::Value, dotted: &str) -> Option<&'a toml::Value> {
    dotted.split('.').try_fold(v, |cur, part| cur.get(part))
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        if let Some(missing) = REQUIRED_KEYS.iter().find(|k| lookup(&value, k).is_none()) {
            return Err(Error::MissingKey(missing.to_string()));
        }
        let cfg: PipelineConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.run.out_dir);
        cfg.bench.records.as_mut().map(rebase);
        cfg.bench.rules.as_mut().map(rebase);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.seeds.is_empty() {
            return Err(Error::Config("run.seeds must list at least one seed".into()));
        }
        if self.bench.source == BenchSource::Records && (self.bench.records.is_none() || self.bench.rules.is_none()) {
            let key = if self.bench.records.is_none() { "bench.records" } else { "bench.rules" };
            return Err(Error::MissingKey(key.into()));
        }
        if !self.baseline.methods.iter().any(|m| m == IN_PARALLEL) {
            return Err(Error::Config(format!("baseline.methods must include `{IN_PARALLEL}`")));
        }
        if let Some(bad) = self.baseline.methods.iter().find(|m| ![IN_PARALLEL, MULTI_LABEL, NAIVE].contains(&m.as_str())) {
            return Err(Error::Config(format!("unknown baseline method `{bad}`")));
        }
        if self.baseline.extraction == Extraction::MultiTask && !self.baseline.methods.iter().any(|m| m == MULTI_LABEL) {
            return Err(Error::Config(format!("multi-task extraction needs `{MULTI_LABEL}` in baseline.methods")));
        }
        if self.eval.baseline != FLEXER && !self.baseline.methods.contains(&self.eval.baseline) {
            return Err(Error::Config(format!("eval.baseline `{}` is not a configured method", self.eval.baseline)));
        }
        self.train.validate()?;
        FlexerConfig { h1: self.flexer.h1, layers: self.flexer.layers, ..Default::default() }.validate(1)?;
        if let Some(g) = &self.flexer.grid {
            g.resolve()?.validate()?;
        }
        Ok(())
    }

    /// Applies the environment overrides for output directory and thread
    /// count.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(dir) = std::env::var(ENV_OUT_DIR) {
            self.run.out_dir = PathBuf::from(dir);
        }
        if let Ok(t) = std::env::var(ENV_THREADS) {
            let n = t.parse().map_err(|_| Error::Config(format!("{ENV_THREADS} must be a positive integer, got `{t}`")))?;
            self.run.threads = Some(n);
        }
        Ok(())
    }

    /// Hash of everything that can change results; the output directory
    /// and thread count are left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run.out_dir = PathBuf::new();
        c.run.threads = None;
        // Input files enter through their content hashes; only the file
        // name stays so moving a checkout keeps the hash.
        for p in [&mut c.bench.records, &mut c.bench.rules].into_iter().flatten() {
            *p = p.file_name().map(PathBuf::from).unwrap_or_default();
        }
        io::sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }
}

/// Caps the global worker pool. Only the first call has an effect.
pub fn init_threads(threads: Option<usize>) {
    if let Some(n) = threads.filter(|&n| n > 0) {
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("thread pool already initialized");
        }
    }
}

// ---------------------------------------------------------------------------
// Predictions files

/// One CSV per method: `pair_id`, then `label_p` (0/1) and `score_p` for
/// each intent.
pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let p = preds.len();
    let mut header = vec!["pair_id".to_string()];
    header.extend((0..p).map(|q| format!("label_{q}")));
    header.extend((0..p).map(|q| format!("score_{q}")));
    w.write_record(&header)?;
    let n = preds.first().map_or(0, |x| x.labels.len());
    for i in 0..n {
        let mut row = vec![i.to_string()];
        row.extend(preds.iter().map(|x| (x.labels[i] as u8).to_string()));
        row.extend(preds.iter().map(|x| format!("{:.17e}", x.scores[i])));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let bad = |msg: String| Error::data(format!("{}: {msg}", path.display()));
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let p = (header.len().saturating_sub(1)) / 2;
    if header.len() != 2 * p + 1 || p == 0 || &header[0] != "pair_id" {
        return Err(bad("expected columns pair_id, label_*, score_*".into()));
    }
    let mut preds = vec![Prediction { labels: Vec::new(), scores: Vec::new() }; p];
    for (row_no, rec) in r.records().enumerate() {
        let rec = rec?;
        let id: usize = rec[0].parse().map_err(|_| bad(format!("row {row_no}: bad pair_id `{}`", &rec[0])))?;
        if id != row_no {
            return Err(bad(format!("row {row_no}: pair ids must be 0..n in order, found {id}")));
        }
        for q in 0..p {
            let label = match &rec[1 + q] {
                "0" => false,
                "1" => true,
                other => return Err(bad(format!("pair {id}: label `{other}` is not 0/1"))),
            };
            let score: f64 = rec[1 + p + q].parse().map_err(|_| bad(format!("pair {id}: bad score `{}`", &rec[1 + p + q])))?;
            if !score.is_finite() {
                return Err(Error::NonFinite(format!("{}: pair {id} score", path.display())));
            }
            preds[q].labels.push(label);
            preds[q].scores.push(score);
        }
    }
    Ok(preds)
}

/// Transposes per-intent predictions into per-pair rows restricted to
/// `rows`.
pub fn label_rows(preds: &[Prediction], rows: &[usize]) -> Vec<Vec<bool>> {
    rows.iter().map(|&i| preds.iter().map(|p| p.labels[i]).collect()).collect()
}

/// Intent descriptions for reports; supersets come from the declared
/// subsumption.
pub fn intent_infos(intents: &[IntentSpec]) -> Vec<IntentInfo> {
    intents
        .iter()
        .map(|s| IntentInfo { intent_id: s.intent_id, name: s.name.clone(), supersets: s.subsumed_by.clone() })
        .collect()
}

/// Scores every method on the test split.
pub fn evaluate(
    methods: &[(String, Vec<Prediction>)],
    labels: &IntentLabelMatrix,
    intents: &[IntentInfo],
    baseline: &str,
) -> Result<EvalReport> {
    let test = labels.pairs_in(Split::Test);
    for (name, preds) in methods {
        if preds.len() != labels.num_intents() || preds.iter().any(|p| p.labels.len() != labels.num_pairs()) {
            return Err(Error::Shape(format!(
                "predictions of `{name}` do not cover {} pairs x {} intents",
                labels.num_pairs(),
                labels.num_intents()
            )));
        }
    }
    let gold: Vec<Vec<bool>> = test.iter().map(|&i| labels.row(i).to_vec()).collect();
    let mp: Vec<MethodPredictions> = methods
        .iter()
        .map(|(name, preds)| MethodPredictions { name: name.clone(), labels: label_rows(preds, &test) })
        .collect();
    build_report(&mp, &gold, &test, intents, baseline)
}

// ---------------------------------------------------------------------------
// Stage cache

/// What a finished stage directory holds; written as `stage.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub key: String,
    pub inputs: BTreeMap<String, String>,
    /// Relative path to sha256, every file except `stage.json`.
    pub artifacts: BTreeMap<String, String>,
}

impl StageRecord {
    /// Hash over the artifact table; downstream stages key on it.
    pub fn digest(&self) -> String {
        io::sha256_hex(&serde_json::to_vec(&self.artifacts).expect("map serializes"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seed: Option<u64>,
    pub key: String,
    pub cached: bool,
    pub seconds: f64,
}

const STAGE_FILE: &str = "stage.json";

fn hash_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::io(dir, e))?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let path = e.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
                if rel != STAGE_FILE {
                    out.insert(rel, io::file_sha256(&path)?);
                }
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

fn verify_cached(dir: &Path, key: &str) -> Option<StageRecord> {
    let rec: StageRecord = io::read_json(&dir.join(STAGE_FILE)).ok()?;
    if rec.key != key {
        return None;
    }
    match hash_tree(dir) {
        Ok(found) if found == rec.artifacts => Some(rec),
        _ => None,
    }
}

/// Runs stage directories under one root.
pub struct StageRunner {
    root: PathBuf,
    pub timings: Vec<StageTiming>,
}

impl StageRunner {
    pub fn new(root: &Path) -> Result<Self> {
        io::create_dir(&root.join("stages"))?;
        Ok(StageRunner { root: root.to_path_buf(), timings: Vec::new() })
    }

    pub fn stage_dir(&self, rec: &StageRecord) -> PathBuf {
        self.root.join("stages").join(format!("{}-{}", rec.stage, &rec.key[..16]))
    }

    /// Runs `body` in a fresh directory unless a directory with the same key
    /// and intact artifacts exists. Failures are tagged with the stage name.
    pub fn run(
        &mut self,
        stage: &str,
        seed: Option<u64>,
        config: &impl Serialize,
        inputs: BTreeMap<String, String>,
        body: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<StageRecord> {
        let started = Instant::now();
        let material = serde_json::json!({
            "stage": stage, "config": config, "inputs": inputs, "version": env!("CARGO_PKG_VERSION"),
        });
        let key = io::sha256_hex(&serde_json::to_vec(&material)?);
        let dir = self.root.join("stages").join(format!("{stage}-{}", &key[..16]));
        if let Some(rec) = verify_cached(&dir, &key) {
            log::info!("stage {stage}: cached ({})", dir.display());
            self.timings.push(StageTiming { stage: stage.into(), seed, key, cached: true, seconds: started.elapsed().as_secs_f64() });
            return Ok(rec);
        }
        let tmp = dir.with_extension("partial");
        for d in [&dir, &tmp] {
            if d.exists() {
                fs::remove_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
        }
        io::create_dir(&tmp)?;
        log::info!("stage {stage}: running");
        body(&tmp).map_err(|e| e.in_stage(stage))?;
        let rec = StageRecord { stage: stage.into(), key: key.clone(), inputs, artifacts: hash_tree(&tmp)? };
        io::write_json(&tmp.join(STAGE_FILE), &rec)?;
        fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
        self.timings.push(StageTiming { stage: stage.into(), seed, key, cached: false, seconds: started.elapsed().as_secs_f64() });
        Ok(rec)
    }
}

// ---------------------------------------------------------------------------
// Run outputs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChosenHyper {
    pub intent: usize,
    pub h1: usize,
    pub k: usize,
    pub layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub name: String,
    pub mi_f1: Vec<f64>,
    pub mean_mi_f1: f64,
    /// Mean literal preventable error per seed.
    pub preventable_error: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub method: String,
    pub baseline: String,
    pub seeds: usize,
    /// Seeds where the method's MI-F is at least the baseline's.
    pub mi_f1_not_worse: usize,
    /// Seeds where the method's preventable error is at most the
    /// baseline's; seeds where either is undefined do not count.
    pub preventable_error_not_worse: usize,
}

/// Contents of `report.json`: only values that depend on inputs and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub seeds: Vec<SeedReport>,
    pub summary: Vec<MethodSummary>,
    pub comparisons: Vec<Comparison>,
    pub chosen: BTreeMap<u64, Vec<ChosenHyper>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub crate_version: String,
    pub embedding_format: u32,
    pub report_schema: u32,
}

/// Provenance of a run; `manifest.json` in the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub config: PipelineConfig,
    pub seeds: Vec<u64>,
    /// Per seed, hash of the benchmark stage's files.
    pub datasets: BTreeMap<u64, String>,
    /// Hashes of input files named by the config.
    pub inputs: BTreeMap<String, String>,
    pub versions: Versions,
    pub stages: Vec<StageTiming>,
    pub hyperparameters: BTreeMap<u64, Vec<ChosenHyper>>,
    pub artifacts: BTreeMap<String, String>,
}

pub const REPORT_NAME: &str = "report.json";
pub const REPORT_TEXT_NAME: &str = "report.txt";
pub const RUN_MANIFEST_NAME: &str = "manifest.json";

fn summarize(seeds: &[SeedReport], baseline: &str) -> (Vec<MethodSummary>, Vec<Comparison>) {
    let names: Vec<String> = seeds.first().map(|s| s.report.methods.iter().map(|m| m.name.clone()).collect()).unwrap_or_default();
    let summary: Vec<MethodSummary> = names
        .iter()
        .map(|name| {
            let per: Vec<_> = seeds.iter().map(|s| s.report.method(name).expect("same methods per seed")).collect();
            let mi_f1: Vec<f64> = per.iter().map(|m| m.mi_f1).collect();
            MethodSummary {
                name: name.clone(),
                mean_mi_f1: mi_f1.iter().sum::<f64>() / mi_f1.len() as f64,
                mi_f1,
                preventable_error: per.iter().map(|m| m.mean_preventable_error()).collect(),
            }
        })
        .collect();
    let base = summary.iter().find(|m| m.name == baseline);
    let comparisons = summary
        .iter()
        .filter(|m| m.name != baseline)
        .filter_map(|m| {
            let b = base?;
            Some(Comparison {
                method: m.name.clone(),
                baseline: baseline.into(),
                seeds: seeds.len(),
                mi_f1_not_worse: m.mi_f1.iter().zip(&b.mi_f1).filter(|(x, y)| x >= y).count(),
                preventable_error_not_worse: m
                    .preventable_error
                    .iter()
                    .zip(&b.preventable_error)
                    .filter(|(x, y)| matches!((x, y), (Some(x), Some(y)) if x <= y))
                    .count(),
            })
        })
        .collect();
    (summary, comparisons)
}

/// Everything a finished run produced.
pub struct RunOutput {
    pub dir: PathBuf,
    pub report: RunReport,
    pub manifest: RunManifest,
}

struct SeedContext<'a> {
    cfg: &'a PipelineConfig,
    seed: u64,
    hyper: TrainHyper,
}

impl SeedContext<'_> {
    fn matcher_config(&self) -> MatcherConfig {
        MatcherConfig {
            hidden: self.cfg.baseline.hidden,
            branch_hidden: self.cfg.baseline.branch_hidden,
            batch_size: self.cfg.baseline.batch_size,
            intent_weights: Vec::new(),
            hyper: self.hyper,
        }
    }
}

fn inputs(pairs: &[(&str, &StageRecord)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, r)| (k.to_string(), r.digest())).collect()
}

fn load_bench_source(cfg: &PipelineConfig) -> Result<Option<(Benchmark, BTreeMap<String, String>)>> {
    if cfg.bench.source != BenchSource::Records {
        return Ok(None);
    }
    let records_path = cfg.bench.records.as_ref().expect("validated");
    let rules_path = cfg.bench.rules.as_ref().expect("validated");
    let rules = BenchConfig::load(rules_path)?;
    let records = io::read_records(records_path, &rules.id_column)?;
    let bench = build_benchmark(records, &rules)?;
    let mut hashes = BTreeMap::new();
    hashes.insert("bench.records".to_string(), io::file_sha256(records_path)?);
    hashes.insert("bench.rules".to_string(), io::file_sha256(rules_path)?);
    Ok(Some((bench, hashes)))
}

/// Executes every stage for every seed and writes `report.json`,
/// `report.txt` and `manifest.json` under the configured output directory.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunOutput> {
    cfg.validate()?;
    init_threads(cfg.run.threads);
    let root = cfg.run.out_dir.clone();
    io::create_dir(&root)?;
    let mut runner = StageRunner::new(&root)?;
    let external = load_bench_source(cfg).map_err(|e| e.in_stage("bench"))?;
    let input_hashes = external.as_ref().map(|(_, h)| h.clone()).unwrap_or_default();
    let mut seed_reports = Vec::new();
    let mut datasets = BTreeMap::new();
    let mut chosen_all = BTreeMap::new();
    for &seed in &cfg.run.seeds {
        let ctx = SeedContext { cfg, seed, hyper: TrainHyper { seed, ..cfg.train } };
        let (report, bench_digest, chosen) = run_seed(&ctx, &mut runner, external.as_ref().map(|(b, _)| b), &input_hashes)?;
        datasets.insert(seed, bench_digest);
        chosen_all.insert(seed, chosen);
        seed_reports.push(SeedReport { seed, report });
    }
    let (summary, comparisons) = summarize(&seed_reports, &cfg.eval.baseline);
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config_hash: cfg.hash(),
        seeds: seed_reports,
        summary,
        comparisons,
        chosen: chosen_all.clone(),
    };
    io::write_json(&root.join(REPORT_NAME), &report)?;
    let text: String = report
        .seeds
        .iter()
        .map(|s| format!("== seed {}\n{}\n", s.seed, render_report(&s.report)))
        .collect();
    fs::write(root.join(REPORT_TEXT_NAME), text).map_err(|e| Error::io(root.join(REPORT_TEXT_NAME), e))?;

    let mut artifacts = BTreeMap::new();
    for name in [REPORT_NAME, REPORT_TEXT_NAME] {
        artifacts.insert(name.to_string(), io::file_sha256(&root.join(name))?);
    }
    let mut stage_keys: Vec<&StageTiming> = runner.timings.iter().collect();
    stage_keys.dedup_by_key(|t| t.key.clone());
    for t in stage_keys {
        let dir = root.join("stages").join(format!("{}-{}", t.stage, &t.key[..16]));
        let rec: StageRecord = io::read_json(&dir.join(STAGE_FILE))?;
        let prefix = dir.strip_prefix(&root).expect("under root").to_string_lossy().replace('\\', "/");
        for (rel, h) in rec.artifacts {
            artifacts.insert(format!("{prefix}/{rel}"), h);
        }
    }
    let manifest = RunManifest {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        seeds: cfg.run.seeds.clone(),
        datasets,
        inputs: input_hashes,
        versions: Versions {
            crate_version: env!("CARGO_PKG_VERSION").into(),
            embedding_format: crate::embedding::FORMAT_VERSION,
            report_schema: REPORT_SCHEMA_VERSION,
        },
        stages: runner.timings,
        hyperparameters: chosen_all,
        artifacts,
    };
    io::write_json(&root.join(RUN_MANIFEST_NAME), &manifest)?;
    Ok(RunOutput { dir: root, report, manifest })
}

fn run_seed(
    ctx: &SeedContext,
    runner: &mut StageRunner,
    external: Option<&Benchmark>,
    input_hashes: &BTreeMap<String, String>,
) -> Result<(EvalReport, String, Vec<ChosenHyper>)> {
    let cfg = ctx.cfg;
    let seed = ctx.seed;

    // Benchmark.
    let synth = SynthConfig { seed, ..cfg.bench.synthetic.clone() };
    let bench_rec = match external {
        Some(b) => runner.run("bench", Some(seed), &(cfg.bench.source, input_hashes), BTreeMap::new(), |dir| b.write(dir))?,
        None => runner.run("bench", Some(seed), &synth, BTreeMap::new(), |dir| generate_synthetic(&synth)?.bench.write(dir))?,
    };
    let bench_dir = runner.stage_dir(&bench_rec);
    let bench = Benchmark::read(&bench_dir).map_err(|e| e.in_stage("bench"))?;
    let p = bench.intents.len();
    let train = bench.labels.pairs_in(Split::Train);

    // Lexical embeddings.
    let embed_cfg = EmbedConfig { dim: cfg.embed.dim, seed, fields: cfg.embed.fields.clone() };
    let embed_rec = runner.run("embed", Some(seed), &embed_cfg, inputs(&[("bench", &bench_rec)]), |dir| {
        let e = embed_lexical(&bench.pairs, &bench.records, &train, &embed_cfg)?;
        let sets: Vec<_> = (0..p).map(|q| e.with_intent(q)).collect();
        export_embeddings(&sets, dir).map(|_| ())
    })?;
    let sets = import_embeddings(&runner.stage_dir(&embed_rec).join(MANIFEST_NAME)).map_err(|e| e.in_stage("embed"))?;

    // Baselines; each writes predictions and, when extracting from it,
    // representations.
    let mcfg = ctx.matcher_config();
    let base_inputs = inputs(&[("bench", &bench_rec), ("embed", &embed_rec)]);
    let ip_rec = runner.run(IN_PARALLEL, Some(seed), &mcfg, base_inputs.clone(), |dir| {
        let m = train_in_parallel(&sets, &bench.labels, &mcfg)?;
        m.to_checkpoint(&mcfg).save(&dir.join("model.ckpt"))?;
        write_predictions(&dir.join("predictions.csv"), &m.predict(&sets))?;
        export_embeddings(&m.representations(&sets)?, &dir.join("representations")).map(|_| ())
    })?;
    let ip_dir = runner.stage_dir(&ip_rec);
    let ip_preds = read_predictions(&ip_dir.join("predictions.csv")).map_err(|e| e.in_stage(IN_PARALLEL))?;
    let mut methods: Vec<(String, Vec<Prediction>)> = Vec::new();
    let mut repr_rec = ip_rec.clone();
    for name in &cfg.baseline.methods {
        match name.as_str() {
            IN_PARALLEL => methods.push((name.clone(), ip_preds.clone())),
            NAIVE => methods.push((name.clone(), naive_multi_intent(&ip_preds[0], p))),
            MULTI_LABEL => {
                let rec = runner.run(MULTI_LABEL, Some(seed), &mcfg, base_inputs.clone(), |dir| {
                    let (m, trace) = train_multilabel(&sets[0], &bench.labels, &mcfg)?;
                    m.to_checkpoint(&mcfg).save(&dir.join("model.ckpt"))?;
                    io::write_json(&dir.join("trace.json"), &trace)?;
                    write_predictions(&dir.join("predictions.csv"), &m.predict(&sets[0].to_matrix()))?;
                    export_embeddings(&m.representations(&sets[0].to_matrix())?, &dir.join("representations")).map(|_| ())
                })?;
                let preds = read_predictions(&runner.stage_dir(&rec).join("predictions.csv")).map_err(|e| e.in_stage(MULTI_LABEL))?;
                if cfg.baseline.extraction == Extraction::MultiTask {
                    repr_rec = rec;
                }
                methods.push((name.clone(), preds));
            }
            other => return Err(Error::Config(format!("unknown baseline method `{other}`"))),
        }
    }
    let reps = import_embeddings(&runner.stage_dir(&repr_rec).join("representations").join(MANIFEST_NAME))?;

    // Graph model: optional per-intent grid search, then one model per
    // intent on its chosen graph.
    let chosen: Vec<ChosenHyper> = match &cfg.flexer.grid {
        None => (0..p).map(|q| ChosenHyper { intent: q, h1: cfg.flexer.h1, k: cfg.graph.k, layers: cfg.flexer.layers }).collect(),
        Some(choice) => {
            let grid = choice.resolve()?;
            let gcfg = GraphConfig { k: 0, project: cfg.graph.project, seed };
            let rec = runner.run("sweep", Some(seed), &(&grid, &gcfg, &ctx.hyper), inputs(&[("bench", &bench_rec), ("representations", &repr_rec)]), |dir| {
                io::write_json(&dir.join("sweep.json"), &sweep(&reps, &bench.labels, &grid, &gcfg, &ctx.hyper)?)
            })?;
            let res: crate::flexer::SweepResult = io::read_json(&runner.stage_dir(&rec).join("sweep.json"))?;
            (0..p)
                .map(|q| {
                    let b = res.best(q);
                    ChosenHyper { intent: q, h1: b.h1, k: b.k, layers: b.layers }
                })
                .collect()
        }
    };
    let mut graphs: BTreeMap<usize, (StageRecord, MultiplexGraph)> = BTreeMap::new();
    let mut flexer_preds = Vec::with_capacity(p);
    for c in &chosen {
        if !graphs.contains_key(&c.k) {
            let gcfg = GraphConfig { k: c.k, project: cfg.graph.project, seed };
            let rec = runner.run("graph", Some(seed), &gcfg, inputs(&[("representations", &repr_rec)]), |dir| build_graph(&reps, &gcfg)?.write(dir))?;
            let g = MultiplexGraph::read(&runner.stage_dir(&rec)).map_err(|e| e.in_stage("graph"))?;
            graphs.insert(c.k, (rec, g));
        }
        let (grec, g) = &graphs[&c.k];
        let fcfg = FlexerConfig {
            target_intent: c.intent,
            h1: c.h1,
            layers: c.layers,
            hyper: TrainHyper { seed: seed + c.intent as u64, ..ctx.hyper },
        };
        let rec = runner.run(FLEXER, Some(seed), &fcfg, inputs(&[("bench", &bench_rec), ("graph", grec)]), |dir| {
            let (m, trace) = train_flexer(g, &bench.labels, &fcfg)?;
            m.to_checkpoint(&fcfg).save(&dir.join("model.ckpt"))?;
            io::write_json(&dir.join("trace.json"), &trace)?;
            write_predictions(&dir.join("predictions.csv"), &[m.predict(g, c.intent)])
        })?;
        let mut pred = read_predictions(&runner.stage_dir(&rec).join("predictions.csv")).map_err(|e| e.in_stage(FLEXER))?;
        flexer_preds.push(pred.remove(0));
    }
    methods.push((FLEXER.into(), flexer_preds));

    let infos = intent_infos(&bench.intents);
    let report = evaluate(&methods, &bench.labels, &infos, &cfg.eval.baseline).map_err(|e| e.in_stage("eval"))?;
    Ok((report, bench_rec.digest(), chosen))
}

/// Loads a graph model checkpoint and predicts its target intent.
pub fn predict_with_checkpoint(ck_path: &Path, g: &MultiplexGraph) -> Result<(FlexerConfig, Prediction)> {
    let (m, cfg) = FlexerModel::from_checkpoint(&Checkpoint::load(ck_path)?)?;
    if m.convs[0].in_dim() != g.features.cols {
        return Err(Error::Shape(format!("checkpoint expects {}-wide features, graph has {}", m.convs[0].in_dim(), g.features.cols)));
    }
    if m.convs.iter().map(|c| c.out_dim()).collect::<Vec<_>>() != layer_dims(cfg.h1, cfg.layers) {
        log::warn!("checkpoint layer widths differ from its configured h1/layers");
    }
    Ok((cfg.clone(), m.predict(g, cfg.target_intent)))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[run]
seeds = [0]
[bench]
source = "synthetic"
[embed]
dim = 64
[baseline]
methods = ["in-parallel"]
[graph]
k = 2
[flexer]
h1 = 100
layers = 2
[eval]
baseline = "in-parallel"
"#;

    #[test]
    fn minimal_config_parses() {
        let cfg = PipelineConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.graph.k, 2);
        assert_eq!(cfg.train, TrainHyper::default());
        assert_eq!(cfg.baseline.batch_size, 32);
    }

    #[test]
    fn missing_keys_are_named() {
        for key in REQUIRED_KEYS {
            let (section, field) = key.split_once('.').unwrap();
            let mut in_section = false;
            let text: String = MINIMAL
                .lines()
                .filter(|l| {
                    if l.starts_with('[') {
                        in_section = *l == format!("[{section}]");
                    }
                    !(in_section && l.starts_with(&format!("{field} ")))
                })
                .map(|l| format!("{l}\n"))
                .collect();
            let err = PipelineConfig::from_toml(&text).unwrap_err();
            assert!(matches!(&err, Error::MissingKey(k) if k == key), "{key}: {err}");
            assert!(err.to_string().contains(key));
        }
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let extra = MINIMAL.replace("k = 2", "k = 2\nfoo = 1");
        assert_eq!(PipelineConfig::from_toml(&extra).unwrap_err().kind(), crate::ErrorKind::Config);
        let bad = MINIMAL.replace("h1 = 100", "h1 = 120");
        assert_eq!(PipelineConfig::from_toml(&bad).unwrap_err().kind(), crate::ErrorKind::Config);
        let grid = MINIMAL.replace("layers = 2", "layers = 2\ngrid = \"huge\"");
        assert_eq!(PipelineConfig::from_toml(&grid).unwrap_err().kind(), crate::ErrorKind::Config);
        let explicit = MINIMAL.replace("layers = 2", "layers = 2\ngrid = { h1 = [100], k = [0, 2], layers = [2] }");
        assert!(PipelineConfig::from_toml(&explicit).unwrap().flexer.grid.is_some());
    }

    #[test]
    fn predictions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let preds = vec![
            Prediction { labels: vec![true, false, true], scores: vec![0.9, 0.1, 0.5000000000000001] },
            Prediction { labels: vec![false, false, true], scores: vec![1e-300, 0.0, 1.0] },
        ];
        let path = dir.path().join("m.csv");
        write_predictions(&path, &preds).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), preds);
        fs::write(&path, "pair_id,label_0,score_0\n0,2,0.5\n").unwrap();
        let err = read_predictions(&path).unwrap_err();
        assert!(err.to_string().contains("pair 0"), "{err}");
    }

    #[test]
    fn stage_cache_reuses_and_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let mut runner = StageRunner::new(dir.path()).unwrap();
        let mut calls = 0;
        let mut run = |runner: &mut StageRunner, cfg: u32| {
            runner
                .run("demo", None, &cfg, BTreeMap::new(), |d| {
                    calls += 1;
                    fs::write(d.join("out.txt"), format!("{cfg}")).map_err(|e| Error::io(d, e))
                })
                .unwrap()
        };
        let a = run(&mut runner, 1);
        let b = run(&mut runner, 1);
        assert_eq!(a, b);
        let c = run(&mut runner, 2);
        assert_ne!(a.key, c.key);
        fs::write(runner.stage_dir(&a).join("out.txt"), "tampered").unwrap();
        run(&mut runner, 1);
        assert_eq!(calls, 3);
        assert_eq!(runner.timings.iter().filter(|t| t.cached).count(), 1);
        assert_eq!(fs::read_to_string(runner.stage_dir(&a).join("out.txt")).unwrap(), "1");
    }

    #[test]
    fn stage_failure_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut runner = StageRunner::new(dir.path()).unwrap();
        let err = runner.run("graph", None, &0, BTreeMap::new(), |_| Err(Error::data("missing pair ids 3"))).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("graph") && msg.contains("missing pair ids 3"), "{msg}");
        assert_eq!(err.kind(), crate::ErrorKind::Data);
    }
}
