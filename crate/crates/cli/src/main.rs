use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mier_core::benchmark::{build_benchmark, generate_synthetic, positive_rate_report, BenchConfig, Benchmark, SynthConfig};
use mier_core::embedding::{embed_lexical, export_embeddings, import_embeddings, EmbedConfig};
use mier_core::flexer::{sweep, train_flexer, FlexerConfig, SweepGrid};
use mier_core::graph::{build_graph, GraphConfig, MultiplexGraph};
use mier_core::io;
use mier_core::matchers::{
    naive_multi_intent, train_binary, train_in_parallel, train_multilabel, InParallel, MatcherConfig,
};
use mier_core::metrics::{render_report, EvalReport, IntentInfo};
use mier_core::model::{detected_subsumers, Split};
use mier_core::nn::TrainHyper;
use mier_core::pipeline::{
    evaluate, init_threads, intent_infos, named_grid, read_predictions, run_pipeline, write_predictions, PipelineConfig,
    RunReport, ENV_THREADS,
};
use mier_core::{Error, ErrorKind, Result};

#[derive(Parser)]
#[command(name = "mier", version, about = "Multi-intent entity resolution")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build, generate or profile a labeled pair benchmark.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Lexical pair embeddings for a benchmark directory.
    Embed(EmbedArgs),
    /// Train a baseline matcher.
    TrainBaseline(BaselineArgs),
    /// Build the multiplex intent graph from per-intent representations.
    Graph(GraphArgs),
    /// Train the graph model for one target intent.
    TrainFlexer(FlexerArgs),
    /// Grid search over width, neighbor count and depth.
    Sweep(SweepArgs),
    /// Score prediction files against gold labels.
    Eval(EvalArgs),
    /// Print the text tables of a report.
    Report(ReportArgs),
    /// Run every stage from a config file.
    Pipeline(PipelineArgs),
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Block, label and split a record file with a rules config.
    Build {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        rules: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic benchmark.
    Synth {
        /// Target number of candidate pairs.
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        intents: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Positive rates per intent and split.
    Profile {
        #[arg(long)]
        labels: PathBuf,
    },
}

#[derive(Args)]
struct EmbedArgs {
    /// Benchmark directory.
    #[arg(long)]
    bench: PathBuf,
    #[arg(long, default_value_t = 256)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated attributes to serialize (default: all).
    #[arg(long, value_delimiter = ',')]
    fields: Option<Vec<String>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct HyperArgs {
    #[arg(long, default_value_t = 150)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl HyperArgs {
    fn hyper(&self) -> TrainHyper {
        TrainHyper { epochs: self.epochs, learning_rate: self.lr, weight_decay: self.weight_decay, seed: self.seed, ..Default::default() }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    InParallel,
    MultiLabel,
    Naive,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    /// Embedding manifest.
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Write predictions for every pair to this CSV.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Export intent-based representations to this directory.
    #[arg(long)]
    representations: Option<PathBuf>,
}

#[derive(Args)]
struct GraphArgs {
    /// Manifest of per-intent representations.
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Project layers of differing width to a common width.
    #[arg(long)]
    project: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FlexerArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    intent: usize,
    #[arg(long, default_value_t = 300)]
    h1: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    out: PathBuf,
    /// Write the target intent's predictions to this CSV.
    #[arg(long)]
    pred: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Manifest of per-intent representations.
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// `default`, `quick`, or a TOML file with `h1`, `k` and `layers` lists.
    #[arg(long, default_value = "default")]
    grid: String,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of `<method>.csv` prediction files.
    #[arg(long)]
    pred: PathBuf,
    /// Gold label file; the test split is scored.
    #[arg(long)]
    gold: PathBuf,
    #[arg(long, default_value = "in-parallel")]
    baseline: String,
    /// Intent definitions; subsumption is detected from training labels
    /// when absent.
    #[arg(long)]
    intents: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// An evaluation or pipeline report.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(ENV_THREADS) {
        Ok(t) => t.parse().map(Some).map_err(|_| Error::Config(format!("{ENV_THREADS} must be a positive integer, got `{t}`"))),
        Err(_) => Ok(None),
    }
}

fn run(cmd: Command) -> Result<()> {
    if !matches!(cmd, Command::Pipeline(_)) {
        init_threads(threads_from_env()?);
    }
    match cmd {
        Command::Bench(b) => bench(b),
        Command::Embed(a) => embed(a),
        Command::TrainBaseline(a) => train_baseline(a),
        Command::Graph(a) => graph(a),
        Command::TrainFlexer(a) => flexer(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::Pipeline(a) => {
            let mut cfg = PipelineConfig::load(&a.config)?;
            cfg.apply_env()?;
            let out = run_pipeline(&cfg)?;
            println!("{}", out.dir.join(mier_core::pipeline::REPORT_NAME).display());
            Ok(())
        }
    }
}

fn bench(cmd: BenchCmd) -> Result<()> {
    match cmd {
        BenchCmd::Build { records, rules, out } => {
            let cfg = BenchConfig::load(&rules)?;
            let b = build_benchmark(io::read_records(&records, &cfg.id_column)?, &cfg)?;
            b.write(&out)?;
            println!("{} records, {} pairs, {} intents", b.records.len(), b.pairs.len(), b.intents.len());
        }
        BenchCmd::Synth { n, intents, seed, out } => {
            let s = generate_synthetic(&SynthConfig::for_pairs(n, intents, seed))?;
            s.bench.write(&out)?;
            io::write_json(&out.join("mapping.json"), &s.mapping)?;
            println!("{} records, {} pairs, {} intents", s.bench.records.len(), s.bench.pairs.len(), s.bench.intents.len());
        }
        BenchCmd::Profile { labels } => {
            let rates = positive_rate_report(&io::read_labels(&labels)?);
            println!("{}", serde_json::to_string_pretty(&rates)?);
        }
    }
    Ok(())
}

fn embed(a: EmbedArgs) -> Result<()> {
    let b = Benchmark::read(&a.bench)?;
    let train = b.labels.pairs_in(Split::Train);
    let e = embed_lexical(&b.pairs, &b.records, &train, &EmbedConfig { dim: a.dim, seed: a.seed, fields: a.fields })?;
    let sets: Vec<_> = (0..b.intents.len()).map(|p| e.with_intent(p)).collect();
    let manifest = export_embeddings(&sets, &a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn train_baseline(a: BaselineArgs) -> Result<()> {
    let sets = import_embeddings(&a.embeddings)?;
    let labels = io::read_labels(&a.labels)?;
    if sets.len() != labels.num_intents() {
        return Err(Error::data(format!("{} embedding sets for {} intents", sets.len(), labels.num_intents())));
    }
    let cfg = MatcherConfig { hidden: a.hidden, batch_size: a.batch_size, hyper: a.hyper.hyper(), ..Default::default() };
    let (preds, reps) = match a.mode {
        Mode::InParallel => {
            let m = train_in_parallel(&sets, &labels, &cfg)?;
            m.to_checkpoint(&cfg).save(&a.out)?;
            (m.predict(&sets), m.representations(&sets)?)
        }
        Mode::MultiLabel => {
            let x = sets[0].to_matrix();
            let (m, _) = train_multilabel(&sets[0], &labels, &cfg)?;
            m.to_checkpoint(&cfg).save(&a.out)?;
            (m.predict(&x), m.representations(&x)?)
        }
        Mode::Naive => {
            let x = sets[0].to_matrix();
            let (train, valid) = (labels.pairs_in(Split::Train), labels.pairs_in(Split::Valid));
            let (m, trace) = train_binary(&x, &labels.column(0), &train, &valid, &cfg, cfg.hyper.seed)?;
            let pred = m.predict(&x);
            let reps = vec![mier_core::embedding::PairEmbeddingSet::from_matrix(0, &m.representation(&x))?];
            InParallel { matchers: vec![m], traces: vec![trace] }.to_checkpoint(&cfg).save(&a.out)?;
            (naive_multi_intent(&pred, labels.num_intents()), reps)
        }
    };
    if let Some(p) = &a.pred {
        write_predictions(p, &preds)?;
    }
    if let Some(dir) = &a.representations {
        export_embeddings(&reps, dir)?;
    }
    Ok(())
}

fn graph(a: GraphArgs) -> Result<()> {
    let sets = import_embeddings(&a.embeddings)?;
    let g = build_graph(&sets, &GraphConfig { k: a.k, project: a.project, seed: a.seed })?;
    g.write(&a.out)?;
    println!(
        "{} nodes, {} intra-layer edges, {} inter-layer edges",
        g.node_count(),
        g.intra_edge_count(),
        g.inter_edge_count()
    );
    Ok(())
}

fn flexer(a: FlexerArgs) -> Result<()> {
    let g = MultiplexGraph::read(&a.graph)?;
    let labels = io::read_labels(&a.labels)?;
    let cfg = FlexerConfig { target_intent: a.intent, h1: a.h1, layers: a.layers, hyper: a.hyper.hyper() };
    let (m, trace) = train_flexer(&g, &labels, &cfg)?;
    m.to_checkpoint(&cfg).save(&a.out)?;
    if let Some(p) = &a.pred {
        write_predictions(p, &[m.predict(&g, a.intent)])?;
    }
    println!("best epoch {} (validation F1 {:.4})", trace.best_epoch, trace.valid_score[trace.best_epoch]);
    Ok(())
}

fn load_grid(choice: &str) -> Result<SweepGrid> {
    let path = Path::new(choice);
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return toml::from_str(&text).map_err(|e| Error::Config(format!("{choice}: {}", e.message())));
    }
    named_grid(choice)
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let grid = load_grid(&a.grid)?;
    let sets = import_embeddings(&a.embeddings)?;
    let labels = io::read_labels(&a.labels)?;
    let hyper = a.hyper.hyper();
    let res = sweep(&sets, &labels, &grid, &GraphConfig { seed: hyper.seed, ..Default::default() }, &hyper)?;
    io::write_json(&a.out, &res)?;
    for (p, (without, with)) in res.knn_ablation.iter().enumerate() {
        let b = res.best(p);
        let fmt = |v: &Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        println!(
            "intent {p}: h1={} k={} layers={} valid F1 {:.4} test F1 {:.4} | k=0 {} k>0 {}",
            b.h1,
            b.k,
            b.layers,
            b.valid_f1,
            b.test_f1,
            fmt(without),
            fmt(with)
        );
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let labels = io::read_labels(&a.gold)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(&a.pred)
        .map_err(|e| Error::io(&a.pred, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::data(format!("{}: no prediction files (*.csv)", a.pred.display())));
    }
    let methods = files
        .iter()
        .map(|f| Ok((f.file_stem().expect("csv file").to_string_lossy().into_owned(), read_predictions(f)?)))
        .collect::<Result<Vec<_>>>()?;
    let infos = match &a.intents {
        Some(path) => intent_infos(&io::read_intents(path)?),
        None => detected_subsumers(&labels.restricted_to(Split::Train))
            .into_iter()
            .enumerate()
            .map(|(p, supersets)| IntentInfo { intent_id: p, name: format!("intent{p}"), supersets })
            .collect(),
    };
    let report = evaluate(&methods, &labels, &infos, &a.baseline)?;
    io::write_json(&a.out, &report)?;
    print!("{}", render_report(&report));
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let value: serde_json::Value = io::read_json(&a.input)?;
    if value.get("seeds").is_some() {
        let run: RunReport = serde_json::from_value(value)?;
        for s in &run.seeds {
            println!("== seed {}", s.seed);
            print!("{}", render_report(&s.report));
        }
        for c in &run.comparisons {
            println!(
                "{} vs {}: MI-F not worse in {}/{} seeds, preventable error not worse in {}/{}",
                c.method, c.baseline, c.mi_f1_not_worse, c.seeds, c.preventable_error_not_worse, c.seeds
            );
        }
    } else {
        let r: EvalReport = serde_json::from_value(value)?;
        print!("{}", render_report(&r));
    }
    Ok(())
}
