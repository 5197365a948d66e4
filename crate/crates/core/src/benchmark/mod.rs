//! Candidate-pair construction and per-intent labeling, plus a synthetic
//! multi-intent benchmark generator.

pub mod blocking;
pub mod rules;
pub mod split;
pub mod synth;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use blocking::{block_qgram, cross_group_negatives, BlockingConfig};
pub use rules::{label_intent, IntentRule, LabelOutcome};
pub use split::{positive_rate_report, split, PositiveRates};
pub use synth::{generate_synthetic, SynthConfig};

use crate::error::{Error, Result};
use crate::io;
use crate::model::{
    reconcile_subsumption, validate_intents, CandidatePairSet, Dataset, IntentLabelMatrix, IntentSpec, Record, Split,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntentDef {
    pub name: String,
    #[serde(default)]
    pub subsumed_by: Vec<usize>,
    pub rule: IntentRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_ratios")]
    pub ratios: [f64; 3],
    #[serde(default)]
    pub seed: u64,
}

fn default_ratios() -> [f64; 3] {
    [3.0, 1.0, 1.0]
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratios: default_ratios(),
            seed: 0,
        }
    }
}

/// Optional extra negatives drawn across groups of records that share a
/// value of `group_field`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NegativesConfig {
    pub group_field: String,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Rules file for `bench build`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_id_column")]
    pub id_column: String,
    #[serde(default)]
    pub blocking: BlockingConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub negatives: Option<NegativesConfig>,
    pub intents: Vec<IntentDef>,
}

fn default_id_column() -> String {
    "id".into()
}

impl BenchConfig {
    /// Parses a rules file and loads referenced duplicate lists relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: BenchConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for i in &mut cfg.intents {
            i.rule.resolve_files(base)?;
        }
        Ok(cfg)
    }
}

/// Everything a benchmark directory holds.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub records: Dataset,
    pub pairs: CandidatePairSet,
    pub labels: IntentLabelMatrix,
    pub intents: Vec<IntentSpec>,
}

impl Benchmark {
    pub fn write(&self, dir: &Path) -> Result<()> {
        io::create_dir(dir)?;
        io::write_records(&dir.join("records.jsonl"), self.records.records())?;
        io::write_pairs(&dir.join("pairs.jsonl"), &self.pairs)?;
        io::write_labels(&dir.join("labels.jsonl"), &self.labels)?;
        io::write_intents(&dir.join("intents.json"), &self.intents)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let records = Dataset::new(io::read_records(&dir.join("records.jsonl"), "id")?)?;
        let pairs = io::read_pairs(&dir.join("pairs.jsonl"))?;
        let labels = io::read_labels(&dir.join("labels.jsonl"))?;
        let intents = io::read_intents(&dir.join("intents.json"))?;
        if labels.num_pairs() != pairs.len() {
            return Err(Error::data(format!("{} label rows for {} pairs", labels.num_pairs(), pairs.len())));
        }
        if labels.num_intents() != intents.len() {
            return Err(Error::data(format!("{} label columns for {} intents", labels.num_intents(), intents.len())));
        }
        Ok(Benchmark { records, pairs, labels, intents })
    }
}

/// Blocks, labels and splits `records` according to `cfg`.
pub fn build_benchmark(records: Vec<Record>, cfg: &BenchConfig) -> Result<Benchmark> {
    if cfg.intents.is_empty() {
        return Err(Error::Config("at least one intent is required".into()));
    }
    let records = Dataset::new(records)?;
    let mut pairs = block_qgram(records.records(), &cfg.blocking)?;
    if let Some(neg) = &cfg.negatives {
        let mut groups: std::collections::BTreeMap<&str, Vec<Record>> = Default::default();
        for r in records.records() {
            if let Some(g) = r.get(&neg.group_field) {
                groups.entry(g).or_default().push(r.clone());
            }
        }
        let groups: Vec<Vec<Record>> = groups.into_values().collect();
        let extra = cross_group_negatives(&groups, &cfg.blocking, neg.n, neg.seed)?;
        pairs = CandidatePairSet::from_unordered(
            pairs.iter().chain(extra.iter()).map(|p| (p.left_id.clone(), p.right_id.clone())),
        )?;
    }
    let mut columns = Vec::with_capacity(cfg.intents.len());
    for def in &cfg.intents {
        columns.push(label_intent(&pairs, &records, &def.rule)?.labels);
    }
    let splits = split(pairs.len(), cfg.split.ratios, cfg.split.seed)?;
    let labels = IntentLabelMatrix::from_columns(&columns, splits)?;
    let declared: Vec<IntentSpec> = cfg
        .intents
        .iter()
        .enumerate()
        .map(|(i, d)| IntentSpec {
            intent_id: i,
            name: d.name.clone(),
            subsumed_by: d.subsumed_by.clone(),
        })
        .collect();
    validate_intents(&declared)?;
    let intents = reconcile_subsumption(&declared, &labels.restricted_to(Split::Train));
    Ok(Benchmark { records, pairs, labels, intents })
}
