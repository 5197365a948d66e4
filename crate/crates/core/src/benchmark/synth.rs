//! Synthetic product-offer benchmark with nested resolution intents.
//!
//! Every entity is a distinct (brand, category, product line) combination
//! with its own model code. Offers of an entity get noisy titles (token
//! order, casing, character swaps, filler words). Intents are equalities of
//! hidden attributes, so each one is induced by an entity mapping and the
//! equivalence intent is contained in every other intent.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::blocking::{blocked_index_pairs, normalize_text, qgrams, BlockingConfig};
use super::rules::{label_intent, IntentRule};
use super::split::split;
use super::Benchmark;
use crate::error::{Error, Result};
use crate::model::{
    validate_intents, CandidatePairSet, Dataset, EntityMapping, IntentLabelMatrix, IntentSpec, Record,
};

/// Largest number of intents the generator defines.
pub const MAX_SYNTH_INTENTS: usize = 6;

/// Share of the sampled pairs taken from each hidden relation; `rest` is
/// drawn uniformly from all remaining blocked non-equivalent pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairMix {
    pub equivalent: f64,
    pub same_brand_category: f64,
    pub same_brand: f64,
    pub rest: f64,
}

impl Default for PairMix {
    fn default() -> Self {
        PairMix {
            equivalent: 0.15,
            same_brand_category: 0.10,
            same_brand: 0.15,
            rest: 0.60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Records to generate (fewer if the entity space runs out).
    pub n_records: usize,
    pub intents: usize,
    pub seed: u64,
    pub target_pairs: usize,
    pub brands: usize,
    pub main_categories: usize,
    pub sub_categories: usize,
    pub lines_per_brand: usize,
    pub max_offers: usize,
    pub typo_rate: f64,
    pub upper_rate: f64,
    pub filler_rate: f64,
    pub mix: PairMix,
    pub split_ratios: [f64; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_records: 300,
            intents: 3,
            seed: 0,
            target_pairs: 2000,
            brands: 5,
            main_categories: 3,
            sub_categories: 2,
            lines_per_brand: 4,
            max_offers: 4,
            typo_rate: 0.0,
            upper_rate: 0.2,
            filler_rate: 0.3,
            mix: PairMix::default(),
            split_ratios: [3.0, 1.0, 1.0],
        }
    }
}

impl SynthConfig {
    /// Defaults sized for about `pairs` candidate pairs: records and brands
    /// grow in steps of the default 2000-pair scale.
    pub fn for_pairs(pairs: usize, intents: usize, seed: u64) -> Self {
        let base = SynthConfig::default();
        let factor = pairs.div_ceil(base.target_pairs).max(1);
        SynthConfig {
            n_records: base.n_records * factor,
            brands: base.brands * factor,
            intents,
            seed,
            target_pairs: pairs,
            ..base
        }
    }
}

/// Generated benchmark plus the hidden entity mapping of every intent.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub bench: Benchmark,
    pub mapping: EntityMapping,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Hidden {
    entity: usize,
    brand: usize,
    main: usize,
    sub: usize,
}

const SYLLABLES: [&str; 16] = [
    "ka", "zo", "mi", "tra", "lo", "ven", "qui", "bor", "sel", "dax", "ru", "pen", "tor", "gal", "fi", "nex",
];
const FILLERS: [&str; 5] = ["new", "sale", "2pk", "deal", "original"];

/// Pseudo-words, unique within one generator run.
struct Words<'a> {
    rng: &'a mut ChaCha8Rng,
    used: HashSet<String>,
}

impl Words<'_> {
    fn word(&mut self, syllables: usize) -> String {
        loop {
            let w: String = (0..syllables).map(|_| *SYLLABLES.choose(self.rng).unwrap()).collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn intent_names(p: usize) -> Result<Vec<&'static str>> {
    Ok(match p {
        2 => vec!["equivalence", "brand"],
        3 => vec!["equivalence", "brand", "brand_category"],
        4 => vec!["equivalence", "brand", "category", "brand_category"],
        5 => vec!["equivalence", "brand", "main_category", "category", "brand_category"],
        6 => vec!["equivalence", "brand", "main_category", "category", "brand_category", "brand_main_category"],
        _ => {
            return Err(Error::Config(format!(
                "synthetic generator supports 2..={MAX_SYNTH_INTENTS} intents, got {p}"
            )))
        }
    })
}

/// Hidden key of a record under a named intent.
fn intent_key(name: &str, h: &Hidden) -> String {
    match name {
        "equivalence" => format!("e{}", h.entity),
        "brand" => format!("b{}", h.brand),
        "main_category" => format!("m{}", h.main),
        "category" => format!("m{}s{}", h.main, h.sub),
        "brand_category" => format!("b{}m{}s{}", h.brand, h.main, h.sub),
        "brand_main_category" => format!("b{}m{}", h.brand, h.main),
        _ => unreachable!("unknown synthetic intent {name}"),
    }
}

/// Attributes an intent is defined over; intent `q` is contained in `p`
/// when `p`'s attributes are a subset of `q`'s.
fn intent_attrs(name: &str) -> &'static [&'static str] {
    match name {
        "equivalence" => &["entity", "brand", "main", "sub"],
        "brand" => &["brand"],
        "main_category" => &["main"],
        "category" => &["main", "sub"],
        "brand_category" => &["brand", "main", "sub"],
        "brand_main_category" => &["brand", "main"],
        _ => unreachable!("unknown synthetic intent {name}"),
    }
}

fn intent_rule(name: &str, dups: &[(String, String)]) -> IntentRule {
    let eq = |f: &str| IntentRule::FieldEquality { field: f.into() };
    match name {
        "equivalence" => IntentRule::EquivalenceList { pairs: dups.to_vec(), file: None },
        "brand" => eq("brand"),
        "main_category" => eq("main_category"),
        "category" => eq("category"),
        "brand_category" => IntentRule::Conjunction { children: vec![eq("brand"), eq("category")] },
        "brand_main_category" => IntentRule::Conjunction { children: vec![eq("brand"), eq("main_category")] },
        _ => unreachable!("unknown synthetic intent {name}"),
    }
}

fn perturb(token: &str, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> String {
    let mut t: Vec<char> = token.chars().collect();
    if t.len() > 3 && rng.gen_bool(cfg.typo_rate) {
        let i = rng.gen_range(0..t.len() - 1);
        t.swap(i, i + 1);
    }
    let s: String = t.into_iter().collect();
    if rng.gen_bool(cfg.upper_rate) {
        s.to_uppercase()
    } else {
        s
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        intent_names(self.intents)?;
        let positive = [
            ("n_records", self.n_records),
            ("target_pairs", self.target_pairs),
            ("brands", self.brands),
            ("main_categories", self.main_categories),
            ("sub_categories", self.sub_categories),
            ("lines_per_brand", self.lines_per_brand),
            ("max_offers", self.max_offers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("synthetic `{name}` must be positive")));
            }
        }
        for (name, v) in [("typo_rate", self.typo_rate), ("upper_rate", self.upper_rate), ("filler_rate", self.filler_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("synthetic `{name}` must be in [0, 1], got {v}")));
            }
        }
        let m = self.mix;
        let shares = [m.equivalent, m.same_brand_category, m.same_brand, m.rest];
        if shares.iter().any(|s| !(*s >= 0.0)) || shares.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("pair mix shares must be non-negative and not all zero".into()));
        }
        Ok(())
    }
}

/// Generates records, blocked candidate pairs, labels for `cfg.intents`
/// nested intents, a 3:1:1 split and the hidden entity mappings.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let names = intent_names(cfg.intents)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Vocabulary.
    let mut words = Words { rng: &mut rng, used: HashSet::new() };
    let brands: Vec<String> = (0..cfg.brands).map(|_| words.word(2)).collect();
    let mains: Vec<String> = (0..cfg.main_categories).map(|_| words.word(3)).collect();
    let subs: Vec<Vec<String>> = (0..cfg.main_categories)
        .map(|_| (0..cfg.sub_categories).map(|_| format!("{} {}", words.word(2), words.word(2))).collect())
        .collect();
    let lines: Vec<Vec<String>> = (0..cfg.brands)
        .map(|_| (0..cfg.lines_per_brand).map(|_| words.word(2)).collect())
        .collect();
    let lines: Vec<Vec<String>> = lines
        .into_iter()
        .map(|ls| ls.into_iter().map(|l| format!("{l}{}", rng.gen_range(1..100))).collect())
        .collect();

    // Entities: distinct (brand, main, sub, line) tuples in random order.
    let (nb, nm, ns, nl) = (cfg.brands, cfg.main_categories, cfg.sub_categories, cfg.lines_per_brand);
    let space = nb * nm * ns * nl;
    let mut order: Vec<usize> = (0..space).collect();
    order.shuffle(&mut rng);

    let mut records = Vec::new();
    let mut hidden = Vec::new();
    let mut codes = HashSet::new();
    for (entity, &slot) in order.iter().enumerate() {
        if records.len() >= cfg.n_records {
            break;
        }
        let (brand, rem) = (slot / (nm * ns * nl), slot % (nm * ns * nl));
        let (main, rem) = (rem / (ns * nl), rem % (ns * nl));
        let (sub, line) = (rem / nl, rem % nl);
        let code = loop {
            let c = format!("{}{}", SYLLABLES.choose(&mut rng).unwrap(), rng.gen_range(100..1000));
            if codes.insert(c.clone()) {
                break c;
            }
        };
        let h = Hidden { entity, brand, main, sub };
        for _ in 0..rng.gen_range(1..=cfg.max_offers) {
            let mut tail = vec![subs[main][sub].clone(), code.clone(), mains[main].clone()];
            if rng.gen_bool(cfg.filler_rate) {
                tail.push(FILLERS.choose(&mut rng).unwrap().to_string());
            }
            tail.shuffle(&mut rng);
            let title: Vec<String> = [brands[brand].clone(), lines[brand][line].clone()]
                .into_iter()
                .chain(tail)
                .flat_map(|t| t.split(' ').map(str::to_string).collect::<Vec<_>>())
                .map(|t| perturb(&t, cfg, &mut rng))
                .collect();
            let id = format!("s{:05}", records.len());
            records.push(
                Record::new(id)
                    .with_field("title", Some(&title.join(" ")))
                    .with_field("brand", Some(&brands[brand]))
                    .with_field("category", Some(&format!("{} > {}", mains[main], subs[main][sub])))
                    .with_field("main_category", Some(&mains[main])),
            );
            hidden.push(h);
        }
    }
    if records.len() < cfg.n_records {
        log::warn!(
            "entity space exhausted: generated {} of {} requested records",
            records.len(),
            cfg.n_records
        );
    }

    // Blocked pairs, bucketed by hidden relation.
    let block = BlockingConfig::default();
    let grams: Vec<_> = records
        .iter()
        .map(|r| r.get(&block.field).map(|t| qgrams(&normalize_text(t), block.q)))
        .collect();
    let blocked = blocked_index_pairs(&grams, &block, &|_, _| true);
    let (mut eq, mut bc, mut b, mut rest) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &(i, j) in &blocked {
        let (x, y) = (&hidden[i], &hidden[j]);
        if x.entity == y.entity {
            eq.push((i, j));
            continue;
        }
        if x.brand == y.brand && x.main == y.main && x.sub == y.sub {
            bc.push((i, j));
        } else if x.brand == y.brand {
            b.push((i, j));
        }
        rest.push((i, j));
    }
    let m = cfg.mix;
    let total = m.equivalent + m.same_brand_category + m.same_brand + m.rest;
    let want = |share: f64| (share / total * cfg.target_pairs as f64).round() as usize;
    let mut chosen: Vec<(usize, usize)> = Vec::with_capacity(cfg.target_pairs);
    let mut taken = HashSet::new();
    for (pool, share, what) in [
        (&eq, m.equivalent, "equivalent"),
        (&bc, m.same_brand_category, "same brand and category"),
        (&b, m.same_brand, "same brand"),
        (&rest, m.rest, "remaining"),
    ] {
        let free: Vec<(usize, usize)> = pool.iter().copied().filter(|p| !taken.contains(p)).collect();
        let n = want(share).min(free.len());
        if n < want(share) {
            log::warn!("only {} {what} pairs available, wanted {}", free.len(), want(share));
        }
        for k in rand::seq::index::sample(&mut rng, free.len(), n) {
            taken.insert(free[k]);
            chosen.push(free[k]);
        }
    }
    let pairs = CandidatePairSet::from_unordered(
        chosen.iter().map(|&(i, j)| (records[i].id.clone(), records[j].id.clone())),
    )?;

    // Hidden mappings and labels.
    let mut mapping = EntityMapping::default();
    for name in &names {
        let theta: BTreeMap<String, String> =
            records.iter().zip(&hidden).map(|(r, h)| (r.id.clone(), intent_key(name, h))).collect();
        mapping.per_intent.push(theta);
    }
    let dups: Vec<(String, String)> = pairs
        .iter()
        .filter(|p| mapping.per_intent[0][&p.left_id] == mapping.per_intent[0][&p.right_id])
        .map(|p| (p.left_id.clone(), p.right_id.clone()))
        .collect();
    let records = Dataset::new(records)?;
    let mut columns = Vec::with_capacity(names.len());
    for name in &names {
        columns.push(label_intent(&pairs, &records, &intent_rule(name, &dups))?.labels);
    }
    let splits = split(pairs.len(), cfg.split_ratios, cfg.seed)?;
    let labels = IntentLabelMatrix::from_columns(&columns, splits)?;

    let intents: Vec<IntentSpec> = names
        .iter()
        .enumerate()
        .map(|(q, name)| {
            let aq = intent_attrs(name);
            let subsumed_by = names
                .iter()
                .enumerate()
                .filter(|&(p, other)| p != q && intent_attrs(other).iter().all(|a| aq.contains(a)))
                .map(|(p, _)| p)
                .collect();
            IntentSpec { intent_id: q, name: name.to_string(), subsumed_by }
        })
        .collect();
    validate_intents(&intents)?;
    Ok(SynthOutput {
        bench: Benchmark { records, pairs, labels, intents },
        mapping,
    })
}
