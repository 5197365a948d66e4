//! Records, candidate pairs, intents, labels and resolutions.
//!
//! Everything downstream is keyed by `pair_id`, the index of a pair in its
//! [`CandidatePairSet`]. Pairs are stored with `left_id < right_id` and the
//! set is sorted lexicographically, so label files, embedding files and graph
//! nodes built from the same set always line up.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One data record: an id, a source tag and ordered, nullable attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    #[serde(default)]
    pub source: String,
    pub fields: IndexMap<String, Option<String>>,
}

impl Record {
    pub fn new(id: impl Into<String>) -> Self {
        Record {
            id: id.into(),
            source: String::new(),
            fields: IndexMap::new(),
        }
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }

    pub fn with_field(mut self, name: impl Into<String>, value: Option<&str>) -> Self {
        self.fields.insert(name.into(), value.map(str::to_string));
        self
    }

    /// Value of an attribute; `None` both when absent and when null.
    pub fn get(&self, name: &str) -> Option<&str> {
        self.fields.get(name).and_then(|v| v.as_deref())
    }
}

/// A validated collection of records with unique ids.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    records: Vec<Record>,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.fields.values().all(Option::is_none) {
                return Err(Error::data(format!("record `{}` has no non-null field", r.id)));
            }
            if index.insert(r.id.clone(), i).is_some() {
                return Err(Error::data(format!("duplicate record id `{}`", r.id)));
            }
        }
        Ok(Dataset { records, index })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Record> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn require(&self, id: &str) -> Result<&Record> {
        self.get(id).ok_or_else(|| Error::UnknownRecord(id.to_string()))
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }
}

/// A candidate record pair. `left_id < right_id` always holds.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CandidatePair {
    pub pair_id: usize,
    pub left_id: String,
    pub right_id: String,
}

/// The blocked pair universe `C`, canonically ordered and duplicate free.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CandidatePairSet {
    pairs: Vec<CandidatePair>,
}

impl CandidatePairSet {
    /// Canonicalizes unordered id pairs: orders each pair, drops duplicates,
    /// sorts the set and assigns `pair_id`s in that order.
    pub fn from_unordered<I, S>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        let mut set = BTreeSet::new();
        for (a, b) in pairs {
            let (a, b) = (a.into(), b.into());
            if a == b {
                return Err(Error::data(format!("self pair `{a}`")));
            }
            if a < b {
                set.insert((a, b));
            } else {
                set.insert((b, a));
            }
        }
        let pairs = set
            .into_iter()
            .enumerate()
            .map(|(pair_id, (left_id, right_id))| CandidatePair {
                pair_id,
                left_id,
                right_id,
            })
            .collect();
        Ok(CandidatePairSet { pairs })
    }

    /// Accepts pairs carrying explicit ids (e.g. read from a file, in any
    /// line order). Ids must be exactly `0..n`.
    pub fn from_indexed(mut pairs: Vec<CandidatePair>) -> Result<Self> {
        pairs.sort_by_key(|p| p.pair_id);
        let mut seen = BTreeSet::new();
        for (i, p) in pairs.iter().enumerate() {
            if p.pair_id != i {
                return Err(Error::data(format!(
                    "pair ids must be 0..{}; missing or duplicate id near {}",
                    pairs.len(),
                    i
                )));
            }
            if p.left_id >= p.right_id {
                return Err(Error::data(format!(
                    "pair {} is not canonically ordered ({} , {})",
                    p.pair_id, p.left_id, p.right_id
                )));
            }
            if !seen.insert((p.left_id.as_str(), p.right_id.as_str())) {
                return Err(Error::data(format!("duplicate pair ({}, {})", p.left_id, p.right_id)));
            }
        }
        Ok(CandidatePairSet { pairs })
    }

    pub fn pairs(&self) -> &[CandidatePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, pair_id: usize) -> Option<&CandidatePair> {
        self.pairs.get(pair_id)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, CandidatePair> {
        self.pairs.iter()
    }

    /// Every record id referenced by some pair, sorted.
    pub fn record_ids(&self) -> BTreeSet<&str> {
        self.pairs
            .iter()
            .flat_map(|p| [p.left_id.as_str(), p.right_id.as_str()])
            .collect()
    }
}

/// A resolution intent as seen by the system: an id, a display name and the
/// intents it is (declared or detected to be) subsumed by.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentSpec {
    pub intent_id: usize,
    pub name: String,
    #[serde(default)]
    pub subsumed_by: Vec<usize>,
}

/// Checks ids are `0..P`, and that `subsumed_by` is free of self references,
/// unknown ids and cycles.
pub fn validate_intents(intents: &[IntentSpec]) -> Result<()> {
    let p = intents.len();
    for (i, spec) in intents.iter().enumerate() {
        if spec.intent_id != i {
            return Err(Error::data(format!("intent ids must be 0..{p}, found {} at {i}", spec.intent_id)));
        }
        for &s in &spec.subsumed_by {
            if s == i {
                return Err(Error::data(format!("intent {i} lists itself in subsumed_by")));
            }
            if s >= p {
                return Err(Error::data(format!("intent {i} references unknown intent {s}")));
            }
        }
    }
    // DFS three-colour cycle check over the subsumed_by edges.
    fn visit(i: usize, intents: &[IntentSpec], state: &mut [u8]) -> bool {
        match state[i] {
            1 => return false,
            2 => return true,
            _ => {}
        }
        state[i] = 1;
        for &s in &intents[i].subsumed_by {
            if !visit(s, intents, state) {
                return false;
            }
        }
        state[i] = 2;
        true
    }
    let mut state = vec![0u8; p];
    for i in 0..p {
        if !visit(i, intents, &mut state) {
            return Err(Error::data(format!("subsumed_by relation has a cycle through intent {i}")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Binary labels for `P` intents over every candidate pair, plus the split
/// each pair belongs to. Row `i` is `pair_id == i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntentLabelMatrix {
    num_intents: usize,
    labels: Vec<bool>,
    splits: Vec<Split>,
}

impl IntentLabelMatrix {
    pub fn new(num_intents: usize, rows: Vec<Vec<bool>>, splits: Vec<Split>) -> Result<Self> {
        if rows.len() != splits.len() {
            return Err(Error::data(format!(
                "{} label rows but {} split tags",
                rows.len(),
                splits.len()
            )));
        }
        let mut labels = Vec::with_capacity(rows.len() * num_intents);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != num_intents {
                return Err(Error::data(format!(
                    "pair {i} has {} labels, expected {num_intents}",
                    row.len()
                )));
            }
            labels.extend(row);
        }
        Ok(IntentLabelMatrix {
            num_intents,
            labels,
            splits,
        })
    }

    /// Builds a matrix from per-intent label columns.
    pub fn from_columns(columns: &[Vec<bool>], splits: Vec<Split>) -> Result<Self> {
        let n = splits.len();
        if let Some(bad) = columns.iter().position(|c| c.len() != n) {
            return Err(Error::data(format!("intent {bad} has {} labels for {n} pairs", columns[bad].len())));
        }
        let rows = (0..n).map(|i| columns.iter().map(|c| c[i]).collect()).collect();
        Self::new(columns.len(), rows, splits)
    }

    pub fn num_intents(&self) -> usize {
        self.num_intents
    }

    pub fn num_pairs(&self) -> usize {
        self.splits.len()
    }

    pub fn label(&self, pair_id: usize, intent: usize) -> bool {
        self.labels[pair_id * self.num_intents + intent]
    }

    pub fn row(&self, pair_id: usize) -> &[bool] {
        &self.labels[pair_id * self.num_intents..(pair_id + 1) * self.num_intents]
    }

    pub fn column(&self, intent: usize) -> Vec<bool> {
        (0..self.num_pairs()).map(|i| self.label(i, intent)).collect()
    }

    pub fn split(&self, pair_id: usize) -> Split {
        self.splits[pair_id]
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    /// Pair ids in the given split, ascending.
    pub fn pairs_in(&self, split: Split) -> Vec<usize> {
        (0..self.num_pairs()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Gold resolution of one intent restricted to a set of pairs.
    pub fn resolution(&self, intent: usize, universe: &[usize]) -> Resolution {
        Resolution {
            intent_id: intent,
            matched: universe.iter().copied().filter(|&i| self.label(i, intent)).collect(),
        }
    }

    /// Same matrix with only the training rows visible, i.e. the rows a
    /// learner is allowed to read.
    pub fn restricted_to(&self, split: Split) -> IntentLabelMatrix {
        let keep = self.pairs_in(split);
        let rows = keep.iter().map(|&i| self.row(i).to_vec()).collect();
        IntentLabelMatrix::new(self.num_intents, rows, vec![split; keep.len()])
            .expect("rows taken from a valid matrix")
    }
}

/// The pairs declared matching under one intent.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Resolution {
    pub intent_id: usize,
    pub matched: BTreeSet<usize>,
}

impl Resolution {
    pub fn new(intent_id: usize, matched: impl IntoIterator<Item = usize>) -> Self {
        Resolution {
            intent_id,
            matched: matched.into_iter().collect(),
        }
    }

    pub fn contains(&self, pair_id: usize) -> bool {
        self.matched.contains(&pair_id)
    }
}

/// Hidden record-to-entity assignment per intent. Only synthetic generators
/// and oracle checks ever see one.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMapping {
    pub per_intent: Vec<BTreeMap<String, String>>,
}

impl EntityMapping {
    pub fn intent(&self, intent: usize) -> Option<&BTreeMap<String, String>> {
        self.per_intent.get(intent)
    }
}

/// `res` satisfies the mapping iff, for every candidate pair, it is matched
/// exactly when both records map to the same entity.
pub fn resolution_satisfies(res: &Resolution, mapping: &EntityMapping, pairs: &CandidatePairSet) -> Result<bool> {
    let theta = mapping
        .intent(res.intent_id)
        .ok_or_else(|| Error::data(format!("entity mapping has no intent {}", res.intent_id)))?;
    let entity = |id: &str| theta.get(id).ok_or_else(|| Error::UnknownRecord(id.to_string()));
    let mut ok = true;
    for p in pairs.iter() {
        let same = entity(&p.left_id)? == entity(&p.right_id)?;
        if same != res.contains(p.pair_id) {
            ok = false;
        }
    }
    Ok(ok)
}

/// Disjoint sets with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(len: usize) -> Self {
        UnionFind {
            parent: (0..len).collect(),
            size: vec![1; len],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns true when two distinct sets were merged.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

/// Clean view of `records` under a resolution: one representative (the
/// smallest id) per connected component of the match graph, sorted.
pub fn derive_clean_view(res: &Resolution, pairs: &CandidatePairSet, records: &Dataset) -> Result<Vec<String>> {
    let mut uf = UnionFind::new(records.len());
    for &pid in &res.matched {
        let pair = pairs
            .get(pid)
            .ok_or_else(|| Error::data(format!("resolution references unknown pair {pid}")))?;
        let a = records
            .position(&pair.left_id)
            .ok_or_else(|| Error::UnknownRecord(pair.left_id.clone()))?;
        let b = records
            .position(&pair.right_id)
            .ok_or_else(|| Error::UnknownRecord(pair.right_id.clone()))?;
        uf.union(a, b);
    }
    let mut best: HashMap<usize, &str> = HashMap::new();
    for (i, r) in records.records().iter().enumerate() {
        let root = uf.find(i);
        let slot = best.entry(root).or_insert(r.id.as_str());
        if r.id.as_str() < *slot {
            *slot = r.id.as_str();
        }
    }
    let mut view: Vec<String> = best.into_values().map(str::to_string).collect();
    view.sort();
    Ok(view)
}

/// Def. "overlapping intents": some pair is positive under both.
pub fn detect_overlap(labels: &IntentLabelMatrix, p: usize, q: usize) -> bool {
    (0..labels.num_pairs()).any(|i| labels.label(i, p) && labels.label(i, q))
}

/// True iff `q` is a sub-intent of `p`: no pair is negative under `p` but
/// positive under `q`.
pub fn detect_subsumption(labels: &IntentLabelMatrix, p: usize, q: usize) -> bool {
    !(0..labels.num_pairs()).any(|i| !labels.label(i, p) && labels.label(i, q))
}

/// For every intent, the other intents it is subsumed by according to the
/// labels.
pub fn detected_subsumers(labels: &IntentLabelMatrix) -> Vec<Vec<usize>> {
    let p = labels.num_intents();
    (0..p)
        .map(|q| (0..p).filter(|&s| s != q && detect_subsumption(labels, s, q)).collect())
        .collect()
}

/// Merges declared `subsumed_by` lists with what the training labels show.
/// Detection wins on disagreement; each disagreement is logged.
///
/// Pairs of intents with identical training labels subsume each other; to
/// keep the relation acyclic only the lower-id intent is recorded as the
/// subsumer in that case.
pub fn reconcile_subsumption(intents: &[IntentSpec], train_labels: &IntentLabelMatrix) -> Vec<IntentSpec> {
    let detected = detected_subsumers(train_labels);
    intents
        .iter()
        .map(|spec| {
            let q = spec.intent_id;
            let found: Vec<usize> = detected[q]
                .iter()
                .copied()
                .filter(|&s| !(detected[s].contains(&q) && s > q))
                .collect();
            let declared: BTreeSet<usize> = spec.subsumed_by.iter().copied().collect();
            let found_set: BTreeSet<usize> = found.iter().copied().collect();
            if !spec.subsumed_by.is_empty() && declared != found_set {
                log::warn!(
                    "intent {} ({}): declared subsumed_by {:?} disagrees with labels {:?}; using labels",
                    q,
                    spec.name,
                    declared,
                    found_set
                );
            }
            IntentSpec {
                intent_id: q,
                name: spec.name.clone(),
                subsumed_by: found,
            }
        })
        .collect()
}
