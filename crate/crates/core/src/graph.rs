//! Multiplex intent graph: one layer of pair nodes per intent, directed kNN
//! edges inside each layer and peer edges between the copies of a pair.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{export_embeddings, import_embeddings, PairEmbeddingSet, MANIFEST_NAME};
use crate::error::{Error, Result};
use crate::io;
use crate::nn::DenseMatrix;

/// Default neighbor counts searched by the sweep.
pub const K_GRID: [usize; 6] = [0, 2, 4, 6, 8, 10];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub k: usize,
    /// Randomly project layers of differing width to the smallest width
    /// instead of failing.
    pub project: bool,
    pub seed: u64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig { k: 4, project: false, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Intra,
    Inter,
}

impl Relation {
    pub const ALL: [Relation; 2] = [Relation::Intra, Relation::Inter];
}

/// Directed peer edges from layer `from` to layer `to`, as flat node ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterEdgeSet {
    pub from: usize,
    pub to: usize,
    pub edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiplexGraph {
    p: usize,
    n: usize,
    k: usize,
    k_requested: usize,
    projected: bool,
    /// Row `intent·n + pair` holds that node's features.
    pub features: DenseMatrix,
    /// Sources of the intra-layer edges entering each node, ascending.
    intra_in: Vec<Vec<usize>>,
}

/// Each point's `k` nearest other points by squared Euclidean distance,
/// ordered by (distance, index). `k >= n` is clamped to `n - 1`.
pub fn knn_bruteforce(x: &DenseMatrix, k: usize) -> Vec<Vec<usize>> {
    let n = x.rows;
    let k = clamp_k(k, n);
    if k == 0 {
        return vec![Vec::new(); n];
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i);
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (xi.iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), j))
                .collect();
            let by = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < cand.len() {
                cand.select_nth_unstable_by(k - 1, by);
                cand.truncate(k);
            }
            cand.sort_unstable_by(by);
            // A fresh vector: collecting from `cand` would reuse its n-sized
            // allocation for every point.
            let mut out = Vec::with_capacity(k);
            out.extend(cand.iter().map(|&(_, j)| j));
            out
        })
        .collect()
}

fn clamp_k(k: usize, n: usize) -> usize {
    let max = n.saturating_sub(1);
    if k > max {
        log::warn!("k = {k} exceeds n - 1 = {max}; using k = {max}");
        max
    } else {
        k
    }
}

/// Seeded random projection to `dim` columns with unit-variance-preserving
/// uniform entries in `±sqrt(3 / dim)`.
fn random_projection(x: &DenseMatrix, dim: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = (3.0 / dim as f64).sqrt();
    let data = (0..x.cols * dim).map(|_| rng.gen_range(-bound..=bound)).collect::<Vec<f64>>();
    x.matmul(&DenseMatrix { rows: x.cols, cols: dim, data })
}

/// Builds the graph over `sets`, one layer per set in intent order.
pub fn build_graph(sets: &[PairEmbeddingSet], cfg: &GraphConfig) -> Result<MultiplexGraph> {
    let first = sets.first().ok_or_else(|| Error::data("no intent layers to build a graph from"))?;
    let n = first.len();
    let p = sets.len();
    for (q, s) in sets.iter().enumerate() {
        if s.intent_id != q {
            return Err(Error::data(format!("layer {q} holds embeddings of intent {}", s.intent_id)));
        }
        if s.len() != n {
            let (short, long) = if s.len() < n { (q, 0) } else { (0, q) };
            let missing: Vec<String> = (s.len().min(n)..s.len().max(n)).map(|i| i.to_string()).collect();
            return Err(Error::data(format!(
                "intent {short} lacks pairs covered by intent {long}: missing pair ids {}",
                missing.join(", ")
            )));
        }
    }
    if n == 0 {
        return Err(Error::data("graph needs at least one pair"));
    }
    let dims: Vec<usize> = sets.iter().map(|s| s.dim()).collect();
    let min_dim = *dims.iter().min().unwrap();
    let mixed = dims.iter().any(|&d| d != min_dim);
    if mixed && !cfg.project {
        return Err(Error::Config(format!("layer feature widths differ ({dims:?}); enable projection to combine them")));
    }
    let layers: Vec<DenseMatrix> = sets
        .iter()
        .enumerate()
        .map(|(q, s)| {
            let m = s.to_matrix();
            if m.cols == min_dim {
                m
            } else {
                random_projection(&m, min_dim, cfg.seed.wrapping_add(q as u64))
            }
        })
        .collect();
    let k = clamp_k(cfg.k, n);
    let mut features = DenseMatrix::zeros(n * p, min_dim);
    let mut intra_in = vec![Vec::new(); n * p];
    for (q, layer) in layers.iter().enumerate() {
        for i in 0..n {
            features.row_mut(q * n + i).copy_from_slice(layer.row(i));
        }
        for (i, nbrs) in knn_bruteforce(layer, k).into_iter().enumerate() {
            let mut src: Vec<usize> = nbrs.into_iter().map(|j| q * n + j).collect();
            src.sort_unstable();
            intra_in[q * n + i] = src;
        }
    }
    Ok(MultiplexGraph { p, n, k, k_requested: cfg.k, projected: mixed, features, intra_in })
}

impl MultiplexGraph {
    pub fn num_intents(&self) -> usize {
        self.p
    }

    pub fn num_pairs(&self) -> usize {
        self.n
    }

    /// Effective neighbor count after clamping.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn projected(&self) -> bool {
        self.projected
    }

    pub fn node(&self, pair: usize, intent: usize) -> usize {
        intent * self.n + pair
    }

    /// `(pair, intent)` of a flat node id.
    pub fn locate(&self, node: usize) -> (usize, usize) {
        (node % self.n, node / self.n)
    }

    pub fn node_count(&self) -> usize {
        self.n * self.p
    }

    pub fn intra_edge_count(&self) -> usize {
        self.intra_in.iter().map(Vec::len).sum()
    }

    pub fn inter_edge_count(&self) -> usize {
        self.n * self.p * (self.p - 1)
    }

    /// Sources of the intra-layer edges entering `node`, ascending.
    pub fn intra_sources(&self, node: usize) -> &[usize] {
        &self.intra_in[node]
    }

    /// Nodes with an edge of type `rel` into `node`, ascending.
    pub fn neighbor_sets(&self, node: usize, rel: Relation) -> Vec<usize> {
        match rel {
            Relation::Intra => self.intra_in[node].clone(),
            Relation::Inter => {
                let (pair, intent) = self.locate(node);
                (0..self.p).filter(|&q| q != intent).map(|q| self.node(pair, q)).collect()
            }
        }
    }

    /// All intra-layer edges as `(src, dst)`, sorted by destination then source.
    pub fn intra_edges(&self) -> Vec<(usize, usize)> {
        self.intra_in.iter().enumerate().flat_map(|(v, src)| src.iter().map(move |&u| (u, v))).collect()
    }

    /// Peer edges grouped by ordered layer pair.
    pub fn inter_edges(&self) -> Vec<InterEdgeSet> {
        let mut out = Vec::new();
        for from in 0..self.p {
            for to in 0..self.p {
                if from != to {
                    let edges = (0..self.n).map(|i| (self.node(i, from), self.node(i, to))).collect();
                    out.push(InterEdgeSet { from, to, edges });
                }
            }
        }
        out
    }

    pub fn layer_features(&self, intent: usize) -> DenseMatrix {
        let rows: Vec<usize> = (0..self.n).map(|i| self.node(i, intent)).collect();
        self.features.select_rows(&rows)
    }

    /// Writes `graph.json`, `intra.u32`, `inter.u32` and `features/`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        io::create_dir(dir)?;
        let edge_bytes = |edges: &mut dyn Iterator<Item = (usize, usize)>| {
            let mut b = Vec::new();
            for (u, v) in edges {
                b.extend_from_slice(&(u as u32).to_le_bytes());
                b.extend_from_slice(&(v as u32).to_le_bytes());
            }
            b
        };
        let intra = edge_bytes(&mut self.intra_edges().into_iter());
        let inter = edge_bytes(&mut self.inter_edges().into_iter().flat_map(|s| s.edges));
        for (name, bytes) in [("intra.u32", intra), ("inter.u32", inter)] {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        let sets: Vec<PairEmbeddingSet> = (0..self.p)
            .map(|q| PairEmbeddingSet::from_matrix(q, &self.layer_features(q)))
            .collect::<Result<_>>()?;
        export_embeddings(&sets, &dir.join("features"))?;
        let manifest = GraphManifest {
            version: 1,
            p: self.p,
            n: self.n,
            k: self.k,
            k_requested: self.k_requested,
            dim: self.features.cols,
            projected: self.projected,
            intra_edges: self.intra_edge_count(),
            inter_edges: self.inter_edge_count(),
        };
        io::write_json(&dir.join("graph.json"), &manifest)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let m: GraphManifest = io::read_json(&dir.join("graph.json"))?;
        if m.version != 1 {
            return Err(Error::data(format!("unsupported graph version {}", m.version)));
        }
        if m.p == 0 || m.n == 0 {
            return Err(Error::data("graph manifest lists an empty graph"));
        }
        let sets = import_embeddings(&dir.join("features").join(MANIFEST_NAME))?;
        if sets.len() != m.p || sets.iter().any(|s| s.len() != m.n || s.dim() != m.dim) {
            return Err(Error::data("graph features do not match the graph manifest"));
        }
        let mut features = DenseMatrix::zeros(m.n * m.p, m.dim);
        for (q, s) in sets.iter().enumerate() {
            for i in 0..m.n {
                for (o, v) in features.row_mut(q * m.n + i).iter_mut().zip(s.vector(i)) {
                    *o = *v as f64;
                }
            }
        }
        let read_edges = |name: &str, expected: usize| -> Result<Vec<(usize, usize)>> {
            let path = dir.join(name);
            let b = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if b.len() != 8 * expected {
                return Err(Error::data(format!("{}: expected {expected} edges, found {} bytes", path.display(), b.len())));
            }
            let word = |i: usize| u32::from_le_bytes(b[4 * i..4 * i + 4].try_into().unwrap()) as usize;
            let edges: Vec<(usize, usize)> = (0..expected).map(|e| (word(2 * e), word(2 * e + 1))).collect();
            if let Some(&(u, v)) = edges.iter().find(|&&(u, v)| u >= m.n * m.p || v >= m.n * m.p || u == v) {
                return Err(Error::data(format!("{}: invalid edge {u} -> {v}", path.display())));
            }
            Ok(edges)
        };
        let mut intra_in = vec![Vec::new(); m.n * m.p];
        for (u, v) in read_edges("intra.u32", m.intra_edges)? {
            if u / m.n != v / m.n {
                return Err(Error::data(format!("intra edge {u} -> {v} crosses layers")));
            }
            intra_in[v].push(u);
        }
        for src in &mut intra_in {
            src.sort_unstable();
        }
        let g = MultiplexGraph { p: m.p, n: m.n, k: m.k, k_requested: m.k_requested, projected: m.projected, features, intra_in };
        let inter = read_edges("inter.u32", m.inter_edges)?;
        let want: Vec<(usize, usize)> = g.inter_edges().into_iter().flat_map(|s| s.edges).collect();
        if inter != want {
            return Err(Error::data("inter-layer edges do not form the peer relation"));
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphManifest {
    version: u32,
    #[serde(rename = "P")]
    p: usize,
    n: usize,
    k: usize,
    k_requested: usize,
    dim: usize,
    projected: bool,
    intra_edges: usize,
    inter_edges: usize,
}
