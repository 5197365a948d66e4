use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{IntentLabelMatrix, Split};

/// Split sizes by largest remainder, so each size is the floor or ceiling
/// of its exact share.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
        return Err(Error::Config(format!("split ratios must be positive, got {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    let exact: Vec<f64> = ratios.iter().map(|r| r / total * n as f64).collect();
    let mut sizes = [0usize; 3];
    for i in 0..3 {
        sizes[i] = exact[i].floor() as usize;
    }
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    Ok(sizes)
}

/// Assigns each of `n` pairs to train/valid/test by a seeded shuffle.
pub fn split(n: usize, ratios: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    let sizes = split_sizes(n, ratios)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut tags = vec![Split::Train; n];
    for (k, &i) in idx.iter().enumerate() {
        tags[i] = if k < sizes[0] {
            Split::Train
        } else if k < sizes[0] + sizes[1] {
            Split::Valid
        } else {
            Split::Test
        };
    }
    Ok(tags)
}

/// Fraction of positive labels per intent and split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositiveRates {
    pub intents: Vec<BTreeMap<Split, f64>>,
    pub counts: BTreeMap<Split, usize>,
}

pub fn positive_rate_report(labels: &IntentLabelMatrix) -> PositiveRates {
    let mut counts = BTreeMap::new();
    for s in Split::ALL {
        counts.insert(s, labels.pairs_in(s).len());
    }
    let intents = (0..labels.num_intents())
        .map(|p| {
            Split::ALL
                .iter()
                .map(|&s| {
                    let rows = labels.pairs_in(s);
                    let pos = rows.iter().filter(|&&i| labels.label(i, p)).count();
                    let rate = if rows.is_empty() { 0.0 } else { pos as f64 / rows.len() as f64 };
                    (s, rate)
                })
                .collect()
        })
        .collect();
    PositiveRates { intents, counts }
}
