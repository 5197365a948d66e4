//! Evaluation: precision/recall/F1, residual-error reduction, multi-intent
//! averages, exact-match accuracy, preventable error and the report that
//! gathers them.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Resolution;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Zero-denominator rules that were applied while scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// `|M| = |M*| = 0`: precision taken as 1.
    EmptyPredictionAndGold,
    /// `|M| = 0`, `|M*| > 0`: precision taken as 0.
    EmptyPrediction,
    /// `|M*| = 0`: recall taken as 1.
    EmptyGold,
    /// `P + R = 0`: F1 taken as 0.
    ZeroPrecisionAndRecall,
    /// Baseline score of 1: residual error not applicable.
    PerfectBaseline,
    /// No correct negatives among the supersuming intents: preventable
    /// error not applicable.
    NoSuperNegatives,
}

impl Convention {
    pub fn describe(self) -> &'static str {
        match self {
            Convention::EmptyPredictionAndGold => "precision = 1 when both predicted and gold sets are empty",
            Convention::EmptyPrediction => "precision = 0 when nothing is predicted but gold is non-empty",
            Convention::EmptyGold => "recall = 1 when the gold set is empty",
            Convention::ZeroPrecisionAndRecall => "F1 = 0 when precision + recall = 0",
            Convention::PerfectBaseline => "residual error n/a when the baseline scores 1",
            Convention::NoSuperNegatives => "preventable error n/a when the supersuming OR has no true negatives",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

/// Scores `predicted` against `gold` over the pair ids in `universe`.
/// Zero-denominator rules that fired are appended to `conventions`.
pub fn prf(
    predicted: &Resolution,
    gold: &Resolution,
    universe: &[usize],
    conventions: &mut BTreeSet<Convention>,
) -> Result<Prf> {
    let u: BTreeSet<usize> = universe.iter().copied().collect();
    for (what, res) in [("predicted", predicted), ("gold", gold)] {
        if let Some(p) = res.matched.iter().find(|p| !u.contains(p)) {
            return Err(Error::data(format!("{what} resolution contains pair {p} outside the universe")));
        }
    }
    let m = predicted.matched.len();
    let g = gold.matched.len();
    let tp = predicted.matched.intersection(&gold.matched).count();
    let precision = if m > 0 {
        tp as f64 / m as f64
    } else if g == 0 {
        conventions.insert(Convention::EmptyPredictionAndGold);
        1.0
    } else {
        conventions.insert(Convention::EmptyPrediction);
        0.0
    };
    let recall = if g > 0 {
        tp as f64 / g as f64
    } else {
        conventions.insert(Convention::EmptyGold);
        1.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        conventions.insert(Convention::ZeroPrecisionAndRecall);
        0.0
    };
    let agree = u.iter().filter(|p| predicted.contains(**p) == gold.contains(**p)).count();
    let accuracy = if u.is_empty() { 1.0 } else { agree as f64 / u.len() as f64 };
    Ok(Prf {
        precision,
        recall,
        f1,
        accuracy,
    })
}

/// Percentage of the baseline's remaining error removed by the new value:
/// `100·(v_new − v_base)/(1 − v_base)`. `None` when the baseline is perfect.
pub fn residual_error(v_new: f64, v_base: f64) -> Option<f64> {
    if v_base >= 1.0 {
        None
    } else {
        Some(100.0 * (v_new - v_base) / (1.0 - v_base))
    }
}

/// Arithmetic mean over intents; `None` for no intents.
pub fn mi_average(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Fraction of pairs whose whole label vector is predicted exactly.
/// Rows are pairs, columns intents.
pub fn mi_accuracy(predicted: &[Vec<bool>], gold: &[Vec<bool>]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::Shape(format!("{} predicted rows vs {} gold rows", predicted.len(), gold.len())));
    }
    if gold.is_empty() {
        return Ok(1.0);
    }
    let exact = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(exact as f64 / gold.len() as f64)
}

/// Both readings of preventable error for one intent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreventableError {
    pub intent: usize,
    pub supersets: Vec<usize>,
    /// `|FP_p|`
    pub false_positives: usize,
    /// False positives of `p` where some supersuming intent is itself a
    /// correct negative.
    pub preventable_false_positives: usize,
    /// `|TN|` of the OR over the supersuming intents.
    pub super_true_negatives: usize,
    /// `|FP_p| / |TN_OR(S)|`
    pub literal: Option<f64>,
    /// Same denominator, numerator restricted to preventable false positives.
    pub restricted: Option<f64>,
}

/// Preventable error of intent `p` given its supersuming intents `supers`.
/// Rows are pairs of the evaluation universe.
pub fn preventable_error(
    predicted: &[Vec<bool>],
    gold: &[Vec<bool>],
    p: usize,
    supers: &[usize],
) -> Result<PreventableError> {
    if supers.is_empty() {
        return Err(Error::InvalidArgument(format!("intent {p} has no supersuming intents")));
    }
    if supers.contains(&p) {
        return Err(Error::InvalidArgument(format!("intent {p} listed as its own superset")));
    }
    if predicted.len() != gold.len() {
        return Err(Error::Shape(format!("{} predicted rows vs {} gold rows", predicted.len(), gold.len())));
    }
    let (mut fp, mut prevent, mut tn) = (0, 0, 0);
    for (pr, go) in predicted.iter().zip(gold) {
        let pred_or = supers.iter().any(|&s| pr[s]);
        let gold_or = supers.iter().any(|&s| go[s]);
        if !pred_or && !gold_or {
            tn += 1;
        }
        if pr[p] && !go[p] {
            fp += 1;
            if supers.iter().any(|&s| !pr[s] && !go[s]) {
                prevent += 1;
            }
        }
    }
    let ratio = |num: usize| if tn == 0 { None } else { Some(num as f64 / tn as f64) };
    Ok(PreventableError {
        intent: p,
        supersets: supers.to_vec(),
        false_positives: fp,
        preventable_false_positives: prevent,
        super_true_negatives: tn,
        literal: ratio(fp),
        restricted: ratio(prevent),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentInfo {
    pub intent_id: usize,
    pub name: String,
    pub supersets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// Residual-error reduction of F1 against the baseline method.
    pub residual_f1: Option<f64>,
    pub preventable_error: Option<PreventableError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub name: String,
    pub per_intent: Vec<IntentScores>,
    pub mi_precision: f64,
    pub mi_recall: f64,
    pub mi_f1: f64,
    pub mi_accuracy: f64,
    pub residual_mi_f1: Option<f64>,
    pub residual_mi_accuracy: Option<f64>,
}

impl MethodReport {
    /// Mean literal preventable error over intents that have supersets and
    /// a defined value.
    pub fn mean_preventable_error(&self) -> Option<f64> {
        let v: Vec<f64> = self
            .per_intent
            .iter()
            .filter_map(|s| s.preventable_error.as_ref().and_then(|p| p.literal))
            .collect();
        mi_average(&v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub baseline: String,
    pub pair_count: usize,
    pub intents: Vec<IntentInfo>,
    pub methods: Vec<MethodReport>,
    pub conventions: Vec<String>,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.name == name)
    }
}

/// Predictions of one method: rows are pairs of the universe (same order as
/// the gold rows), columns intents.
#[derive(Debug, Clone)]
pub struct MethodPredictions {
    pub name: String,
    pub labels: Vec<Vec<bool>>,
}

/// Scores every method, then fills residual-error columns against
/// `baseline`. `universe` lists the pair ids that the rows correspond to.
pub fn build_report(
    methods: &[MethodPredictions],
    gold: &[Vec<bool>],
    universe: &[usize],
    intents: &[IntentInfo],
    baseline: &str,
) -> Result<EvalReport> {
    let p = intents.len();
    if gold.len() != universe.len() {
        return Err(Error::Shape(format!("{} gold rows for {} pairs", gold.len(), universe.len())));
    }
    if !methods.iter().any(|m| m.name == baseline) {
        return Err(Error::InvalidArgument(format!("baseline method `{baseline}` not among the predictions")));
    }
    let mut conventions = BTreeSet::new();
    let mut reports = Vec::with_capacity(methods.len());
    for m in methods {
        if m.labels.len() != gold.len() || m.labels.iter().any(|r| r.len() != p) {
            return Err(Error::Shape(format!("predictions of `{}` do not cover {} pairs x {p} intents", m.name, gold.len())));
        }
        let mut per_intent = Vec::with_capacity(p);
        for (i, info) in intents.iter().enumerate() {
            let res = |rows: &[Vec<bool>]| Resolution::new(i, universe.iter().zip(rows).filter(|(_, r)| r[i]).map(|(&id, _)| id));
            let s = prf(&res(&m.labels), &res(gold), universe, &mut conventions)?;
            let pe = if info.supersets.is_empty() {
                None
            } else {
                let pe = preventable_error(&m.labels, gold, i, &info.supersets)?;
                if pe.literal.is_none() {
                    conventions.insert(Convention::NoSuperNegatives);
                }
                Some(pe)
            };
            per_intent.push(IntentScores {
                precision: s.precision,
                recall: s.recall,
                f1: s.f1,
                accuracy: s.accuracy,
                residual_f1: None,
                preventable_error: pe,
            });
        }
        let col = |f: fn(&IntentScores) -> f64| mi_average(&per_intent.iter().map(f).collect::<Vec<_>>()).unwrap_or(0.0);
        reports.push(MethodReport {
            name: m.name.clone(),
            mi_precision: col(|s| s.precision),
            mi_recall: col(|s| s.recall),
            mi_f1: col(|s| s.f1),
            mi_accuracy: mi_accuracy(&m.labels, gold)?,
            per_intent,
            residual_mi_f1: None,
            residual_mi_accuracy: None,
        });
    }
    let base = reports.iter().find(|m| m.name == baseline).cloned().expect("checked above");
    let mut note = |r: Option<f64>| {
        if r.is_none() {
            conventions.insert(Convention::PerfectBaseline);
        }
        r
    };
    for m in &mut reports {
        for (s, b) in m.per_intent.iter_mut().zip(&base.per_intent) {
            s.residual_f1 = note(residual_error(s.f1, b.f1));
        }
        m.residual_mi_f1 = note(residual_error(m.mi_f1, base.mi_f1));
        m.residual_mi_accuracy = note(residual_error(m.mi_accuracy, base.mi_accuracy));
    }
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        baseline: baseline.to_string(),
        pair_count: universe.len(),
        intents: intents.to_vec(),
        methods: reports,
        conventions: conventions.into_iter().map(|c| c.describe().to_string()).collect(),
    })
}

fn opt(v: Option<f64>, digits: usize) -> String {
    match v {
        Some(x) => format!("{x:.digits$}"),
        None => "n/a".to_string(),
    }
}

/// Aligned text tables: multi-intent summary, one block per intent, and
/// preventable error.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Multi-intent summary (residual error vs {})", report.baseline);
    let _ = writeln!(
        out,
        "{:<14} {:>7} {:>7} {:>7} {:>7} {:>8} {:>9}",
        "method", "MI-P", "MI-R", "MI-F", "MI-Acc", "MI-E_F", "MI-E_Acc"
    );
    for m in &report.methods {
        let _ = writeln!(
            out,
            "{:<14} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>8} {:>9}",
            m.name,
            m.mi_precision,
            m.mi_recall,
            m.mi_f1,
            m.mi_accuracy,
            opt(m.residual_mi_f1, 1),
            opt(m.residual_mi_accuracy, 1)
        );
    }
    for info in &report.intents {
        let _ = writeln!(out, "\nIntent {} ({})", info.intent_id, info.name);
        let _ = writeln!(out, "{:<14} {:>7} {:>7} {:>7} {:>7} {:>8}", "method", "P", "R", "F", "Acc", "E_F");
        for m in &report.methods {
            let s = &m.per_intent[info.intent_id];
            let _ = writeln!(
                out,
                "{:<14} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>8}",
                m.name,
                s.precision,
                s.recall,
                s.f1,
                s.accuracy,
                opt(s.residual_f1, 1)
            );
        }
    }
    let with_supers: Vec<&IntentInfo> = report.intents.iter().filter(|i| !i.supersets.is_empty()).collect();
    if !with_supers.is_empty() {
        let _ = writeln!(out, "\nPreventable error (literal / restricted)");
        let mut header = format!("{:<14}", "method");
        for i in &with_supers {
            let _ = write!(header, " {:>17}", format!("{} <= {:?}", i.intent_id, i.supersets));
        }
        let _ = writeln!(out, "{header}");
        for m in &report.methods {
            let mut line = format!("{:<14}", m.name);
            for i in &with_supers {
                let cell = match &m.per_intent[i.intent_id].preventable_error {
                    Some(pe) => format!("{} / {}", opt(pe.literal, 4), opt(pe.restricted, 4)),
                    None => "n/a".into(),
                };
                let _ = write!(line, " {cell:>17}");
            }
            let _ = writeln!(out, "{line}");
        }
    }
    if !report.conventions.is_empty() {
        let _ = writeln!(out, "\nConventions applied:");
        for c in &report.conventions {
            let _ = writeln!(out, "  - {c}");
        }
    }
    out
}
