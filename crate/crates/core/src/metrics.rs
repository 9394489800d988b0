//! Classification metrics and the evaluation report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::chunker::ChunkedDocument;
use crate::error::{Error, Result};
use crate::model::HierModel;
use crate::tensor::Element;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// `confusion[gold][pred]`.
pub fn confusion(gold: &[usize], pred: &[usize], n_class: usize) -> Result<Vec<Vec<usize>>> {
    if gold.len() != pred.len() {
        return Err(Error::invalid(format!("{} gold labels vs {} predictions", gold.len(), pred.len())));
    }
    if gold.is_empty() {
        return Err(Error::invalid("metrics on an empty set"));
    }
    let mut m = vec![vec![0usize; n_class]; n_class];
    for (&g, &p) in gold.iter().zip(pred) {
        if g >= n_class || p >= n_class {
            return Err(Error::invalid(format!("label {} out of range for {n_class} classes", g.max(p))));
        }
        m[g][p] += 1;
    }
    Ok(m)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn class_stats(confusion: &[Vec<usize>]) -> Vec<ClassStats> {
    let n = confusion.len();
    (0..n)
        .map(|c| {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = (0..n).map(|g| confusion[g][c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassStats {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect()
}

/// Unweighted mean of per-class F1 over classes that occur in `gold`.
pub fn macro_f1(gold: &[usize], pred: &[usize], n_class: usize) -> Result<f64> {
    let stats = class_stats(&confusion(gold, pred, n_class)?);
    Ok(macro_of(&stats))
}

fn macro_of(stats: &[ClassStats]) -> f64 {
    let supported: Vec<f64> = stats.iter().filter(|s| s.support > 0).map(|s| s.f1).collect();
    supported.iter().sum::<f64>() / supported.len() as f64
}

/// Probability that a random positive outscores a random negative, ties counting one half.
pub fn auc_roc(gold: &[bool], scores: &[f64]) -> Result<f64> {
    if gold.len() != scores.len() {
        return Err(Error::invalid(format!("{} labels vs {} scores", gold.len(), scores.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("auc: NaN score"));
    }
    let n_pos = gold.iter().filter(|&&g| g).count();
    let n_neg = gold.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("auc needs both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Count, per tie group, negatives strictly below and negatives tied.
    let mut wins2 = 0u128;
    let mut neg_below = 0u128;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let pos = group.iter().filter(|&&k| gold[k]).count() as u128;
        let neg = group.len() as u128 - pos;
        wins2 += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(wins2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_examples: usize,
    pub n_class: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Binary tasks only, scored by the class-1 probability.
    pub auc: Option<f64>,
    pub per_class: Vec<ClassStats>,
    pub confusion: Vec<Vec<usize>>,
}

/// Index of the largest probability, lowest index on ties.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

impl EvalReport {
    pub fn from_probs(gold: &[usize], probs: &[Vec<f64>], n_class: usize) -> Result<Self> {
        if probs.iter().any(|p| p.len() != n_class) {
            return Err(Error::invalid(format!("probability rows must have {n_class} entries")));
        }
        let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        let confusion = confusion(gold, &pred, n_class)?;
        let per_class = class_stats(&confusion);
        let correct: usize = (0..n_class).map(|c| confusion[c][c]).sum();
        let auc = if n_class == 2 {
            let is_pos: Vec<bool> = gold.iter().map(|&g| g == 1).collect();
            let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
            auc_roc(&is_pos, &scores).ok()
        } else {
            None
        };
        Ok(EvalReport {
            n_examples: gold.len(),
            n_class,
            accuracy: correct as f64 / gold.len() as f64,
            macro_f1: macro_of(&per_class),
            auc,
            per_class,
            confusion,
        })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_examples = {}", self.n_examples);
        let _ = writeln!(s, "accuracy = {:.6}", self.accuracy);
        let _ = writeln!(s, "macro_f1 = {:.6}", self.macro_f1);
        match self.auc {
            Some(a) => {
                let _ = writeln!(s, "auc = {a:.6}");
            }
            None => {
                let _ = writeln!(s, "auc = n/a");
            }
        }
        for (c, st) in self.per_class.iter().enumerate() {
            let _ = writeln!(
                s,
                "class{c} = precision {:.6} recall {:.6} f1 {:.6} support {}",
                st.precision, st.recall, st.f1, st.support
            );
        }
        for (g, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "confusion{g} = {}", cells.join(" "));
        }
        s
    }
}

/// Runs inference on every document and scores it.
pub fn evaluate<T: Element>(model: &HierModel<T>, docs: &[(ChunkedDocument, usize)]) -> Result<EvalReport> {
    let probs = docs
        .iter()
        .map(|(d, _)| model.predict_proba(d))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<usize> = docs.iter().map(|(_, y)| *y).collect();
    EvalReport::from_probs(&gold, &probs, model.config().n_class)
}
