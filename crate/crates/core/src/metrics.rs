//! Strict accuracy, loose macro and loose micro scores over label sets.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::{Document, LabelVocab, OovLabels};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalUnit {
    pub gold: BTreeSet<usize>,
    pub pred: BTreeSet<usize>,
    /// `(document index, mention or token index)`.
    pub unit_id: (usize, usize),
}

impl EvalUnit {
    pub fn new(gold: impl IntoIterator<Item = usize>, pred: impl IntoIterator<Item = usize>) -> Self {
        EvalUnit {
            gold: gold.into_iter().collect(),
            pred: pred.into_iter().collect(),
            unit_id: (0, 0),
        }
    }

    fn overlap(&self) -> usize {
        self.gold.intersection(&self.pred).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub strict_acc: f64,
    pub macro_p: f64,
    pub macro_r: f64,
    pub macro_f1: f64,
    pub micro_p: f64,
    pub micro_r: f64,
    pub micro_f1: f64,
    pub unit_count: usize,
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn nonempty(units: &[EvalUnit]) -> Result<()> {
    if units.is_empty() {
        Err(Error::Eval("no evaluation units".into()))
    } else {
        Ok(())
    }
}

/// Fraction of units whose predicted set equals the gold set.
pub fn strict_accuracy(units: &[EvalUnit]) -> Result<f64> {
    nonempty(units)?;
    let hits = units.iter().filter(|u| u.gold == u.pred).count();
    Ok(hits as f64 / units.len() as f64)
}

/// Per-unit precision and recall averaged over units.
pub fn loose_macro(units: &[EvalUnit]) -> Result<(f64, f64, f64)> {
    nonempty(units)?;
    let (mut p, mut r) = (0.0, 0.0);
    for u in units {
        let hit = u.overlap() as f64;
        p += match (u.pred.is_empty(), u.gold.is_empty()) {
            (true, true) => 1.0,
            (true, false) => 0.0,
            (false, _) => hit / u.pred.len() as f64,
        };
        r += match (u.gold.is_empty(), u.pred.is_empty()) {
            (true, true) => 1.0,
            (true, false) => 0.0,
            (false, _) => hit / u.gold.len() as f64,
        };
    }
    let n = units.len() as f64;
    let (p, r) = (p / n, r / n);
    Ok((p, r, f1(p, r)))
}

/// Corpus-level precision and recall from summed overlap counts.
pub fn loose_micro(units: &[EvalUnit]) -> Result<(f64, f64, f64)> {
    nonempty(units)?;
    let (mut hit, mut pred, mut gold) = (0usize, 0usize, 0usize);
    for u in units {
        hit += u.overlap();
        pred += u.pred.len();
        gold += u.gold.len();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (p, r) = (ratio(hit, pred), ratio(hit, gold));
    Ok((p, r, f1(p, r)))
}

pub fn evaluate_units(units: &[EvalUnit]) -> Result<MetricReport> {
    let strict_acc = strict_accuracy(units)?;
    let (macro_p, macro_r, macro_f1) = loose_macro(units)?;
    let (micro_p, micro_r, micro_f1) = loose_micro(units)?;
    Ok(MetricReport {
        strict_acc,
        macro_p,
        macro_r,
        macro_f1,
        micro_p,
        micro_r,
        micro_f1,
        unit_count: units.len(),
    })
}

/// One unit per gold mention; `preds[d][m]` is the predicted label set of
/// mention `m` in document `d`.
pub fn entity_level_units(
    docs: &[Document],
    vocab: &LabelVocab,
    preds: &[Vec<Vec<usize>>],
    oov: &mut OovLabels,
) -> Vec<EvalUnit> {
    let mut units = Vec::new();
    for (d, (doc, dp)) in docs.iter().zip(preds).enumerate() {
        for (m, (mention, p)) in doc.mentions.iter().zip(dp).enumerate() {
            units.push(EvalUnit {
                gold: oov.gold_ids(vocab, mention.labels.iter().map(String::as_str)),
                pred: p.iter().copied().collect(),
                unit_id: (d, m),
            });
        }
    }
    units
}

/// One unit per token; gold may be empty for non-entity tokens.
pub fn all_token_units(
    docs: &[Document],
    vocab: &LabelVocab,
    token_preds: &[Vec<Vec<usize>>],
    oov: &mut OovLabels,
) -> Vec<EvalUnit> {
    let mut units = Vec::new();
    for (d, (doc, tp)) in docs.iter().zip(token_preds).enumerate() {
        for (t, p) in tp.iter().enumerate().take(doc.tokens.len()) {
            units.push(EvalUnit {
                gold: oov.gold_ids(vocab, doc.token_labels(t)),
                pred: p.iter().copied().collect(),
                unit_id: (d, t),
            });
        }
    }
    units
}

/// Mention-level view of token predictions: for each gold mention, the
/// prediction is the union of its tokens' predicted sets. Predictions on
/// tokens outside every mention are ignored.
pub fn e2e_mention_units(
    docs: &[Document],
    vocab: &LabelVocab,
    token_preds: &[Vec<Vec<usize>>],
    oov: &mut OovLabels,
) -> Vec<EvalUnit> {
    let mut units = Vec::new();
    for (d, (doc, tp)) in docs.iter().zip(token_preds).enumerate() {
        for (m, mention) in doc.mentions.iter().enumerate() {
            let pred = (mention.start..mention.end)
                .filter_map(|t| tp.get(t))
                .flatten()
                .copied()
                .collect();
            units.push(EvalUnit {
                gold: oov.gold_ids(vocab, mention.labels.iter().map(String::as_str)),
                pred,
                unit_id: (d, m),
            });
        }
    }
    units
}

pub fn evaluate_e2e_as_mention_level(
    token_preds: &[Vec<Vec<usize>>],
    docs: &[Document],
    vocab: &LabelVocab,
) -> Result<MetricReport> {
    let mut oov = OovLabels::default();
    evaluate_units(&e2e_mention_units(docs, vocab, token_preds, &mut oov))
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>8} {:>8} {:>8}   (units: {})", "Acc", "Ma-F1", "Mi-F1", self.unit_count)?;
        writeln!(f, "{:>8.3} {:>8.3} {:>8.3}", self.strict_acc, self.macro_f1, self.micro_f1)?;
        write!(
            f,
            "macro P/R {:.3}/{:.3}  micro P/R {:.3}/{:.3}",
            self.macro_p, self.macro_r, self.micro_p, self.micro_r
        )
    }
}
