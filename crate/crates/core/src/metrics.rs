//! Label-set metrics (strict accuracy, macro/micro F1) and word error rate.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::Real;

/// Gold and predicted label sets for one evaluated item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSetPrediction<L: Ord> {
    pub gold: BTreeSet<L>,
    pub predicted: BTreeSet<L>,
}

impl<L: Ord + Clone> LabelSetPrediction<L> {
    pub fn new(gold: impl IntoIterator<Item = L>, predicted: impl IntoIterator<Item = L>) -> Self {
        Self {
            gold: gold.into_iter().collect(),
            predicted: predicted.into_iter().collect(),
        }
    }

    fn overlap(&self) -> usize {
        self.gold.intersection(&self.predicted).count()
    }
}

fn ratio<T: Real>(num: usize, den: usize) -> T {
    if den == 0 {
        T::zero()
    } else {
        T::from_usize_lossy(num) / T::from_usize_lossy(den)
    }
}

fn f1<T: Real>(p: T, r: T) -> T {
    if p + r == T::zero() {
        T::zero()
    } else {
        T::lit(2.0) * p * r / (p + r)
    }
}

fn non_empty<L: Ord>(preds: &[LabelSetPrediction<L>]) -> Result<()> {
    if preds.is_empty() {
        Err(Error::Empty("prediction list"))
    } else {
        Ok(())
    }
}

pub fn strict_accuracy<T: Real, L: Ord + Clone>(preds: &[LabelSetPrediction<L>]) -> Result<T> {
    non_empty(preds)?;
    let hits = preds.iter().filter(|p| p.gold == p.predicted).count();
    Ok(ratio(hits, preds.len()))
}

/// Per-item averaged precision and recall; an empty set contributes 0.
pub fn macro_precision_recall<T: Real, L: Ord + Clone>(
    preds: &[LabelSetPrediction<L>],
) -> Result<(T, T)> {
    non_empty(preds)?;
    let mut p = T::zero();
    let mut r = T::zero();
    for item in preds {
        let o = item.overlap();
        p += ratio::<T>(o, item.predicted.len());
        r += ratio::<T>(o, item.gold.len());
    }
    let n = T::from_usize_lossy(preds.len());
    Ok((p / n, r / n))
}

pub fn macro_f1<T: Real, L: Ord + Clone>(preds: &[LabelSetPrediction<L>]) -> Result<T> {
    let (p, r) = macro_precision_recall::<T, L>(preds)?;
    Ok(f1(p, r))
}

/// Pooled precision and recall over all items.
pub fn micro_precision_recall<T: Real, L: Ord + Clone>(
    preds: &[LabelSetPrediction<L>],
) -> Result<(T, T)> {
    non_empty(preds)?;
    let overlap: usize = preds.iter().map(LabelSetPrediction::overlap).sum();
    let predicted: usize = preds.iter().map(|p| p.predicted.len()).sum();
    let gold: usize = preds.iter().map(|p| p.gold.len()).sum();
    Ok((ratio(overlap, predicted), ratio(overlap, gold)))
}

pub fn micro_f1<T: Real, L: Ord + Clone>(preds: &[LabelSetPrediction<L>]) -> Result<T> {
    let (p, r) = micro_precision_recall::<T, L>(preds)?;
    Ok(f1(p, r))
}

/// One step of a word alignment; indices point into the reference and hypothesis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditOp {
    Match { r: usize, h: usize },
    Substitution { r: usize, h: usize },
    Deletion { r: usize },
    Insertion { h: usize },
}

/// Minimal unit-cost alignment between a reference and a hypothesis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub ops: Vec<EditOp>,
}

impl Alignment {
    pub fn substitutions(&self) -> usize {
        self.count(|op| matches!(op, EditOp::Substitution { .. }))
    }

    pub fn deletions(&self) -> usize {
        self.count(|op| matches!(op, EditOp::Deletion { .. }))
    }

    pub fn insertions(&self) -> usize {
        self.count(|op| matches!(op, EditOp::Insertion { .. }))
    }

    pub fn errors(&self) -> usize {
        self.substitutions() + self.deletions() + self.insertions()
    }

    fn count(&self, f: impl Fn(&EditOp) -> bool) -> usize {
        self.ops.iter().filter(|op| f(op)).count()
    }
}

/// Levenshtein alignment; backtrace prefers match, substitution, deletion, insertion.
pub fn align<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Alignment {
    let n = reference.len();
    let m = hypothesis.len();
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            let diag = d[(i - 1) * w + j - 1] + usize::from(!same);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(del).min(ins);
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let cur = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            let diag = d[(i - 1) * w + j - 1];
            if same && diag == cur {
                ops.push(EditOp::Match { r: i - 1, h: j - 1 });
                i -= 1;
                j -= 1;
                continue;
            }
            if !same && diag + 1 == cur {
                ops.push(EditOp::Substitution { r: i - 1, h: j - 1 });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == cur {
            ops.push(EditOp::Deletion { r: i - 1 });
            i -= 1;
        } else {
            ops.push(EditOp::Insertion { h: j - 1 });
            j -= 1;
        }
    }
    ops.reverse();
    Alignment { ops }
}

/// Error mass and reference mass for one utterance; pooled for corpus rates.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ErrorCounts<T> {
    pub errors: T,
    pub reference: T,
}

impl<T: Real> ErrorCounts<T> {
    pub fn rate(&self) -> T {
        self.errors / self.reference.max(T::one())
    }
}

impl<T: Real> std::ops::AddAssign for ErrorCounts<T> {
    fn add_assign(&mut self, rhs: Self) {
        self.errors += rhs.errors;
        self.reference += rhs.reference;
    }
}

pub fn wer_counts<T: Real, S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> ErrorCounts<T> {
    let a = align(reference, hypothesis);
    ErrorCounts {
        errors: T::from_usize_lossy(a.errors()),
        reference: T::from_usize_lossy(reference.len()),
    }
}

/// `(S + I + D) / |ref|`; an empty reference divides by 1.
pub fn wer<T: Real, S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> T {
    wer_counts::<T, S>(reference, hypothesis).rate()
}

/// Weighted error mass: substitutions and deletions cost the reference word's
/// weight, insertions the inserted word's weight.
pub fn weighted_wer_counts<T, S, W>(reference: &[S], hypothesis: &[S], weight: W) -> ErrorCounts<T>
where
    T: Real,
    S: AsRef<str>,
    W: Fn(&str) -> T,
{
    let a = align(reference, hypothesis);
    let mut errors = T::zero();
    for op in &a.ops {
        match *op {
            EditOp::Match { .. } => {}
            EditOp::Substitution { r, .. } | EditOp::Deletion { r } => {
                errors += weight(reference[r].as_ref())
            }
            EditOp::Insertion { h } => errors += weight(hypothesis[h].as_ref()),
        }
    }
    let reference_mass = reference.iter().map(|w| weight(w.as_ref())).sum();
    ErrorCounts {
        errors,
        reference: reference_mass,
    }
}

pub fn weighted_wer<T, S, W>(reference: &[S], hypothesis: &[S], weight: W) -> T
where
    T: Real,
    S: AsRef<str>,
    W: Fn(&str) -> T,
{
    let c = weighted_wer_counts(reference, hypothesis, weight);
    if c.reference > T::zero() {
        c.errors / c.reference
    } else {
        c.errors
    }
}

/// Named metric values rendered as JSON or as an aligned table.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
#[serde(transparent)]
pub struct MetricsReport {
    values: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: f64) {
        self.values.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.values).expect("map of f64 serializes")
    }

    pub fn to_table(&self) -> String {
        let width = self.values.keys().map(String::len).max().unwrap_or(6).max(6);
        let mut out = format!("{:<width$}  value\n", "metric");
        for (k, v) in &self.values {
            out.push_str(&format!("{k:<width$}  {v:.6}\n"));
        }
        out
    }
}
