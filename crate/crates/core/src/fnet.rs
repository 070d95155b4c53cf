//! Fine-grained entity typing with a bilinear joint embedding
//! `f(x, y) = (A x) · b_y`, trained with the WARP ranking loss. Label
//! embeddings can be learned jointly, fixed to a prior built from prototype
//! words and/or the type hierarchy, or pulled towards that prior.
//!
//! Matrices are stored row-per-item: `A` is M×D (one row per feature) and
//! label embeddings are N×D (one row per label).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingSet;
use crate::error::{Error, Result};
use crate::metrics::{
    macro_f1, macro_precision_recall, micro_f1, micro_precision_recall, strict_accuracy,
    LabelSetPrediction, MetricsReport,
};
use crate::numerics::{AdaGrad, DenseMatrix, Real, SeededRng, SparseVector};
use crate::textio::{read_file, LabeledMatrix, MatrixBundle};

/// Tree of type paths such as `/PERSON/ARTIST`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelHierarchy {
    labels: Vec<String>,
    index: HashMap<String, usize>,
    parent: Vec<Option<usize>>,
    level: Vec<usize>,
}

impl LabelHierarchy {
    /// Labels keep the given order; every non-root label's parent must be listed.
    pub fn from_paths<S: AsRef<str>>(paths: &[S]) -> Result<Self> {
        let mut labels = Vec::new();
        let mut index = HashMap::new();
        for p in paths {
            let p = p.as_ref().trim();
            let segs: Vec<&str> = p.split('/').skip(1).collect();
            if !p.starts_with('/') || segs.is_empty() || segs.iter().any(|s| s.is_empty()) {
                return Err(Error::InvalidInput(format!("bad label path {p:?}")));
            }
            if p.contains(char::is_whitespace) {
                return Err(Error::InvalidInput(format!("label path {p:?} contains whitespace")));
            }
            if index.insert(p.to_string(), labels.len()).is_some() {
                return Err(Error::InvalidInput(format!("duplicate label {p}")));
            }
            labels.push(p.to_string());
        }
        if labels.is_empty() {
            return Err(Error::Empty("label hierarchy"));
        }
        let mut parent = Vec::with_capacity(labels.len());
        let mut level = Vec::with_capacity(labels.len());
        for l in &labels {
            let depth = l.matches('/').count();
            level.push(depth);
            if depth == 1 {
                parent.push(None);
            } else {
                let cut = l.rfind('/').unwrap();
                let p = &l[..cut];
                let pid = index
                    .get(p)
                    .copied()
                    .ok_or_else(|| Error::InvalidInput(format!("parent {p} of {l} is not a label")))?;
                parent.push(Some(pid));
            }
        }
        Ok(Self {
            labels,
            index,
            parent,
            level,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let paths: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        Self::from_paths(&paths)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_file(path)?).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
    }

    pub fn render(&self) -> String {
        self.labels.iter().map(|l| format!("{l}\n")).collect()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn id_or_err(&self, label: &str) -> Result<usize> {
        self.id(label).ok_or_else(|| Error::Unknown {
            kind: "label",
            name: label.to_string(),
        })
    }

    pub fn parent(&self, id: usize) -> Option<usize> {
        self.parent[id]
    }

    /// Depth of the label: 1 for roots.
    pub fn level(&self, id: usize) -> usize {
        self.level[id]
    }

    pub fn max_depth(&self) -> usize {
        self.level.iter().copied().max().unwrap_or(0)
    }

    /// Root-to-label ids, ending with `id`.
    pub fn path(&self, id: usize) -> Vec<usize> {
        let mut p = vec![id];
        let mut cur = id;
        while let Some(par) = self.parent[cur] {
            p.push(par);
            cur = par;
        }
        p.reverse();
        p
    }

    pub fn ids_at_level(&self, level: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.level[i] == level).collect()
    }
}

/// One entity mention. Optional `pos`, `dep_heads` (index of the governor,
/// -1 for root) and `dep_rels` are per-token columns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionInstance {
    pub tokens: Vec<String>,
    pub start: usize,
    pub end: usize,
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dep_heads: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dep_rels: Option<Vec<String>>,
}

impl MentionInstance {
    pub fn new(tokens: &[&str], start: usize, end: usize, labels: &[&str]) -> Self {
        Self {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            start,
            end,
            labels: labels.iter().map(|s| s.to_string()).collect(),
            pos: None,
            dep_heads: None,
            dep_rels: None,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !(self.start < self.end && self.end <= self.tokens.len()) {
            return Err(format!(
                "span [{}, {}) invalid for {} tokens",
                self.start,
                self.end,
                self.tokens.len()
            ));
        }
        for (name, len) in [
            ("pos", self.pos.as_ref().map(Vec::len)),
            ("dep_heads", self.dep_heads.as_ref().map(Vec::len)),
            ("dep_rels", self.dep_rels.as_ref().map(Vec::len)),
        ] {
            if let Some(n) = len {
                if n != self.tokens.len() {
                    return Err(format!("{name} has {n} entries for {} tokens", self.tokens.len()));
                }
            }
        }
        Ok(())
    }

    /// Last token of the mention.
    pub fn head_index(&self) -> usize {
        self.end - 1
    }

    pub fn head(&self) -> String {
        self.tokens[self.head_index()].to_lowercase()
    }
}

pub fn parse_mentions(text: &str, source: &str) -> Result<Vec<MentionInstance>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let m: MentionInstance = serde_json::from_str(line).map_err(|e| Error::parse(source, i + 1, e.to_string()))?;
        m.validate().map_err(|e| Error::parse(source, i + 1, e))?;
        out.push(m);
    }
    Ok(out)
}

pub fn read_mentions(path: &Path) -> Result<Vec<MentionInstance>> {
    parse_mentions(&read_file(path)?, &path.display().to_string())
}

pub fn render_mentions(mentions: &[MentionInstance]) -> Result<String> {
    let mut out = String::new();
    for m in mentions {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    Ok(out)
}

/// Optional lookups feeding the cluster feature.
#[derive(Clone, Debug, Default)]
pub struct MentionResources {
    /// Lower-cased word to cluster id.
    pub clusters: HashMap<String, String>,
}

fn clean(s: &str) -> String {
    s.chars().map(|c| if c.is_whitespace() { '_' } else { c }).collect()
}

/// Collapsed character classes: upper `A`, lower `a`, digit `0`, other `-`.
pub fn word_shape(word: &str) -> String {
    let mut out = String::new();
    for c in word.chars() {
        let k = if c.is_uppercase() {
            'A'
        } else if c.is_lowercase() {
            'a'
        } else if c.is_numeric() {
            '0'
        } else {
            '-'
        };
        if !out.ends_with(k) {
            out.push(k);
        }
    }
    out
}

/// Lower-cased character trigrams of `word`, in order.
pub fn char_trigrams(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.to_lowercase().chars().collect();
    chars.windows(3).map(|w| w.iter().collect()).collect()
}

/// Feature strings of a mention: tokens, head, head cluster, head POS, head
/// trigrams, mention shape, context unigrams/bigrams, and dependency role /
/// governor when those columns exist. Sorted and de-duplicated.
pub fn extract_mention_features(m: &MentionInstance, res: &MentionResources) -> Vec<String> {
    let mut f = BTreeSet::new();
    for t in &m.tokens[m.start..m.end] {
        f.insert(format!("tok={}", clean(&t.to_lowercase())));
    }
    let h = m.head_index();
    let head = m.head();
    f.insert(format!("head={}", clean(&head)));
    if let Some(c) = res.clusters.get(&head) {
        f.insert(format!("cluster={}", clean(c)));
    }
    if let Some(pos) = &m.pos {
        f.insert(format!("pos={}", clean(&pos[h])));
    }
    for t in char_trigrams(&head) {
        f.insert(format!("tri={}", clean(&t)));
    }
    let shape: Vec<String> = m.tokens[m.start..m.end].iter().map(|t| word_shape(t)).collect();
    f.insert(format!("shape={}", shape.join("_")));

    let n = m.tokens.len();
    let tok = |i: usize| clean(&m.tokens[i].to_lowercase());
    for i in m.start.saturating_sub(2)..m.start {
        f.insert(format!("ctx={}", tok(i)));
    }
    for i in m.end..(m.end + 2).min(n) {
        f.insert(format!("ctx={}", tok(i)));
    }
    if m.start >= 2 {
        f.insert(format!("ctx2={}_{}", tok(m.start - 2), tok(m.start - 1)));
    }
    if m.end + 2 <= n {
        f.insert(format!("ctx2={}_{}", tok(m.end), tok(m.end + 1)));
    }
    if let Some(rels) = &m.dep_rels {
        f.insert(format!("role={}", clean(&rels[h])));
    }
    if let Some(heads) = &m.dep_heads {
        if let Ok(g) = usize::try_from(heads[h]) {
            if g < n {
                f.insert(format!("parent={}", tok(g)));
            }
        }
    }
    f.into_iter().collect()
}

/// Feature string to column id of `A`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FeatureIndex {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl FeatureIndex {
    pub fn from_names(names: Vec<String>) -> Result<Self> {
        let index: HashMap<String, usize> = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        if index.len() != names.len() {
            return Err(Error::InvalidInput("duplicate feature names".into()));
        }
        Ok(Self { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }

    /// Indicator vector; unknown features are added when `grow`, else dropped.
    pub fn vectorize<T: Real>(&mut self, features: &[String], grow: bool) -> SparseVector<T> {
        let ids: Vec<usize> = features
            .iter()
            .filter_map(|f| if grow { Some(self.intern(f)) } else { self.get(f) })
            .collect();
        SparseVector::indicator(ids)
    }
}

/// Sparse features plus gold label ids.
#[derive(Clone, Debug, PartialEq)]
pub struct TypingExample<T> {
    pub x: SparseVector<T>,
    pub labels: Vec<usize>,
}

pub fn build_examples<T: Real>(
    mentions: &[MentionInstance],
    hierarchy: &LabelHierarchy,
    res: &MentionResources,
    index: &mut FeatureIndex,
    grow: bool,
) -> Result<Vec<TypingExample<T>>> {
    mentions
        .iter()
        .map(|m| {
            let mut labels = Vec::with_capacity(m.labels.len());
            for l in &m.labels {
                labels.push(hierarchy.id_or_err(l)?);
            }
            labels.sort_unstable();
            labels.dedup();
            Ok(TypingExample {
                x: index.vectorize(&extract_mention_features(m, res), grow),
                labels,
            })
        })
        .collect()
}

/// Normalized PMI from counts over `n` events. Zero joint count gives -1; a
/// joint probability of 1 gives 1.
pub fn npmi(n: u64, c_y: u64, c_m: u64, c_ym: u64) -> f64 {
    if c_ym == 0 {
        return -1.0;
    }
    let n = n as f64;
    let p_ym = c_ym as f64 / n;
    if p_ym >= 1.0 {
        return 1.0;
    }
    let pmi = (p_ym / ((c_y as f64 / n) * (c_m as f64 / n))).ln();
    pmi / -p_ym.ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub word: String,
    /// NPMI for selected prototypes; `None` for manual or file-loaded lists.
    pub score: Option<f64>,
}

/// Ranked prototype head words per label, in hierarchy order.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeTable {
    pub entries: BTreeMap<String, Vec<Prototype>>,
}

impl PrototypeTable {
    pub fn get(&self, label: &str) -> Option<&[Prototype]> {
        self.entries.get(label).map(Vec::as_slice)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (label, protos) in &self.entries {
            let words: Vec<&str> = protos.iter().map(|p| p.word.as_str()).collect();
            out.push_str(&format!("{label}\t{}\n", words.join(",")));
        }
        out
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (label, words) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(source, i + 1, "expected `label<TAB>w1,w2,...`"))?;
            let protos: Vec<Prototype> = words
                .split(',')
                .map(str::trim)
                .filter(|w| !w.is_empty())
                .map(|w| Prototype {
                    word: w.to_string(),
                    score: None,
                })
                .collect();
            if protos.is_empty() {
                return Err(Error::parse(source, i + 1, "empty prototype list"));
            }
            entries.insert(label.trim().to_string(), protos);
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_file(path)?, &path.display().to_string())
    }
}

/// Top-`k` mention head words per label by NPMI (ties lexicographic). A
/// manual list replaces the NPMI list for its label.
pub fn select_prototypes(
    mentions: &[MentionInstance],
    hierarchy: &LabelHierarchy,
    k: usize,
    manual: &BTreeMap<String, Vec<String>>,
) -> Result<PrototypeTable> {
    if k == 0 {
        return Err(Error::InvalidInput("prototype count K must be >= 1".into()));
    }
    let n = mentions.len() as u64;
    let mut c_y: HashMap<&str, u64> = HashMap::new();
    let mut c_m: HashMap<String, u64> = HashMap::new();
    let mut c_ym: HashMap<&str, BTreeMap<String, u64>> = HashMap::new();
    for m in mentions {
        let head = m.head();
        *c_m.entry(head.clone()).or_default() += 1;
        let labels: BTreeSet<&str> = m.labels.iter().map(String::as_str).collect();
        for l in labels {
            *c_y.entry(l).or_default() += 1;
            *c_ym.entry(l).or_default().entry(head.clone()).or_default() += 1;
        }
    }
    let mut entries = BTreeMap::new();
    for label in hierarchy.labels() {
        if let Some(words) = manual.get(label) {
            let mut seen = BTreeSet::new();
            let protos = words
                .iter()
                .filter(|w| seen.insert(w.as_str()))
                .take(k)
                .map(|w| Prototype {
                    word: w.clone(),
                    score: None,
                })
                .collect();
            entries.insert(label.clone(), protos);
            continue;
        }
        let Some(joint) = c_ym.get(label.as_str()) else {
            return Err(Error::InvalidInput(format!(
                "label {label} has no mentions and no manual prototypes"
            )));
        };
        let cy = c_y[label.as_str()];
        let mut scored: Vec<(String, f64)> = joint
            .iter()
            .map(|(w, &c)| (w.clone(), npmi(n, cy, c_m[w], c)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        entries.insert(
            label.clone(),
            scored
                .into_iter()
                .map(|(word, s)| Prototype { word, score: Some(s) })
                .collect(),
        );
    }
    Ok(PrototypeTable { entries })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelEmbeddingKind {
    ProtoLe,
    Hle,
    ProtoHle,
    Random,
}

impl LabelEmbeddingKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::ProtoLe => "proto",
            Self::Hle => "hle",
            Self::ProtoHle => "proto-hle",
            Self::Random => "random",
        }
    }
}

impl std::str::FromStr for LabelEmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proto" => Ok(Self::ProtoLe),
            "hle" => Ok(Self::Hle),
            "proto-hle" => Ok(Self::ProtoHle),
            "random" => Ok(Self::Random),
            _ => Err(Error::Unknown {
                kind: "label embedding",
                name: s.to_string(),
            }),
        }
    }
}

/// Label embedding prior `B̃`, one row per label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelEmbeddingMatrix<T> {
    pub kind: LabelEmbeddingKind,
    pub matrix: DenseMatrix<T>,
}

impl<T: Real> LabelEmbeddingMatrix<T> {
    pub fn to_labeled(&self, hierarchy: &LabelHierarchy) -> Result<LabeledMatrix<T>> {
        LabeledMatrix::new(hierarchy.labels().to_vec(), self.matrix.clone())
    }

    /// Reads rows keyed by label path, reordered to the hierarchy.
    pub fn from_labeled(lm: &LabeledMatrix<T>, hierarchy: &LabelHierarchy, kind: LabelEmbeddingKind) -> Result<Self> {
        let rows: HashMap<&str, usize> = lm.labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        if rows.len() != hierarchy.len() || lm.labels.len() != hierarchy.len() {
            return Err(Error::Shape(format!(
                "label embedding has {} rows for {} labels",
                lm.labels.len(),
                hierarchy.len()
            )));
        }
        let mut m = DenseMatrix::zeros(hierarchy.len(), lm.matrix.cols());
        for (i, l) in hierarchy.labels().iter().enumerate() {
            let r = *rows.get(l.as_str()).ok_or_else(|| Error::Unknown {
                kind: "label in embedding file",
                name: l.clone(),
            })?;
            m.row_mut(i).copy_from_slice(lm.matrix.row(r));
        }
        Ok(Self { kind, matrix: m })
    }
}

/// Row `i` is the mean embedding of label `i`'s (de-duplicated) prototype
/// words; out-of-vocabulary prototypes are skipped.
pub fn proto_le<T: Real>(
    prototypes: &PrototypeTable,
    hierarchy: &LabelHierarchy,
    emb: &EmbeddingSet<T>,
) -> Result<LabelEmbeddingMatrix<T>> {
    let d = emb.dims();
    let mut m = DenseMatrix::zeros(hierarchy.len(), d);
    for (i, label) in hierarchy.labels().iter().enumerate() {
        let protos = prototypes.get(label).filter(|p| !p.is_empty()).ok_or_else(|| {
            Error::InvalidInput(format!("no prototypes for label {label}"))
        })?;
        let mut seen = BTreeSet::new();
        let mut used = 0usize;
        for p in protos {
            if !seen.insert(p.word.as_str()) {
                continue;
            }
            let v = emb.vector(&p.word).or_else(|| emb.vector(&p.word.to_lowercase()));
            match v {
                Some(v) => {
                    for (a, &b) in m.row_mut(i).iter_mut().zip(v) {
                        *a += b;
                    }
                    used += 1;
                }
                None => log::warn!("prototype {:?} of {label} is not in the embeddings", p.word),
            }
        }
        if used == 0 {
            return Err(Error::InvalidInput(format!("every prototype of {label} is out of vocabulary")));
        }
        let inv = T::one() / T::from_usize_lossy(used);
        m.row_mut(i).iter_mut().for_each(|v| *v *= inv);
    }
    Ok(LabelEmbeddingMatrix {
        kind: LabelEmbeddingKind::ProtoLe,
        matrix: m,
    })
}

/// Binary N×N matrix: entry (i, j) is 1 iff `i == j` or `j` is the parent of
/// `i` (any ancestor when `transitive`).
pub fn hle<T: Real>(hierarchy: &LabelHierarchy, transitive: bool) -> LabelEmbeddingMatrix<T> {
    let n = hierarchy.len();
    let mut m = DenseMatrix::identity(n);
    for i in 0..n {
        if transitive {
            for a in hierarchy.path(i) {
                m[(i, a)] = T::one();
            }
        } else if let Some(p) = hierarchy.parent(i) {
            m[(i, p)] = T::one();
        }
    }
    LabelEmbeddingMatrix {
        kind: LabelEmbeddingKind::Hle,
        matrix: m,
    }
}

/// Row `c` is the ProtoLE row of `c` plus that of its parent(s): `B̃ᴴ B̃ᴾ`
/// with row-per-label storage.
pub fn proto_hle<T: Real>(bp: &LabelEmbeddingMatrix<T>, bh: &LabelEmbeddingMatrix<T>) -> Result<LabelEmbeddingMatrix<T>> {
    let (n, _) = bp.matrix.shape();
    if bh.matrix.shape() != (n, n) {
        return Err(Error::Shape(format!(
            "HLE is {:?}, expected {n}x{n}",
            bh.matrix.shape()
        )));
    }
    Ok(LabelEmbeddingMatrix {
        kind: LabelEmbeddingKind::ProtoHle,
        matrix: bh.matrix.matmul(&bp.matrix)?,
    })
}

/// Independent uniform label vectors in `[-1, 1]`.
pub fn random_label_embedding<T: Real>(n: usize, dims: usize, rng: &mut SeededRng) -> LabelEmbeddingMatrix<T> {
    LabelEmbeddingMatrix {
        kind: LabelEmbeddingKind::Random,
        matrix: DenseMatrix::uniform(n, dims, T::one(), rng),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointEmbeddingModel<T> {
    /// Feature embeddings, M×D.
    pub a: DenseMatrix<T>,
    /// Label embeddings, N×D.
    pub b: DenseMatrix<T>,
}

impl<T: Real> JointEmbeddingModel<T> {
    pub fn dims(&self) -> usize {
        self.a.cols()
    }

    /// `A x`
    pub fn project(&self, x: &SparseVector<T>) -> Vec<T> {
        let mut z = vec![T::zero(); self.dims()];
        for (i, v) in x.iter() {
            if i < self.a.rows() {
                crate::numerics::axpy(v, self.a.row(i), &mut z);
            }
        }
        z
    }

    pub fn score(&self, x: &SparseVector<T>, y: usize) -> Result<T> {
        if y >= self.b.rows() {
            return Err(Error::InvalidInput(format!("label id {y} out of range")));
        }
        if x.max_index().is_some_and(|i| i >= self.a.rows()) {
            return Err(Error::InvalidInput("feature index out of range".into()));
        }
        Ok(crate::numerics::dot(&self.project(x), self.b.row(y)))
    }

    pub fn scores(&self, x: &SparseVector<T>) -> Vec<T> {
        self.b.matvec(&self.project(x))
    }
}

/// `L(k) = Σ_{i=1..k} 1/i`
pub fn warp_weight<T: Real>(k: usize) -> T {
    (1..=k).map(|i| T::one() / T::from_usize_lossy(i)).sum()
}

/// Number of negatives `y'` with `1 + f(x, y') > f(x, y)`.
pub fn warp_rank<T: Real>(scores: &[T], y: usize, negatives: &[usize]) -> usize {
    negatives
        .iter()
        .filter(|&&j| T::one() + scores[j] > scores[y])
        .count()
}

/// Weighted hinge `w · max(0, 1 - f(x,y) + f(x,y'))` and its dense gradients
/// with respect to `A` and `B` (the weight is held constant).
pub fn warp_hinge_grad<T: Real>(
    model: &JointEmbeddingModel<T>,
    x: &SparseVector<T>,
    y: usize,
    y_neg: usize,
    weight: T,
) -> (T, DenseMatrix<T>, DenseMatrix<T>) {
    let z = model.project(x);
    let s_pos = crate::numerics::dot(&z, model.b.row(y));
    let s_neg = crate::numerics::dot(&z, model.b.row(y_neg));
    let margin = T::one() - s_pos + s_neg;
    let mut ga = DenseMatrix::zeros(model.a.rows(), model.dims());
    let mut gb = DenseMatrix::zeros(model.b.rows(), model.dims());
    if margin <= T::zero() {
        return (T::zero(), ga, gb);
    }
    let diff: Vec<T> = model
        .b
        .row(y_neg)
        .iter()
        .zip(model.b.row(y))
        .map(|(&n, &p)| weight * (n - p))
        .collect();
    for (i, v) in x.iter() {
        crate::numerics::axpy(v, &diff, ga.row_mut(i));
    }
    crate::numerics::axpy(-weight, &z, gb.row_mut(y));
    crate::numerics::axpy(weight, &z, gb.row_mut(y_neg));
    (weight * margin, ga, gb)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WarpMode {
    /// Learn `B` freely from a random start.
    Joint,
    /// Keep `B = B̃`.
    Fixed,
    /// Learn `B` with the penalty `λ ‖B - B̃‖²_F`.
    Adaptive { lambda: f64 },
}

impl WarpMode {
    pub fn parse(name: &str, lambda: f64) -> Result<Self> {
        match name {
            "joint" => Ok(Self::Joint),
            "fixed" => Ok(Self::Fixed),
            "adaptive" => Ok(Self::Adaptive { lambda }),
            _ => Err(Error::Unknown {
                kind: "training mode",
                name: name.to_string(),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Joint => "joint",
            Self::Fixed => "fixed",
            Self::Adaptive { .. } => "adaptive",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarpConfig {
    /// Embedding size for joint mode; otherwise taken from `B̃`.
    pub dims: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Exact ranks up to this many labels, sampled estimate above.
    pub exact_rank_max: usize,
    /// Labels removed from both the gold and the negative sets (unseen types).
    pub excluded: BTreeSet<usize>,
    pub seed: u64,
}

impl Default for WarpConfig {
    fn default() -> Self {
        Self {
            dims: 300,
            epochs: 10,
            lr: 0.1,
            exact_rank_max: 1000,
            excluded: BTreeSet::new(),
            seed: 1,
        }
    }
}

/// SGD over `(x, y ∈ Y, y' ∈ Ȳ)` triples with rank-weighted hinge updates
/// and per-parameter AdaGrad.
pub fn warp_train<T: Real>(
    examples: &[TypingExample<T>],
    n_features: usize,
    n_labels: usize,
    b_init: Option<&LabelEmbeddingMatrix<T>>,
    mode: WarpMode,
    cfg: &WarpConfig,
) -> Result<JointEmbeddingModel<T>> {
    if cfg.epochs == 0 || cfg.lr <= 0.0 {
        return Err(Error::InvalidInput("need epochs >= 1 and lr > 0".into()));
    }
    if examples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let prior = match (mode, b_init) {
        (WarpMode::Joint, _) => None,
        (_, Some(b)) => Some(&b.matrix),
        (_, None) => {
            return Err(Error::InvalidInput(format!("{} mode needs label embeddings", mode.name())));
        }
    };
    if let Some(p) = prior {
        if p.rows() != n_labels {
            return Err(Error::Shape(format!("{} label rows for {n_labels} labels", p.rows())));
        }
        if !p.is_finite() {
            return Err(Error::NonFinite("label embeddings".into()));
        }
    }
    let dims = prior.map_or(cfg.dims, DenseMatrix::cols);
    if dims == 0 {
        return Err(Error::InvalidInput("embedding dims must be >= 1".into()));
    }
    let mut init_rng = SeededRng::substream(cfg.seed, "warp-init");
    let scale = T::one() / T::from_usize_lossy(dims).sqrt();
    let a = DenseMatrix::uniform(n_features, dims, scale * T::lit(0.1), &mut init_rng);
    let b = match prior {
        Some(p) => p.clone(),
        None => DenseMatrix::uniform(n_labels, dims, scale, &mut init_rng),
    };
    let mut model = JointEmbeddingModel { a, b };
    let lr = T::lit(cfg.lr);
    let mut ada_a = AdaGrad::new(lr, model.a.as_slice().len());
    let mut ada_b = AdaGrad::new(lr, model.b.as_slice().len());
    let mut rng = SeededRng::substream(cfg.seed, "warp-train");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut skipped = 0usize;

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut loss = T::zero();
        for &ei in &order {
            let ex = &examples[ei];
            if ex.x.max_index().is_some_and(|i| i >= n_features) {
                return Err(Error::InvalidInput(format!("example {ei} has out-of-range features")));
            }
            let gold: BTreeSet<usize> = ex.labels.iter().copied().filter(|l| !cfg.excluded.contains(l)).collect();
            if gold.is_empty() {
                continue;
            }
            let negatives: Vec<usize> = (0..n_labels)
                .filter(|l| !gold.contains(l) && !cfg.excluded.contains(l))
                .collect();
            if negatives.is_empty() {
                if epoch == 0 {
                    skipped += 1;
                }
                continue;
            }
            for &y in &gold {
                let scores = model.scores(&ex.x);
                let Some((rank, y_neg)) = sample_violator(&scores, y, &negatives, cfg.exact_rank_max, &mut rng)
                else {
                    continue;
                };
                let w: T = warp_weight(rank);
                let z = model.project(&ex.x);
                let margin = T::one() - scores[y] + scores[y_neg];
                loss += w * margin;
                // gradients at the current parameters, then AdaGrad steps
                let diff: Vec<T> = model
                    .b
                    .row(y_neg)
                    .iter()
                    .zip(model.b.row(y))
                    .map(|(&n, &p)| w * (n - p))
                    .collect();
                let d = dims;
                for (i, v) in ex.x.iter() {
                    for k in 0..d {
                        let g = v * diff[k];
                        ada_a.step(i * d + k, &mut model.a[(i, k)], g);
                    }
                }
                match mode {
                    WarpMode::Fixed => {}
                    WarpMode::Joint => {
                        for k in 0..d {
                            ada_b.step(y * d + k, &mut model.b[(y, k)], -w * z[k]);
                            ada_b.step(y_neg * d + k, &mut model.b[(y_neg, k)], w * z[k]);
                        }
                    }
                    WarpMode::Adaptive { lambda } => {
                        let lam2 = T::lit(2.0 * lambda);
                        let p = prior.expect("adaptive mode has a prior");
                        for l in 0..n_labels {
                            for k in 0..d {
                                let mut g = lam2 * (model.b[(l, k)] - p[(l, k)]);
                                if l == y {
                                    g -= w * z[k];
                                } else if l == y_neg {
                                    g += w * z[k];
                                }
                                ada_b.step(l * d + k, &mut model.b[(l, k)], g);
                            }
                        }
                    }
                }
            }
        }
        if !loss.is_finite() || !model.a.is_finite() || !model.b.is_finite() {
            return Err(Error::NonFinite(format!("WARP training diverged at epoch {epoch}")));
        }
        log::info!("warp epoch {} loss {:.4}", epoch + 1, loss.to_f64_lossy());
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} examples whose gold set covers every label");
    }
    Ok(model)
}

/// Rank of `y` and a violating negative drawn uniformly. Exact when there are
/// at most `exact_max` negatives; otherwise draws negatives until one
/// violates and estimates the rank as `⌊|Ȳ| / trials⌋`.
fn sample_violator<T: Real>(
    scores: &[T],
    y: usize,
    negatives: &[usize],
    exact_max: usize,
    rng: &mut SeededRng,
) -> Option<(usize, usize)> {
    let violates = |j: usize| T::one() + scores[j] > scores[y];
    if negatives.len() <= exact_max {
        let viol: Vec<usize> = negatives.iter().copied().filter(|&j| violates(j)).collect();
        if viol.is_empty() {
            return None;
        }
        let pick = viol[rng.below(viol.len())];
        return Some((viol.len(), pick));
    }
    for trials in 1..=negatives.len() {
        let j = negatives[rng.below(negatives.len())];
        if violates(j) {
            return Some(((negatives.len() / trials).max(1), j));
        }
    }
    None
}

/// Greedy path-consistent selection over the top-`k` candidates: a
/// candidate is considered when `S₁ - S_c ≤ t`, and its path is admitted
/// level by level while it agrees with labels already chosen.
pub fn type_infer<T: Real>(ranked: &[(usize, T)], hierarchy: &LabelHierarchy, t: T, k: usize) -> BTreeSet<usize> {
    let mut cands = ranked.to_vec();
    cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let mut chosen: Vec<Option<usize>> = vec![None; hierarchy.max_depth()];
    let Some(&(_, best)) = cands.first() else {
        return BTreeSet::new();
    };
    for &(c, s) in cands.iter().take(k) {
        if best - s > t {
            continue;
        }
        for (lvl, p) in hierarchy.path(c).into_iter().enumerate() {
            match chosen[lvl] {
                None => chosen[lvl] = Some(p),
                Some(q) if q == p => {}
                Some(_) => break,
            }
        }
    }
    chosen.into_iter().flatten().collect()
}

pub fn predict<T: Real>(
    model: &JointEmbeddingModel<T>,
    x: &SparseVector<T>,
    hierarchy: &LabelHierarchy,
    t: T,
    k: usize,
) -> BTreeSet<usize> {
    let ranked: Vec<(usize, T)> = model.scores(x).into_iter().enumerate().collect();
    type_infer(&ranked, hierarchy, t, k)
}

pub fn set_metrics<L: Ord + Clone>(preds: &[LabelSetPrediction<L>]) -> Result<MetricsReport> {
    let mut r = MetricsReport::new();
    r.insert("strict_acc", strict_accuracy::<f64, L>(preds)?);
    let (mp, mr) = macro_precision_recall::<f64, L>(preds)?;
    r.insert("macro_precision", mp);
    r.insert("macro_recall", mr);
    r.insert("macro_f1", macro_f1::<f64, L>(preds)?);
    let (up, ur) = micro_precision_recall::<f64, L>(preds)?;
    r.insert("micro_precision", up);
    r.insert("micro_recall", ur);
    r.insert("micro_f1", micro_f1::<f64, L>(preds)?);
    Ok(r)
}

pub fn predict_all<T: Real>(
    model: &JointEmbeddingModel<T>,
    examples: &[TypingExample<T>],
    hierarchy: &LabelHierarchy,
    t: T,
    k: usize,
) -> Vec<LabelSetPrediction<usize>> {
    examples
        .iter()
        .map(|e| LabelSetPrediction::new(e.labels.iter().copied(), predict(model, &e.x, hierarchy, t, k)))
        .collect()
}

pub fn evaluate<T: Real>(
    model: &JointEmbeddingModel<T>,
    examples: &[TypingExample<T>],
    hierarchy: &LabelHierarchy,
    t: T,
    k: usize,
) -> Result<MetricsReport> {
    set_metrics(&predict_all(model, examples, hierarchy, t, k))
}

/// Threshold grid `0, 0.1, ..., 2.0`.
pub fn default_threshold_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 10.0).collect()
}

/// Threshold with the best strict accuracy on `dev` (micro-F1, then the
/// smaller threshold, break ties).
pub fn sweep_threshold<T: Real>(
    model: &JointEmbeddingModel<T>,
    dev: &[TypingExample<T>],
    hierarchy: &LabelHierarchy,
    k: usize,
    grid: &[f64],
) -> Result<(f64, MetricsReport)> {
    let mut best: Option<(f64, MetricsReport)> = None;
    for &t in grid {
        let r = evaluate(model, dev, hierarchy, T::lit(t), k)?;
        let key = |r: &MetricsReport| (r.get("strict_acc").unwrap(), r.get("micro_f1").unwrap());
        if best.as_ref().is_none_or(|(_, b)| key(&r) > key(b)) {
            best = Some((t, r));
        }
    }
    best.ok_or(Error::Empty("threshold grid"))
}

/// Model file: a bundle with `A` rows keyed by feature string and `B` rows
/// keyed by label path.
pub fn model_bundle<T: Real>(
    model: &JointEmbeddingModel<T>,
    features: &FeatureIndex,
    hierarchy: &LabelHierarchy,
    mode: WarpMode,
    label_emb: &str,
) -> Result<MatrixBundle<T>> {
    let mut b = MatrixBundle::new("fnet");
    b.set("mode", mode.name());
    b.set("label_emb", label_emb);
    b.set("dims", model.dims());
    b.push("A", LabeledMatrix::new(features.names().to_vec(), model.a.clone())?);
    b.push("B", LabeledMatrix::new(hierarchy.labels().to_vec(), model.b.clone())?);
    Ok(b)
}

pub fn model_from_bundle<T: Real>(
    mut bundle: MatrixBundle<T>,
    hierarchy: &LabelHierarchy,
) -> Result<(JointEmbeddingModel<T>, FeatureIndex)> {
    if bundle.kind != "fnet" {
        return Err(Error::InvalidInput(format!("expected an fnet model, found {}", bundle.kind)));
    }
    let a = bundle.take_block("A")?;
    let b = bundle.take_block("B")?;
    let b = LabelEmbeddingMatrix::from_labeled(&b, hierarchy, LabelEmbeddingKind::Random)?.matrix;
    if a.matrix.cols() != b.cols() {
        return Err(Error::Shape("A and B disagree on dims".into()));
    }
    let features = FeatureIndex::from_names(a.labels)?;
    Ok((JointEmbeddingModel { a: a.matrix, b }, features))
}
