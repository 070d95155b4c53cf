//! Multi-task skip-gram ("Skip_NER"): each centre word predicts a set of
//! grouped features (context words, POS tags, taxonomy concepts, NE tags per
//! relative position) with a softmax restricted to the feature's group,
//! approximated by negative sampling within that group. Also derives the
//! binarized and clustered word features used by downstream taggers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::corpus::{
    Corpus, FeatureEvent, FeatureGroupTable, FeatureKind, GroupKey, Vocabulary, UNK,
};
use crate::error::{Error, Result};
use crate::numerics::{
    cosine, dot, kmeans, log_sigmoid, sigmoid, softmax_unchecked, DenseMatrix, DiscreteSampler,
    Real, SeededRng,
};
use crate::textio::{write_file, LabeledMatrix};

/// Word vectors plus one output matrix per trained feature group.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet<T> {
    words: Vec<String>,
    index: HashMap<String, usize>,
    pub word_vectors: DenseMatrix<T>,
    /// Group keys aligned with the feature table's group ids.
    pub groups: Vec<GroupKey>,
    /// `None` for groups disabled during training.
    pub feature_vectors: Vec<Option<DenseMatrix<T>>>,
}

impl<T: Real> EmbeddingSet<T> {
    pub fn new(words: Vec<String>, word_vectors: DenseMatrix<T>) -> Result<Self> {
        if words.len() != word_vectors.rows() {
            return Err(Error::Shape(format!(
                "{} words for {} vectors",
                words.len(),
                word_vectors.rows()
            )));
        }
        if words.is_empty() {
            return Err(Error::Empty("embedding set"));
        }
        if !word_vectors.is_finite() {
            return Err(Error::NonFinite("word vectors".into()));
        }
        let index: HashMap<String, usize> =
            words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        if index.len() != words.len() {
            return Err(Error::InvalidInput("duplicate words in embedding set".into()));
        }
        Ok(Self {
            words,
            index,
            word_vectors,
            groups: Vec::new(),
            feature_vectors: Vec::new(),
        })
    }

    pub fn dims(&self) -> usize {
        self.word_vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Row of `word`, or of `<unk>` when the word is unknown and `<unk>` exists.
    pub fn row_or_unk(&self, word: &str) -> Option<usize> {
        self.id(word).or_else(|| self.id(UNK))
    }

    pub fn vector(&self, word: &str) -> Option<&[T]> {
        self.id(word).map(|i| self.word_vectors.row(i))
    }

    pub fn feature_matrix(&self, key: GroupKey) -> Option<&DenseMatrix<T>> {
        let g = self.groups.iter().position(|&k| k == key)?;
        self.feature_vectors[g].as_ref()
    }

    /// Grouped softmax `p(f | w)` over the features of `group`.
    pub fn group_prob(&self, w: usize, group: usize, f: usize) -> Result<T> {
        let dist = self.group_distribution(w, group)?;
        dist.get(f)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("feature id {f} out of range for group {group}")))
    }

    /// `p(· | w)` for every feature of `group`.
    pub fn group_distribution(&self, w: usize, group: usize) -> Result<Vec<T>> {
        if w >= self.len() {
            return Err(Error::InvalidInput(format!("word id {w} out of range")));
        }
        let m = self
            .feature_vectors
            .get(group)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::InvalidInput(format!("no trained feature group {group}")))?;
        if m.rows() == 0 {
            return Err(Error::Empty("feature group"));
        }
        let vw = self.word_vectors.row(w);
        let scores: Vec<T> = (0..m.rows()).map(|f| dot(m.row(f), vw)).collect();
        Ok(softmax_unchecked(&scores))
    }
}

/// Negative-sampling loss for one event and its gradients:
/// `-log σ(v_f·v_w) - Σ log σ(-v_{f'}·v_w)`.
#[derive(Clone, Debug)]
pub struct NsGradient<T> {
    pub loss: T,
    pub word: Vec<T>,
    /// `(feature row, gradient)` in target order: positive first, then negatives.
    pub features: Vec<(usize, Vec<T>)>,
}

pub fn ns_loss_grad<T: Real>(vw: &[T], features: &DenseMatrix<T>, f: usize, negatives: &[usize]) -> NsGradient<T> {
    let mut loss = T::zero();
    let mut gw = vec![T::zero(); vw.len()];
    let mut gf = Vec::with_capacity(negatives.len() + 1);
    let targets = std::iter::once((f, true)).chain(negatives.iter().map(|&j| (j, false)));
    for (t, positive) in targets {
        let vt = features.row(t);
        let s = dot(vt, vw);
        let (l, g) = if positive {
            (-log_sigmoid(s), sigmoid(s) - T::one())
        } else {
            (-log_sigmoid(-s), sigmoid(s))
        };
        loss += l;
        for (a, &b) in gw.iter_mut().zip(vt) {
            *a += g * b;
        }
        gf.push((t, vw.iter().map(|&x| g * x).collect()));
    }
    NsGradient {
        loss,
        word: gw,
        features: gf,
    }
}

fn apply_event<T: Real>(
    word_vectors: &mut DenseMatrix<T>,
    features: &mut DenseMatrix<T>,
    event: &FeatureEvent,
    negatives: &[usize],
    lr: T,
) -> T {
    let w = event.center_word_id;
    let grad = ns_loss_grad(word_vectors.row(w), features, event.feature_id, negatives);
    for (t, g) in &grad.features {
        for (p, &d) in features.row_mut(*t).iter_mut().zip(g) {
            *p -= lr * d;
        }
    }
    for (p, &d) in word_vectors.row_mut(w).iter_mut().zip(&grad.word) {
        *p -= lr * d;
    }
    grad.loss
}

/// One negative-sampling SGD update on `event`; returns the loss before the update.
pub fn sgd_step<T: Real>(
    emb: &mut EmbeddingSet<T>,
    event: &FeatureEvent,
    samplers: &[Option<DiscreteSampler>],
    lr: T,
    n: usize,
    rng: &mut SeededRng,
) -> Result<T> {
    let g = event.group_id;
    let sampler = samplers
        .get(g)
        .and_then(Option::as_ref)
        .ok_or_else(|| Error::InvalidInput(format!("no sampler for group {g}")))?;
    let negatives: Vec<usize> = (0..n).map(|_| sampler.sample(rng)).collect();
    let feats = emb
        .feature_vectors
        .get_mut(g)
        .and_then(Option::as_mut)
        .ok_or_else(|| Error::InvalidInput(format!("group {g} is not trained")))?;
    if event.center_word_id >= emb.word_vectors.rows() || event.feature_id >= feats.rows() {
        return Err(Error::InvalidInput("event ids out of range".into()));
    }
    Ok(apply_event(&mut emb.word_vectors, feats, event, &negatives, lr))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkipNerConfig {
    pub dims: usize,
    pub window: usize,
    pub negatives: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub epochs: usize,
    pub kinds: BTreeSet<FeatureKind>,
    pub tie_word_offsets: bool,
    /// Exponent applied to feature counts for the negative sampler.
    pub smoothing: f64,
    pub seed: u64,
    pub workers: usize,
}

impl Default for SkipNerConfig {
    fn default() -> Self {
        Self {
            dims: 50,
            window: 2,
            negatives: 5,
            lr: 0.025,
            min_lr: 1e-4,
            epochs: 1,
            kinds: FeatureKind::ALL.into_iter().collect(),
            tie_word_offsets: false,
            smoothing: 1.0,
            seed: 1,
            workers: 1,
        }
    }
}

impl SkipNerConfig {
    fn validate(&self) -> Result<()> {
        if self.dims == 0 || self.negatives == 0 || self.epochs == 0 || self.workers == 0 {
            return Err(Error::InvalidInput(
                "dims, negatives, epochs and workers must be >= 1".into(),
            ));
        }
        if self.kinds.is_empty() {
            return Err(Error::InvalidInput("no feature group enabled".into()));
        }
        if !(self.lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return Err(Error::InvalidInput("need 0 <= min_lr <= lr, lr > 0".into()));
        }
        Ok(())
    }

    pub fn feature_config(&self) -> crate::corpus::FeatureConfig {
        crate::corpus::FeatureConfig {
            window: self.window,
            kinds: self.kinds.clone(),
            tie_word_offsets: self.tie_word_offsets,
        }
    }

    fn lr_at<T: Real>(&self, done: u64, total: u64) -> T {
        let frac = done as f64 / total.max(1) as f64;
        T::lit((self.lr - (self.lr - self.min_lr) * frac).max(self.min_lr))
    }
}

fn init_set<T: Real>(vocab: &Vocabulary, dims: usize, seed: u64) -> Result<EmbeddingSet<T>> {
    let mut rng = SeededRng::substream(seed, "embed-init");
    let scale = T::lit(0.5 / dims as f64);
    let wv = DenseMatrix::uniform(vocab.len(), dims, scale, &mut rng);
    EmbeddingSet::new(vocab.words().to_vec(), wv)
}

fn run_epochs<T: Real>(
    emb: &mut EmbeddingSet<T>,
    events: &[FeatureEvent],
    samplers: &[Option<DiscreteSampler>],
    cfg: &SkipNerConfig,
    on_epoch: &mut dyn FnMut(usize, &EmbeddingSet<T>),
) -> Result<()> {
    if cfg.workers > 1 {
        return run_epochs_parallel(emb, events, samplers, cfg, on_epoch);
    }
    let mut rng = SeededRng::substream(cfg.seed, "embed-train");
    let total = (events.len() * cfg.epochs) as u64;
    let mut done = 0u64;
    for epoch in 0..cfg.epochs {
        let mut loss = T::zero();
        for e in events {
            let lr = cfg.lr_at(done, total);
            loss += sgd_step(emb, e, samplers, lr, cfg.negatives, &mut rng)?;
            done += 1;
        }
        if !loss.is_finite() || !emb.word_vectors.is_finite() {
            return Err(Error::NonFinite(format!("embedding loss at epoch {epoch}")));
        }
        log::info!(
            "epoch {} mean loss {:.5}",
            epoch + 1,
            loss.to_f64_lossy() / events.len() as f64
        );
        on_epoch(epoch, emb);
    }
    Ok(())
}

/// Worker threads share the parameter tables through per-row locks; update
/// order across workers is unsynchronized, so results vary between runs.
fn run_epochs_parallel<T: Real>(
    emb: &mut EmbeddingSet<T>,
    events: &[FeatureEvent],
    samplers: &[Option<DiscreteSampler>],
    cfg: &SkipNerConfig,
    on_epoch: &mut dyn FnMut(usize, &EmbeddingSet<T>),
) -> Result<()> {
    let to_rows = |m: &DenseMatrix<T>| -> Vec<Mutex<Vec<T>>> {
        (0..m.rows()).map(|r| Mutex::new(m.row(r).to_vec())).collect()
    };
    let total = (events.len() * cfg.epochs) as u64;
    let done = AtomicU64::new(0);
    let chunk = events.len().div_ceil(cfg.workers);
    for epoch in 0..cfg.epochs {
        let words = to_rows(&emb.word_vectors);
        let feats: Vec<Option<Vec<Mutex<Vec<T>>>>> =
            emb.feature_vectors.iter().map(|m| m.as_ref().map(to_rows)).collect();
        std::thread::scope(|s| {
            for (wi, shard) in events.chunks(chunk.max(1)).enumerate() {
                let (words, feats, done) = (&words, &feats, &done);
                s.spawn(move || {
                    let mut rng = SeededRng::substream(cfg.seed, &format!("embed-train-{epoch}-{wi}"));
                    for e in shard {
                        let lr: T = cfg.lr_at(done.fetch_add(1, Ordering::Relaxed), total);
                        let (Some(sampler), Some(table)) =
                            (&samplers[e.group_id], &feats[e.group_id])
                        else {
                            continue;
                        };
                        let vw = words[e.center_word_id].lock().unwrap().clone();
                        let mut gw = vec![T::zero(); vw.len()];
                        let negs = (0..cfg.negatives).map(|_| (sampler.sample(&mut rng), false));
                        for (t, positive) in std::iter::once((e.feature_id, true)).chain(negs) {
                            let mut vt = table[t].lock().unwrap();
                            let sc = dot(&vt, &vw);
                            let g = if positive { sigmoid(sc) - T::one() } else { sigmoid(sc) };
                            for k in 0..vw.len() {
                                gw[k] += g * vt[k];
                                vt[k] -= lr * g * vw[k];
                            }
                        }
                        let mut row = words[e.center_word_id].lock().unwrap();
                        for (p, d) in row.iter_mut().zip(&gw) {
                            *p -= lr * *d;
                        }
                    }
                });
            }
        });
        let collect = |rows: Vec<Mutex<Vec<T>>>, cols: usize| -> Result<DenseMatrix<T>> {
            let n = rows.len();
            let data = rows.into_iter().flat_map(|m| m.into_inner().unwrap()).collect();
            DenseMatrix::from_vec(n, cols, data)
        };
        let d = emb.dims();
        emb.word_vectors = collect(words, d)?;
        for (slot, rows) in emb.feature_vectors.iter_mut().zip(feats) {
            if let Some(rows) = rows {
                *slot = Some(collect(rows, d)?);
            }
        }
        if !emb.word_vectors.is_finite() {
            return Err(Error::NonFinite(format!("embeddings at epoch {epoch}")));
        }
        on_epoch(epoch, emb);
    }
    Ok(())
}

/// Trains on events extracted with `table`; groups whose kind is not enabled
/// in `cfg` are skipped and keep no output matrix.
pub fn train_skipner<T: Real>(
    events: &[FeatureEvent],
    table: &FeatureGroupTable,
    vocab: &Vocabulary,
    cfg: &SkipNerConfig,
) -> Result<EmbeddingSet<T>> {
    train_skipner_with(events, table, vocab, cfg, &mut |_, _| {})
}

/// As [`train_skipner`], calling `on_epoch` after every epoch.
pub fn train_skipner_with<T: Real>(
    events: &[FeatureEvent],
    table: &FeatureGroupTable,
    vocab: &Vocabulary,
    cfg: &SkipNerConfig,
    on_epoch: &mut dyn FnMut(usize, &EmbeddingSet<T>),
) -> Result<EmbeddingSet<T>> {
    cfg.validate()?;
    let enabled: Vec<bool> = table.keys().iter().map(|k| cfg.kinds.contains(&k.kind)).collect();
    let events: Vec<FeatureEvent> = events
        .iter()
        .filter(|e| enabled.get(e.group_id).copied().unwrap_or(false))
        .copied()
        .collect();
    if events.is_empty() {
        return Err(Error::Empty("feature event stream"));
    }
    let mut emb = init_set(vocab, cfg.dims, cfg.seed)?;
    emb.groups = table.keys().to_vec();
    let mut samplers = Vec::with_capacity(table.num_groups());
    for (g, &on) in enabled.iter().enumerate() {
        if on {
            emb.feature_vectors
                .push(Some(DenseMatrix::zeros(table.group_len(g), cfg.dims)));
            samplers.push(Some(DiscreteSampler::from_counts(table.counts(g), cfg.smoothing)?));
        } else {
            emb.feature_vectors.push(None);
            samplers.push(None);
        }
    }
    run_epochs(&mut emb, &events, &samplers, cfg, on_epoch)?;
    Ok(emb)
}

/// Plain skip-gram with negative sampling over `(centre, context)` pairs in
/// a symmetric window, sampling negatives from context frequencies.
pub fn train_skipgram<T: Real>(corpus: &Corpus, vocab: &Vocabulary, cfg: &SkipNerConfig) -> Result<EmbeddingSet<T>> {
    cfg.validate()?;
    let w = cfg.window as i64;
    let mut pairs = Vec::new();
    let mut counts = vec![0u64; vocab.len()];
    for s in &corpus.sentences {
        let ids: Vec<usize> = s.iter().map(|t| vocab.id(&t.surface)).collect();
        for i in 0..ids.len() as i64 {
            for k in -w..=w {
                let j = i + k;
                if k == 0 || j < 0 || j >= ids.len() as i64 {
                    continue;
                }
                let ctx = ids[j as usize];
                counts[ctx] += 1;
                pairs.push(FeatureEvent {
                    center_word_id: ids[i as usize],
                    feature_id: ctx,
                    group_id: 0,
                });
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Empty("skip-gram pair stream"));
    }
    let mut emb = init_set(vocab, cfg.dims, cfg.seed)?;
    emb.groups = vec![GroupKey {
        kind: FeatureKind::Word,
        offset: None,
    }];
    emb.feature_vectors = vec![Some(DenseMatrix::zeros(vocab.len(), cfg.dims))];
    let samplers = vec![Some(DiscreteSampler::from_counts(&counts, cfg.smoothing)?)];
    run_epochs(&mut emb, &pairs, &samplers, cfg, &mut |_, _| {})?;
    Ok(emb)
}

/// Exact objective `Σ log p(f | w)` over `events`, by full enumeration of each group.
pub fn full_softmax_objective<T: Real>(emb: &EmbeddingSet<T>, events: &[FeatureEvent]) -> Result<T> {
    let mut total = T::zero();
    for e in events {
        total += emb.group_prob(e.center_word_id, e.group_id, e.feature_id)?.ln();
    }
    Ok(total)
}

/// Top `k` words by cosine similarity to `query`, excluding the query itself.
pub fn nearest_neighbors<T: Real>(emb: &EmbeddingSet<T>, query: &str, k: usize) -> Result<Vec<(String, T)>> {
    let q = emb.id(query).ok_or_else(|| Error::Unknown {
        kind: "word",
        name: query.to_string(),
    })?;
    let qv = emb.word_vectors.row(q);
    let mut scored: Vec<(usize, T)> = (0..emb.len())
        .filter(|&i| i != q)
        .map(|i| (i, cosine(qv, emb.word_vectors.row(i))))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored
        .into_iter()
        .map(|(i, c)| (emb.words[i].clone(), c))
        .collect())
}

/// Word-by-dimension matrix with entries in {-1, 0, 1}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinarizedMatrix {
    rows: usize,
    cols: usize,
    data: Vec<i8>,
}

impl BinarizedMatrix {
    pub fn from_rows(rows: Vec<Vec<i8>>) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.into_iter().flatten().collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[i8] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> i8 {
        self.data[r * self.cols + c]
    }
}

/// Per dimension, marks values at or above the mean of the dimension's
/// positive values as 1 and values at or below the mean of its negative
/// values as -1. A dimension without positive (negative) values yields no 1
/// (-1) entries.
pub fn binarize<T: Real>(vectors: &DenseMatrix<T>) -> BinarizedMatrix {
    let (n, d) = vectors.shape();
    let mut data = vec![0i8; n * d];
    for m in 0..d {
        let col = vectors.col(m);
        let mean_of = |keep: &dyn Fn(T) -> bool, sentinel: T| {
            let vals: Vec<T> = col.iter().copied().filter(|&v| keep(v)).collect();
            if vals.is_empty() {
                sentinel
            } else {
                vals.iter().copied().sum::<T>() / T::from_usize_lossy(vals.len())
            }
        };
        let pos = mean_of(&|v| v > T::zero(), T::infinity());
        let neg = mean_of(&|v| v < T::zero(), T::neg_infinity());
        for (r, &v) in col.iter().enumerate() {
            data[r * d + m] = if v > T::zero() && v >= pos {
                1
            } else if v < T::zero() && v <= neg {
                -1
            } else {
                0
            };
        }
    }
    BinarizedMatrix { rows: n, cols: d, data }
}

/// K-means cluster id of every word, for each requested K.
pub fn cluster_words<T: Real>(
    emb: &EmbeddingSet<T>,
    ks: &[usize],
    max_iters: usize,
    seed: u64,
) -> Result<BTreeMap<usize, Vec<usize>>> {
    let mut out = BTreeMap::new();
    for &k in ks {
        if k > emb.len() {
            return Err(Error::InvalidInput(format!(
                "K = {k} exceeds vocabulary size {}",
                emb.len()
            )));
        }
        let mut rng = SeededRng::substream(seed, &format!("kmeans-{k}"));
        let res = kmeans(&emb.word_vectors, k, max_iters, &mut rng)?;
        out.insert(k, res.assignments);
    }
    Ok(out)
}

pub fn save_embeddings<T: Real>(emb: &EmbeddingSet<T>, path: &Path) -> Result<()> {
    let lm = LabeledMatrix::new(emb.words.clone(), emb.word_vectors.clone())?;
    write_file(path, &lm.render())
}

pub fn load_embeddings<T: Real>(path: &Path) -> Result<EmbeddingSet<T>> {
    let lm = LabeledMatrix::<T>::read(path)?;
    EmbeddingSet::new(lm.labels, lm.matrix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, extract_feature_events, FeatureConfig};
    use crate::numerics::fd_gradcheck;
    use proptest::prelude::*;

    fn toy(words: &[&str], vectors: &[Vec<f64>]) -> EmbeddingSet<f64> {
        EmbeddingSet::new(
            words.iter().map(|w| w.to_string()).collect(),
            DenseMatrix::from_rows(vectors).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn group_prob_examples() {
        let mut e = toy(&["w"], &[vec![1.0, 0.0]]);
        e.groups = vec![GroupKey {
            kind: FeatureKind::Pos,
            offset: Some(0),
        }];
        e.feature_vectors = vec![Some(DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap())];
        let p = e.group_prob(0, 0, 0).unwrap();
        let want = std::f64::consts::E / (std::f64::consts::E + 1.0);
        assert!((p - want).abs() < 1e-12);
        assert!((p - 0.7311).abs() < 1e-4);

        e.feature_vectors = vec![Some(DenseMatrix::from_rows(&[vec![0.3, 0.3], vec![0.3, 0.3]]).unwrap())];
        assert_eq!(e.group_prob(0, 0, 1).unwrap(), 0.5);
        e.feature_vectors = vec![Some(DenseMatrix::from_rows(&[vec![2.0, -1.0]]).unwrap())];
        assert_eq!(e.group_prob(0, 0, 0).unwrap(), 1.0);
        assert!(e.group_prob(3, 0, 0).is_err());
        assert!(e.group_prob(0, 1, 0).is_err());
    }

    #[test]
    fn first_step_from_zero_vectors() {
        let mut e = toy(&["a", "b"], &[vec![0.0; 3], vec![0.0; 3]]);
        e.groups = vec![GroupKey {
            kind: FeatureKind::Word,
            offset: None,
        }];
        e.feature_vectors = vec![Some(DenseMatrix::zeros(2, 3))];
        let samplers = vec![Some(DiscreteSampler::new(vec![1.0, 1.0]).unwrap())];
        let ev = FeatureEvent {
            center_word_id: 0,
            feature_id: 1,
            group_id: 0,
        };
        let n = 5;
        let loss = sgd_step(&mut e, &ev, &samplers, 0.1, n, &mut SeededRng::new(3)).unwrap();
        let want = -((n + 1) as f64) * 0.5f64.ln();
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn repeated_positive_pair_increases_score() {
        let mut e = toy(&["a", "b", "c"], &[vec![0.1, -0.2], vec![0.05, 0.1], vec![-0.1, 0.0]]);
        e.groups = vec![GroupKey {
            kind: FeatureKind::Word,
            offset: None,
        }];
        e.feature_vectors = vec![Some(DenseMatrix::from_rows(&[vec![0.0, 0.1], vec![0.2, 0.0], vec![0.0, 0.0]]).unwrap())];
        let samplers = vec![Some(DiscreteSampler::new(vec![1.0, 0.0, 1.0]).unwrap())];
        let ev = FeatureEvent {
            center_word_id: 0,
            feature_id: 1,
            group_id: 0,
        };
        let score = |e: &EmbeddingSet<f64>| dot(e.word_vectors.row(0), e.feature_vectors[0].as_ref().unwrap().row(1));
        let mut rng = SeededRng::new(11);
        let mut last = score(&e);
        for _ in 0..100 {
            sgd_step(&mut e, &ev, &samplers, 0.05, 3, &mut rng).unwrap();
            let s = score(&e);
            assert!(s > last, "{s} <= {last}");
            last = s;
        }
    }

    #[test]
    fn ns_gradient_matches_finite_differences() {
        // 4 words, a second group of 3 features; negatives include a repeat
        let mut rng = SeededRng::new(5);
        let words = DenseMatrix::<f64>::uniform(4, 3, 0.8, &mut rng);
        let feats = DenseMatrix::<f64>::uniform(3, 3, 0.8, &mut rng);
        for (w, f, negs) in [(0usize, 1usize, vec![0usize, 2, 2]), (3, 0, vec![0, 1])] {
            let grad = ns_loss_grad(words.row(w), &feats, f, &negs);
            let mut gw = DenseMatrix::zeros(4, 3);
            gw.row_mut(w).copy_from_slice(&grad.word);
            let mut gf = DenseMatrix::zeros(3, 3);
            for (t, g) in &grad.features {
                for (a, b) in gf.row_mut(*t).iter_mut().zip(g) {
                    *a += b;
                }
            }
            let err = fd_gradcheck(
                |p| ns_loss_grad(p[0].row(w), &p[1], f, &negs).loss,
                &[words.clone(), feats.clone()],
                &[gw, gf],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "rel err {err}");
        }
    }

    fn train_corpus() -> Corpus {
        // a and b share contexts (x, y); c appears with (p, q)
        let mut lines = Vec::new();
        for i in 0..60 {
            lines.push(if i % 2 == 0 { "x a y" } else { "x b y" });
            lines.push("p c q");
        }
        Corpus::from_plain(&lines)
    }

    #[test]
    fn distributional_similarity() {
        let c = train_corpus();
        let v = build_vocab(&c, 1).unwrap();
        let cfg = SkipNerConfig {
            dims: 10,
            epochs: 20,
            kinds: [FeatureKind::Word].into_iter().collect(),
            tie_word_offsets: true,
            ..SkipNerConfig::default()
        };
        let mut t = FeatureGroupTable::new();
        let ev = extract_feature_events(&c, &v, &cfg.feature_config(), None, &mut t).unwrap();
        let e: EmbeddingSet<f64> = train_skipner(&ev, &t, &v, &cfg).unwrap();
        let cab = cosine(e.vector("a").unwrap(), e.vector("b").unwrap());
        let cac = cosine(e.vector("a").unwrap(), e.vector("c").unwrap());
        assert!(cab > cac, "cos(a,b)={cab} cos(a,c)={cac}");
    }

    #[test]
    fn word_group_only_equals_skipgram() {
        let c = train_corpus();
        let v = build_vocab(&c, 1).unwrap();
        let cfg = SkipNerConfig {
            dims: 8,
            epochs: 2,
            kinds: [FeatureKind::Word].into_iter().collect(),
            tie_word_offsets: true,
            seed: 42,
            ..SkipNerConfig::default()
        };
        let mut t = FeatureGroupTable::new();
        let ev = extract_feature_events(&c, &v, &cfg.feature_config(), None, &mut t).unwrap();
        let a: EmbeddingSet<f64> = train_skipner(&ev, &t, &v, &cfg).unwrap();
        let b: EmbeddingSet<f64> = train_skipgram(&c, &v, &cfg).unwrap();
        assert_eq!(a.word_vectors, b.word_vectors);
        assert_eq!(a.feature_vectors, b.feature_vectors);
    }

    #[test]
    fn disabled_group_has_no_matrix() {
        let c = Corpus::parse("a\tDT\tO\nb\tNN\tB-LOC\nc\tVB\tO\n", "t").unwrap();
        let v = build_vocab(&c, 1).unwrap();
        let mut t = FeatureGroupTable::new();
        let ev = extract_feature_events(&c, &v, &FeatureConfig::default(), None, &mut t).unwrap();
        let cfg = SkipNerConfig {
            dims: 4,
            kinds: [FeatureKind::Word, FeatureKind::Pos].into_iter().collect(),
            ..SkipNerConfig::default()
        };
        let e: EmbeddingSet<f64> = train_skipner(&ev, &t, &v, &cfg).unwrap();
        for (g, key) in t.keys().iter().enumerate() {
            let present = e.feature_vectors[g].is_some();
            assert_eq!(present, key.kind != FeatureKind::SelfTrained, "{key}");
        }
        assert!(train_skipner::<f64>(&[], &t, &v, &cfg).is_err());
    }

    #[test]
    fn deterministic_single_worker() {
        let c = train_corpus();
        let v = build_vocab(&c, 1).unwrap();
        let cfg = SkipNerConfig {
            dims: 6,
            kinds: [FeatureKind::Word].into_iter().collect(),
            ..SkipNerConfig::default()
        };
        let mut t = FeatureGroupTable::new();
        let ev = extract_feature_events(&c, &v, &cfg.feature_config(), None, &mut t).unwrap();
        let a: EmbeddingSet<f64> = train_skipner(&ev, &t, &v, &cfg).unwrap();
        let b: EmbeddingSet<f64> = train_skipner(&ev, &t, &v, &cfg).unwrap();
        assert_eq!(a, b);
        let par = SkipNerConfig { workers: 3, ..cfg };
        let p: EmbeddingSet<f64> = train_skipner(&ev, &t, &v, &par).unwrap();
        assert!(p.word_vectors.is_finite());
    }

    #[test]
    fn full_objective_improves_over_training() {
        let words = [
            "the", "cat", "dog", "sat", "ran", "on", "mat", "rug", "a", "big", "small", "red", "blue",
            "fast", "slow", "bird", "flew", "over", "tree", "house",
        ];
        let mut rng = SeededRng::new(9);
        // four topics of five words; a sentence draws from a single topic
        let lines: Vec<String> = (0..40)
            .map(|i| {
                let topic = &words[(i % 4) * 5..(i % 4) * 5 + 5];
                let mut s: Vec<String> = (0..6).map(|_| topic[rng.below(5)].to_string()).collect();
                if i % 4 == 0 {
                    // hapax so that <unk> is an observed context like any other
                    s.push(format!("rare{i}"));
                }
                s.join(" ")
            })
            .collect();
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let c = Corpus::from_plain(&refs);
        let v = build_vocab(&c, 2).unwrap();
        assert_eq!(v.known_len(), 20);
        let cfg = SkipNerConfig {
            dims: 5,
            epochs: 8,
            lr: 0.1,
            kinds: [FeatureKind::Word].into_iter().collect(),
            tie_word_offsets: true,
            ..SkipNerConfig::default()
        };
        let mut t = FeatureGroupTable::new();
        let ev = extract_feature_events(&c, &v, &cfg.feature_config(), None, &mut t).unwrap();
        let mut history = Vec::new();
        let init: EmbeddingSet<f64> = {
            let mut e = init_set(&v, cfg.dims, cfg.seed).unwrap();
            e.groups = t.keys().to_vec();
            e.feature_vectors = vec![Some(DenseMatrix::zeros(t.group_len(0), cfg.dims))];
            e
        };
        history.push(full_softmax_objective(&init, &ev).unwrap());
        train_skipner_with::<f64>(&ev, &t, &v, &cfg, &mut |_, e| {
            history.push(full_softmax_objective(e, &ev).unwrap());
        })
        .unwrap();
        // Negative sampling is not a descent method for the full softmax: the
        // exact objective dips while the low-rank factors leave the small
        // initialisation, then climbs well past its starting value.
        let (first, last) = (history[0], *history.last().unwrap());
        assert!(last > first + 0.3 * first.abs(), "{history:?}");
        let tail = &history[history.len() - 3..];
        assert!(tail.iter().all(|&h| h > first), "{history:?}");
    }

    #[test]
    fn group_distribution_sums_to_one() {
        let mut rng = SeededRng::new(1);
        let mut e = toy(&["a", "b", "c"], &[vec![0.5, 1.0], vec![-2.0, 0.3], vec![4.0, 4.0]]);
        e.groups = vec![
            GroupKey {
                kind: FeatureKind::Pos,
                offset: Some(0),
            },
            GroupKey {
                kind: FeatureKind::Pos,
                offset: Some(1),
            },
        ];
        e.feature_vectors = vec![
            Some(DenseMatrix::uniform(5, 2, 3.0, &mut rng)),
            Some(DenseMatrix::uniform(1, 2, 3.0, &mut rng)),
        ];
        for w in 0..3 {
            for g in 0..2 {
                let s: f64 = e.group_distribution(w, g).unwrap().iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn neighbours() {
        let e = toy(
            &["q", "dup", "orth", "other"],
            &[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]],
        );
        let nn = nearest_neighbors(&e, "q", 10).unwrap();
        assert_eq!(nn.len(), 3);
        assert_eq!(nn[0], ("dup".to_string(), 1.0));
        assert_eq!(nn[2], ("orth".to_string(), 0.0));
        assert!(nearest_neighbors(&e, "zzz", 1).is_err());
    }

    #[test]
    fn binarize_rule() {
        let m = DenseMatrix::from_rows(&[vec![0.5, 1.0, 0.0], vec![-0.2, 2.0, 0.0], vec![0.1, 0.5, 0.0], vec![-0.4, 3.0, 0.0]]).unwrap();
        let b = binarize(&m);
        assert_eq!((0..4).map(|r| b.get(r, 0)).collect::<Vec<_>>(), vec![1, 0, 0, -1]);
        assert!((0..4).all(|r| b.get(r, 1) >= 0));
        assert!((0..4).all(|r| b.get(r, 2) == 0));
    }

    #[test]
    fn clustering() {
        let e = toy(
            &["a", "b", "c", "d"],
            &[vec![0.0, 0.0], vec![0.1, 0.0], vec![10.0, 10.0], vec![10.1, 10.0]],
        );
        let cl = cluster_words(&e, &[2, 4], 50, 7).unwrap();
        let two = &cl[&2];
        assert_eq!(two[0], two[1]);
        assert_eq!(two[2], two[3]);
        assert_ne!(two[0], two[2]);
        let four: BTreeSet<usize> = cl[&4].iter().copied().collect();
        assert_eq!(four.len(), 4);
        assert_eq!(cluster_words(&e, &[2], 50, 7).unwrap()[&2], *two);
        assert!(cluster_words(&e, &[5], 50, 7).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        let mut rng = SeededRng::new(2);
        let e = EmbeddingSet::new(
            vec![UNK.into(), "x".into(), "y".into()],
            DenseMatrix::<f64>::uniform(3, 4, 1.0, &mut rng),
        )
        .unwrap();
        save_embeddings(&e, &path).unwrap();
        let back: EmbeddingSet<f64> = load_embeddings(&path).unwrap();
        assert_eq!(back.word_vectors.max_abs_diff(&e.word_vectors), 0.0);
        assert_eq!(back.words(), e.words());

        let text = std::fs::read_to_string(&path).unwrap();
        let truncated: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        std::fs::write(&path, truncated).unwrap();
        assert!(load_embeddings::<f64>(&path).is_err());
    }

    proptest! {
        #[test]
        fn binarize_scale_covariant(
            vals in prop::collection::vec(-5.0f64..5.0, 12),
            c in 0.01f64..100.0,
        ) {
            let m = DenseMatrix::from_vec(4, 3, vals).unwrap();
            let mut scaled = m.clone();
            scaled.scale(c);
            prop_assert_eq!(binarize(&m), binarize(&scaled));
        }

        #[test]
        fn ns_gradcheck_random(seed in 0u64..1000, w in 0usize..4, f in 0usize..3) {
            let mut rng = SeededRng::new(seed);
            let words = DenseMatrix::<f64>::uniform(4, 3, 1.0, &mut rng);
            let feats = DenseMatrix::<f64>::uniform(3, 3, 1.0, &mut rng);
            let negs = vec![rng.below(3), rng.below(3)];
            let grad = ns_loss_grad(words.row(w), &feats, f, &negs);
            let mut gw = DenseMatrix::zeros(4, 3);
            gw.row_mut(w).copy_from_slice(&grad.word);
            let mut gf = DenseMatrix::zeros(3, 3);
            for (t, g) in &grad.features {
                for (a, b) in gf.row_mut(*t).iter_mut().zip(g) {
                    *a += b;
                }
            }
            let err = fd_gradcheck(
                |p| ns_loss_grad(p[0].row(w), &p[1], f, &negs).loss,
                &[words.clone(), feats.clone()],
                &[gw, gf],
                1e-6,
            ).unwrap();
            prop_assert!(err < 1e-5, "rel err {}", err);
        }
    }
}
