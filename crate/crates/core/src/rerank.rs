//! N-best reranking with a discriminatively trained RBM whose energy carries
//! the recogniser's log posterior, plus a perceptron baseline, late fusion,
//! and WER evaluation.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Gazetteer, Vocabulary, UNK};
use crate::error::{Error, Result};
use crate::metrics::{weighted_wer_counts, wer, wer_counts, ErrorCounts};
use crate::numerics::{log_sigmoid, sigmoid, softplus, DenseMatrix, Real, SeededRng, SparseVector};
use crate::textio::{read_file, LabeledMatrix, MatrixBundle};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub words: Vec<String>,
    /// Natural-log posterior from the recogniser.
    #[serde(rename = "logp")]
    pub asr_logp: f64,
}

impl Hypothesis {
    pub fn new(words: &[&str], asr_logp: f64) -> Self {
        Self {
            words: words.iter().map(|s| s.to_string()).collect(),
            asr_logp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NBestList {
    pub utt_id: String,
    #[serde(rename = "ref")]
    pub reference: Vec<String>,
    pub hyps: Vec<Hypothesis>,
}

impl NBestList {
    /// Index of the minimum-WER hypothesis, lowest index on ties.
    pub fn oracle(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, h) in self.hyps.iter().enumerate() {
            let e: f64 = wer(&self.reference, &h.words);
            if best.is_none_or(|(_, b)| e < b) {
                best = Some((i, e));
            }
        }
        best.map(|(i, _)| i)
    }
}

pub fn parse_nbest(text: &str, source: &str) -> Result<Vec<NBestList>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let l: NBestList = serde_json::from_str(line).map_err(|e| Error::parse(source, i + 1, e.to_string()))?;
        if let Some(h) = l.hyps.iter().find(|h| !h.asr_logp.is_finite()) {
            return Err(Error::parse(source, i + 1, format!("non-finite logp {}", h.asr_logp)));
        }
        out.push(l);
    }
    Ok(out)
}

pub fn read_nbest(path: &Path) -> Result<Vec<NBestList>> {
    parse_nbest(&read_file(path)?, &path.display().to_string())
}

pub fn render_nbest(lists: &[NBestList]) -> Result<String> {
    let mut out = String::new();
    for l in lists {
        out.push_str(&serde_json::to_string(l)?);
        out.push('\n');
    }
    Ok(out)
}

/// Vocabulary over every hypothesis and reference word.
pub fn build_rerank_vocab(lists: &[NBestList]) -> Result<Vocabulary> {
    let tokens = lists.iter().flat_map(|l| {
        l.reference
            .iter()
            .chain(l.hyps.iter().flat_map(|h| h.words.iter()))
            .map(String::as_str)
    });
    Vocabulary::from_tokens(tokens, 1)
}

/// Unigram counts (or presence indicators) over `vocab`, OOV mapped to `<unk>`.
pub fn phi_unigram<T: Real>(words: &[String], vocab: &Vocabulary, presence: bool) -> SparseVector<T> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for w in words {
        *counts.entry(vocab.id(w)).or_default() += 1;
    }
    SparseVector::from_pairs(
        counts
            .into_iter()
            .map(|(i, c)| (i, if presence { T::one() } else { T::from_usize_lossy(c) }))
            .collect(),
    )
}

/// Hidden units reserved for the entity classes when the prior is enabled.
pub const RESERVED_UNITS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct DrbmParams<T> {
    /// Visible-to-hidden weights, n×d.
    pub w: DenseMatrix<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub w0: T,
}

impl<T: Real> DrbmParams<T> {
    pub fn zeros(n: usize, d: usize, w0: T) -> Self {
        Self {
            w: DenseMatrix::zeros(n, d),
            b: vec![T::zero(); n],
            c: vec![T::zero(); d],
            w0,
        }
    }

    /// Small uniform weights, zero biases.
    pub fn init(n: usize, d: usize, w0: T, rng: &mut SeededRng) -> Self {
        Self {
            w: DenseMatrix::uniform(n, d, T::lit(0.01), rng),
            ..Self::zeros(n, d, w0)
        }
    }

    pub fn visible(&self) -> usize {
        self.w.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.b.iter().chain(&self.c).all(|v| v.is_finite()) && self.w0.is_finite()
    }

    /// `[W, b (1×n), c (1×d)]` for the gradient checker.
    pub fn to_blocks(&self) -> Vec<DenseMatrix<T>> {
        vec![
            self.w.clone(),
            DenseMatrix::from_vec(1, self.b.len(), self.b.clone()).unwrap(),
            DenseMatrix::from_vec(1, self.c.len(), self.c.clone()).unwrap(),
        ]
    }

    pub fn from_blocks(blocks: &[DenseMatrix<T>], w0: T) -> Self {
        Self {
            w: blocks[0].clone(),
            b: blocks[1].as_slice().to_vec(),
            c: blocks[2].as_slice().to_vec(),
            w0,
        }
    }

    /// `c + Wᵀ φ`
    fn hidden_input(&self, phi: &SparseVector<T>) -> Vec<T> {
        let mut z = self.c.clone();
        for (i, v) in phi.iter() {
            crate::numerics::axpy(v, self.w.row(i), &mut z);
        }
        z
    }

    /// `θ += scale · ∂S/∂θ` at the current parameters (`w0` untouched).
    fn add_score_grad(&mut self, phi: &SparseVector<T>, scale: T) {
        let act: Vec<T> = self.hidden_input(phi).into_iter().map(sigmoid).collect();
        for (i, v) in phi.iter() {
            self.b[i] += scale * v;
            crate::numerics::axpy(scale * v, &act, self.w.row_mut(i));
        }
        crate::numerics::axpy(scale, &act, &mut self.c);
    }
}

/// `F(t) = -w0·logp - b·φ - Σ_j softplus(c_j + (Wᵀφ)_j)`
pub fn free_energy<T: Real>(phi: &SparseVector<T>, asr_logp: T, params: &DrbmParams<T>) -> T {
    let hidden: T = params.hidden_input(phi).into_iter().map(softplus).sum();
    -params.w0 * asr_logp - phi.dot_dense(&params.b) - hidden
}

/// `S_RBM(t) = -F(t)`
pub fn score_rbm<T: Real>(phi: &SparseVector<T>, asr_logp: T, params: &DrbmParams<T>) -> T {
    -free_energy(phi, asr_logp, params)
}

/// `-ln Σ_h exp(-E(t, h))` by enumerating all `2^d` hidden states.
pub fn free_energy_bruteforce<T: Real>(phi: &SparseVector<T>, asr_logp: T, params: &DrbmParams<T>) -> Result<T> {
    let d = params.hidden();
    if d > 20 {
        return Err(Error::InvalidInput(format!("refusing to enumerate 2^{d} states")));
    }
    let z = params.hidden_input(phi);
    let base = params.w0 * asr_logp + phi.dot_dense(&params.b);
    let neg_energies: Vec<T> = (0..1usize << d)
        .map(|mask| {
            let mut e = base;
            for (j, &zj) in z.iter().enumerate() {
                if mask >> j & 1 == 1 {
                    e += zj;
                }
            }
            e
        })
        .collect();
    Ok(-crate::numerics::log_sum_exp(&neg_energies))
}

/// Word-to-class pairs tying gazetteer words to the reserved hidden units.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityPrior<T> {
    /// `(visible index, hidden index)`
    pub pairs: Vec<(usize, usize)>,
    pub lambda: T,
    /// Use the product-of-squares form `-λ ln Π (P - 1)²` instead of `-λ Σ ln P`.
    pub literal: bool,
}

impl<T: Real> EntityPrior<T> {
    /// Gazetteer words missing from `vocab` are dropped.
    pub fn from_gazetteer(gaz: &Gazetteer, vocab: &Vocabulary, lambda: T) -> Result<Self> {
        if lambda < T::zero() {
            return Err(Error::InvalidInput("prior weight must be >= 0".into()));
        }
        let pairs: Vec<(usize, usize)> = gaz
            .iter()
            .filter_map(|(w, class)| vocab.get(w).map(|i| (i, class.index())))
            .collect();
        if pairs.is_empty() {
            log::warn!("no gazetteer word occurs in the vocabulary; the prior is inert");
        }
        Ok(Self {
            pairs,
            lambda,
            literal: false,
        })
    }
}

/// `P(h_e = 1 | φ_w) = σ(c_e + W_{w,e})`
pub fn prior_activation<T: Real>(params: &DrbmParams<T>, w: usize, e: usize) -> T {
    sigmoid(params.c[e] + params.w[(w, e)])
}

pub fn mean_prior_activation<T: Real>(params: &DrbmParams<T>, prior: &EntityPrior<T>) -> T {
    if prior.pairs.is_empty() {
        return T::zero();
    }
    let s: T = prior.pairs.iter().map(|&(w, e)| prior_activation(params, w, e)).sum();
    s / T::from_usize_lossy(prior.pairs.len())
}

/// Regularizer value and `dLoss/dz` per pair, with `z = c_e + W_{w,e}`.
fn prior_terms<T: Real>(params: &DrbmParams<T>, prior: &EntityPrior<T>) -> (T, Vec<T>) {
    let mut loss = T::zero();
    let mut dz = Vec::with_capacity(prior.pairs.len());
    for &(w, e) in &prior.pairs {
        let z = params.c[e] + params.w[(w, e)];
        if prior.literal {
            // -2λ ln(1 - σ(z)) = -2λ ln σ(-z)
            loss -= T::lit(2.0) * prior.lambda * log_sigmoid(-z);
            dz.push(T::lit(2.0) * prior.lambda * sigmoid(z));
        } else {
            loss -= prior.lambda * log_sigmoid(z);
            dz.push(-prior.lambda * (T::one() - sigmoid(z)));
        }
    }
    (loss, dz)
}

fn check_prior<T: Real>(params: &DrbmParams<T>, prior: &EntityPrior<T>) -> Result<()> {
    if params.hidden() < RESERVED_UNITS {
        return Err(Error::InvalidInput(format!(
            "entity prior needs at least {RESERVED_UNITS} hidden units"
        )));
    }
    if let Some(&(w, e)) = prior.pairs.iter().find(|&&(w, e)| w >= params.visible() || e >= RESERVED_UNITS) {
        return Err(Error::InvalidInput(format!("prior pair ({w}, {e}) out of range")));
    }
    Ok(())
}

/// One utterance's features: `(φ(t), logp)` per hypothesis plus the oracle.
#[derive(Clone, Debug)]
pub struct PreparedList<T> {
    pub phis: Vec<SparseVector<T>>,
    pub logps: Vec<T>,
    pub oracle: usize,
}

pub fn prepare_lists<T: Real>(lists: &[NBestList], vocab: &Vocabulary, presence: bool) -> Vec<PreparedList<T>> {
    let mut out = Vec::with_capacity(lists.len());
    for l in lists {
        let Some(oracle) = l.oracle() else {
            log::warn!("skipping utterance {} with an empty N-best list", l.utt_id);
            continue;
        };
        out.push(PreparedList {
            phis: l.hyps.iter().map(|h| phi_unigram(&h.words, vocab, presence)).collect(),
            logps: l.hyps.iter().map(|h| T::lit(h.asr_logp)).collect(),
            oracle,
        });
    }
    out
}

/// `Σ_{t' ≠ t̂} max(0, 1 - S(t̂) + S(t'))` plus the prior term, with gradients
/// with respect to `(W, b, c)`.
pub fn drbm_hinge_loss_grad<T: Real>(
    list: &PreparedList<T>,
    params: &DrbmParams<T>,
    prior: Option<&EntityPrior<T>>,
) -> (T, DrbmParams<T>) {
    let mut grad = DrbmParams::zeros(params.visible(), params.hidden(), T::zero());
    let mut loss = T::zero();
    let o = list.oracle;
    let s_hat = score_rbm(&list.phis[o], list.logps[o], params);
    let score_grad_into = |grad: &mut DrbmParams<T>, phi: &SparseVector<T>, scale: T| {
        let act: Vec<T> = params.hidden_input(phi).into_iter().map(sigmoid).collect();
        for (i, v) in phi.iter() {
            grad.b[i] += scale * v;
            crate::numerics::axpy(scale * v, &act, grad.w.row_mut(i));
        }
        crate::numerics::axpy(scale, &act, &mut grad.c);
    };
    for (j, phi) in list.phis.iter().enumerate() {
        if j == o {
            continue;
        }
        let m = T::one() - s_hat + score_rbm(phi, list.logps[j], params);
        if m > T::zero() {
            loss += m;
            score_grad_into(&mut grad, &list.phis[o], -T::one());
            score_grad_into(&mut grad, phi, T::one());
        }
    }
    if let Some(p) = prior {
        let (pl, dz) = prior_terms(params, p);
        loss += pl;
        for (&(w, e), g) in p.pairs.iter().zip(dz) {
            grad.c[e] += g;
            grad.w[(w, e)] += g;
        }
    }
    (loss, grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DrbmConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub w0: f64,
    /// Presence indicators instead of counts in discriminative training.
    pub presence: bool,
    pub seed: u64,
}

impl Default for DrbmConfig {
    fn default() -> Self {
        Self {
            hidden: 200,
            epochs: 10,
            lr: 0.001,
            w0: 1.0,
            presence: false,
            seed: 1,
        }
    }
}

/// Per utterance: every competitor within the unit margin of the oracle
/// triggers a step up on `S(t̂)` and down on `S(t')`; the prior gradient, if
/// any, is applied once per utterance. `w0` is never updated.
pub fn train_drbm<T: Real>(
    data: &[PreparedList<T>],
    init: DrbmParams<T>,
    prior: Option<&EntityPrior<T>>,
    epochs: usize,
    lr: T,
) -> Result<DrbmParams<T>> {
    train_drbm_with(data, init, prior, epochs, lr, |_, _| {})
}

pub fn train_drbm_with<T: Real>(
    data: &[PreparedList<T>],
    init: DrbmParams<T>,
    prior: Option<&EntityPrior<T>>,
    epochs: usize,
    lr: T,
    mut on_epoch: impl FnMut(usize, &DrbmParams<T>),
) -> Result<DrbmParams<T>> {
    if let Some(p) = prior {
        check_prior(&init, p)?;
    }
    let mut params = init;
    for epoch in 0..epochs {
        let mut updates = 0usize;
        for list in data {
            let o = list.oracle;
            let scores: Vec<T> = list
                .phis
                .iter()
                .zip(&list.logps)
                .map(|(phi, &lp)| score_rbm(phi, lp, &params))
                .collect();
            let negatives: Vec<usize> = (0..scores.len())
                .filter(|&j| j != o && T::one() + scores[j] > scores[o])
                .collect();
            for j in negatives {
                params.add_score_grad(&list.phis[o], lr);
                params.add_score_grad(&list.phis[j], -lr);
                updates += 1;
            }
            if let Some(p) = prior {
                let (_, dz) = prior_terms(&params, p);
                for (&(w, e), g) in p.pairs.iter().zip(dz) {
                    params.c[e] -= lr * g;
                    params.w[(w, e)] -= lr * g;
                }
            }
        }
        if !params.is_finite() {
            return Err(Error::NonFinite(format!("dRBM diverged at epoch {epoch}")));
        }
        log::info!("drbm epoch {} updates {updates}", epoch + 1);
        on_epoch(epoch, &params);
    }
    Ok(params)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 0.01,
            seed: 1,
        }
    }
}

/// Mean-field reconstruction cross-entropy of presence vectors.
pub fn reconstruction_cross_entropy<T: Real>(docs: &[Vec<usize>], params: &DrbmParams<T>) -> T {
    let n = params.visible();
    let mut total = T::zero();
    for doc in docs {
        let v = presence_vector::<T>(doc, n);
        let (_, vr) = mean_field_reconstruct(&v, params);
        for i in 0..n {
            let p = vr[i].max(T::lit(1e-12)).min(T::one() - T::lit(1e-12));
            total -= v[i] * p.ln() + (T::one() - v[i]) * (T::one() - p).ln();
        }
    }
    total / T::from_usize_lossy(docs.len().max(1))
}

fn presence_vector<T: Real>(doc: &[usize], n: usize) -> Vec<T> {
    let mut v = vec![T::zero(); n];
    for &i in doc {
        v[i] = T::one();
    }
    v
}

fn hidden_probs<T: Real>(v: &[T], params: &DrbmParams<T>) -> Vec<T> {
    let mut z = params.w.matvec_t(v);
    for (zj, &cj) in z.iter_mut().zip(&params.c) {
        *zj = sigmoid(*zj + cj);
    }
    z
}

fn visible_probs<T: Real>(h: &[T], params: &DrbmParams<T>) -> Vec<T> {
    let mut z = params.w.matvec(h);
    for (zi, &bi) in z.iter_mut().zip(&params.b) {
        *zi = sigmoid(*zi + bi);
    }
    z
}

fn mean_field_reconstruct<T: Real>(v: &[T], params: &DrbmParams<T>) -> (Vec<T>, Vec<T>) {
    let h = hidden_probs(v, params);
    let vr = visible_probs(&h, params);
    (h, vr)
}

/// Hidden-unit probabilities for a bag of word ids.
pub fn hidden_activations<T: Real>(doc: &[usize], params: &DrbmParams<T>) -> Vec<T> {
    hidden_probs(&presence_vector(doc, params.visible()), params)
}

/// Generative CD-1 training on binary presence vectors, one document per
/// sentence (word ids into the model's visible layer).
pub fn pretrain_generative<T: Real>(
    docs: &[Vec<usize>],
    init: DrbmParams<T>,
    cfg: &PretrainConfig,
) -> Result<DrbmParams<T>> {
    let n = init.visible();
    if let Some(&bad) = docs.iter().flatten().find(|&&i| i >= n) {
        return Err(Error::InvalidInput(format!("word id {bad} outside {n} visible units")));
    }
    let mut params = init;
    let mut rng = SeededRng::substream(cfg.seed, "rbm-pretrain");
    let lr = T::lit(cfg.lr);
    let mut order: Vec<usize> = (0..docs.len()).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for &di in &order {
            let v0 = presence_vector::<T>(&docs[di], n);
            let h0 = hidden_probs(&v0, &params);
            let h_sample: Vec<T> = h0
                .iter()
                .map(|&p| if rng.bernoulli(p.to_f64_lossy()) { T::one() } else { T::zero() })
                .collect();
            let v1 = visible_probs(&h_sample, &params);
            let h1 = hidden_probs(&v1, &params);
            params.w.add_outer(lr, &v0, &h0);
            params.w.add_outer(-lr, &v1, &h1);
            for i in 0..n {
                params.b[i] += lr * (v0[i] - v1[i]);
            }
            for j in 0..params.hidden() {
                params.c[j] += lr * (h0[j] - h1[j]);
            }
        }
        if !params.is_finite() {
            return Err(Error::NonFinite(format!("pretraining diverged at epoch {epoch}")));
        }
        log::info!(
            "pretrain epoch {} reconstruction {:.4}",
            epoch + 1,
            reconstruction_cross_entropy(docs, &params).to_f64_lossy()
        );
    }
    Ok(params)
}

/// Perceptron reranker scoring `asr_logp + w·φ(t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlpModel<T> {
    pub weights: Vec<T>,
}

impl<T: Real> SlpModel<T> {
    pub fn score(&self, phi: &SparseVector<T>, asr_logp: T) -> T {
        asr_logp + phi.dot_dense(&self.weights)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlpConfig {
    pub pairs_per_list: usize,
    pub iterations: usize,
    pub lr: f64,
    pub presence: bool,
    pub seed: u64,
}

impl Default for SlpConfig {
    fn default() -> Self {
        Self {
            pairs_per_list: 100,
            iterations: 10,
            lr: 0.1,
            presence: false,
            seed: 1,
        }
    }
}

/// Sampled-pair perceptron: when the lower-WER member does not outscore the
/// other, `w += lr (φ(better) - φ(worse))`. Equal-WER pairs are skipped.
pub fn train_slp<T: Real>(lists: &[NBestList], vocab: &Vocabulary, cfg: &SlpConfig) -> Result<SlpModel<T>> {
    let mut model = SlpModel {
        weights: vec![T::zero(); vocab.len()],
    };
    let lr = T::lit(cfg.lr);
    let prepared: Vec<(Vec<SparseVector<T>>, Vec<T>, Vec<f64>)> = lists
        .iter()
        .filter(|l| l.hyps.len() >= 2)
        .map(|l| {
            (
                l.hyps.iter().map(|h| phi_unigram(&h.words, vocab, cfg.presence)).collect(),
                l.hyps.iter().map(|h| T::lit(h.asr_logp)).collect(),
                l.hyps.iter().map(|h| wer(&l.reference, &h.words)).collect(),
            )
        })
        .collect();
    if prepared.len() < lists.len() {
        log::warn!("{} lists with fewer than 2 hypotheses ignored", lists.len() - prepared.len());
    }
    let mut rng = SeededRng::substream(cfg.seed, "slp-pairs");
    for it in 0..cfg.iterations {
        let mut mistakes = 0usize;
        for (phis, logps, wers) in &prepared {
            let n = phis.len();
            for _ in 0..cfg.pairs_per_list {
                let i = rng.below(n);
                let j = (i + 1 + rng.below(n - 1)) % n;
                if wers[i] == wers[j] {
                    continue;
                }
                let (good, bad) = if wers[i] < wers[j] { (i, j) } else { (j, i) };
                if model.score(&phis[good], logps[good]) <= model.score(&phis[bad], logps[bad]) {
                    for (k, v) in phis[good].iter() {
                        model.weights[k] += lr * v;
                    }
                    for (k, v) in phis[bad].iter() {
                        model.weights[k] -= lr * v;
                    }
                    mistakes += 1;
                }
            }
        }
        log::info!("slp iteration {} mistakes {mistakes}", it + 1);
    }
    Ok(model)
}

/// `S_RBM + α S_SLP`
pub fn fuse<T: Real>(s_rbm: T, s_slp: T, alpha: T) -> T {
    s_rbm + alpha * s_slp
}

/// Argmax of `scorer` over the hypotheses, lowest index on ties.
pub fn rerank<T: Real>(list: &NBestList, mut scorer: impl FnMut(usize, &Hypothesis) -> T) -> Result<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, h) in list.hyps.iter().enumerate() {
        let s = scorer(i, h);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i).ok_or(Error::Empty("N-best list"))
}

/// Scoring function selectable at evaluation time.
#[derive(Clone, Debug)]
pub enum Scorer<'a, T> {
    Asr,
    Rbm(&'a DrbmParams<T>),
    Slp(&'a SlpModel<T>),
    Fused {
        rbm: &'a DrbmParams<T>,
        slp: &'a SlpModel<T>,
        alpha: T,
    },
}

impl<T: Real> Scorer<'_, T> {
    pub fn score(&self, hyp: &Hypothesis, vocab: &Vocabulary, presence: bool) -> T {
        let lp = T::lit(hyp.asr_logp);
        match self {
            Scorer::Asr => lp,
            Scorer::Rbm(p) => score_rbm(&phi_unigram(&hyp.words, vocab, presence), lp, p),
            Scorer::Slp(m) => m.score(&phi_unigram(&hyp.words, vocab, presence), lp),
            Scorer::Fused { rbm, slp, alpha } => {
                let phi = phi_unigram(&hyp.words, vocab, presence);
                fuse(score_rbm(&phi, lp, rbm), slp.score(&phi, lp), *alpha)
            }
        }
    }
}

/// Chosen hypothesis index per list (empty lists are skipped).
pub fn rerank_all<T: Real>(
    lists: &[NBestList],
    scorer: &Scorer<'_, T>,
    vocab: &Vocabulary,
    presence: bool,
) -> Vec<Option<usize>> {
    lists
        .iter()
        .map(|l| rerank(l, |_, h| scorer.score(h, vocab, presence)).ok())
        .collect()
}

/// Pooled WER of the chosen hypotheses; `weights` switches to keyword-weighted WER.
pub fn corpus_wer(lists: &[NBestList], choices: &[Option<usize>], weights: Option<&HashMap<String, f64>>) -> f64 {
    let mut total = ErrorCounts::<f64>::default();
    for (l, c) in lists.iter().zip(choices) {
        let Some(c) = *c else { continue };
        let hyp = &l.hyps[c].words;
        total += match weights {
            None => wer_counts(&l.reference, hyp),
            Some(w) => weighted_wer_counts(&l.reference, hyp, |t| w.get(t).copied().unwrap_or(0.0)),
        };
    }
    if total.reference > 0.0 {
        total.errors / total.reference
    } else {
        total.errors
    }
}

/// Per word, the best `tf · ln(N_docs / df)` over documents; words scoring at
/// least `threshold` get weight 1.0, the rest 0.0.
pub fn tfidf_keywords(docs: &[Vec<String>], threshold: f64) -> Result<BTreeMap<String, f64>> {
    if docs.is_empty() {
        return Err(Error::Empty("document set"));
    }
    let mut df: HashMap<&str, usize> = HashMap::new();
    let mut tfs: Vec<HashMap<&str, usize>> = Vec::with_capacity(docs.len());
    for d in docs {
        let mut tf: HashMap<&str, usize> = HashMap::new();
        for w in d {
            *tf.entry(w.as_str()).or_default() += 1;
        }
        for &w in tf.keys() {
            *df.entry(w).or_default() += 1;
        }
        tfs.push(tf);
    }
    let n = docs.len() as f64;
    let mut best: BTreeMap<String, f64> = BTreeMap::new();
    for tf in &tfs {
        for (&w, &c) in tf {
            let s = c as f64 * (n / df[w] as f64).ln();
            let e = best.entry(w.to_string()).or_insert(f64::NEG_INFINITY);
            *e = e.max(s);
        }
    }
    Ok(best
        .into_iter()
        .map(|(w, s)| (w, if s >= threshold { 1.0 } else { 0.0 }))
        .collect())
}

pub fn render_keyword_weights(weights: &BTreeMap<String, f64>) -> String {
    weights.iter().map(|(w, v)| format!("{w}\t{v}\n")).collect()
}

pub fn parse_keyword_weights(text: &str, source: &str) -> Result<HashMap<String, f64>> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (w, v) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(source, i + 1, "expected `word<TAB>weight`"))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::parse(source, i + 1, format!("bad weight {v:?}")))?;
        out.insert(w.to_string(), v);
    }
    Ok(out)
}

fn column<T: Real>(labels: Vec<String>, values: &[T]) -> Result<LabeledMatrix<T>> {
    LabeledMatrix::new(labels, DenseMatrix::from_vec(values.len(), 1, values.to_vec())?)
}

fn hidden_labels(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("h{j}")).collect()
}

/// Bundle with blocks `W` and `b` keyed by vocabulary word and `c` by hidden unit.
pub fn drbm_bundle<T: Real>(params: &DrbmParams<T>, vocab: &Vocabulary, presence: bool) -> Result<MatrixBundle<T>> {
    if vocab.len() != params.visible() {
        return Err(Error::Shape("vocabulary and model disagree".into()));
    }
    let mut b = MatrixBundle::new("drbm");
    b.set("n", params.visible());
    b.set("d", params.hidden());
    b.set("w0", params.w0);
    b.set("presence", presence);
    b.push("W", LabeledMatrix::new(vocab.words().to_vec(), params.w.clone())?);
    b.push("b", column(vocab.words().to_vec(), &params.b)?);
    b.push("c", column(hidden_labels(params.hidden()), &params.c)?);
    Ok(b)
}

pub fn drbm_from_bundle<T: Real>(mut bundle: MatrixBundle<T>) -> Result<(DrbmParams<T>, Vocabulary, bool)> {
    if bundle.kind != "drbm" {
        return Err(Error::InvalidInput(format!("expected a drbm model, found {}", bundle.kind)));
    }
    let w0: T = bundle.meta_parse("w0")?;
    let presence: bool = bundle.meta_parse("presence")?;
    let n: usize = bundle.meta_parse("n")?;
    let d: usize = bundle.meta_parse("d")?;
    let w = bundle.take_block("W")?;
    let b = bundle.take_block("b")?;
    let c = bundle.take_block("c")?;
    if w.matrix.shape() != (n, d) || b.matrix.shape() != (n, 1) || c.matrix.shape() != (d, 1) {
        return Err(Error::Shape("drbm blocks disagree with header".into()));
    }
    let vocab = Vocabulary::from_word_list(w.labels)?;
    Ok((
        DrbmParams {
            w: w.matrix,
            b: b.matrix.into_vec(),
            c: c.matrix.into_vec(),
            w0,
        },
        vocab,
        presence,
    ))
}

pub fn slp_bundle<T: Real>(model: &SlpModel<T>, vocab: &Vocabulary, presence: bool) -> Result<MatrixBundle<T>> {
    let mut b = MatrixBundle::new("slp");
    b.set("presence", presence);
    b.push("w", column(vocab.words().to_vec(), &model.weights)?);
    Ok(b)
}

pub fn slp_from_bundle<T: Real>(mut bundle: MatrixBundle<T>) -> Result<(SlpModel<T>, Vocabulary, bool)> {
    if bundle.kind != "slp" {
        return Err(Error::InvalidInput(format!("expected an slp model, found {}", bundle.kind)));
    }
    let presence: bool = bundle.meta_parse("presence")?;
    let w = bundle.take_block("w")?;
    let vocab = Vocabulary::from_word_list(w.labels)?;
    Ok((
        SlpModel {
            weights: w.matrix.into_vec(),
        },
        vocab,
        presence,
    ))
}

/// Word ids of each sentence for generative pretraining.
pub fn sentence_ids(sentences: &[Vec<String>], vocab: &Vocabulary) -> Vec<Vec<usize>> {
    sentences
        .iter()
        .map(|s| s.iter().map(|w| vocab.id(w)).collect())
        .collect()
}

pub fn unk_id() -> &'static str {
    UNK
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EntityClass;
    use crate::numerics::fd_gradcheck;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn vocab_of(ws: &[&str]) -> Vocabulary {
        Vocabulary::from_tokens(ws.iter().copied(), 1).unwrap()
    }

    fn random_params(n: usize, d: usize, rng: &mut SeededRng) -> DrbmParams<f64> {
        DrbmParams {
            w: DenseMatrix::uniform(n, d, 1.0, rng),
            b: (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
            c: (0..d).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
            w0: rng.uniform_in(0.0, 2.0),
        }
    }

    #[test]
    fn phi_examples() {
        let v = vocab_of(&["a", "b"]);
        let phi: SparseVector<f64> = phi_unigram(&words("a b a"), &v, false);
        assert_eq!(phi.get(v.id("a")), 2.0);
        assert_eq!(phi.get(v.id("b")), 1.0);
        assert_eq!(phi.nnz(), 2);
        assert!(phi_unigram::<f64>(&[], &v, false).is_empty());
        let oov: SparseVector<f64> = phi_unigram(&words("x y z"), &v, false);
        assert_eq!(oov.entries(), &[(0, 3.0)]);
        let pres: SparseVector<f64> = phi_unigram(&words("a b a"), &v, true);
        assert_eq!(pres.get(v.id("a")), 1.0);
    }

    #[test]
    fn free_energy_examples() {
        let p = DrbmParams::<f64>::zeros(3, 4, 1.0);
        let phi = SparseVector::indicator([1]);
        let f = free_energy(&phi, -2.0, &p);
        assert!((f - (2.0 - 4.0 * 2f64.ln())).abs() < 1e-12);

        let p = DrbmParams {
            w: DenseMatrix::from_rows(&[vec![1.0]]).unwrap(),
            b: vec![0.0],
            c: vec![0.0],
            w0: 0.0,
        };
        let f = free_energy(&SparseVector::indicator([0]), 0.0, &p);
        assert!((f + (1.0 + 1f64.exp()).ln()).abs() < 1e-12);
        assert!((f + 1.3133).abs() < 1e-4);
        assert_eq!(score_rbm(&SparseVector::indicator([0]), 0.0, &p), -f);
    }

    #[test]
    fn bias_linearity() {
        let mut rng = SeededRng::new(2);
        let v = vocab_of(&["a", "b", "c"]);
        let mut p = random_params(v.len(), 3, &mut rng);
        let phi = phi_unigram(&words("a a b"), &v, false);
        let s0 = score_rbm(&phi, -1.0, &p);
        p.b[v.id("a")] += 0.5;
        let s1 = score_rbm(&phi, -1.0, &p);
        assert!((s1 - s0 - 2.0 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn prior_activation_examples() {
        let mut p = DrbmParams::<f64>::zeros(2, 3, 1.0);
        assert_eq!(prior_activation(&p, 1, 2), 0.5);
        p.c[2] = 2.0;
        assert!((prior_activation(&p, 1, 2) - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn fuse_examples() {
        assert_eq!(fuse(2.0, 3.0, 0.0), 2.0);
        assert_eq!(fuse(2.0, 0.0, 1.0), 2.0);
        assert_eq!(fuse(2.0, 3.0, 0.5), 3.5);
    }

    fn list(reference: &str, hyps: &[(&str, f64)]) -> NBestList {
        NBestList {
            utt_id: "u".into(),
            reference: words(reference),
            hyps: hyps
                .iter()
                .map(|&(w, lp)| Hypothesis {
                    words: words(w),
                    asr_logp: lp,
                })
                .collect(),
        }
    }

    #[test]
    fn rerank_examples() {
        let l = list("a b", &[("a", -1.0)]);
        assert_eq!(rerank(&l, |_, _| 0.0).unwrap(), 0);
        let l = list("a b", &[("a", -3.0), ("a b", -1.0), ("b", -2.0)]);
        assert_eq!(rerank(&l, |_, _| 7.0).unwrap(), 0);
        assert_eq!(rerank(&l, |_, h| h.asr_logp).unwrap(), 1);
        let empty = list("a", &[]);
        assert!(rerank(&empty, |_, h| h.asr_logp).is_err());
        assert_eq!(l.oracle(), Some(1));
    }

    #[test]
    fn nbest_json() {
        let text = r#"{"utt_id":"u1","ref":["a"],"hyps":[{"words":["a"],"logp":-1.5}]}"#;
        let ls = parse_nbest(text, "n").unwrap();
        assert_eq!(ls[0].hyps[0].asr_logp, -1.5);
        assert_eq!(parse_nbest(&render_nbest(&ls).unwrap(), "n").unwrap(), ls);
    }

    #[test]
    fn no_update_when_oracle_wins_by_margin() {
        let v = vocab_of(&["good", "bad"]);
        let l = list("good", &[("good", -1.0), ("bad", -5.0), ("good bad", -4.0)]);
        let data = prepare_lists::<f64>(&[l], &v, false);
        let mut rng = SeededRng::new(1);
        let p = DrbmParams::init(v.len(), 4, 1.0, &mut rng);
        let trained = train_drbm(&data, p.clone(), None, 3, 0.1).unwrap();
        assert_eq!(trained, p);
    }

    #[test]
    fn training_reduces_wer_on_separable_lists() {
        let v = vocab_of(&["paris", "harris", "in", "go"]);
        let mut lists = Vec::new();
        for i in 0..20 {
            let lp = -(i as f64) * 0.01;
            lists.push(list("go in paris", &[("go in harris", lp), ("go in paris", lp - 0.5)]));
        }
        let data = prepare_lists::<f64>(&lists, &v, false);
        let mut rng = SeededRng::new(1);
        let p = DrbmParams::init(v.len(), 4, 1.0, &mut rng);
        let trained = train_drbm(&data, p, None, 5, 0.1).unwrap();
        let asr = corpus_wer(&lists, &rerank_all(&lists, &Scorer::<f64>::Asr, &v, false), None);
        let rbm = corpus_wer(&lists, &rerank_all(&lists, &Scorer::Rbm(&trained), &v, false), None);
        assert!(rbm < asr, "{rbm} vs {asr}");
    }

    #[test]
    fn slp_rules() {
        let v = vocab_of(&["a", "b", "x"]);
        // better hypothesis contains b, scored lower by the recogniser
        let l = list("a b", &[("a x", 0.0), ("a b", -1.0)]);
        let cfg = SlpConfig {
            pairs_per_list: 1,
            iterations: 1,
            lr: 1.0,
            ..SlpConfig::default()
        };
        let m: SlpModel<f64> = train_slp(&[l], &v, &cfg).unwrap();
        assert_eq!(m.weights[v.id("b")], 1.0);
        assert_eq!(m.weights[v.id("x")], -1.0);
        assert_eq!(m.weights[v.id("a")], 0.0);

        let tie = list("a b", &[("a x", 0.0), ("a a", -1.0)]);
        let m: SlpModel<f64> = train_slp(&[tie], &v, &SlpConfig::default()).unwrap();
        assert!(m.weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn slp_orders_separable_pairs() {
        let v = vocab_of(&["a", "b", "c", "x", "y"]);
        let lists = vec![
            list("a b", &[("a x", 0.0), ("a b", -1.0), ("y b", -0.5)]),
            list("c b", &[("c y", 0.0), ("x b", -0.2), ("c b", -1.0)]),
        ];
        let m: SlpModel<f64> = train_slp(&lists, &v, &SlpConfig::default()).unwrap();
        for l in &lists {
            for i in 0..l.hyps.len() {
                for j in 0..l.hyps.len() {
                    let (wi, wj): (f64, f64) = (wer(&l.reference, &l.hyps[i].words), wer(&l.reference, &l.hyps[j].words));
                    if wi < wj {
                        let si = m.score(&phi_unigram(&l.hyps[i].words, &v, false), l.hyps[i].asr_logp);
                        let sj = m.score(&phi_unigram(&l.hyps[j].words, &v, false), l.hyps[j].asr_logp);
                        assert!(si > sj);
                    }
                }
            }
        }
    }

    #[test]
    fn tfidf_examples() {
        let mut docs: Vec<Vec<String>> = (0..20).map(|i| vec!["the".to_string(), format!("w{i}")]).collect();
        docs[3].extend(std::iter::repeat_n("rare".to_string(), 40));
        let k = tfidf_keywords(&docs, 3.0).unwrap();
        assert_eq!(k["the"], 0.0);
        assert_eq!(k["rare"], 1.0);
        assert!((40.0f64 * 20f64.ln() - 119.83).abs() < 0.01);
        let none = tfidf_keywords(&docs, f64::INFINITY).unwrap();
        assert!(none.values().all(|&v| v == 0.0));
        let parsed = parse_keyword_weights(&render_keyword_weights(&k), "k").unwrap();
        assert_eq!(parsed["rare"], 1.0);
    }

    #[test]
    fn pretraining_examples() {
        let v = vocab_of(&["a", "b", "c", "x", "y", "z"]);
        let docs = sentence_ids(&[words("a b c"), words("x y z")], &v);
        let mut rng = SeededRng::new(3);
        let init = DrbmParams::init(v.len(), 2, 1.0, &mut rng);
        let same = pretrain_generative(&docs, init.clone(), &PretrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(same, init);

        let cfg = PretrainConfig {
            epochs: 300,
            lr: 0.1,
            seed: 7,
        };
        let p = pretrain_generative(&docs, init.clone(), &cfg).unwrap();
        assert_eq!(p, pretrain_generative(&docs, init.clone(), &cfg).unwrap());
        let h0 = hidden_activations(&docs[0], &p);
        let h1 = hidden_activations(&docs[1], &p);
        let sep = h0.iter().zip(&h1).map(|(a, b): (&f64, &f64)| (a - b).abs()).fold(0.0, f64::max);
        assert!(sep > 0.2, "separation {sep}");

        let small = PretrainConfig { epochs: 1, lr: 0.05, seed: 7 };
        let mut p = init;
        let mut prev = reconstruction_cross_entropy(&docs, &p);
        for _ in 0..3 {
            p = pretrain_generative(&docs, p, &small).unwrap();
            let ce = reconstruction_cross_entropy(&docs, &p);
            assert!(ce <= prev + 1e-12, "{ce} > {prev}");
            prev = ce;
        }
    }

    #[test]
    fn prior_pairs_and_bundle() {
        let v = vocab_of(&["paris", "acme", "bob", "run"]);
        let gaz = Gazetteer::from_pairs([
            ("paris", EntityClass::Location),
            ("acme", EntityClass::Organization),
            ("zzz", EntityClass::Person),
        ]);
        let prior = EntityPrior::from_gazetteer(&gaz, &v, 0.01).unwrap();
        assert_eq!(prior.pairs.len(), 2);
        assert!(check_prior(&DrbmParams::<f64>::zeros(v.len(), 2, 1.0), &prior).is_err());

        let mut rng = SeededRng::new(1);
        let p = random_params(v.len(), 4, &mut rng);
        let text = drbm_bundle(&p, &v, false).unwrap().render();
        let (back, v2, presence) = drbm_from_bundle(MatrixBundle::<f64>::parse(&text, "m").unwrap()).unwrap();
        assert_eq!(back, p);
        assert_eq!(v2.words(), v.words());
        assert!(!presence);
    }

    proptest! {
        #[test]
        fn free_energy_matches_enumeration(seed in 0u64..200, d in 1usize..=12) {
            let mut rng = SeededRng::new(seed);
            let n = 5;
            let p = random_params(n, d, &mut rng);
            let phi = SparseVector::from_pairs(vec![(0, 2.0), (3, 1.0)]);
            let lp = rng.uniform_in(-10.0, 0.0);
            let f = free_energy(&phi, lp, &p);
            let brute = free_energy_bruteforce(&phi, lp, &p).unwrap();
            prop_assert!((f - brute).abs() < 1e-9, "{} vs {}", f, brute);
        }

        #[test]
        fn zero_params_rank_like_asr(seed in 0u64..300, shift in -50.0f64..50.0) {
            let mut rng = SeededRng::new(seed);
            let v = vocab_of(&["a", "b", "c"]);
            let mut l = list("a b", &[("a", 0.0), ("b", 0.0), ("a c", 0.0), ("c", 0.0)]);
            for h in &mut l.hyps {
                h.asr_logp = rng.uniform_in(-5.0, 0.0);
            }
            let zero = DrbmParams::<f64>::zeros(v.len(), 6, 1.0);
            let by_asr = rerank(&l, |_, h| h.asr_logp).unwrap();
            let by_rbm = rerank(&l, |_, h| Scorer::Rbm(&zero).score(h, &v, false)).unwrap();
            prop_assert_eq!(by_asr, by_rbm);

            let p = random_params(v.len(), 3, &mut rng);
            let before = rerank(&l, |_, h| Scorer::Rbm(&p).score(h, &v, false)).unwrap();
            for h in &mut l.hyps {
                h.asr_logp += shift.round();
            }
            let after = rerank(&l, |_, h| Scorer::Rbm(&p).score(h, &v, false)).unwrap();
            prop_assert_eq!(before, after);
        }

        #[test]
        fn oracle_wer_sandwich(seed in 0u64..300) {
            let mut rng = SeededRng::new(seed);
            let pool = ["a", "b", "c", "d"];
            let v = vocab_of(&pool);
            let mk = |rng: &mut SeededRng| (0..1 + rng.below(4)).map(|_| pool[rng.below(4)].to_string()).collect::<Vec<_>>();
            let lists: Vec<NBestList> = (0..5).map(|_| NBestList {
                utt_id: "u".into(),
                reference: mk(&mut rng),
                hyps: (0..4).map(|_| Hypothesis { words: mk(&mut rng), asr_logp: rng.uniform_in(-3.0, 0.0) }).collect(),
            }).collect();
            let p = random_params(v.len(), 3, &mut rng);
            let oracle: Vec<Option<usize>> = lists.iter().map(NBestList::oracle).collect();
            let worst: Vec<Option<usize>> = lists.iter().map(|l| rerank(l, |_, h| wer::<f64, _>(&l.reference, &h.words)).ok()).collect();
            let chosen = rerank_all(&lists, &Scorer::Rbm(&p), &v, false);
            let (o, c, w) = (corpus_wer(&lists, &oracle, None), corpus_wer(&lists, &chosen, None), corpus_wer(&lists, &worst, None));
            prop_assert!(o <= c + 1e-12 && c <= w + 1e-12, "{} {} {}", o, c, w);
        }

        #[test]
        fn hinge_gradcheck(seed in 0u64..1000, literal in any::<bool>()) {
            let mut rng = SeededRng::new(seed);
            let (n, d) = (6, 4);
            let p = random_params(n, d, &mut rng);
            let mut phis: Vec<SparseVector<f64>> = Vec::new();
            for _ in 0..4 {
                let mut pairs = Vec::new();
                for i in 0..n {
                    if rng.bernoulli(0.5) {
                        pairs.push((i, rng.uniform_in(0.5, 2.0)));
                    }
                }
                phis.push(SparseVector::from_pairs(pairs));
            }
            let logps: Vec<f64> = (0..4).map(|_| rng.uniform_in(-3.0, 0.0)).collect();
            let list = PreparedList { phis, logps, oracle: 0 };
            let prior = EntityPrior { pairs: vec![(1, 0), (4, 2)], lambda: 0.3, literal };
            let s0 = score_rbm(&list.phis[0], list.logps[0], &p);
            for j in 1..4 {
                let m = 1.0 - s0 + score_rbm(&list.phis[j], list.logps[j], &p);
                prop_assume!(m.abs() > 1e-3);
            }
            let (_, g) = drbm_hinge_loss_grad(&list, &p, Some(&prior));
            let err = fd_gradcheck(
                |b| drbm_hinge_loss_grad(&list, &DrbmParams::from_blocks(b, p.w0), Some(&prior)).0,
                &p.to_blocks(),
                &g.to_blocks(),
                1e-5,
            ).unwrap();
            prop_assert!(err < 1e-5, "rel err {}", err);
        }
    }
}
