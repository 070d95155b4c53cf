//! Targeted aspect-based sentiment with a bidirectional Sentic LSTM encoder,
//! target-level self-attention and aspect-specific sentence attention.
//! Gradients are hand-derived reverse mode.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::embed::EmbeddingSet;
use crate::error::{Error, Result};
use crate::metrics::{LabelSetPrediction, MetricsReport};
use crate::numerics::{argmax, axpy, dot, sigmoid, softmax_unchecked, Adam, AdamConfig, DenseMatrix, Real, SeededRng};
use crate::textio::{read_file, LabeledMatrix, MatrixBundle};

/// Maximum concepts averaged per token.
pub const MAX_CONCEPTS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Polarity {
    None,
    Negative,
    Positive,
    Neutral,
}

impl Polarity {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        [Self::None, Self::Negative, Self::Positive, Self::Neutral][i]
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Negative => "negative",
            Self::Positive => "positive",
            Self::Neutral => "neutral",
        }
    }
}

impl std::str::FromStr for Polarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "negative" => Ok(Self::Negative),
            "positive" => Ok(Self::Positive),
            "neutral" => Ok(Self::Neutral),
            _ => Err(Error::Unknown {
                kind: "polarity",
                name: s.to_string(),
            }),
        }
    }
}

/// Raw dataset record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TsaRecord {
    pub tokens: Vec<String>,
    pub target_positions: Vec<usize>,
    #[serde(default)]
    pub aspects: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub concepts: Vec<Vec<String>>,
}

/// Validated instance: one polarity per configured aspect.
#[derive(Clone, Debug, PartialEq)]
pub struct TsaInstance {
    pub tokens: Vec<String>,
    pub targets: Vec<usize>,
    pub concepts: Vec<Vec<String>>,
    pub gold: Vec<Polarity>,
}

impl TsaInstance {
    pub fn from_record(r: &TsaRecord, aspects: &[String], classes: usize) -> std::result::Result<Self, String> {
        if r.tokens.is_empty() {
            return Err("empty sentence".into());
        }
        if r.target_positions.is_empty() {
            return Err("no target positions".into());
        }
        if r.target_positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err("target positions must be strictly increasing".into());
        }
        if r.target_positions.iter().any(|&p| p >= r.tokens.len()) {
            return Err("target position out of range".into());
        }
        let concepts = if r.concepts.is_empty() {
            vec![Vec::new(); r.tokens.len()]
        } else if r.concepts.len() == r.tokens.len() {
            r.concepts.clone()
        } else {
            return Err(format!("{} concept lists for {} tokens", r.concepts.len(), r.tokens.len()));
        };
        if concepts.iter().any(|c| c.len() > MAX_CONCEPTS) {
            return Err(format!("more than {MAX_CONCEPTS} concepts on a token"));
        }
        let mut gold = vec![Polarity::None; aspects.len()];
        for (a, p) in &r.aspects {
            let i = aspects
                .iter()
                .position(|x| x == a)
                .ok_or_else(|| format!("aspect {a:?} is not configured"))?;
            let p: Polarity = p.parse().map_err(|e: Error| e.to_string())?;
            if p.index() >= classes {
                return Err(format!("polarity {} needs the 4-class setting", p.name()));
            }
            gold[i] = p;
        }
        Ok(Self {
            tokens: r.tokens.clone(),
            targets: r.target_positions.clone(),
            concepts,
            gold,
        })
    }

    pub fn to_record(&self, aspects: &[String]) -> TsaRecord {
        TsaRecord {
            tokens: self.tokens.clone(),
            target_positions: self.targets.clone(),
            aspects: aspects
                .iter()
                .zip(&self.gold)
                .filter(|(_, p)| **p != Polarity::None)
                .map(|(a, p)| (a.clone(), p.name().to_string()))
                .collect(),
            concepts: if self.concepts.iter().all(Vec::is_empty) {
                Vec::new()
            } else {
                self.concepts.clone()
            },
        }
    }
}

pub fn parse_tsa(text: &str, source: &str, aspects: &[String], classes: usize) -> Result<Vec<TsaInstance>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: TsaRecord = serde_json::from_str(line).map_err(|e| Error::parse(source, i + 1, e.to_string()))?;
        out.push(TsaInstance::from_record(&r, aspects, classes).map_err(|e| Error::parse(source, i + 1, e))?);
    }
    Ok(out)
}

pub fn read_tsa(path: &Path, aspects: &[String], classes: usize) -> Result<Vec<TsaInstance>> {
    parse_tsa(&read_file(path)?, &path.display().to_string(), aspects, classes)
}

pub fn render_tsa(data: &[TsaInstance], aspects: &[String]) -> Result<String> {
    let mut out = String::new();
    for d in data {
        out.push_str(&serde_json::to_string(&d.to_record(aspects))?);
        out.push('\n');
    }
    Ok(out)
}

/// Mean of at most `MAX_CONCEPTS` vectors; the zero vector when empty.
pub fn average_concepts<T: Real>(vectors: &[&[T]], dim: usize) -> Result<Vec<T>> {
    if vectors.len() > MAX_CONCEPTS {
        return Err(Error::InvalidInput(format!("{} concepts, at most {MAX_CONCEPTS}", vectors.len())));
    }
    let mut mu = vec![T::zero(); dim];
    for v in vectors {
        if v.len() != dim {
            return Err(Error::Shape(format!("concept of dim {} for {dim}", v.len())));
        }
        axpy(T::one(), v, &mut mu);
    }
    if !vectors.is_empty() {
        let inv = T::one() / T::from_usize_lossy(vectors.len());
        mu.iter_mut().for_each(|m| *m *= inv);
    }
    Ok(mu)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SenticDims {
    pub vocab: usize,
    pub word: usize,
    pub hidden: usize,
    pub concept: usize,
    pub attention: usize,
    pub aspects: usize,
    pub classes: usize,
}

// Tensor layout of `SenticParams::tensors`.
pub const EMB: usize = 0;
pub const FWD: usize = 1;
pub const BWD: usize = FWD + CELL_TENSORS;
pub const WA1: usize = BWD + CELL_TENSORS;
pub const WA2: usize = WA1 + 1;
pub const WM: usize = WA1 + 2;
pub const VA: usize = WA1 + 3;
pub const WP: usize = WA1 + 4;
pub const BP: usize = WA1 + 5;
pub const NUM_TENSORS: usize = WA1 + 6;

// Offsets inside a cell block.
pub const W_F: usize = 0;
pub const W_I: usize = 1;
pub const W_O: usize = 2;
pub const W_CO: usize = 3;
pub const W_CAND: usize = 4;
pub const W_C: usize = 5;
pub const B_F: usize = 6;
pub const B_I: usize = 7;
pub const B_O: usize = 8;
pub const B_CO: usize = 9;
pub const B_CAND: usize = 10;
pub const CELL_TENSORS: usize = 11;

const TENSOR_NAMES: [&str; NUM_TENSORS] = [
    "emb", "f.Wf", "f.WI", "f.Wo", "f.Wco", "f.WC", "f.Wc", "f.bf", "f.bI", "f.bo", "f.bco", "f.bC", "b.Wf", "b.WI",
    "b.Wo", "b.Wco", "b.WC", "b.Wc", "b.bf", "b.bI", "b.bo", "b.bco", "b.bC", "Wa1", "Wa2", "Wm", "va", "Wp", "bp",
];

/// Every trainable tensor. Gate matrices act on `[x, h_prev, μ]`, the
/// candidate on `[x, h_prev]`; `Wp` stacks one `classes × 2h` block per aspect.
#[derive(Clone, Debug, PartialEq)]
pub struct SenticParams<T> {
    pub dims: SenticDims,
    pub tensors: Vec<DenseMatrix<T>>,
}

fn shapes(d: &SenticDims) -> Vec<(usize, usize)> {
    let gate_in = d.word + d.hidden + d.concept;
    let cell = [
        (d.hidden, gate_in),
        (d.hidden, gate_in),
        (d.hidden, gate_in),
        (d.hidden, gate_in),
        (d.hidden, d.word + d.hidden),
        (d.hidden, d.concept),
        (1, d.hidden),
        (1, d.hidden),
        (1, d.hidden),
        (1, d.hidden),
        (1, d.hidden),
    ];
    let mut s = vec![(d.vocab, d.word)];
    s.extend(cell);
    s.extend(cell);
    s.extend([
        (d.attention, 2 * d.hidden),
        (1, d.attention),
        (d.attention, 4 * d.hidden),
        (d.aspects, d.attention),
        (d.aspects * d.classes, 2 * d.hidden),
        (d.aspects, d.classes),
    ]);
    s
}

impl<T: Real> SenticParams<T> {
    pub fn zeros(dims: SenticDims) -> Self {
        Self {
            dims,
            tensors: shapes(&dims).into_iter().map(|(r, c)| DenseMatrix::zeros(r, c)).collect(),
        }
    }

    /// Weights uniform in ±1/√fan_in, embeddings in ±0.1, forget bias 1,
    /// other biases 0.
    pub fn init(dims: SenticDims, rng: &mut SeededRng) -> Self {
        let mut p = Self::zeros(dims);
        for (i, t) in p.tensors.iter_mut().enumerate() {
            let (r, c) = t.shape();
            let is_bias = matches!(i, _ if (FWD..WA1).contains(&i) && (i - FWD) % CELL_TENSORS >= B_F) || i == BP;
            if is_bias {
                continue;
            }
            let scale = if i == EMB { T::lit(0.1) } else { T::one() / T::from_usize_lossy(c).sqrt() };
            *t = DenseMatrix::uniform(r, c, scale, rng);
        }
        for base in [FWD, BWD] {
            p.tensors[base + B_F].fill(T::one());
        }
        p
    }

    pub fn check(&self) -> Result<()> {
        let want = shapes(&self.dims);
        if self.tensors.len() != want.len() {
            return Err(Error::Shape(format!("{} tensors, expected {}", self.tensors.len(), want.len())));
        }
        for (i, (t, s)) in self.tensors.iter().zip(want).enumerate() {
            if t.shape() != s {
                return Err(Error::Shape(format!("{} is {:?}, expected {s:?}", TENSOR_NAMES[i], t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(TENSOR_NAMES[i].to_string()));
            }
        }
        Ok(())
    }

    pub fn cell(&self, base: usize) -> CellView<'_, T> {
        CellView {
            t: &self.tensors[base..base + CELL_TENSORS],
            word: self.dims.word,
            hidden: self.dims.hidden,
        }
    }
}

/// One direction's weights.
#[derive(Clone, Copy, Debug)]
pub struct CellView<'a, T> {
    t: &'a [DenseMatrix<T>],
    word: usize,
    hidden: usize,
}

/// Gate activations and inputs of one step, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct StepCache<T> {
    z: Vec<T>,
    c_prev: Vec<T>,
    f: Vec<T>,
    i: Vec<T>,
    cand: Vec<T>,
    o: Vec<T>,
    oc: Vec<T>,
    tanh_c: Vec<T>,
    know: Vec<T>,
    pub h: Vec<T>,
    pub c: Vec<T>,
}

fn gate<T: Real>(w: &DenseMatrix<T>, b: &DenseMatrix<T>, z: &[T], act: fn(T) -> T) -> Vec<T> {
    // Only the first `z.len()` columns take part, so a gate matrix can be
    // applied to a prefix of its input.
    let mut out = b.as_slice().to_vec();
    for (r, o) in out.iter_mut().enumerate() {
        *o += dot(&w.row(r)[..z.len()], z);
        *o = act(*o);
    }
    out
}

fn tanh<T: Real>(x: T) -> T {
    x.tanh()
}

impl<T: Real> CellView<'_, T> {
    fn check_inputs(&self, x: &[T], h: &[T], c: &[T], mu: Option<&[T]>) -> Result<()> {
        let dc = self.t[W_C].cols();
        if x.len() != self.word || h.len() != self.hidden || c.len() != self.hidden || mu.is_some_and(|m| m.len() != dc) {
            return Err(Error::Shape(format!(
                "step inputs x {} h {} C {} mu {:?} for word {} hidden {} concept {dc}",
                x.len(),
                h.len(),
                c.len(),
                mu.map(<[T]>::len),
                self.word,
                self.hidden
            )));
        }
        Ok(())
    }

    fn forward(&self, z: Vec<T>, c_prev: &[T], mu: Option<&[T]>) -> StepCache<T> {
        let zxh = &z[..self.word + self.hidden];
        let f = gate(&self.t[W_F], &self.t[B_F], &z, sigmoid);
        let i = gate(&self.t[W_I], &self.t[B_I], &z, sigmoid);
        let cand = gate(&self.t[W_CAND], &self.t[B_CAND], zxh, tanh);
        let o = gate(&self.t[W_O], &self.t[B_O], &z, sigmoid);
        let c: Vec<T> = (0..self.hidden).map(|k| f[k] * c_prev[k] + i[k] * cand[k]).collect();
        let tanh_c: Vec<T> = c.iter().map(|v| v.tanh()).collect();
        let mut h: Vec<T> = o.iter().zip(&tanh_c).map(|(&a, &b)| a * b).collect();
        let (oc, know) = match mu {
            Some(mu) => {
                let oc = gate(&self.t[W_CO], &self.t[B_CO], &z, sigmoid);
                let know: Vec<T> = self.t[W_C].matvec(mu).into_iter().map(|v| v.tanh()).collect();
                for k in 0..self.hidden {
                    h[k] += oc[k] * know[k];
                }
                (oc, know)
            }
            None => (Vec::new(), Vec::new()),
        };
        StepCache {
            z,
            c_prev: c_prev.to_vec(),
            f,
            i,
            cand,
            o,
            oc,
            tanh_c,
            know,
            h,
            c,
        }
    }

    /// Standard LSTM step over `[x, h_prev]`, reading the leading columns of
    /// the shared gate matrices.
    pub fn lstm_step(&self, x: &[T], h_prev: &[T], c_prev: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        self.check_inputs(x, h_prev, c_prev, None)?;
        let z = [x, h_prev].concat();
        let s = self.forward(z, c_prev, None);
        Ok((s.h, s.c))
    }

    /// Sentic step: gates read `[x, h_prev, μ]` and `h` gains the knowledge
    /// term `o^c ⊙ tanh(W_c μ)`.
    pub fn sentic_step(&self, x: &[T], h_prev: &[T], c_prev: &[T], mu: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        self.check_inputs(x, h_prev, c_prev, Some(mu))?;
        let s = self.step_cached(x, h_prev, c_prev, mu);
        Ok((s.h, s.c))
    }

    fn step_cached(&self, x: &[T], h_prev: &[T], c_prev: &[T], mu: &[T]) -> StepCache<T> {
        let z = [x, h_prev, mu].concat();
        self.forward(z, c_prev, Some(mu))
    }

    /// Accumulates parameter gradients into `g` (this cell's block) and
    /// returns `(dx, dh_prev, dC_prev)`.
    fn backward(&self, s: &StepCache<T>, dh: &[T], dc_next: &[T], g: &mut [DenseMatrix<T>]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let n = self.hidden;
        let one = T::one();
        let mut dpf = vec![T::zero(); n];
        let mut dpi = vec![T::zero(); n];
        let mut dpo = vec![T::zero(); n];
        let mut dpoc = vec![T::zero(); n];
        let mut dpcand = vec![T::zero(); n];
        let mut dknow = vec![T::zero(); n];
        let mut dc_prev = vec![T::zero(); n];
        for k in 0..n {
            let dc = dc_next[k] + dh[k] * s.o[k] * (one - s.tanh_c[k] * s.tanh_c[k]);
            let d_o = dh[k] * s.tanh_c[k];
            dpo[k] = d_o * s.o[k] * (one - s.o[k]);
            dpf[k] = dc * s.c_prev[k] * s.f[k] * (one - s.f[k]);
            dpi[k] = dc * s.cand[k] * s.i[k] * (one - s.i[k]);
            dpcand[k] = dc * s.i[k] * (one - s.cand[k] * s.cand[k]);
            dc_prev[k] = dc * s.f[k];
            dpoc[k] = dh[k] * s.know[k] * s.oc[k] * (one - s.oc[k]);
            dknow[k] = dh[k] * s.oc[k] * (one - s.know[k] * s.know[k]);
        }
        let mu = &s.z[self.word + self.hidden..];
        let zxh = &s.z[..self.word + self.hidden];
        let mut dz = vec![T::zero(); s.z.len()];
        for (w, b, dp) in [(W_F, B_F, &dpf), (W_I, B_I, &dpi), (W_O, B_O, &dpo), (W_CO, B_CO, &dpoc)] {
            g[w].add_outer(one, dp, &s.z);
            axpy(one, dp, g[b].as_mut_slice());
            let back = self.t[w].matvec_t(dp);
            axpy(one, &back, &mut dz);
        }
        g[W_CAND].add_outer(one, &dpcand, zxh);
        axpy(one, &dpcand, g[B_CAND].as_mut_slice());
        let back = self.t[W_CAND].matvec_t(&dpcand);
        axpy(one, &back, &mut dz[..self.word + self.hidden]);
        g[W_C].add_outer(one, &dknow, mu);
        let dx = dz[..self.word].to_vec();
        let dh_prev = dz[self.word..self.word + self.hidden].to_vec();
        (dx, dh_prev, dc_prev)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelFlags {
    /// Feed concepts to the cell; otherwise μ = 0 throughout.
    pub sentic: bool,
    /// Uniform target weights instead of learned self-attention.
    pub target_averaging: bool,
}

impl Default for ModelFlags {
    fn default() -> Self {
        Self {
            sentic: true,
            target_averaging: false,
        }
    }
}

/// Weights and attended vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionResult<T> {
    pub weights: Vec<T>,
    pub vector: Vec<T>,
}

/// Hidden states `[→h_i ; ←h_i]` with the step caches of both directions.
#[derive(Clone, Debug)]
pub struct Encoded<T> {
    pub columns: Vec<Vec<T>>,
    fwd: Vec<StepCache<T>>,
    bwd: Vec<StepCache<T>>,
}

/// Bidirectional encoding of embedded inputs `xs` with concept inputs `mus`.
pub fn encode_bilstm<T: Real>(params: &SenticParams<T>, xs: &[Vec<T>], mus: &[Vec<T>]) -> Result<Encoded<T>> {
    let l = xs.len();
    if l == 0 {
        return Err(Error::Empty("sentence"));
    }
    if mus.len() != l {
        return Err(Error::Shape(format!("{} concept inputs for {l} tokens", mus.len())));
    }
    let n = params.dims.hidden;
    let run = |base: usize, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<(usize, StepCache<T>)>> {
        let cell = params.cell(base);
        let mut h = vec![T::zero(); n];
        let mut c = vec![T::zero(); n];
        let mut out = Vec::with_capacity(l);
        for i in order {
            cell.check_inputs(&xs[i], &h, &c, Some(&mus[i]))?;
            let s = cell.step_cached(&xs[i], &h, &c, &mus[i]);
            h = s.h.clone();
            c = s.c.clone();
            out.push((i, s));
        }
        Ok(out)
    };
    let fwd: Vec<StepCache<T>> = run(FWD, &mut (0..l))?.into_iter().map(|(_, s)| s).collect();
    // backward caches are stored in processing order (position l-1 first)
    let bwd: Vec<StepCache<T>> = run(BWD, &mut (0..l).rev())?.into_iter().map(|(_, s)| s).collect();
    let columns = (0..l).map(|i| [fwd[i].h.as_slice(), bwd[l - 1 - i].h.as_slice()].concat()).collect();
    Ok(Encoded { columns, fwd, bwd })
}

/// `α = softmax(w_a2 · tanh(W_a1 h_t))` over target positions; `v_t = Σ α_j h_{t_j}`.
pub fn target_attention<T: Real>(
    params: &SenticParams<T>,
    h: &[Vec<T>],
    targets: &[usize],
    averaging: bool,
) -> Result<AttentionResult<T>> {
    if targets.is_empty() {
        return Err(Error::Empty("target"));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= h.len()) {
        return Err(Error::InvalidInput(format!("target position {bad} out of range")));
    }
    let weights = if averaging {
        vec![T::one() / T::from_usize_lossy(targets.len()); targets.len()]
    } else {
        let wa1 = &params.tensors[WA1];
        let wa2 = params.tensors[WA2].as_slice();
        let e: Vec<T> = targets
            .iter()
            .map(|&t| {
                let u: Vec<T> = wa1.matvec(&h[t]).into_iter().map(|v| v.tanh()).collect();
                dot(wa2, &u)
            })
            .collect();
        softmax_unchecked(&e)
    };
    let mut vector = vec![T::zero(); h[0].len()];
    for (&t, &a) in targets.iter().zip(&weights) {
        axpy(a, &h[t], &mut vector);
    }
    Ok(AttentionResult { weights, vector })
}

/// `g_i = tanh(W_m [h_i ; v_t])`, shared by every aspect.
fn sentence_keys<T: Real>(params: &SenticParams<T>, h: &[Vec<T>], v_t: &[T]) -> Vec<Vec<T>> {
    h.iter()
        .map(|hi| {
            let q = [hi.as_slice(), v_t].concat();
            params.tensors[WM].matvec(&q).into_iter().map(|v| v.tanh()).collect()
        })
        .collect()
}

fn attend<T: Real>(h: &[Vec<T>], keys: &[Vec<T>], query: &[T]) -> AttentionResult<T> {
    let s: Vec<T> = keys.iter().map(|g| dot(query, g)).collect();
    let weights = softmax_unchecked(&s);
    let mut vector = vec![T::zero(); h[0].len()];
    for (hi, &b) in h.iter().zip(&weights) {
        axpy(b, hi, &mut vector);
    }
    AttentionResult { weights, vector }
}

/// `β_a = softmax(v_a · tanh(W_m [h_i ; v_t]))`; `v^a = Σ β_i h_i`.
pub fn sentence_attention<T: Real>(
    params: &SenticParams<T>,
    h: &[Vec<T>],
    v_t: &[T],
    aspect: usize,
) -> Result<AttentionResult<T>> {
    if aspect >= params.dims.aspects {
        return Err(Error::InvalidInput(format!("aspect {aspect} out of range")));
    }
    if h.is_empty() {
        return Err(Error::Empty("sentence"));
    }
    let keys = sentence_keys(params, h, v_t);
    Ok(attend(h, &keys, params.tensors[VA].row(aspect)))
}

/// Word ids and averaged concept vectors of one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedInstance<T> {
    pub ids: Vec<usize>,
    pub mus: Vec<Vec<T>>,
    pub targets: Vec<usize>,
    pub gold: Vec<usize>,
}

/// Looks up words and averages concept vectors (unknown concepts are
/// skipped). Without concept embeddings every μ is zero.
pub fn prepare<T: Real>(
    data: &[TsaInstance],
    vocab: &Vocabulary,
    concepts: Option<&EmbeddingSet<T>>,
    concept_dim: usize,
) -> Result<Vec<PreparedInstance<T>>> {
    if let Some(c) = concepts {
        if c.dims() != concept_dim {
            return Err(Error::Shape(format!("concept embeddings have dim {}, expected {concept_dim}", c.dims())));
        }
    }
    data.iter()
        .map(|inst| {
            let mus = inst
                .concepts
                .iter()
                .map(|cs| {
                    let vecs: Vec<&[T]> = match concepts {
                        Some(table) => cs.iter().filter_map(|c| table.vector(c)).collect(),
                        None => Vec::new(),
                    };
                    average_concepts(&vecs, concept_dim)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PreparedInstance {
                ids: inst.tokens.iter().map(|t| vocab.id(t)).collect(),
                mus,
                targets: inst.targets.clone(),
                gold: inst.gold.iter().map(|p| p.index()).collect(),
            })
        })
        .collect()
}

/// Per-aspect class distributions and everything backward needs.
#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    pub probs: Vec<Vec<T>>,
    pub alpha: Vec<T>,
    pub betas: Vec<Vec<T>>,
    xs: Vec<Vec<T>>,
    masks: Option<Vec<Vec<T>>>,
    enc: Encoded<T>,
    v_t: Vec<T>,
    keys: Vec<Vec<T>>,
    sent_vecs: Vec<Vec<T>>,
}

/// Forward pass; `dropout` is `(probability, rng)` during training.
pub fn forward<T: Real>(
    params: &SenticParams<T>,
    inst: &PreparedInstance<T>,
    flags: ModelFlags,
    dropout: Option<(f64, &mut SeededRng)>,
) -> Result<ForwardPass<T>> {
    let d = params.dims;
    if let Some(&bad) = inst.ids.iter().find(|&&i| i >= d.vocab) {
        return Err(Error::InvalidInput(format!("word id {bad} outside the vocabulary")));
    }
    let mut xs: Vec<Vec<T>> = inst.ids.iter().map(|&i| params.tensors[EMB].row(i).to_vec()).collect();
    let masks = match dropout {
        Some((p, rng)) if p > 0.0 => {
            let keep = T::lit(1.0 / (1.0 - p));
            let masks: Vec<Vec<T>> = xs
                .iter()
                .map(|x| x.iter().map(|_| if rng.bernoulli(p) { T::zero() } else { keep }).collect())
                .collect();
            for (x, m) in xs.iter_mut().zip(&masks) {
                x.iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
            }
            Some(masks)
        }
        _ => None,
    };
    let zero_mus;
    let mus = if flags.sentic {
        &inst.mus
    } else {
        zero_mus = vec![vec![T::zero(); d.concept]; xs.len()];
        &zero_mus
    };
    let enc = encode_bilstm(params, &xs, mus)?;
    let ta = target_attention(params, &enc.columns, &inst.targets, flags.target_averaging)?;
    let keys = sentence_keys(params, &enc.columns, &ta.vector);
    let mut probs = Vec::with_capacity(d.aspects);
    let mut betas = Vec::with_capacity(d.aspects);
    let mut sent_vecs = Vec::with_capacity(d.aspects);
    for a in 0..d.aspects {
        let sa = attend(&enc.columns, &keys, params.tensors[VA].row(a));
        let mut logits = params.tensors[BP].row(a).to_vec();
        for (c, l) in logits.iter_mut().enumerate() {
            *l += dot(params.tensors[WP].row(a * d.classes + c), &sa.vector);
        }
        probs.push(softmax_unchecked(&logits));
        betas.push(sa.weights);
        sent_vecs.push(sa.vector);
    }
    Ok(ForwardPass {
        probs,
        alpha: ta.weights,
        betas,
        xs,
        masks,
        enc,
        v_t: ta.vector,
        keys,
        sent_vecs,
    })
}

/// `-Σ_a ln p^a[gold_a]`
pub fn instance_loss<T: Real>(fp: &ForwardPass<T>, gold: &[usize]) -> T {
    fp.probs
        .iter()
        .zip(gold)
        .map(|(p, &g)| -p[g].max(T::min_positive_value()).ln())
        .sum()
}

fn softmax_backward<T: Real>(w: &[T], dw: &[T]) -> Vec<T> {
    let s = dot(w, dw);
    w.iter().zip(dw).map(|(&a, &b)| a * (b - s)).collect()
}

/// Loss and gradients of one instance, one tensor per parameter.
pub fn loss_and_grad<T: Real>(
    params: &SenticParams<T>,
    inst: &PreparedInstance<T>,
    flags: ModelFlags,
    dropout: Option<(f64, &mut SeededRng)>,
) -> Result<(T, Vec<DenseMatrix<T>>)> {
    let fp = forward(params, inst, flags, dropout)?;
    let d = params.dims;
    let loss = instance_loss(&fp, &inst.gold);
    let mut g: Vec<DenseMatrix<T>> = params.tensors.iter().map(|t| DenseMatrix::zeros(t.rows(), t.cols())).collect();
    let l = fp.xs.len();
    let hh = 2 * d.hidden;
    let one = T::one();
    let mut dh: Vec<Vec<T>> = vec![vec![T::zero(); hh]; l];
    let mut dkeys: Vec<Vec<T>> = vec![vec![T::zero(); d.attention]; l];

    for a in 0..d.aspects {
        let mut dz = fp.probs[a].clone();
        dz[inst.gold[a]] -= one;
        let mut dv = vec![T::zero(); hh];
        for c in 0..d.classes {
            let r = a * d.classes + c;
            axpy(dz[c], &fp.sent_vecs[a], g[WP].row_mut(r));
            g[BP][(a, c)] += dz[c];
            axpy(dz[c], params.tensors[WP].row(r), &mut dv);
        }
        let beta = &fp.betas[a];
        let dbeta: Vec<T> = fp.enc.columns.iter().map(|hi| dot(&dv, hi)).collect();
        for i in 0..l {
            axpy(beta[i], &dv, &mut dh[i]);
        }
        let ds = softmax_backward(beta, &dbeta);
        let va = params.tensors[VA].row(a).to_vec();
        for i in 0..l {
            axpy(ds[i], &fp.keys[i], g[VA].row_mut(a));
            axpy(ds[i], &va, &mut dkeys[i]);
        }
    }

    let mut dvt = vec![T::zero(); hh];
    for i in 0..l {
        let dpre: Vec<T> = dkeys[i]
            .iter()
            .zip(&fp.keys[i])
            .map(|(&dg, &gv)| dg * (one - gv * gv))
            .collect();
        let q = [fp.enc.columns[i].as_slice(), fp.v_t.as_slice()].concat();
        g[WM].add_outer(one, &dpre, &q);
        let dq = params.tensors[WM].matvec_t(&dpre);
        axpy(one, &dq[..hh], &mut dh[i]);
        axpy(one, &dq[hh..], &mut dvt);
    }

    let dalpha: Vec<T> = inst.targets.iter().map(|&t| dot(&dvt, &fp.enc.columns[t])).collect();
    for (&t, &a) in inst.targets.iter().zip(&fp.alpha) {
        axpy(a, &dvt, &mut dh[t]);
    }
    if !flags.target_averaging {
        let de = softmax_backward(&fp.alpha, &dalpha);
        let wa2 = params.tensors[WA2].as_slice().to_vec();
        for (j, &t) in inst.targets.iter().enumerate() {
            let ht = &fp.enc.columns[t];
            let u: Vec<T> = params.tensors[WA1].matvec(ht).into_iter().map(|v| v.tanh()).collect();
            axpy(de[j], &u, g[WA2].as_mut_slice());
            let dpre: Vec<T> = u.iter().zip(&wa2).map(|(&uv, &w)| de[j] * w * (one - uv * uv)).collect();
            g[WA1].add_outer(one, &dpre, ht);
            let back = params.tensors[WA1].matvec_t(&dpre);
            axpy(one, &back, &mut dh[t]);
        }
    }

    let n = d.hidden;
    let mut dxs: Vec<Vec<T>> = vec![vec![T::zero(); d.word]; l];
    let (g_fwd, rest) = g[FWD..].split_at_mut(CELL_TENSORS);
    let g_bwd = &mut rest[..CELL_TENSORS];
    let fcell = params.cell(FWD);
    let mut dh_next = vec![T::zero(); n];
    let mut dc_next = vec![T::zero(); n];
    for i in (0..l).rev() {
        let mut dhi = dh[i][..n].to_vec();
        axpy(one, &dh_next, &mut dhi);
        let (dx, dhp, dcp) = fcell.backward(&fp.enc.fwd[i], &dhi, &dc_next, g_fwd);
        axpy(one, &dx, &mut dxs[i]);
        dh_next = dhp;
        dc_next = dcp;
    }
    let bcell = params.cell(BWD);
    let mut dh_next = vec![T::zero(); n];
    let mut dc_next = vec![T::zero(); n];
    // processing step k handled position l-1-k; walk it in reverse
    for k in (0..l).rev() {
        let pos = l - 1 - k;
        let mut dhi = dh[pos][n..].to_vec();
        axpy(one, &dh_next, &mut dhi);
        let (dx, dhp, dcp) = bcell.backward(&fp.enc.bwd[k], &dhi, &dc_next, g_bwd);
        axpy(one, &dx, &mut dxs[pos]);
        dh_next = dhp;
        dc_next = dcp;
    }
    for (i, &id) in inst.ids.iter().enumerate() {
        let mut dx = std::mem::take(&mut dxs[i]);
        if let Some(m) = &fp.masks {
            dx.iter_mut().zip(&m[i]).for_each(|(v, &k)| *v *= k);
        }
        axpy(one, &dx, g[EMB].row_mut(id));
    }
    Ok((loss, g))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SenticConfig {
    pub word_dim: usize,
    pub hidden: usize,
    pub concept_dim: usize,
    pub attention: usize,
    /// 3 (none/negative/positive) or 4 (adds neutral).
    pub classes: usize,
    pub flags: ModelFlags,
    pub dropout: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SenticConfig {
    fn default() -> Self {
        Self {
            word_dim: 150,
            hidden: 50,
            concept_dim: 100,
            attention: 50,
            classes: 3,
            flags: ModelFlags::default(),
            dropout: 0.5,
            epochs: 10,
            lr: 1e-3,
            seed: 1,
        }
    }
}

impl SenticConfig {
    pub fn dims(&self, vocab: usize, aspects: usize) -> SenticDims {
        SenticDims {
            vocab,
            word: self.word_dim,
            hidden: self.hidden,
            concept: self.concept_dim,
            attention: self.attention,
            aspects,
            classes: self.classes,
        }
    }
}

/// Summary of one training epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev: MetricsReport,
}

/// Adam on per-instance gradients, dropout on the embeddings; returns the
/// parameters of the epoch that scored best on `dev` (sentiment accuracy
/// plus strict aspect accuracy).
pub fn train<T: Real>(
    init: SenticParams<T>,
    train_set: &[PreparedInstance<T>],
    dev: &[PreparedInstance<T>],
    cfg: &SenticConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<SenticParams<T>> {
    if train_set.is_empty() || dev.is_empty() {
        return Err(Error::Empty("train or dev set"));
    }
    if init.dims.aspects == 0 {
        return Err(Error::Empty("aspect set"));
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(Error::InvalidInput(format!("dropout {} outside [0, 1)", cfg.dropout)));
    }
    init.check()?;
    let mut params = init;
    let adam_cfg = AdamConfig {
        lr: T::lit(cfg.lr),
        ..AdamConfig::default()
    };
    let mut adams: Vec<Adam<T>> = params.tensors.iter().map(|t| Adam::new(t.as_slice().len())).collect();
    let mut rng = SeededRng::substream(cfg.seed, "sentic-train");
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0u64;
    let mut best: Option<(f64, SenticParams<T>)> = None;
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for &i in &order {
            let (loss, grads) = loss_and_grad(&params, &train_set[i], cfg.flags, Some((cfg.dropout, &mut rng)))?;
            total += loss.to_f64_lossy();
            step += 1;
            for ((p, g), ad) in params.tensors.iter_mut().zip(&grads).zip(&mut adams) {
                ad.step(&adam_cfg, step, p.as_mut_slice(), g.as_slice());
            }
        }
        if !total.is_finite() || params.tensors.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite(format!("training diverged at epoch {epoch}")));
        }
        let report = evaluate(&params, dev, cfg.flags)?;
        let score = report.get("sentiment_acc").unwrap_or(0.0) + report.get("strict_acc").unwrap_or(0.0);
        let log_entry = EpochLog {
            epoch: epoch + 1,
            train_loss: total / train_set.len() as f64,
            dev: report,
        };
        log::info!(
            "sentic epoch {} loss {:.4} dev score {score:.4}",
            log_entry.epoch,
            log_entry.train_loss
        );
        on_epoch(&log_entry);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, params.clone()));
        }
    }
    Ok(best.map_or(params, |(_, p)| p))
}

/// Mean loss without dropout.
pub fn mean_loss<T: Real>(params: &SenticParams<T>, data: &[PreparedInstance<T>], flags: ModelFlags) -> Result<T> {
    let mut total = T::zero();
    for inst in data {
        total += instance_loss(&forward(params, inst, flags, None)?, &inst.gold);
    }
    Ok(total / T::from_usize_lossy(data.len().max(1)))
}

/// Per aspect: predicted class over all classes.
pub fn predict<T: Real>(params: &SenticParams<T>, inst: &PreparedInstance<T>, flags: ModelFlags) -> Result<Vec<usize>> {
    let fp = forward(params, inst, flags, None)?;
    Ok(fp.probs.iter().map(|p| argmax(p).unwrap_or(0)).collect())
}

/// Aspect sets (classes other than None) scored by strict/macro/micro
/// metrics, and sentiment accuracy over gold non-None pairs using the argmax
/// over non-None classes.
pub fn evaluate<T: Real>(params: &SenticParams<T>, data: &[PreparedInstance<T>], flags: ModelFlags) -> Result<MetricsReport> {
    let mut sets = Vec::with_capacity(data.len());
    let mut correct = 0usize;
    let mut total = 0usize;
    for inst in data {
        let fp = forward(params, inst, flags, None)?;
        let mut pred = BTreeSet::new();
        let mut gold = BTreeSet::new();
        for (a, p) in fp.probs.iter().enumerate() {
            if argmax(p).unwrap_or(0) != Polarity::None.index() {
                pred.insert(a);
            }
            if inst.gold[a] != Polarity::None.index() {
                gold.insert(a);
                total += 1;
                let pol = 1 + argmax(&p[1..]).unwrap_or(0);
                if pol == inst.gold[a] {
                    correct += 1;
                }
            }
        }
        sets.push(LabelSetPrediction::new(gold, pred));
    }
    let mut report = crate::fnet::set_metrics(&sets)?;
    let acc = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    report.insert("sentiment_acc", acc);
    report.insert("sentiment_pairs", total as f64);
    Ok(report)
}

/// Checkpoint: dims and flags as metadata, one block per tensor; embedding
/// rows are keyed by vocabulary word.
pub fn sentic_bundle<T: Real>(
    params: &SenticParams<T>,
    vocab: &Vocabulary,
    aspects: &[String],
    flags: ModelFlags,
) -> Result<MatrixBundle<T>> {
    if vocab.len() != params.dims.vocab || aspects.len() != params.dims.aspects {
        return Err(Error::Shape("vocabulary or aspects disagree with the model".into()));
    }
    if let Some(a) = aspects.iter().find(|a| a.contains(',') || a.contains(char::is_whitespace)) {
        return Err(Error::InvalidInput(format!("aspect name {a:?} cannot be stored")));
    }
    let d = params.dims;
    let mut b = MatrixBundle::new("sentic");
    b.set("word", d.word);
    b.set("hidden", d.hidden);
    b.set("concept", d.concept);
    b.set("attention", d.attention);
    b.set("classes", d.classes);
    b.set("aspects", aspects.join(","));
    b.set("sentic", flags.sentic);
    b.set("target_averaging", flags.target_averaging);
    for (i, t) in params.tensors.iter().enumerate() {
        let labels = if i == EMB {
            vocab.words().to_vec()
        } else {
            (0..t.rows()).map(|r| format!("r{r}")).collect()
        };
        b.push(TENSOR_NAMES[i], LabeledMatrix::new(labels, t.clone())?);
    }
    Ok(b)
}

pub fn sentic_from_bundle<T: Real>(mut bundle: MatrixBundle<T>) -> Result<(SenticParams<T>, Vocabulary, Vec<String>, ModelFlags)> {
    if bundle.kind != "sentic" {
        return Err(Error::InvalidInput(format!("expected a sentic model, found {}", bundle.kind)));
    }
    let aspects: Vec<String> = bundle.meta_str("aspects")?.split(',').map(String::from).collect();
    let flags = ModelFlags {
        sentic: bundle.meta_parse("sentic")?,
        target_averaging: bundle.meta_parse("target_averaging")?,
    };
    let mut tensors = Vec::with_capacity(NUM_TENSORS);
    let mut vocab = None;
    for (i, name) in TENSOR_NAMES.iter().enumerate() {
        let block = bundle.take_block(name)?;
        if i == EMB {
            vocab = Some(Vocabulary::from_word_list(block.labels.clone())?);
        }
        tensors.push(block.matrix);
    }
    let vocab = vocab.expect("embedding block read");
    let dims = SenticDims {
        vocab: vocab.len(),
        word: bundle.meta_parse("word")?,
        hidden: bundle.meta_parse("hidden")?,
        concept: bundle.meta_parse("concept")?,
        attention: bundle.meta_parse("attention")?,
        aspects: aspects.len(),
        classes: bundle.meta_parse("classes")?,
    };
    let params = SenticParams { dims, tensors };
    params.check()?;
    Ok((params, vocab, aspects, flags))
}

/// Training vocabulary; optional word vectors seed matching embedding rows.
pub fn init_embeddings<T: Real>(params: &mut SenticParams<T>, vocab: &Vocabulary, words: &EmbeddingSet<T>) -> Result<usize> {
    if words.dims() != params.dims.word {
        return Err(Error::Shape(format!("word vectors have dim {}, model uses {}", words.dims(), params.dims.word)));
    }
    let mut hit = 0;
    for (i, w) in vocab.words().iter().enumerate() {
        if let Some(v) = words.vector(w) {
            params.tensors[EMB].row_mut(i).copy_from_slice(v);
            hit += 1;
        }
    }
    Ok(hit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fd_gradcheck;
    use proptest::prelude::*;

    fn small_dims() -> SenticDims {
        SenticDims {
            vocab: 6,
            word: 3,
            hidden: 2,
            concept: 2,
            attention: 3,
            aspects: 2,
            classes: 3,
        }
    }



    const SCALE: f64 = 1.5;
    const ATT_SCALE: f64 = 3.0;
    fn random_params(seed: u64, dims: SenticDims) -> SenticParams<f64> {
        let mut rng = SeededRng::new(seed);
        let mut p = SenticParams::zeros(dims);
        for (i, t) in p.tensors.iter_mut().enumerate() {
            let (r, c) = t.shape();
            let s = if (WA1..=VA).contains(&i) { ATT_SCALE } else { SCALE };
            *t = DenseMatrix::uniform(r, c, s, &mut rng);
        }
        p
    }

    fn instance(rng: &mut SeededRng, dims: SenticDims, len: usize) -> PreparedInstance<f64> {
        let ids = (0..len).map(|_| rng.below(dims.vocab)).collect();
        let mus = (0..len)
            .map(|_| (0..dims.concept).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
            .collect();
        let mut targets: Vec<usize> = (0..len).filter(|_| rng.bernoulli(0.5)).collect();
        if targets.is_empty() {
            targets.push(rng.below(len));
        }
        PreparedInstance {
            ids,
            mus,
            targets,
            gold: (0..dims.aspects).map(|_| rng.below(dims.classes)).collect(),
        }
    }

    #[test]
    fn zero_step() {
        let p = SenticParams::<f64>::zeros(small_dims());
        let cell = p.cell(FWD);
        let (h, c) = cell.lstm_step(&[0.0; 3], &[0.0; 2], &[0.0; 2]).unwrap();
        assert_eq!((h, c), (vec![0.0; 2], vec![0.0; 2]));
        assert!(cell.lstm_step(&[0.0; 2], &[0.0; 2], &[0.0; 2]).is_err());
        assert!(cell.sentic_step(&[0.0; 3], &[0.0; 2], &[0.0; 2], &[0.0; 3]).is_err());
    }

    #[test]
    fn memory_carry() {
        let mut p = random_params(1, small_dims());
        p.tensors[FWD + B_F].fill(50.0);
        p.tensors[FWD + B_I].fill(-50.0);
        let (_, c) = p.cell(FWD).lstm_step(&[0.3, -0.2, 0.9], &[0.1, 0.4], &[0.7, -1.2]).unwrap();
        assert!((c[0] - 0.7).abs() < 1e-9 && (c[1] + 1.2).abs() < 1e-9);
    }

    #[test]
    fn lstm_step_matches_straight_line_oracle() {
        let p = random_params(4, small_dims());
        let t = &p.tensors[FWD..FWD + CELL_TENSORS];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let pre = |w: &DenseMatrix<f64>, b: &DenseMatrix<f64>, r: usize, x: &[f64], h: &[f64]| {
            let mut s = b.as_slice()[r];
            for (j, &v) in x.iter().chain(h).enumerate() {
                s += w[(r, j)] * v;
            }
            s
        };
        let mut rng = SeededRng::new(9);
        let (mut h, mut c) = (vec![0.0; 2], vec![0.0; 2]);
        let (mut h2, mut c2) = (vec![0.0; 2], vec![0.0; 2]);
        for _ in 0..3 {
            let x: Vec<f64> = (0..3).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let mut hn = vec![0.0; 2];
            let mut cn = vec![0.0; 2];
            for r in 0..2 {
                let f = sig(pre(&t[W_F], &t[B_F], r, &x, &h2));
                let i = sig(pre(&t[W_I], &t[B_I], r, &x, &h2));
                let g = pre(&t[W_CAND], &t[B_CAND], r, &x, &h2).tanh();
                let o = sig(pre(&t[W_O], &t[B_O], r, &x, &h2));
                cn[r] = f * c2[r] + i * g;
                hn[r] = o * cn[r].tanh();
            }
            (h2, c2) = (hn, cn);
            (h, c) = p.cell(FWD).lstm_step(&x, &h, &c).unwrap();
            for r in 0..2 {
                assert!((h[r] - h2[r]).abs() < 1e-14 && (c[r] - c2[r]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn knowledge_term_vanishes() {
        let mut p = random_params(2, small_dims());
        let cell = p.cell(FWD);
        let (x, h, c) = ([0.5, -0.1, 0.2], [0.3, 0.3], [0.1, -0.4]);
        let plain = cell.lstm_step(&x, &h, &c).unwrap();
        assert_eq!(cell.sentic_step(&x, &h, &c, &[0.0, 0.0]).unwrap(), plain);
        // with W_c = 0 any μ still moves the gates, but the knowledge term is 0
        p.tensors[FWD + W_C].fill(0.0);
        let cell = p.cell(FWD);
        let mu = [0.9, -0.7];
        let (hs, cs) = cell.sentic_step(&x, &h, &c, &mu).unwrap();
        let z = [&x[..], &h[..], &mu[..]].concat();
        let s = cell.forward(z, &c, Some(&mu));
        for k in 0..2 {
            assert_eq!(hs[k], s.o[k] * cs[k].tanh());
        }
    }

    #[test]
    fn concept_average() {
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        assert_eq!(average_concepts::<f64>(&[&a, &b], 2).unwrap(), vec![0.5, 0.5]);
        assert_eq!(average_concepts::<f64>(&[], 2).unwrap(), vec![0.0, 0.0]);
        assert_eq!(average_concepts::<f64>(&[&a], 2).unwrap(), a.to_vec());
        assert!(average_concepts::<f64>(&[&a[..]; 5], 2).is_err());
    }

    #[test]
    fn encoder_shapes_and_reversal() {
        let dims = small_dims();
        let mut p = random_params(3, dims);
        let xs = vec![vec![0.1, 0.2, 0.3]];
        let mus = vec![vec![0.0; 2]];
        let enc = encode_bilstm(&p, &xs, &mus).unwrap();
        assert_eq!(enc.columns.len(), 1);
        assert_eq!(enc.columns[0].len(), 4);

        // tie the directions: reversing the input swaps the halves
        for k in 0..CELL_TENSORS {
            p.tensors[BWD + k] = p.tensors[FWD + k].clone();
        }
        let mut rng = SeededRng::new(5);
        let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).collect();
        let mus: Vec<Vec<f64>> = (0..4).map(|_| (0..2).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).collect();
        let fwd = encode_bilstm(&p, &xs, &mus).unwrap();
        let rx: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        let rm: Vec<Vec<f64>> = mus.iter().rev().cloned().collect();
        let rev = encode_bilstm(&p, &rx, &rm).unwrap();
        for i in 0..4 {
            assert_eq!(fwd.columns[i][..2], rev.columns[3 - i][2..]);
            assert_eq!(fwd.columns[i][2..], rev.columns[3 - i][..2]);
        }
        // palindrome: column-symmetric
        let pal = vec![xs[0].clone(), xs[1].clone(), xs[0].clone()];
        let pm = vec![mus[0].clone(), mus[1].clone(), mus[0].clone()];
        let e = encode_bilstm(&p, &pal, &pm).unwrap();
        assert_eq!(e.columns[0][..2], e.columns[2][2..]);
    }

    #[test]
    fn attention_examples() {
        let dims = small_dims();
        let mut p = random_params(6, dims);
        let h = vec![vec![0.1, 0.2, 0.3, 0.4], vec![-0.5, 0.1, 0.0, 0.9], vec![0.3, 0.3, 0.3, 0.3]];
        let one = target_attention(&p, &h, &[1], false).unwrap();
        assert_eq!(one.weights, vec![1.0]);
        assert_eq!(one.vector, h[1]);
        assert!(target_attention(&p, &h, &[], false).is_err());
        let avg = target_attention(&p, &h, &[0, 2], true).unwrap();
        assert_eq!(avg.weights, vec![0.5, 0.5]);

        let same = vec![h[0].clone(); 3];
        let u = target_attention(&p, &same, &[0, 1, 2], false).unwrap();
        assert!(u.weights.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-12));
        let s = sentence_attention(&p, &same, &u.vector, 1).unwrap();
        assert!(s.weights.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-12));
        assert!(sentence_attention(&p, &same, &u.vector, 2).is_err());
        let single = sentence_attention(&p, &h[..1], &h[0], 0).unwrap();
        assert_eq!(single.weights, vec![1.0]);

        p.tensors[WA2].fill(0.0);
        let z = target_attention(&p, &h, &[0, 1], false).unwrap();
        assert_eq!(z.weights, vec![0.5, 0.5]);
        // averaging equals attention with uniform weights
        assert_eq!(z.vector, target_attention(&p, &h, &[0, 1], true).unwrap().vector);
    }

    #[test]
    fn forward_outputs() {
        let dims = small_dims();
        let mut p = random_params(7, dims);
        let mut rng = SeededRng::new(1);
        let inst = instance(&mut rng, dims, 4);
        let fp = forward(&p, &inst, ModelFlags::default(), None).unwrap();
        for probs in &fp.probs {
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let again = forward(&p, &inst, ModelFlags::default(), None).unwrap();
        assert_eq!(fp.probs, again.probs);
        p.tensors[WP].fill(0.0);
        p.tensors[BP].fill(0.0);
        let fp = forward(&p, &inst, ModelFlags::default(), None).unwrap();
        assert!(fp.probs.iter().flatten().all(|&q| (q - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn dropout_is_seeded() {
        let dims = small_dims();
        let p = random_params(7, dims);
        let mut rng = SeededRng::new(1);
        let inst = instance(&mut rng, dims, 5);
        let run = |seed| {
            let mut r = SeededRng::new(seed);
            loss_and_grad(&p, &inst, ModelFlags::default(), Some((0.5, &mut r))).unwrap().0
        };
        assert_eq!(run(3), run(3));
    }

    #[test]
    fn zero_lr_keeps_params() {
        let dims = small_dims();
        let p = random_params(8, dims);
        let mut rng = SeededRng::new(2);
        let data: Vec<_> = (0..5).map(|_| instance(&mut rng, dims, 3)).collect();
        let cfg = SenticConfig {
            lr: 0.0,
            epochs: 2,
            ..SenticConfig::default()
        };
        let before = mean_loss(&p, &data, cfg.flags).unwrap();
        let out = train(p.clone(), &data, &data, &cfg, |_| {}).unwrap();
        assert_eq!(out, p);
        assert_eq!(mean_loss(&out, &data, cfg.flags).unwrap(), before);
    }

    #[test]
    fn records_and_bundle_round_trip() {
        let aspects = vec!["price".to_string(), "service".to_string()];
        let text = r#"{"tokens":["cheap","food","here"],"target_positions":[1],"aspects":{"price":"positive"},"concepts":[["c1"],[],[]]}"#;
        let data = parse_tsa(text, "t", &aspects, 3).unwrap();
        assert_eq!(data[0].gold, vec![Polarity::Positive, Polarity::None]);
        assert_eq!(parse_tsa(&render_tsa(&data, &aspects).unwrap(), "t", &aspects, 3).unwrap(), data);
        let bad = r#"{"tokens":["a"],"target_positions":[],"aspects":{}}"#;
        assert!(parse_tsa(bad, "t", &aspects, 3).is_err());
        let neutral = r#"{"tokens":["a"],"target_positions":[0],"aspects":{"price":"neutral"}}"#;
        assert!(parse_tsa(neutral, "t", &aspects, 3).is_err());
        assert!(parse_tsa(neutral, "t", &aspects, 4).is_ok());

        let vocab = Vocabulary::from_tokens(["cheap", "food", "here", "x", "y"], 1).unwrap();
        let p = random_params(1, small_dims());
        let b = sentic_bundle(&p, &vocab, &aspects, ModelFlags::default()).unwrap();
        let (back, v2, a2, flags) = sentic_from_bundle(MatrixBundle::<f64>::parse(&b.render(), "m").unwrap()).unwrap();
        assert_eq!(back, p);
        assert_eq!(v2.words(), vocab.words());
        assert_eq!(a2, aspects);
        assert_eq!(flags, ModelFlags::default());
    }

    #[test]
    fn perfect_and_degenerate_evaluation() {
        let dims = SenticDims { aspects: 1, ..small_dims() };
        let mut p = SenticParams::<f64>::zeros(dims);
        // bias the classifier to "positive"
        p.tensors[BP][(0, 2)] = 5.0;
        let mut rng = SeededRng::new(3);
        let mut data: Vec<_> = (0..4).map(|_| instance(&mut rng, dims, 3)).collect();
        for d in &mut data {
            d.gold = vec![2];
        }
        let r = evaluate(&p, &data, ModelFlags::default()).unwrap();
        assert_eq!(r.get("strict_acc"), Some(1.0));
        assert_eq!(r.get("sentiment_acc"), Some(1.0));
        assert_eq!(r.get("macro_f1"), r.get("micro_f1"));

        p.tensors[BP][(0, 2)] = 0.0;
        p.tensors[BP][(0, 0)] = 5.0;
        let r = evaluate(&p, &data, ModelFlags::default()).unwrap();
        assert_eq!(r.get("strict_acc"), Some(0.0));
        assert_eq!(r.get("sentiment_pairs"), Some(4.0));
    }

    fn gradcheck_for(seed: u64, len: usize, flags: ModelFlags) -> f64 {
        gradcheck_eps(seed, len, flags, 1e-5)
    }

    fn gradcheck_eps(seed: u64, len: usize, flags: ModelFlags, eps: f64) -> f64 {
        let dims = small_dims();
        let p = random_params(seed, dims);
        let mut rng = SeededRng::substream(seed, "inst");
        let inst = instance(&mut rng, dims, len);
        let (_, g) = loss_and_grad(&p, &inst, flags, None).unwrap();
        fd_gradcheck(
            |t| {
                let q = SenticParams { dims, tensors: t.to_vec() };
                instance_loss(&forward(&q, &inst, flags, None).unwrap(), &inst.gold)
            },
            &p.tensors,
            &g,
            eps,
        )
        .unwrap()
    }

    #[test]
    fn gradient_at_seeded_random_points() {
        // tiny entries sit near the 1e-8 floor, where eps = 1e-4 keeps
        // roundoff below the tolerance
        for seed in 0..24 {
            let err = gradcheck_eps(seed, 1 + seed as usize % 4, ModelFlags::default(), 1e-4);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn gradient_matches_on_three_tokens() {
        let err = gradcheck_for(3, 3, ModelFlags::default());
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gradient_matches_on_four_tokens() {
        for flags in [
            ModelFlags::default(),
            ModelFlags { sentic: false, target_averaging: false },
            ModelFlags { sentic: true, target_averaging: true },
        ] {
            let err = gradcheck_for(11, 4, flags);
            assert!(err < 1e-4, "{flags:?}: {err}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn zero_concepts_reduce_to_lstm(seed in 0u64..10_000, len in 1usize..6) {
            let dims = small_dims();
            let p = random_params(seed, dims);
            let mut rng = SeededRng::new(seed);
            let xs: Vec<Vec<f64>> = (0..len).map(|_| (0..3).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).collect();
            let mus = vec![vec![0.0; 2]; len];
            let enc = encode_bilstm(&p, &xs, &mus).unwrap();
            let (mut h, mut c) = (vec![0.0; 2], vec![0.0; 2]);
            for i in 0..len {
                (h, c) = p.cell(FWD).lstm_step(&xs[i], &h, &c).unwrap();
                prop_assert_eq!(&enc.columns[i][..2], h.as_slice());
            }
        }

        #[test]
        fn attention_is_permutation_equivariant(seed in 0u64..10_000) {
            let dims = small_dims();
            let p = random_params(seed, dims);
            let mut rng = SeededRng::new(seed);
            let h: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).collect();
            let a = sentence_attention(&p, &h, &h[0], 0).unwrap();
            prop_assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(a.weights.iter().all(|&w| w >= 0.0));
            let perm = [2usize, 0, 3, 1];
            let hp: Vec<Vec<f64>> = perm.iter().map(|&i| h[i].clone()).collect();
            let b = sentence_attention(&p, &hp, &h[0], 0).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert!((b.weights[k] - a.weights[i]).abs() < 1e-12);
            }
            let t = target_attention(&p, &h, &[0, 1, 3], false).unwrap();
            prop_assert!((t.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
