//! Command-line front end: one binary with a subcommand per pipeline stage.
//!
//! Every hyperparameter lives in a flat `key = value` [`RunConfig`]. Values
//! come from the defaults, then `--config FILE`, then `--set key=value`, then
//! the dedicated flags; later sources win.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::corpus::{
    build_vocab, emit_crf_features, extract_feature_events, load_gazetteer, load_taxonomy, Corpus,
    EmbeddingFeatureSource, FeatureGroupTable, FeatureKind, Vocabulary,
};
use crate::embed::{binarize, cluster_words, load_embeddings, nearest_neighbors, save_embeddings, train_skipner, SkipNerConfig};
use crate::error::{Error, Result};
use crate::fnet::{
    build_examples, default_threshold_grid, hle, model_bundle, model_from_bundle, predict_all,
    proto_hle, proto_le, random_label_embedding, read_mentions, select_prototypes, set_metrics, sweep_threshold,
    warp_train, FeatureIndex, LabelEmbeddingKind, LabelEmbeddingMatrix, LabelHierarchy, MentionInstance,
    MentionResources, PrototypeTable, WarpConfig, WarpMode,
};
use crate::metrics::{LabelSetPrediction, MetricsReport};
use crate::numerics::{mix_seed, SeededRng};
use crate::rerank::{
    build_rerank_vocab, corpus_wer, drbm_bundle, drbm_from_bundle, parse_keyword_weights, prepare_lists,
    pretrain_generative, read_nbest, rerank_all, render_nbest, sentence_ids, slp_bundle, slp_from_bundle,
    tfidf_keywords, train_drbm, train_slp, DrbmParams, EntityPrior, NBestList, PretrainConfig, Scorer, SlpConfig,
};
use crate::sentic::{self, read_tsa, render_tsa, sentic_bundle, sentic_from_bundle, ModelFlags, SenticConfig, SenticParams, TsaRecord};
use crate::synth;
use crate::textio::{read_file, write_file, LabeledMatrix, MatrixBundle};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Clone, Copy, Debug)]
enum Kind {
    Int,
    Float,
    Bool,
    IntList,
    Choice(&'static [&'static str]),
    NameList(&'static [&'static str]),
    Text,
}

struct KeySpec {
    key: &'static str,
    kind: Kind,
    default: &'static str,
    help: &'static str,
}

const GROUP_NAMES: &[&str] = &["word", "pos", "taxo", "self"];

const KEYS: &[KeySpec] = &[
    KeySpec { key: "seed", kind: Kind::Int, default: "1", help: "global seed; each stage draws from a named substream of it" },
    KeySpec { key: "workers", kind: Kind::Int, default: "1", help: "worker threads; >1 is non-deterministic and only used by embed-train" },
    KeySpec { key: "embed.dims", kind: Kind::Int, default: "50", help: "word vector size" },
    KeySpec { key: "embed.window", kind: Kind::Int, default: "2", help: "context tokens on each side" },
    KeySpec { key: "embed.negatives", kind: Kind::Int, default: "5", help: "negative samples per event" },
    KeySpec { key: "embed.lr", kind: Kind::Float, default: "0.025", help: "initial learning rate, decayed linearly" },
    KeySpec { key: "embed.min_lr", kind: Kind::Float, default: "0.0001", help: "learning rate floor" },
    KeySpec { key: "embed.epochs", kind: Kind::Int, default: "1", help: "passes over the event stream" },
    KeySpec { key: "embed.min_count", kind: Kind::Int, default: "1", help: "rarer words map to <unk>" },
    KeySpec { key: "embed.groups", kind: Kind::NameList(GROUP_NAMES), default: "word,pos,taxo,self", help: "feature groups to predict (word, pos, taxo, self)" },
    KeySpec { key: "embed.tie_word_offsets", kind: Kind::Bool, default: "false", help: "one word-context group for all offsets (plain skip-gram)" },
    KeySpec { key: "embed.smoothing", kind: Kind::Float, default: "1.0", help: "exponent on feature counts for the negative sampler" },
    KeySpec { key: "embed.clusters", kind: Kind::IntList, default: "500,1000,1500,2000,2500,3000", help: "K values for k-means cluster features" },
    KeySpec { key: "embed.kmeans_iters", kind: Kind::Int, default: "50", help: "k-means iteration cap" },
    KeySpec { key: "embed.neighbors", kind: Kind::Int, default: "10", help: "rows printed by embed-query" },
    KeySpec { key: "fnet.mode", kind: Kind::Choice(&["joint", "fixed", "adaptive"]), default: "fixed", help: "label embedding training mode" },
    KeySpec { key: "fnet.label_emb", kind: Kind::Choice(&["proto", "hle", "proto-hle", "random"]), default: "proto", help: "label embedding prior" },
    KeySpec { key: "fnet.lambda", kind: Kind::Float, default: "0.01", help: "adaptive-mode pull towards the prior" },
    KeySpec { key: "fnet.dims", kind: Kind::Int, default: "300", help: "embedding size for joint and random label embeddings" },
    KeySpec { key: "fnet.epochs", kind: Kind::Int, default: "10", help: "WARP epochs" },
    KeySpec { key: "fnet.lr", kind: Kind::Float, default: "0.1", help: "AdaGrad initial learning rate" },
    KeySpec { key: "fnet.prototypes", kind: Kind::Int, default: "60", help: "prototypes per label (K)" },
    KeySpec { key: "fnet.transitive_hle", kind: Kind::Bool, default: "false", help: "HLE rows mark every ancestor, not just the parent" },
    KeySpec { key: "fnet.threshold", kind: Kind::Float, default: "0.0", help: "relative score threshold when no sweep is run" },
    KeySpec { key: "fnet.top_k", kind: Kind::Int, default: "0", help: "candidates scanned at inference; 0 means all labels" },
    KeySpec { key: "fnet.exact_rank_max", kind: Kind::Int, default: "1000", help: "exact WARP ranks up to this many labels" },
    KeySpec { key: "rerank.hidden", kind: Kind::Int, default: "200", help: "dRBM hidden units (d)" },
    KeySpec { key: "rerank.w0", kind: Kind::Float, default: "1.0", help: "fixed weight on the ASR log-probability" },
    KeySpec { key: "rerank.epochs", kind: Kind::Int, default: "10", help: "discriminative epochs" },
    KeySpec { key: "rerank.lr", kind: Kind::Float, default: "0.001", help: "discriminative learning rate" },
    KeySpec { key: "rerank.presence", kind: Kind::Bool, default: "false", help: "presence instead of count features in discriminative training" },
    KeySpec { key: "rerank.lambda", kind: Kind::Float, default: "0.01", help: "entity prior weight" },
    KeySpec { key: "rerank.literal_prior", kind: Kind::Bool, default: "false", help: "use the literal squared-distance prior" },
    KeySpec { key: "rerank.alpha", kind: Kind::Float, default: "1.0", help: "SLP weight in late fusion" },
    KeySpec { key: "rerank.pretrain_epochs", kind: Kind::Int, default: "5", help: "CD-1 epochs" },
    KeySpec { key: "rerank.pretrain_lr", kind: Kind::Float, default: "0.01", help: "CD-1 learning rate" },
    KeySpec { key: "rerank.slp_iterations", kind: Kind::Int, default: "10", help: "perceptron passes" },
    KeySpec { key: "rerank.slp_pairs", kind: Kind::Int, default: "100", help: "sampled hypothesis pairs per list and pass" },
    KeySpec { key: "rerank.slp_lr", kind: Kind::Float, default: "0.1", help: "perceptron step size" },
    KeySpec { key: "rerank.keyword_threshold", kind: Kind::Float, default: "3.0", help: "TF-IDF cut-off for derived keywords" },
    KeySpec { key: "tsa.word_dim", kind: Kind::Int, default: "150", help: "word embedding size" },
    KeySpec { key: "tsa.hidden", kind: Kind::Int, default: "50", help: "LSTM state size per direction" },
    KeySpec { key: "tsa.concept_dim", kind: Kind::Int, default: "100", help: "concept vector size" },
    KeySpec { key: "tsa.attention", kind: Kind::Int, default: "50", help: "attention hidden size" },
    KeySpec { key: "tsa.classes", kind: Kind::Choice(&["3", "4"]), default: "3", help: "3 (none/negative/positive) or 4 (adds neutral)" },
    KeySpec { key: "tsa.aspects", kind: Kind::Text, default: "", help: "comma-separated aspects; empty infers them from the training file" },
    KeySpec { key: "tsa.sentic", kind: Kind::Bool, default: "true", help: "feed concept vectors through the sentic gates" },
    KeySpec { key: "tsa.target_averaging", kind: Kind::Bool, default: "false", help: "uniform target attention (ablation)" },
    KeySpec { key: "tsa.dropout", kind: Kind::Float, default: "0.5", help: "dropout on word embeddings" },
    KeySpec { key: "tsa.epochs", kind: Kind::Int, default: "10", help: "training epochs" },
    KeySpec { key: "tsa.lr", kind: Kind::Float, default: "0.001", help: "Adam learning rate" },
];

fn spec(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|s| s.key == key)
}

fn check_value(s: &KeySpec, value: &str) -> std::result::Result<(), String> {
    let v = value.trim();
    let ok = match s.kind {
        Kind::Int => v.parse::<u64>().is_ok(),
        Kind::Float => v.parse::<f64>().is_ok_and(f64::is_finite),
        Kind::Bool => v.parse::<bool>().is_ok(),
        Kind::IntList => !v.is_empty() && v.split(',').all(|x| x.trim().parse::<usize>().is_ok_and(|k| k > 0)),
        Kind::Choice(options) => options.contains(&v),
        Kind::NameList(options) => !v.is_empty() && v.split(',').all(|x| options.contains(&x.trim())),
        Kind::Text => true,
    };
    if ok {
        Ok(())
    } else {
        let want = match s.kind {
            Kind::Int => "a non-negative integer".to_string(),
            Kind::Float => "a finite number".to_string(),
            Kind::Bool => "true or false".to_string(),
            Kind::IntList => "a comma-separated list of positive integers".to_string(),
            Kind::Choice(o) => format!("one of {}", o.join(", ")),
            Kind::NameList(o) => format!("a comma-separated subset of {}", o.join(", ")),
            Kind::Text => unreachable!(),
        };
        Err(format!("`{}` must be {want}, got {value:?}", s.key))
    }
}

/// Validated hyperparameters, keyed by the names in the `--help` listing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|s| (s.key, s.default.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(source, i + 1, "expected `key = value`"))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::parse(source, i + 1, e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = spec(key).ok_or_else(|| Error::Unknown {
            kind: "config key",
            name: key.to_string(),
        })?;
        check_value(s, value).map_err(Error::InvalidInput)?;
        self.values.insert(s.key, value.trim().to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::InvalidInput(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key `{key}` is not declared"))
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.get(key).parse().expect("validated integer")
    }

    pub fn usize(&self, key: &str) -> usize {
        self.get(key).parse().expect("validated integer")
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated number")
    }

    pub fn bool(&self, key: &str) -> bool {
        self.get(key).parse().expect("validated bool")
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.get(key)
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    }

    pub fn seed(&self) -> u64 {
        self.u64("seed")
    }

    /// Seed of the named stage; stages never share a stream.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        mix_seed(self.seed(), stage)
    }

    /// All keys, one `key = value` line each, in key order.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Listing of every key with its default, for `--help`.
    pub fn help() -> String {
        let width = KEYS.iter().map(|s| s.key.len()).max().unwrap_or(0);
        let mut out = String::from("Config keys (--config FILE with `key = value` lines, or --set key=value):\n");
        for s in KEYS {
            let _ = writeln!(out, "  {:width$}  {} [default: {}]", s.key, s.help, s.default);
        }
        out
    }

    fn skipner(&self) -> Result<SkipNerConfig> {
        let kinds = self
            .list("embed.groups")
            .iter()
            .map(|g| g.parse::<FeatureKind>())
            .collect::<Result<BTreeSet<_>>>()?;
        Ok(SkipNerConfig {
            dims: self.usize("embed.dims"),
            window: self.usize("embed.window"),
            negatives: self.usize("embed.negatives"),
            lr: self.f64("embed.lr"),
            min_lr: self.f64("embed.min_lr"),
            epochs: self.usize("embed.epochs"),
            kinds,
            tie_word_offsets: self.bool("embed.tie_word_offsets"),
            smoothing: self.f64("embed.smoothing"),
            seed: self.stage_seed("embed"),
            workers: self.usize("workers"),
        })
    }

    fn cluster_ks(&self) -> Vec<usize> {
        self.list("embed.clusters").iter().map(|k| k.parse().expect("validated list")).collect()
    }

    fn warp_mode(&self) -> Result<WarpMode> {
        WarpMode::parse(self.get("fnet.mode"), self.f64("fnet.lambda"))
    }

    fn warp(&self) -> WarpConfig {
        WarpConfig {
            dims: self.usize("fnet.dims"),
            epochs: self.usize("fnet.epochs"),
            lr: self.f64("fnet.lr"),
            exact_rank_max: self.usize("fnet.exact_rank_max"),
            excluded: BTreeSet::new(),
            seed: self.stage_seed("warp"),
        }
    }

    fn sentic(&self) -> SenticConfig {
        SenticConfig {
            word_dim: self.usize("tsa.word_dim"),
            hidden: self.usize("tsa.hidden"),
            concept_dim: self.usize("tsa.concept_dim"),
            attention: self.usize("tsa.attention"),
            classes: self.usize("tsa.classes"),
            flags: ModelFlags {
                sentic: self.bool("tsa.sentic"),
                target_averaging: self.bool("tsa.target_averaging"),
            },
            dropout: self.f64("tsa.dropout"),
            epochs: self.usize("tsa.epochs"),
            lr: self.f64("tsa.lr"),
            seed: self.stage_seed("sentic"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "conceptkit", version, about = "Concept-level NLP pipelines: NER embeddings, fine-grained typing, ASR reranking, targeted sentiment")]
#[command(after_help = RunConfig::help())]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Global seed (config key `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (config key `workers`).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// More log output on standard error (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train NER-specific word embeddings on a corpus.
    EmbedTrain {
        #[arg(long)]
        corpus: PathBuf,
        /// Concept taxonomy (`concept<TAB>w1,w2,...`).
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the nearest neighbours of a word.
    EmbedQuery {
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        word: String,
        /// Rows to print (config key `embed.neighbors`).
        #[arg(short)]
        k: Option<usize>,
    },
    /// Write CRF features derived from embeddings.
    EmbedCrfFeats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select prototype head words per label, optionally writing the label embedding.
    FnetProto {
        #[arg(long)]
        mentions: PathBuf,
        #[arg(long)]
        hierarchy: PathBuf,
        /// Manual prototype lists (`label<TAB>w1,w2,...`) replacing selected ones.
        #[arg(long)]
        manual: Option<PathBuf>,
        #[command(flatten)]
        zero_shot: ZeroShot,
        #[arg(long)]
        out: PathBuf,
        /// Word embeddings; with `--label-emb-out`, writes the label embedding too.
        #[arg(long, requires = "label_emb_out")]
        emb: Option<PathBuf>,
        #[arg(long = "label-emb", value_enum)]
        label_emb: Option<LabelEmbArg>,
        #[arg(long, requires = "emb")]
        label_emb_out: Option<PathBuf>,
    },
    /// Train the joint mention/label embedding model.
    FnetTrain {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        hierarchy: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long = "label-emb", value_enum)]
        label_emb: Option<LabelEmbArg>,
        /// Prototype file; selected from the training mentions when absent.
        #[arg(long)]
        prototypes: Option<PathBuf>,
        /// Word embeddings for the prototype-based label embeddings.
        #[arg(long)]
        emb: Option<PathBuf>,
        /// Precomputed label embedding matrix, used instead of `--label-emb`.
        #[arg(long)]
        label_emb_file: Option<PathBuf>,
        /// Development mentions for the threshold sweep.
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Pick the inference threshold on `--dev`.
        #[arg(long, requires = "dev")]
        threshold_sweep: bool,
        #[command(flatten)]
        zero_shot: ZeroShot,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a typing model, or a prediction file against gold mentions.
    FnetEval {
        #[arg(long)]
        mentions: PathBuf,
        #[arg(long)]
        hierarchy: PathBuf,
        #[arg(long, required_unless_present = "predictions")]
        model: Option<PathBuf>,
        /// Mentions whose labels are predictions, aligned with `--mentions`.
        #[arg(long, conflicts_with = "model")]
        predictions: Option<PathBuf>,
        /// Overrides the threshold stored in the model.
        #[arg(long)]
        threshold: Option<f64>,
        /// Metrics JSON; printed to standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generative pretraining of the reranker on plain text.
    RerankPretrain {
        /// One sentence per line, whitespace-tokenized.
        #[arg(long)]
        text: PathBuf,
        /// N-best lists that fix the vocabulary.
        #[arg(long)]
        nbest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Discriminative reranker training, optionally with the entity prior and an SLP.
    RerankTrain {
        #[arg(long)]
        nbest: PathBuf,
        /// Pretrained model from rerank-pretrain.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Enables the entity prior.
        #[arg(long)]
        gazetteer: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also train the perceptron reranker and write it here.
        #[arg(long)]
        slp_out: Option<PathBuf>,
    },
    /// Rerank N-best lists and report plain and keyword-weighted WER.
    RerankEval {
        #[arg(long)]
        nbest: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        slp: Option<PathBuf>,
        /// Late fusion with the SLP at this weight (config key `rerank.alpha`).
        #[arg(long, requires_all = ["model", "slp"])]
        fuse_slp: Option<f64>,
        /// Keyword weights (`word<TAB>weight`); derived by TF-IDF when absent.
        #[arg(long)]
        keywords: Option<PathBuf>,
        /// All-zero dRBM: reproduces the ASR 1-best.
        #[arg(long, conflicts_with_all = ["model", "slp", "oracle"])]
        zero_model: bool,
        /// Lowest-WER hypothesis of each list.
        #[arg(long, conflicts_with_all = ["model", "slp"])]
        oracle: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the targeted aspect sentiment model with dev-set model selection.
    TsaTrain {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        /// Concept embeddings (word embedding text format).
        #[arg(long)]
        concepts: Option<PathBuf>,
        /// Pretrained word vectors for the embedding layer.
        #[arg(long)]
        word_emb: Option<PathBuf>,
        #[arg(long)]
        classes: Option<ClassesArg>,
        #[arg(long)]
        target_averaging: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a sentiment model.
    TsaEval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        concepts: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset into a directory.
    Synth {
        #[arg(value_enum)]
        task: SynthTask,
        #[arg(long)]
        out_dir: PathBuf,
        /// Number of sentences, mentions, utterances or instances.
        #[arg(long)]
        size: Option<usize>,
    },
}

#[derive(Args, Debug, Clone, Copy)]
struct ZeroShot {
    /// Remove level-2 labels from training (they become unseen types).
    #[arg(long)]
    zero_shot: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Joint,
    Fixed,
    Adaptive,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum LabelEmbArg {
    Proto,
    Hle,
    ProtoHle,
    Random,
}

impl LabelEmbArg {
    fn key(self) -> &'static str {
        match self {
            Self::Proto => "proto",
            Self::Hle => "hle",
            Self::ProtoHle => "proto-hle",
            Self::Random => "random",
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ClassesArg {
    #[value(name = "3")]
    Three,
    #[value(name = "4")]
    Four,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SynthTask {
    Ner,
    Fnet,
    Rerank,
    Tsa,
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    match build_config(&cli).and_then(|cfg| dispatch(cli.command, &cfg)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                EXIT_NUMERIC
            } else {
                EXIT_INPUT
            }
        }
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::parse(&read_file(p)?, &p.display().to_string())?,
        None => RunConfig::default(),
    };
    for pair in &cli.set {
        cfg.set_pair(pair)?;
    }
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(Error::InvalidInput("--workers must be >= 1".into()));
        }
        cfg.set("workers", &w.to_string())?;
    }
    match &cli.command {
        Command::FnetTrain { mode, label_emb, .. } => {
            if let Some(m) = mode {
                cfg.set("fnet.mode", &format!("{m:?}").to_lowercase())?;
            }
            if let Some(l) = label_emb {
                cfg.set("fnet.label_emb", l.key())?;
            }
        }
        Command::FnetProto { label_emb: Some(l), .. } => cfg.set("fnet.label_emb", l.key())?,
        Command::RerankEval { fuse_slp: Some(a), .. } => cfg.set("rerank.alpha", &a.to_string())?,
        Command::TsaTrain {
            classes, target_averaging, ..
        } => {
            if let Some(c) = classes {
                cfg.set("tsa.classes", if matches!(c, ClassesArg::Three) { "3" } else { "4" })?;
            }
            if *target_averaging {
                cfg.set("tsa.target_averaging", "true")?;
            }
        }
        _ => {}
    }
    Ok(cfg)
}

fn dispatch(command: Command, cfg: &RunConfig) -> Result<()> {
    if cfg.usize("workers") > 1 && !matches!(command, Command::EmbedTrain { .. }) {
        log::warn!("this stage is single-worker; ignoring workers = {}", cfg.usize("workers"));
    }
    match command {
        Command::EmbedTrain { corpus, taxonomy, out } => embed_train(cfg, &corpus, taxonomy.as_deref(), &out),
        Command::EmbedQuery { emb, word, k } => embed_query(cfg, &emb, &word, k),
        Command::EmbedCrfFeats { corpus, emb, out } => embed_crf_feats(cfg, &corpus, &emb, &out),
        Command::FnetProto {
            mentions,
            hierarchy,
            manual,
            zero_shot,
            out,
            emb,
            label_emb: _,
            label_emb_out,
        } => fnet_proto(cfg, &mentions, &hierarchy, manual.as_deref(), zero_shot.zero_shot, &out, emb.as_deref(), label_emb_out.as_deref()),
        Command::FnetTrain {
            train,
            hierarchy,
            prototypes,
            emb,
            label_emb_file,
            dev,
            threshold_sweep,
            zero_shot,
            out,
            ..
        } => fnet_train(
            cfg,
            &FnetTrainArgs {
                train,
                hierarchy,
                prototypes,
                emb,
                label_emb_file,
                dev,
                threshold_sweep,
                zero_shot: zero_shot.zero_shot,
                out,
            },
        ),
        Command::FnetEval {
            mentions,
            hierarchy,
            model,
            predictions,
            threshold,
            out,
        } => fnet_eval(cfg, &mentions, &hierarchy, model.as_deref(), predictions.as_deref(), threshold, out.as_deref()),
        Command::RerankPretrain { text, nbest, out } => rerank_pretrain(cfg, &text, &nbest, &out),
        Command::RerankTrain {
            nbest,
            init,
            gazetteer,
            out,
            slp_out,
        } => rerank_train(cfg, &nbest, init.as_deref(), gazetteer.as_deref(), &out, slp_out.as_deref()),
        Command::RerankEval {
            nbest,
            model,
            slp,
            fuse_slp,
            keywords,
            zero_model,
            oracle,
            out,
        } => {
            let system = if oracle {
                System::Oracle
            } else if zero_model {
                System::Zero
            } else {
                match (model, slp, fuse_slp.is_some()) {
                    (Some(m), Some(s), true) => System::Fused(m, s),
                    (Some(m), None, _) => System::Rbm(m),
                    (None, Some(s), _) => System::Slp(s),
                    (Some(_), Some(_), false) => {
                        return Err(Error::InvalidInput("--model with --slp needs --fuse-slp".into()))
                    }
                    (None, None, _) => System::Asr,
                }
            };
            rerank_eval(cfg, &nbest, system, keywords.as_deref(), out.as_deref())
        }
        Command::TsaTrain {
            train,
            dev,
            concepts,
            word_emb,
            out,
            ..
        } => tsa_train(cfg, &train, &dev, concepts.as_deref(), word_emb.as_deref(), &out),
        Command::TsaEval { model, data, concepts, out } => tsa_eval(&model, &data, concepts.as_deref(), out.as_deref()),
        Command::Synth { task, out_dir, size } => synth_data(cfg, task, &out_dir, size),
    }
}

/// Fails before any work if `path` cannot be created as a file.
fn check_output(path: &Path) -> Result<()> {
    if path.is_dir() {
        return Err(Error::InvalidInput(format!("output {} is a directory", path.display())));
    }
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(Error::InvalidInput(format!("output directory {} does not exist", parent.display())));
    }
    Ok(())
}

fn check_input(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("input file {} not found", path.display())))
    }
}

fn emit_report(report: &MetricsReport, out: Option<&Path>) -> Result<()> {
    eprint!("{}", report.to_table());
    match out {
        Some(p) => write_file(p, &(report.to_json() + "\n")),
        None => {
            println!("{}", report.to_json());
            Ok(())
        }
    }
}

fn embed_train(cfg: &RunConfig, corpus: &Path, taxonomy: Option<&Path>, out: &Path) -> Result<()> {
    check_output(out)?;
    let skip = cfg.skipner()?;
    let corpus = Corpus::read(corpus)?;
    let taxonomy = taxonomy.map(load_taxonomy).transpose()?;
    let vocab = build_vocab(&corpus, cfg.u64("embed.min_count"))?;
    let mut table = FeatureGroupTable::new();
    let events = extract_feature_events(&corpus, &vocab, &skip.feature_config(), taxonomy.as_ref(), &mut table)?;
    log::info!("{} events in {} feature groups", events.len(), table.num_groups());
    let emb = train_skipner::<f64>(&events, &table, &vocab, &skip)?;
    if !emb.word_vectors.is_finite() {
        return Err(Error::NonFinite("word vectors after training".into()));
    }
    save_embeddings(&emb, out)
}

fn embed_query(cfg: &RunConfig, emb: &Path, word: &str, k: Option<usize>) -> Result<()> {
    let emb = load_embeddings::<f64>(emb)?;
    let k = k.unwrap_or_else(|| cfg.usize("embed.neighbors"));
    for (w, s) in nearest_neighbors(&emb, word, k)? {
        println!("{w}\t{s:.6}");
    }
    Ok(())
}

fn embed_crf_feats(cfg: &RunConfig, corpus: &Path, emb: &Path, out: &Path) -> Result<()> {
    check_output(out)?;
    let corpus = Corpus::read(corpus)?;
    let emb = load_embeddings::<f64>(emb)?;
    if let Some(t) = corpus.sentences.iter().flatten().find(|t| emb.row_or_unk(&t.surface).is_none()) {
        return Err(Error::InvalidInput(format!(
            "token {:?} is not in the embeddings and they have no <unk> row",
            t.surface
        )));
    }
    let ks = cfg.cluster_ks();
    let binarized = binarize(&emb.word_vectors);
    let clusterings = cluster_words(&emb, &ks, cfg.usize("embed.kmeans_iters"), cfg.stage_seed("kmeans"))?;
    let row_of = |w: &str| emb.row_or_unk(w).expect("checked above");
    let source = EmbeddingFeatureSource {
        row_of: &row_of,
        binarized: &binarized,
        clusterings: &clusterings,
    };
    write_file(out, &emit_crf_features(&corpus, &source, &ks)?)
}

fn read_manual(path: Option<&Path>) -> Result<BTreeMap<String, Vec<String>>> {
    let Some(p) = path else { return Ok(BTreeMap::new()) };
    Ok(PrototypeTable::read(p)?
        .entries
        .into_iter()
        .map(|(l, ps)| (l, ps.into_iter().map(|p| p.word).collect()))
        .collect())
}

/// Drops level-2 labels from every mention.
fn without_level2(mentions: &[MentionInstance], hier: &LabelHierarchy) -> Result<Vec<MentionInstance>> {
    mentions
        .iter()
        .map(|m| {
            let mut m = m.clone();
            let mut kept = Vec::with_capacity(m.labels.len());
            for l in &m.labels {
                if hier.level(hier.id_or_err(l)?) != 2 {
                    kept.push(l.clone());
                }
            }
            m.labels = kept;
            Ok(m)
        })
        .collect()
}

fn label_embedding(
    cfg: &RunConfig,
    hier: &LabelHierarchy,
    protos: Option<&PrototypeTable>,
    emb: Option<&Path>,
) -> Result<LabelEmbeddingMatrix<f64>> {
    let kind: LabelEmbeddingKind = cfg.get("fnet.label_emb").parse()?;
    let transitive = cfg.bool("fnet.transitive_hle");
    let proto = |protos: Option<&PrototypeTable>| -> Result<LabelEmbeddingMatrix<f64>> {
        let emb = emb.ok_or_else(|| Error::InvalidInput(format!("label embedding {} needs --emb", kind.name())))?;
        let protos = protos.expect("prototypes resolved by the caller");
        proto_le(protos, hier, &load_embeddings(emb)?)
    };
    match kind {
        LabelEmbeddingKind::ProtoLe => proto(protos),
        LabelEmbeddingKind::Hle => Ok(hle(hier, transitive)),
        LabelEmbeddingKind::ProtoHle => proto_hle(&proto(protos)?, &hle(hier, transitive)),
        LabelEmbeddingKind::Random => {
            let mut rng = SeededRng::new(cfg.stage_seed("random-label-emb"));
            Ok(random_label_embedding(hier.len(), cfg.usize("fnet.dims"), &mut rng))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn fnet_proto(
    cfg: &RunConfig,
    mentions: &Path,
    hierarchy: &Path,
    manual: Option<&Path>,
    zero_shot: bool,
    out: &Path,
    emb: Option<&Path>,
    label_emb_out: Option<&Path>,
) -> Result<()> {
    check_output(out)?;
    if let Some(p) = label_emb_out {
        check_output(p)?;
    }
    let hier = LabelHierarchy::read(hierarchy)?;
    let mut mentions = read_mentions(mentions)?;
    if zero_shot {
        mentions = without_level2(&mentions, &hier)?;
    }
    let protos = select_prototypes(&mentions, &hier, cfg.usize("fnet.prototypes"), &read_manual(manual)?)?;
    let b = match label_emb_out {
        Some(_) => Some(label_embedding(cfg, &hier, Some(&protos), emb)?),
        None => None,
    };
    write_file(out, &protos.render())?;
    if let (Some(p), Some(b)) = (label_emb_out, b) {
        write_file(p, &b.to_labeled(&hier)?.render())?;
    }
    Ok(())
}

struct FnetTrainArgs {
    train: PathBuf,
    hierarchy: PathBuf,
    prototypes: Option<PathBuf>,
    emb: Option<PathBuf>,
    label_emb_file: Option<PathBuf>,
    dev: Option<PathBuf>,
    threshold_sweep: bool,
    zero_shot: bool,
    out: PathBuf,
}

fn fnet_train(cfg: &RunConfig, a: &FnetTrainArgs) -> Result<()> {
    check_output(&a.out)?;
    let mode = cfg.warp_mode()?;
    let hier = LabelHierarchy::read(&a.hierarchy)?;
    let mut train = read_mentions(&a.train)?;
    let dev = a.dev.as_deref().map(read_mentions).transpose()?;
    let mut warp = cfg.warp();
    if a.zero_shot {
        train = without_level2(&train, &hier)?;
        warp.excluded = hier.ids_at_level(2).into_iter().collect();
    }
    let (b, label_emb_name) = match (&a.label_emb_file, mode) {
        (_, WarpMode::Joint) => (None, "none".to_string()),
        (Some(p), _) => {
            let lm = LabeledMatrix::read(p)?;
            (Some(LabelEmbeddingMatrix::from_labeled(&lm, &hier, LabelEmbeddingKind::Random)?), "file".to_string())
        }
        (None, _) => {
            let kind = cfg.get("fnet.label_emb");
            let needs_protos = matches!(kind, "proto" | "proto-hle");
            let protos = match (&a.prototypes, needs_protos) {
                (Some(p), true) => Some(PrototypeTable::read(p)?),
                (None, true) => Some(select_prototypes(&train, &hier, cfg.usize("fnet.prototypes"), &BTreeMap::new())?),
                (_, false) => None,
            };
            (Some(label_embedding(cfg, &hier, protos.as_ref(), a.emb.as_deref())?), kind.to_string())
        }
    };
    let res = MentionResources::default();
    let mut index = FeatureIndex::default();
    let train_ex = build_examples::<f64>(&train, &hier, &res, &mut index, true)?;
    let model = warp_train(&train_ex, index.len(), hier.len(), b.as_ref(), mode, &warp)?;
    let k = match cfg.usize("fnet.top_k") {
        0 => hier.len(),
        k => k,
    };
    let mut threshold = cfg.f64("fnet.threshold");
    if a.threshold_sweep {
        let dev = dev.as_ref().expect("clap requires --dev");
        let dev_ex = build_examples::<f64>(dev, &hier, &res, &mut index, false)?;
        let (t, report) = sweep_threshold(&model, &dev_ex, &hier, k, &default_threshold_grid())?;
        log::info!("threshold {t} (dev strict {:.4})", report.get("strict_acc").unwrap_or(0.0));
        threshold = t;
    }
    let mut bundle = model_bundle(&model, &index, &hier, mode, &label_emb_name)?;
    bundle.set("threshold", threshold);
    bundle.set("top_k", k);
    bundle.set("zero_shot", a.zero_shot);
    write_file(&a.out, &bundle.render())
}

fn level2_precision(preds: &[LabelSetPrediction<usize>], hier: &LabelHierarchy) -> f64 {
    let fine: BTreeSet<usize> = hier.ids_at_level(2).into_iter().collect();
    let (mut hit, mut total) = (0usize, 0usize);
    for p in preds {
        for l in p.predicted.iter().filter(|l| fine.contains(l)) {
            total += 1;
            hit += usize::from(p.gold.contains(l));
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

fn fnet_eval(
    _cfg: &RunConfig,
    mentions: &Path,
    hierarchy: &Path,
    model: Option<&Path>,
    predictions: Option<&Path>,
    threshold: Option<f64>,
    out: Option<&Path>,
) -> Result<()> {
    if let Some(p) = out {
        check_output(p)?;
    }
    let hier = LabelHierarchy::read(hierarchy)?;
    let gold = read_mentions(mentions)?;
    let ids = |labels: &[String]| labels.iter().map(|l| hier.id_or_err(l)).collect::<Result<Vec<usize>>>();
    let (preds, zero_shot) = match (model, predictions) {
        (_, Some(p)) => {
            let pred = read_mentions(p)?;
            if pred.len() != gold.len() {
                return Err(Error::Shape(format!("{} predictions for {} mentions", pred.len(), gold.len())));
            }
            let preds = gold
                .iter()
                .zip(&pred)
                .map(|(g, p)| Ok(LabelSetPrediction::new(ids(&g.labels)?, ids(&p.labels)?)))
                .collect::<Result<Vec<_>>>()?;
            (preds, false)
        }
        (Some(m), None) => {
            let bundle = MatrixBundle::<f64>::read(m)?;
            let t = match threshold {
                Some(t) => t,
                None => bundle.meta_parse("threshold")?,
            };
            let k: usize = bundle.meta_parse("top_k")?;
            let zero_shot: bool = bundle.meta_parse("zero_shot")?;
            let (model, mut index) = model_from_bundle(bundle, &hier)?;
            let ex = build_examples::<f64>(&gold, &hier, &MentionResources::default(), &mut index, false)?;
            (predict_all(&model, &ex, &hier, t, k), zero_shot)
        }
        (None, None) => return Err(Error::InvalidInput("need --model or --predictions".into())),
    };
    let mut report = set_metrics(&preds)?;
    if zero_shot {
        report.insert("level2_precision", level2_precision(&preds, &hier));
    }
    emit_report(&report, out)
}

fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read_file(path)?
        .lines()
        .map(|l| l.split_whitespace().map(String::from).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect())
}

fn rerank_pretrain(cfg: &RunConfig, text: &Path, nbest: &Path, out: &Path) -> Result<()> {
    check_output(out)?;
    let sentences = read_sentences(text)?;
    let lists = read_nbest(nbest)?;
    let vocab = build_rerank_vocab(&lists)?;
    let mut rng = SeededRng::new(cfg.stage_seed("drbm-init"));
    let init = DrbmParams::<f64>::init(vocab.len(), cfg.usize("rerank.hidden"), cfg.f64("rerank.w0"), &mut rng);
    let params = pretrain_generative(
        &sentence_ids(&sentences, &vocab),
        init,
        &PretrainConfig {
            epochs: cfg.usize("rerank.pretrain_epochs"),
            lr: cfg.f64("rerank.pretrain_lr"),
            seed: cfg.stage_seed("pretrain"),
        },
    )?;
    write_file(out, &drbm_bundle(&params, &vocab, cfg.bool("rerank.presence"))?.render())
}

fn rerank_train(
    cfg: &RunConfig,
    nbest: &Path,
    init: Option<&Path>,
    gazetteer: Option<&Path>,
    out: &Path,
    slp_out: Option<&Path>,
) -> Result<()> {
    check_output(out)?;
    if let Some(p) = slp_out {
        check_output(p)?;
    }
    let lists = read_nbest(nbest)?;
    let gazetteer = gazetteer.map(load_gazetteer).transpose()?;
    let presence = cfg.bool("rerank.presence");
    let (params, vocab) = match init {
        Some(p) => {
            let (params, vocab, _) = drbm_from_bundle(MatrixBundle::read(p)?)?;
            (params, vocab)
        }
        None => {
            let vocab = build_rerank_vocab(&lists)?;
            let mut rng = SeededRng::new(cfg.stage_seed("drbm-init"));
            let params = DrbmParams::init(vocab.len(), cfg.usize("rerank.hidden"), cfg.f64("rerank.w0"), &mut rng);
            (params, vocab)
        }
    };
    let prior = match &gazetteer {
        Some(g) => {
            let mut p = EntityPrior::from_gazetteer(g, &vocab, cfg.f64("rerank.lambda"))?;
            p.literal = cfg.bool("rerank.literal_prior");
            Some(p)
        }
        None => None,
    };
    let data = prepare_lists::<f64>(&lists, &vocab, presence);
    if data.is_empty() {
        return Err(Error::Empty("N-best training set"));
    }
    let trained = train_drbm(&data, params, prior.as_ref(), cfg.usize("rerank.epochs"), cfg.f64("rerank.lr"))?;
    let slp = match slp_out {
        Some(_) => Some(train_slp::<f64>(
            &lists,
            &vocab,
            &SlpConfig {
                pairs_per_list: cfg.usize("rerank.slp_pairs"),
                iterations: cfg.usize("rerank.slp_iterations"),
                lr: cfg.f64("rerank.slp_lr"),
                presence,
                seed: cfg.stage_seed("slp"),
            },
        )?),
        None => None,
    };
    write_file(out, &drbm_bundle(&trained, &vocab, presence)?.render())?;
    if let (Some(p), Some(m)) = (slp_out, slp) {
        write_file(p, &slp_bundle(&m, &vocab, presence)?.render())?;
    }
    Ok(())
}

enum System {
    Asr,
    Zero,
    Oracle,
    Rbm(PathBuf),
    Slp(PathBuf),
    Fused(PathBuf, PathBuf),
}

fn rerank_eval(cfg: &RunConfig, nbest: &Path, system: System, keywords: Option<&Path>, out: Option<&Path>) -> Result<()> {
    if let Some(p) = out {
        check_output(p)?;
    }
    let lists = read_nbest(nbest)?;
    let weights: HashMap<String, f64> = match keywords {
        Some(p) => parse_keyword_weights(&read_file(p)?, &p.display().to_string())?,
        None => {
            let refs: Vec<Vec<String>> = lists.iter().map(|l| l.reference.clone()).collect();
            tfidf_keywords(&refs, cfg.f64("rerank.keyword_threshold"))?.into_iter().collect()
        }
    };
    let load_rbm = |p: &Path| drbm_from_bundle::<f64>(MatrixBundle::read(p)?);
    let load_slp = |p: &Path| slp_from_bundle::<f64>(MatrixBundle::read(p)?);
    let (name, choices) = match system {
        System::Oracle => ("oracle", lists.iter().map(NBestList::oracle).collect()),
        System::Asr => ("asr", rerank_all::<f64>(&lists, &Scorer::Asr, &build_rerank_vocab(&lists)?, false)),
        System::Zero => {
            let vocab = build_rerank_vocab(&lists)?;
            let zero = DrbmParams::zeros(vocab.len(), cfg.usize("rerank.hidden"), cfg.f64("rerank.w0"));
            ("zero", rerank_all(&lists, &Scorer::Rbm(&zero), &vocab, false))
        }
        System::Rbm(p) => {
            let (params, vocab, presence) = load_rbm(&p)?;
            ("drbm", rerank_all(&lists, &Scorer::Rbm(&params), &vocab, presence))
        }
        System::Slp(p) => {
            let (model, vocab, presence) = load_slp(&p)?;
            ("slp", rerank_all(&lists, &Scorer::Slp(&model), &vocab, presence))
        }
        System::Fused(m, s) => {
            let (params, vocab, presence) = load_rbm(&m)?;
            let (slp, slp_vocab, slp_presence) = load_slp(&s)?;
            if slp_vocab.words() != vocab.words() || slp_presence != presence {
                return Err(Error::InvalidInput("dRBM and SLP models were trained on different vocabularies or features".into()));
            }
            let scorer = Scorer::Fused {
                rbm: &params,
                slp: &slp,
                alpha: cfg.f64("rerank.alpha"),
            };
            ("fused", rerank_all(&lists, &scorer, &vocab, presence))
        }
    };
    log::info!("system {name}");
    let mut report = MetricsReport::new();
    report.insert("wer", corpus_wer(&lists, &choices, None));
    report.insert("weighted_wer", corpus_wer(&lists, &choices, Some(&weights)));
    report.insert("utterances", lists.len() as f64);
    report.insert("keywords", weights.values().filter(|&&w| w > 0.0).count() as f64);
    emit_report(&report, out)
}

/// Sorted union of the aspect names in a dataset file; malformed lines are
/// left for the full parser to report.
fn infer_aspects(path: &Path) -> Result<Vec<String>> {
    let mut names = BTreeSet::new();
    for line in read_file(path)?.lines() {
        if let Ok(r) = serde_json::from_str::<TsaRecord>(line) {
            names.extend(r.aspects.into_keys());
        }
    }
    if names.is_empty() {
        return Err(Error::Empty("aspect set of the training file"));
    }
    Ok(names.into_iter().collect())
}

fn tsa_train(cfg: &RunConfig, train: &Path, dev: &Path, concepts: Option<&Path>, word_emb: Option<&Path>, out: &Path) -> Result<()> {
    check_output(out)?;
    check_input(dev)?;
    let sc = cfg.sentic();
    let aspects = match cfg.list("tsa.aspects") {
        a if a.is_empty() => infer_aspects(train)?,
        a => a,
    };
    let train_set = read_tsa(train, &aspects, sc.classes)?;
    let dev_set = read_tsa(dev, &aspects, sc.classes)?;
    let concepts = concepts.map(load_embeddings::<f64>).transpose()?;
    let words = word_emb.map(load_embeddings::<f64>).transpose()?;
    let vocab = Vocabulary::from_tokens(train_set.iter().flat_map(|i| i.tokens.iter().map(String::as_str)), 1)?;
    let ptrain = sentic::prepare(&train_set, &vocab, concepts.as_ref(), sc.concept_dim)?;
    let pdev = sentic::prepare(&dev_set, &vocab, concepts.as_ref(), sc.concept_dim)?;
    let mut rng = SeededRng::new(cfg.stage_seed("sentic-init"));
    let mut init = SenticParams::init(sc.dims(vocab.len(), aspects.len()), &mut rng);
    if let Some(w) = &words {
        let hit = sentic::init_embeddings(&mut init, &vocab, w)?;
        log::info!("{hit} of {} words initialised from pretrained vectors", vocab.len());
    }
    // same selection rule as the trainer: first epoch with the best score
    let mut best: Option<(f64, usize)> = None;
    let model = sentic::train(init, &ptrain, &pdev, &sc, |e| {
        let score = e.dev.get("sentiment_acc").unwrap_or(0.0) + e.dev.get("strict_acc").unwrap_or(0.0);
        eprintln!("epoch {} train loss {:.4} dev score {score:.4}", e.epoch, e.train_loss);
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, e.epoch));
        }
    })?;
    let mut bundle = sentic_bundle(&model, &vocab, &aspects, sc.flags)?;
    let (score, epoch) = best.expect("at least one epoch");
    bundle.set("best_epoch", epoch);
    bundle.set("best_dev_score", score);
    bundle.set("epochs", sc.epochs);
    bundle.set("seed", cfg.seed());
    write_file(out, &bundle.render())
}

fn tsa_eval(model: &Path, data: &Path, concepts: Option<&Path>, out: Option<&Path>) -> Result<()> {
    if let Some(p) = out {
        check_output(p)?;
    }
    let (params, vocab, aspects, flags) = sentic_from_bundle::<f64>(MatrixBundle::read(model)?)?;
    let set = read_tsa(data, &aspects, params.dims.classes)?;
    let concepts = concepts.map(load_embeddings::<f64>).transpose()?;
    let prepared = sentic::prepare(&set, &vocab, concepts.as_ref(), params.dims.concept)?;
    let full = sentic::evaluate(&params, &prepared, flags)?;
    let mut report = MetricsReport::new();
    for key in ["strict_acc", "macro_f1", "micro_f1", "sentiment_acc"] {
        report.insert(key, full.get(key).unwrap_or(0.0));
    }
    emit_report(&report, out)
}

/// Train / dev / test cut at 70% / 15%.
fn three_way<T: Clone>(items: &[T]) -> [Vec<T>; 3] {
    let a = items.len() * 70 / 100;
    let b = items.len() * 85 / 100;
    [items[..a].to_vec(), items[a..b].to_vec(), items[b..].to_vec()]
}

fn synth_data(cfg: &RunConfig, task: SynthTask, dir: &Path, size: Option<usize>) -> Result<()> {
    if !dir.is_dir() {
        return Err(Error::InvalidInput(format!("output directory {} does not exist", dir.display())));
    }
    let seed = cfg.stage_seed("synth");
    let mut files: Vec<(&str, String)> = Vec::new();
    match task {
        SynthTask::Ner => {
            let mut c = synth::NerSynthConfig { seed, ..Default::default() };
            c.sentences = size.unwrap_or(c.sentences);
            let d = synth::ner_dataset(&c)?;
            files.push(("corpus.tsv", d.corpus.render()));
            files.push(("taxonomy.tsv", d.taxonomy));
        }
        SynthTask::Fnet => {
            let mut c = synth::FnetSynthConfig { seed, ..Default::default() };
            c.mentions = size.unwrap_or(c.mentions);
            let d = synth::fnet_dataset(&c)?;
            let [train, dev, test] = three_way(&d.mentions);
            files.push(("hierarchy.txt", d.hierarchy.render()));
            files.push(("train.jsonl", crate::fnet::render_mentions(&train)?));
            files.push(("dev.jsonl", crate::fnet::render_mentions(&dev)?));
            files.push(("test.jsonl", crate::fnet::render_mentions(&test)?));
            files.push(("embeddings.txt", LabeledMatrix::new(d.embeddings.words().to_vec(), d.embeddings.word_vectors.clone())?.render()));
            let manual: String = d.manual_prototypes.iter().map(|(l, ws)| format!("{l}\t{}\n", ws.join(","))).collect();
            files.push(("manual_prototypes.tsv", manual));
        }
        SynthTask::Rerank => {
            let mut c = synth::RerankSynthConfig { seed, ..Default::default() };
            c.utterances = size.unwrap_or(c.utterances);
            let d = synth::rerank_dataset(&c);
            let cut = d.lists.len() * 80 / 100;
            files.push(("train.jsonl", render_nbest(&d.lists[..cut])?));
            files.push(("test.jsonl", render_nbest(&d.lists[cut..])?));
            files.push(("gazetteer.tsv", d.gazetteer.iter().map(|(w, c)| format!("{w}\t{}\n", c.name())).collect()));
            files.push(("text.txt", d.text.iter().map(|s| s.join(" ") + "\n").collect()));
        }
        SynthTask::Tsa => {
            let mut c = synth::TsaSynthConfig { seed, ..Default::default() };
            c.instances = size.unwrap_or(c.instances);
            let d = synth::tsa_dataset(&c)?;
            let [train, dev, test] = three_way(&d.instances);
            files.push(("train.jsonl", render_tsa(&train, &d.aspects)?));
            files.push(("dev.jsonl", render_tsa(&dev, &d.aspects)?));
            files.push(("test.jsonl", render_tsa(&test, &d.aspects)?));
            files.push(("concepts.txt", LabeledMatrix::new(d.concepts.words().to_vec(), d.concepts.word_vectors.clone())?.render()));
            files.push(("aspects.txt", d.aspects.join(",") + "\n"));
        }
    }
    for (name, text) in files {
        write_file(&dir.join(name), &text)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        for s in KEYS {
            check_value(s, s.default).unwrap();
        }
        let cfg = RunConfig::default();
        assert_eq!(cfg.usize("embed.dims"), 50);
        assert_eq!(cfg.usize("fnet.dims"), 300);
        assert_eq!(cfg.usize("rerank.hidden"), 200);
        assert_eq!(cfg.f64("rerank.lambda"), 0.01);
        assert_eq!(cfg.f64("rerank.alpha"), 1.0);
        assert_eq!(cfg.usize("fnet.prototypes"), 60);
        assert_eq!(cfg.f64("tsa.dropout"), 0.5);
        assert_eq!(cfg.usize("tsa.epochs"), 10);
    }

    #[test]
    fn parse_and_reject() {
        let cfg = RunConfig::parse("seed = 7 # comment\n\nembed.groups = word,pos\n", "cfg").unwrap();
        assert_eq!(cfg.seed(), 7);
        assert_eq!(cfg.list("embed.groups"), ["word", "pos"]);
        let e = RunConfig::parse("seed = 1\nembed.dimz = 3\n", "cfg").unwrap_err();
        assert!(e.to_string().contains("cfg:2"), "{e}");
        assert!(RunConfig::parse("embed.dims = -3", "cfg").is_err());
        assert!(RunConfig::parse("embed.lr = nan", "cfg").is_err());
        assert!(RunConfig::parse("fnet.mode = sideways", "cfg").is_err());
        assert!(RunConfig::parse("embed.groups = word,affix", "cfg").is_err());
        assert!(RunConfig::parse("embed.clusters = 10,0", "cfg").is_err());
        assert!(RunConfig::parse("seed 3", "cfg").is_err());
    }

    #[test]
    fn help_lists_every_key() {
        let h = RunConfig::help();
        for s in KEYS {
            assert!(h.contains(s.key), "{}", s.key);
        }
    }

    #[test]
    fn render_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("tsa.classes", "4").unwrap();
        assert_eq!(RunConfig::parse(&cfg.render(), "r").unwrap(), cfg);
    }

    #[test]
    fn stage_seeds_differ() {
        let cfg = RunConfig::default();
        assert_ne!(cfg.stage_seed("embed"), cfg.stage_seed("warp"));
    }
}
