//! Tagged corpora, lexicons, grouped feature extraction for multi-task
//! embedding training, and CRF feature emission.
//!
//! Corpus files hold one token per line with TAB-separated columns
//! `TOKEN POS NETAG CONCEPTS` (trailing columns optional, concepts
//! comma-separated); a blank line ends a sentence.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::embed::BinarizedMatrix;
use crate::error::{Error, Result};
use crate::textio::read_file;

/// Reserved out-of-vocabulary token, always id 0.
pub const UNK: &str = "<unk>";

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Token {
    pub surface: String,
    pub pos: Option<String>,
    pub ne_tag: Option<String>,
    pub concepts: Vec<String>,
}

impl Token {
    pub fn word(surface: &str) -> Self {
        Self {
            surface: surface.to_string(),
            ..Self::default()
        }
    }
}

pub type Sentence = Vec<Token>;

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
}

impl Corpus {
    /// Whitespace-tokenized sentences with no tag columns.
    pub fn from_plain(lines: &[&str]) -> Self {
        Self {
            sentences: lines
                .iter()
                .map(|l| l.split_whitespace().map(Token::word).collect::<Vec<_>>())
                .filter(|s: &Vec<Token>| !s.is_empty())
                .collect(),
        }
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut sentences = Vec::new();
        let mut current: Sentence = Vec::new();
        let mut start_line = 1;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                if !current.is_empty() {
                    check_bio(&current, sentences.len(), source, start_line)?;
                    sentences.push(std::mem::take(&mut current));
                }
                start_line = i + 2;
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() > 4 {
                return Err(Error::parse(source, i + 1, "more than 4 columns"));
            }
            let surface = cols[0].trim();
            if surface.is_empty() || surface.contains(char::is_whitespace) {
                return Err(Error::parse(source, i + 1, "token must be non-empty without spaces"));
            }
            let opt = |k: usize| {
                cols.get(k)
                    .map(|s| s.trim())
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
            };
            let concepts = opt(3)
                .map(|c| {
                    c.split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(str::to_string)
                        .collect()
                })
                .unwrap_or_default();
            current.push(Token {
                surface: surface.to_string(),
                pos: opt(1),
                ne_tag: opt(2),
                concepts,
            });
        }
        if !current.is_empty() {
            check_bio(&current, sentences.len(), source, start_line)?;
            sentences.push(current);
        }
        Ok(Self { sentences })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_file(path)?, &path.display().to_string())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            for t in s {
                let mut cols = vec![
                    t.surface.clone(),
                    t.pos.clone().unwrap_or_default(),
                    t.ne_tag.clone().unwrap_or_default(),
                    t.concepts.join(","),
                ];
                while cols.len() > 1 && cols.last().is_some_and(String::is_empty) {
                    cols.pop();
                }
                out.push_str(&cols.join("\t"));
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }
}

fn bio_parts(tag: &str) -> (char, &str) {
    match tag.split_once('-') {
        Some((p, x)) if p == "B" || p == "I" => (p.chars().next().unwrap(), x),
        _ => ('O', ""),
    }
}

fn check_bio(sentence: &[Token], index: usize, source: &str, line: usize) -> Result<()> {
    let mut prev: Option<(char, &str)> = None;
    for (k, t) in sentence.iter().enumerate() {
        let Some(tag) = t.ne_tag.as_deref() else {
            prev = None;
            continue;
        };
        let cur = bio_parts(tag);
        if cur.0 == 'I' {
            if let Some((p, x)) = prev {
                if p == 'O' || x != cur.1 {
                    return Err(Error::parse(
                        source,
                        line + k,
                        format!("sentence {index}: {tag} cannot follow {}", sentence[k - 1].ne_tag.as_deref().unwrap_or("O")),
                    ));
                }
            }
        }
        prev = Some(cur);
    }
    Ok(())
}

/// Token to dense id map with `<unk>` at id 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    counts: Vec<u64>,
    min_count: u64,
}

impl Vocabulary {
    /// Ids are assigned by descending count, then ascending token.
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>, min_count: u64) -> Result<Self> {
        let mut freq: HashMap<&str, u64> = HashMap::new();
        let mut total = 0u64;
        for t in tokens {
            *freq.entry(t).or_default() += 1;
            total += 1;
        }
        if total == 0 {
            return Err(Error::Empty("corpus"));
        }
        let mut kept: Vec<(&str, u64)> = freq
            .into_iter()
            .filter(|&(w, c)| c >= min_count && w != UNK)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let dropped = total - kept.iter().map(|&(_, c)| c).sum::<u64>();
        let mut words = vec![UNK.to_string()];
        let mut counts = vec![dropped];
        for (w, c) in kept {
            words.push(w.to_string());
            counts.push(c);
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Self {
            words,
            index,
            counts,
            min_count,
        })
    }

    /// Rebuilds a vocabulary from an ordered word list whose first entry is `<unk>`.
    pub fn from_word_list(words: Vec<String>) -> Result<Self> {
        if words.first().map(String::as_str) != Some(UNK) {
            return Err(Error::InvalidInput(format!("vocabulary must start with {UNK}")));
        }
        let index: HashMap<String, usize> =
            words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        if index.len() != words.len() {
            return Err(Error::InvalidInput("duplicate vocabulary entries".into()));
        }
        let counts = vec![0; words.len()];
        Ok(Self {
            words,
            index,
            counts,
            min_count: 0,
        })
    }

    /// Number of ids, including `<unk>`.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 1
    }

    /// Retained corpus tokens, excluding `<unk>`.
    pub fn known_len(&self) -> usize {
        self.words.len() - 1
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Id of `word`, falling back to `<unk>`.
    pub fn id(&self, word: &str) -> usize {
        self.get(word).unwrap_or(0)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }
}

pub fn build_vocab(corpus: &Corpus, min_count: u64) -> Result<Vocabulary> {
    Vocabulary::from_tokens(
        corpus.sentences.iter().flatten().map(|t| t.surface.as_str()),
        min_count,
    )
}

/// Concept to member-word map; lookups are case-insensitive.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConceptLexicon {
    concepts: BTreeMap<String, BTreeSet<String>>,
    by_word: HashMap<String, Vec<String>>,
}

impl ConceptLexicon {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, Vec<&'a str>)>) -> Result<Self> {
        let mut lex = Self::default();
        for (concept, words) in pairs {
            lex.insert(concept, words.into_iter().map(str::to_string).collect())?;
        }
        Ok(lex)
    }

    fn insert(&mut self, concept: &str, words: Vec<String>) -> Result<()> {
        if words.is_empty() {
            return Err(Error::InvalidInput(format!("concept {concept} has no words")));
        }
        let set = self.concepts.entry(concept.to_string()).or_default();
        for w in words {
            let w = w.to_lowercase();
            if set.insert(w.clone()) {
                let e = self.by_word.entry(w).or_default();
                e.push(concept.to_string());
                e.sort();
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut lex = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (concept, words) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(source, i + 1, "expected `concept<TAB>w1,w2,...`"))?;
            let concept = concept.trim();
            let words: Vec<String> = words
                .split(',')
                .map(str::trim)
                .filter(|w| !w.is_empty())
                .map(str::to_string)
                .collect();
            if concept.is_empty() || words.is_empty() {
                return Err(Error::parse(source, i + 1, "empty concept or word list"));
            }
            lex.insert(concept, words)?;
        }
        if lex.concepts.is_empty() {
            log::warn!("{source}: taxonomy is empty");
        }
        Ok(lex)
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn words(&self, concept: &str) -> Option<&BTreeSet<String>> {
        self.concepts.get(concept)
    }

    /// Concepts containing `word`, sorted.
    pub fn concepts_of(&self, word: &str) -> &[String] {
        self.by_word
            .get(&word.to_lowercase())
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

pub fn load_taxonomy(path: &Path) -> Result<ConceptLexicon> {
    ConceptLexicon::parse(&read_file(path)?, &path.display().to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityClass {
    Location,
    Organization,
    Person,
}

impl EntityClass {
    pub const ALL: [EntityClass; 3] = [Self::Location, Self::Organization, Self::Person];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Location => "LOCATION",
            Self::Organization => "ORGANIZATION",
            Self::Person => "PERSON",
        }
    }
}

impl std::str::FromStr for EntityClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "LOCATION" => Ok(Self::Location),
            "ORGANIZATION" => Ok(Self::Organization),
            "PERSON" => Ok(Self::Person),
            _ => Err(Error::Unknown {
                kind: "entity class",
                name: s.to_string(),
            }),
        }
    }
}

/// Unambiguous word to entity-class map.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Gazetteer {
    entries: BTreeMap<String, EntityClass>,
}

impl Gazetteer {
    /// Words listed under more than one class are dropped.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, EntityClass)>) -> Self {
        let mut seen: BTreeMap<String, BTreeSet<EntityClass>> = BTreeMap::new();
        for (w, c) in pairs {
            seen.entry(w.to_lowercase()).or_default().insert(c);
        }
        let entries = seen
            .into_iter()
            .filter(|(_, cs)| cs.len() == 1)
            .map(|(w, cs)| (w, *cs.iter().next().unwrap()))
            .collect();
        Self { entries }
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (w, c) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(source, i + 1, "expected `word<TAB>CLASS`"))?;
            let class: EntityClass = c
                .trim()
                .parse()
                .map_err(|e: Error| Error::parse(source, i + 1, e.to_string()))?;
            let w = w.trim();
            if w.is_empty() {
                return Err(Error::parse(source, i + 1, "empty word"));
            }
            pairs.push((w, class));
        }
        if pairs.is_empty() {
            log::warn!("{source}: gazetteer is empty");
        }
        Ok(Self::from_pairs(pairs))
    }

    pub fn get(&self, word: &str) -> Option<EntityClass> {
        self.entries.get(&word.to_lowercase()).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, EntityClass)> {
        self.entries.iter().map(|(w, &c)| (w.as_str(), c))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn load_gazetteer(path: &Path) -> Result<Gazetteer> {
    Gazetteer::parse(&read_file(path)?, &path.display().to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureKind {
    Word,
    Pos,
    Taxonomic,
    SelfTrained,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 4] = [Self::Word, Self::Pos, Self::Taxonomic, Self::SelfTrained];

    pub fn name(self) -> &'static str {
        match self {
            Self::Word => "word",
            Self::Pos => "pos",
            Self::Taxonomic => "taxo",
            Self::SelfTrained => "self",
        }
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "feature group",
                name: s.to_string(),
            })
    }
}

/// Feature type and relative position; `offset == None` ties all positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupKey {
    pub kind: FeatureKind,
    pub offset: Option<i32>,
}

impl std::fmt::Display for GroupKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.offset {
            Some(k) => write!(f, "{}:{}", self.kind.name(), k),
            None => write!(f, "{}:*", self.kind.name()),
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Group {
    names: Vec<String>,
    index: HashMap<String, usize>,
    counts: Vec<u64>,
}

impl Group {
    fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), i);
        self.counts.push(0);
        i
    }
}

/// Feature subsets: each group owns a dense local id space, so every feature
/// belongs to exactly one group.
#[derive(Clone, Debug, Default)]
pub struct FeatureGroupTable {
    keys: Vec<GroupKey>,
    groups: Vec<Group>,
    by_key: HashMap<GroupKey, usize>,
}

impl FeatureGroupTable {
    pub fn new() -> Self {
        Self::default()
    }

    fn group_id(&mut self, key: GroupKey, vocab: &Vocabulary) -> usize {
        if let Some(&g) = self.by_key.get(&key) {
            return g;
        }
        let mut group = Group::default();
        if key.kind == FeatureKind::Word {
            // word features share the vocabulary's ids
            for w in vocab.words() {
                group.intern(w);
            }
        }
        let g = self.groups.len();
        self.keys.push(key);
        self.groups.push(group);
        self.by_key.insert(key, g);
        g
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn key(&self, group: usize) -> GroupKey {
        self.keys[group]
    }

    pub fn keys(&self) -> &[GroupKey] {
        &self.keys
    }

    pub fn find(&self, key: GroupKey) -> Option<usize> {
        self.by_key.get(&key).copied()
    }

    pub fn group_len(&self, group: usize) -> usize {
        self.groups[group].names.len()
    }

    pub fn feature_name(&self, group: usize, feature: usize) -> &str {
        &self.groups[group].names[feature]
    }

    pub fn feature_id(&self, group: usize, name: &str) -> Option<usize> {
        self.groups[group].index.get(name).copied()
    }

    /// Occurrence counts of every feature in the group (extraction order).
    pub fn counts(&self, group: usize) -> &[u64] {
        &self.groups[group].counts
    }

    pub fn total_features(&self) -> usize {
        self.groups.iter().map(|g| g.names.len()).sum()
    }

    /// Flattened id over all groups.
    pub fn global_id(&self, group: usize, feature: usize) -> usize {
        self.groups[..group].iter().map(|g| g.names.len()).sum::<usize>() + feature
    }

    /// Inverse of [`global_id`](Self::global_id): the unique owning group.
    pub fn resolve(&self, global: usize) -> Option<(usize, usize)> {
        let mut base = 0;
        for (g, grp) in self.groups.iter().enumerate() {
            if global < base + grp.names.len() {
                return Some((g, global - base));
            }
            base += grp.names.len();
        }
        None
    }

    fn record(&mut self, group: usize, name: &str) -> usize {
        let grp = &mut self.groups[group];
        let f = grp.intern(name);
        grp.counts[f] += 1;
        f
    }
}

/// A center word paired with one feature it should predict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FeatureEvent {
    pub center_word_id: usize,
    pub feature_id: usize,
    pub group_id: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureConfig {
    pub window: usize,
    pub kinds: BTreeSet<FeatureKind>,
    /// One word-context group shared by all offsets (plain skip-gram layout).
    pub tie_word_offsets: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            window: 2,
            kinds: FeatureKind::ALL.into_iter().collect(),
            tie_word_offsets: false,
        }
    }
}

impl FeatureConfig {
    pub fn words_only(window: usize) -> Self {
        Self {
            window,
            kinds: [FeatureKind::Word].into_iter().collect(),
            tie_word_offsets: false,
        }
    }
}

/// Emits, for every position, the enabled word-context, POS, taxonomic and
/// self-trained NE features within the window. The word-context group skips
/// offset 0; the others include it.
pub fn extract_feature_events(
    corpus: &Corpus,
    vocab: &Vocabulary,
    config: &FeatureConfig,
    taxonomy: Option<&ConceptLexicon>,
    table: &mut FeatureGroupTable,
) -> Result<Vec<FeatureEvent>> {
    if config.kinds.is_empty() {
        return Err(Error::InvalidInput("no feature group enabled".into()));
    }
    for (si, s) in corpus.sentences.iter().enumerate() {
        if config.kinds.contains(&FeatureKind::Pos) && s.iter().any(|t| t.pos.is_none()) {
            return Err(Error::InvalidInput(format!("sentence {si}: missing POS column")));
        }
        if config.kinds.contains(&FeatureKind::SelfTrained) && s.iter().any(|t| t.ne_tag.is_none()) {
            return Err(Error::InvalidInput(format!("sentence {si}: missing NETAG column")));
        }
    }

    let w = config.window as i64;
    let mut events = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for s in &corpus.sentences {
        for i in 0..s.len() {
            let center = vocab.id(&s[i].surface);
            for &kind in &config.kinds {
                for k in -w..=w {
                    if kind == FeatureKind::Word && k == 0 {
                        continue;
                    }
                    let j = i as i64 + k;
                    if j < 0 || j >= s.len() as i64 {
                        continue;
                    }
                    let tok = &s[j as usize];
                    names.clear();
                    match kind {
                        FeatureKind::Word => names.push(vocab.word(vocab.id(&tok.surface)).to_string()),
                        FeatureKind::Pos => names.push(tok.pos.clone().unwrap_or_default()),
                        FeatureKind::SelfTrained => names.push(tok.ne_tag.clone().unwrap_or_default()),
                        FeatureKind::Taxonomic => {
                            let mut cs: BTreeSet<String> = tok.concepts.iter().cloned().collect();
                            if let Some(lex) = taxonomy {
                                cs.extend(lex.concepts_of(&tok.surface).iter().cloned());
                            }
                            names.extend(cs);
                        }
                    }
                    if names.is_empty() {
                        continue;
                    }
                    let offset = if kind == FeatureKind::Word && config.tie_word_offsets {
                        None
                    } else {
                        Some(k as i32)
                    };
                    let g = table.group_id(GroupKey { kind, offset }, vocab);
                    for name in &names {
                        let f = table.record(g, name);
                        events.push(FeatureEvent {
                            center_word_id: center,
                            feature_id: f,
                            group_id: g,
                        });
                    }
                }
            }
        }
    }
    Ok(events)
}

fn char_prefix(w: &str, l: usize) -> Option<String> {
    (w.chars().count() >= l).then(|| w.chars().take(l).collect())
}

fn char_suffix(w: &str, l: usize) -> Option<String> {
    let n = w.chars().count();
    (n >= l).then(|| w.chars().skip(n - l).collect())
}

/// Word-embedding derived inputs for CRF feature emission.
pub struct EmbeddingFeatureSource<'a> {
    /// Row of a word in `binarized` and in every clustering (`<unk>` row for OOV).
    pub row_of: &'a dyn Fn(&str) -> usize,
    pub binarized: &'a BinarizedMatrix,
    pub clusterings: &'a BTreeMap<usize, Vec<usize>>,
}

/// One TAB-separated feature line per token with the BIO tag last; sentences
/// separated by blank lines.
pub fn emit_crf_features(corpus: &Corpus, source: &EmbeddingFeatureSource<'_>, ks: &[usize]) -> Result<String> {
    for k in ks {
        if !source.clusterings.contains_key(k) {
            return Err(Error::InvalidInput(format!("no clustering for K = {k}")));
        }
    }
    let mut out = String::new();
    for s in &corpus.sentences {
        let rows: Vec<usize> = s.iter().map(|t| (source.row_of)(&t.surface)).collect();
        let n = s.len() as i64;
        for i in 0..s.len() {
            let mut feats: Vec<String> = Vec::new();
            let at = |k: i64| -> Option<usize> {
                let j = i as i64 + k;
                (0..n).contains(&j).then_some(j as usize)
            };
            for k in -2..=2 {
                if let Some(j) = at(k) {
                    feats.push(format!("w[{k}]={}", s[j].surface));
                    if let Some(p) = &s[j].pos {
                        feats.push(format!("t[{k}]={p}"));
                    }
                    for l in 1..=4 {
                        if let Some(p) = char_prefix(&s[j].surface, l) {
                            feats.push(format!("pre[{k}][{l}]={p}"));
                        }
                        if let Some(x) = char_suffix(&s[j].surface, l) {
                            feats.push(format!("suf[{k}][{l}]={x}"));
                        }
                    }
                }
            }
            for k in -2..=1 {
                if let (Some(a), Some(b)) = (at(k), at(k + 1)) {
                    feats.push(format!("w[{k}]|w[{}]={}|{}", k + 1, s[a].surface, s[b].surface));
                    if let (Some(pa), Some(pb)) = (&s[a].pos, &s[b].pos) {
                        feats.push(format!("t[{k}]|t[{}]={pa}|{pb}", k + 1));
                    }
                }
            }
            for k in -2..=2 {
                if let Some(j) = at(k) {
                    for (m, v) in source.binarized.row(rows[j]).iter().enumerate() {
                        match v {
                            1 => feats.push(format!("vd[{k}][{m}]=+1")),
                            -1 => feats.push(format!("vd[{k}][{m}]=-1")),
                            _ => {}
                        }
                    }
                }
            }
            for &kk in ks {
                let ids = &source.clusterings[&kk];
                for k in -2..=2 {
                    if let Some(j) = at(k) {
                        feats.push(format!("c{kk}[{k}]={}", ids[rows[j]]));
                    }
                }
                for k in -2..=1 {
                    if let (Some(a), Some(b)) = (at(k), at(k + 1)) {
                        feats.push(format!("c{kk}[{k}]|c{kk}[{}]={}|{}", k + 1, ids[rows[a]], ids[rows[b]]));
                    }
                }
                if let (Some(a), Some(b)) = (at(-1), at(1)) {
                    feats.push(format!("c{kk}[-1]&c{kk}[1]={}&{}", ids[rows[a]], ids[rows[b]]));
                }
            }
            let _ = writeln!(
                out,
                "{}\t{}",
                feats.join("\t"),
                s[i].ne_tag.as_deref().unwrap_or("O")
            );
        }
        out.push('\n');
    }
    Ok(out)
}
