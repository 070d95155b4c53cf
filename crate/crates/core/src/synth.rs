//! Seeded synthetic datasets for the typing, reranking and sentiment
//! pipelines. Used by the `synth` subcommand and by the end-to-end tests.

use std::collections::BTreeMap;

use crate::corpus::{Corpus, EntityClass, Gazetteer, Token};
use crate::embed::EmbeddingSet;
use crate::error::Result;
use crate::fnet::{LabelHierarchy, MentionInstance};
use crate::numerics::{DenseMatrix, SeededRng};
use crate::rerank::{Hypothesis, NBestList};
use crate::sentic::{Polarity, TsaInstance};

fn gauss(rng: &mut SeededRng) -> f64 {
    let u1 = rng.next_f64().max(1e-300);
    let u2 = rng.next_f64();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn pick<'a>(rng: &mut SeededRng, items: &'a [String]) -> &'a str {
    &items[rng.below(items.len())]
}

fn words(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

#[derive(Clone, Debug)]
pub struct NerSynthConfig {
    pub sentences: usize,
    pub seed: u64,
}

impl Default for NerSynthConfig {
    fn default() -> Self {
        Self { sentences: 400, seed: 1 }
    }
}

/// Tagged sentences with POS and BIO columns, plus a taxonomy that groups the
/// entity names by class.
#[derive(Clone, Debug)]
pub struct NerSynth {
    pub corpus: Corpus,
    /// Taxonomy file text (`concept<TAB>w1,w2,...`).
    pub taxonomy: String,
}

pub fn ner_dataset(cfg: &NerSynthConfig) -> Result<NerSynth> {
    let mut rng = SeededRng::substream(cfg.seed, "synth-ner");
    let classes = EntityClass::ALL;
    let names: Vec<Vec<String>> = classes.iter().map(|c| words(&format!("{}name", c.name().to_lowercase()), 8)).collect();
    let triggers: Vec<Vec<String>> = classes.iter().map(|c| words(&format!("{}cue", c.name().to_lowercase()), 3)).collect();
    let nouns = words("noun", 30);
    let verbs = words("verb", 15);
    let tok = |surface: &str, pos: &str, ne: &str| Token {
        surface: surface.to_string(),
        pos: Some(pos.to_string()),
        ne_tag: Some(ne.to_string()),
        concepts: Vec::new(),
    };
    let mut sentences = Vec::with_capacity(cfg.sentences);
    for _ in 0..cfg.sentences {
        let mut s = vec![tok(pick(&mut rng, &nouns), "NN", "O"), tok(pick(&mut rng, &verbs), "VB", "O")];
        for _ in 0..1 + rng.below(2) {
            let c = rng.below(classes.len());
            s.push(tok(pick(&mut rng, &triggers[c]), "IN", "O"));
            let tag = classes[c].name();
            s.push(tok(pick(&mut rng, &names[c]), "NNP", &format!("B-{tag}")));
            if rng.bernoulli(0.3) {
                s.push(tok(pick(&mut rng, &names[c]), "NNP", &format!("I-{tag}")));
            }
            s.push(tok(pick(&mut rng, &nouns), "NN", "O"));
        }
        sentences.push(s);
    }
    let taxonomy_text: String = classes
        .iter()
        .zip(&names)
        .map(|(c, ns)| format!("{}\t{}\n", c.name().to_lowercase(), ns.join(",")))
        .collect();
    Ok(NerSynth {
        corpus: Corpus { sentences },
        taxonomy: taxonomy_text,
    })
}

#[derive(Clone, Debug)]
pub struct FnetSynthConfig {
    pub coarse: usize,
    pub fine_per_coarse: usize,
    pub mentions: usize,
    pub heads_per_fine: usize,
    pub word_dims: usize,
    /// Probability that a context slot holds a label cue rather than noise.
    pub cue_rate: f64,
    pub seed: u64,
}

impl Default for FnetSynthConfig {
    fn default() -> Self {
        Self {
            coarse: 4,
            fine_per_coarse: 2,
            mentions: 2000,
            heads_per_fine: 12,
            word_dims: 20,
            cue_rate: 0.6,
            seed: 1,
        }
    }
}

/// Two-level typing data: hierarchy, mentions (gold = coarse + fine path),
/// head-word vectors clustered by type, and manual prototypes for every fine
/// type (its first three head words).
#[derive(Clone, Debug)]
pub struct FnetSynth {
    pub hierarchy: LabelHierarchy,
    pub mentions: Vec<MentionInstance>,
    pub embeddings: EmbeddingSet<f64>,
    pub manual_prototypes: BTreeMap<String, Vec<String>>,
}

pub fn fnet_dataset(cfg: &FnetSynthConfig) -> Result<FnetSynth> {
    let mut rng = SeededRng::substream(cfg.seed, "synth-fnet");
    let mut paths = Vec::new();
    let mut fine = Vec::new();
    for c in 0..cfg.coarse {
        paths.push(format!("/C{c}"));
        for f in 0..cfg.fine_per_coarse {
            let p = format!("/C{c}/F{f}");
            paths.push(p.clone());
            fine.push((format!("/C{c}"), p));
        }
    }
    let hierarchy = LabelHierarchy::from_paths(&paths)?;

    let d = cfg.word_dims;
    let centre = |rng: &mut SeededRng| -> Vec<f64> { (0..d).map(|_| gauss(rng)).collect() };
    let noise_words = words("w", 40);
    let modifiers = words("mod", 10);
    let mut vocab_words = Vec::new();
    let mut rows = Vec::new();
    let mut heads = Vec::new();
    let mut cues = Vec::new();
    let mut manual = BTreeMap::new();
    for (ci, _) in (0..cfg.coarse).enumerate() {
        let c_vec = centre(&mut rng);
        for fi in 0..cfg.fine_per_coarse {
            let f_vec: Vec<f64> = centre(&mut rng).into_iter().map(|v| 0.7 * v).collect();
            let hw = words(&format!("h{ci}x{fi}n"), cfg.heads_per_fine);
            for w in &hw {
                vocab_words.push(w.clone());
                rows.push(
                    c_vec
                        .iter()
                        .zip(&f_vec)
                        .map(|(a, b)| a + b + 0.3 * gauss(&mut rng))
                        .collect::<Vec<f64>>(),
                );
            }
            manual.insert(format!("/C{ci}/F{fi}"), hw[..3.min(hw.len())].to_vec());
            heads.push(hw);
            cues.push(words(&format!("cue{ci}x{fi}n"), 3));
        }
    }
    for w in noise_words.iter().chain(&modifiers) {
        vocab_words.push(w.clone());
        rows.push(centre(&mut rng).into_iter().map(|v| 0.5 * v).collect());
    }
    let embeddings = EmbeddingSet::new(vocab_words, DenseMatrix::from_rows(&rows)?)?;

    let mut mentions = Vec::with_capacity(cfg.mentions);
    for _ in 0..cfg.mentions {
        let k = rng.below(fine.len());
        let (coarse, fine_label) = &fine[k];
        let ctx = |rng: &mut SeededRng| -> String {
            if rng.bernoulli(cfg.cue_rate) {
                pick(rng, &cues[k]).to_string()
            } else {
                pick(rng, &noise_words).to_string()
            }
        };
        let mut tokens = vec![ctx(&mut rng), ctx(&mut rng)];
        let start = tokens.len();
        if rng.bernoulli(0.5) {
            tokens.push(pick(&mut rng, &modifiers).to_string());
        }
        tokens.push(pick(&mut rng, &heads[k]).to_string());
        let end = tokens.len();
        tokens.push(ctx(&mut rng));
        tokens.push(ctx(&mut rng));
        let toks: Vec<&str> = tokens.iter().map(String::as_str).collect();
        mentions.push(MentionInstance::new(&toks, start, end, &[coarse, fine_label]));
    }
    Ok(FnetSynth {
        hierarchy,
        mentions,
        embeddings,
        manual_prototypes: manual,
    })
}

#[derive(Clone, Debug)]
pub struct RerankSynthConfig {
    pub utterances: usize,
    pub nbest: usize,
    pub entities: usize,
    pub fillers: usize,
    pub seed: u64,
}

impl Default for RerankSynthConfig {
    fn default() -> Self {
        Self {
            utterances: 500,
            nbest: 20,
            entities: 30,
            fillers: 60,
            seed: 1,
        }
    }
}

/// N-best lists whose references contain gazetteer entities. The simulated
/// recogniser prefers an acoustically confusable distractor for each entity,
/// so the posterior 1-best often carries the distractor.
#[derive(Clone, Debug)]
pub struct RerankSynth {
    pub lists: Vec<NBestList>,
    pub gazetteer: Gazetteer,
    /// Reference sentences, usable as pretraining text.
    pub text: Vec<Vec<String>>,
}

pub fn rerank_dataset(cfg: &RerankSynthConfig) -> RerankSynth {
    let mut rng = SeededRng::substream(cfg.seed, "synth-rerank");
    let entities = words("ent", cfg.entities);
    let distractors = words("dis", cfg.entities);
    let fillers = words("f", cfg.fillers);
    let classes = EntityClass::ALL;
    let gazetteer = Gazetteer::from_pairs(entities.iter().enumerate().map(|(i, e)| (e.as_str(), classes[i % 3])));

    let mut lists = Vec::with_capacity(cfg.utterances);
    let mut text = Vec::with_capacity(cfg.utterances);
    for u in 0..cfg.utterances {
        let len = 5 + rng.below(6);
        let mut reference: Vec<String> = (0..len).map(|_| pick(&mut rng, &fillers).to_string()).collect();
        let n_ent = 1 + rng.below(2);
        for _ in 0..n_ent {
            let pos = rng.below(reference.len() + 1);
            reference.insert(pos, pick(&mut rng, &entities).to_string());
        }
        let mut hyps = Vec::with_capacity(cfg.nbest);
        let mut seen = std::collections::BTreeSet::new();
        let mut tries = 0;
        while hyps.len() < cfg.nbest && tries < 50 * cfg.nbest {
            tries += 1;
            let mut words_out = Vec::with_capacity(reference.len() + 2);
            let mut score = 0.0;
            for w in &reference {
                if let Some(k) = w.strip_prefix("ent").and_then(|k| k.parse::<usize>().ok()) {
                    if rng.bernoulli(0.6) {
                        words_out.push(distractors[k].clone());
                        score += 1.0;
                    } else {
                        words_out.push(w.clone());
                    }
                    continue;
                }
                let r = rng.next_f64();
                if r < 0.06 {
                    score -= 1.0;
                } else if r < 0.14 {
                    words_out.push(pick(&mut rng, &fillers).to_string());
                    score -= 1.0;
                } else {
                    words_out.push(w.clone());
                }
                if rng.bernoulli(0.03) {
                    words_out.push(pick(&mut rng, &fillers).to_string());
                    score -= 1.0;
                }
            }
            if !seen.insert(words_out.clone()) {
                continue;
            }
            let logp = score + 0.8 * gauss(&mut rng) - 5.0;
            let refs: Vec<&str> = words_out.iter().map(String::as_str).collect();
            hyps.push(Hypothesis::new(&refs, logp));
        }
        hyps.sort_by(|a, b| b.asr_logp.total_cmp(&a.asr_logp));
        text.push(reference.clone());
        lists.push(NBestList {
            utt_id: format!("utt{u:04}"),
            reference,
            hyps,
        });
    }
    RerankSynth { lists, gazetteer, text }
}

#[derive(Clone, Debug)]
pub struct TsaSynthConfig {
    pub instances: usize,
    pub aspects: usize,
    pub concept_dims: usize,
    /// Probability of a second entity with an opposite-polarity cue.
    pub distractor_rate: f64,
    pub seed: u64,
}

impl Default for TsaSynthConfig {
    fn default() -> Self {
        Self {
            instances: 3000,
            aspects: 3,
            concept_dims: 20,
            distractor_rate: 0.8,
            seed: 1,
        }
    }
}

/// Rule-generated targeted sentiment: the cue word adjacent to the target
/// fixes the polarity, an aspect cue elsewhere in the sentence fixes the
/// aspect. Polarity cues carry concepts whose vectors separate by polarity.
#[derive(Clone, Debug)]
pub struct TsaSynth {
    pub aspects: Vec<String>,
    pub instances: Vec<TsaInstance>,
    pub concepts: EmbeddingSet<f64>,
}

pub fn tsa_dataset(cfg: &TsaSynthConfig) -> Result<TsaSynth> {
    let mut rng = SeededRng::substream(cfg.seed, "synth-tsa");
    let aspects = words("asp", cfg.aspects);
    let aspect_cues: Vec<Vec<String>> = (0..cfg.aspects).map(|a| words(&format!("about{a}x"), 3)).collect();
    let pos_cues = words("good", 4);
    let neg_cues = words("bad", 4);
    let fillers = words("the", 40);
    let entities = words("loc", 6);

    let d = cfg.concept_dims;
    let axis: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
    let mut names = Vec::new();
    let mut rows = Vec::new();
    for (cues, sign) in [(&pos_cues, 1.0), (&neg_cues, -1.0)] {
        for c in cues.iter() {
            names.push(format!("{c}_concept"));
            rows.push(axis.iter().map(|a| sign * a + 0.3 * gauss(&mut rng)).collect::<Vec<f64>>());
        }
    }
    let concepts = EmbeddingSet::new(names, DenseMatrix::from_rows(&rows)?)?;

    let mut instances = Vec::with_capacity(cfg.instances);
    for _ in 0..cfg.instances {
        let positive = rng.bernoulli(0.5);
        let aspect = rng.below(cfg.aspects);
        let target_len = 1 + rng.below(3);
        let target: Vec<String> = (0..target_len).map(|_| pick(&mut rng, &entities).to_string()).collect();
        let cue = |rng: &mut SeededRng, pos: bool| -> String {
            pick(rng, if pos { &pos_cues } else { &neg_cues }).to_string()
        };
        // (words, is_target) chunks, shuffled among fillers
        let mut target_chunk: Vec<(String, bool)> = target.iter().map(|w| (w.clone(), true)).collect();
        // the side away from the cue gets a filler so no other cue can touch the target
        let c = (cue(&mut rng, positive), false);
        let pad = (pick(&mut rng, &fillers).to_string(), false);
        if rng.bernoulli(0.5) {
            target_chunk.insert(0, c);
            target_chunk.push(pad);
        } else {
            target_chunk.insert(0, pad);
            target_chunk.push(c);
        }
        let mut chunks = vec![target_chunk, vec![(pick(&mut rng, &aspect_cues[aspect]).to_string(), false)]];
        if rng.bernoulli(cfg.distractor_rate) {
            let other = pick(&mut rng, &entities).to_string();
            let dc = cue(&mut rng, !positive);
            let pair = if rng.bernoulli(0.5) { vec![(other, false), (dc, false)] } else { vec![(dc, false), (other, false)] };
            chunks.push(pair);
        }
        for _ in 0..6 + rng.below(8) {
            chunks.push(vec![(pick(&mut rng, &fillers).to_string(), false)]);
        }
        rng.shuffle(&mut chunks);
        let flat: Vec<(String, bool)> = chunks.into_iter().flatten().collect();
        let tokens: Vec<String> = flat.iter().map(|(w, _)| w.clone()).collect();
        let targets: Vec<usize> = flat.iter().enumerate().filter(|(_, (_, t))| *t).map(|(i, _)| i).collect();
        let token_concepts = tokens
            .iter()
            .map(|w| {
                if w.starts_with("good") || w.starts_with("bad") {
                    vec![format!("{w}_concept")]
                } else {
                    Vec::new()
                }
            })
            .collect();
        let mut gold = vec![Polarity::None; cfg.aspects];
        gold[aspect] = if positive { Polarity::Positive } else { Polarity::Negative };
        instances.push(TsaInstance {
            tokens,
            targets,
            concepts: token_concepts,
            gold,
        });
    }
    Ok(TsaSynth {
        aspects,
        instances,
        concepts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ConceptLexicon;

    #[test]
    fn ner_corpus_round_trips() {
        let d = ner_dataset(&NerSynthConfig { sentences: 20, seed: 3 }).unwrap();
        let text = d.corpus.render();
        assert_eq!(Corpus::parse(&text, "t").unwrap(), d.corpus);
        assert_eq!(ConceptLexicon::parse(&d.taxonomy, "t").unwrap().len(), 3);
    }

    #[test]
    fn fnet_data_is_seeded_and_valid() {
        let cfg = FnetSynthConfig {
            mentions: 50,
            ..FnetSynthConfig::default()
        };
        let a = fnet_dataset(&cfg).unwrap();
        let b = fnet_dataset(&cfg).unwrap();
        assert_eq!(a.mentions, b.mentions);
        assert_eq!(a.hierarchy.len(), 12);
        for m in &a.mentions {
            assert_eq!(m.labels.len(), 2);
            assert!(a.embeddings.vector(&m.head()).is_some());
        }
    }

    #[test]
    fn rerank_lists_have_oracles() {
        let s = rerank_dataset(&RerankSynthConfig {
            utterances: 20,
            ..RerankSynthConfig::default()
        });
        assert_eq!(s.lists.len(), 20);
        for l in &s.lists {
            assert!(l.hyps.len() > 1);
            assert!(l.oracle().is_some());
            assert!(l.reference.iter().any(|w| s.gazetteer.get(w).is_some()));
        }
    }

    #[test]
    fn tsa_targets_and_cues() {
        let s = tsa_dataset(&TsaSynthConfig {
            instances: 30,
            ..TsaSynthConfig::default()
        })
        .unwrap();
        for inst in &s.instances {
            assert!(!inst.targets.is_empty());
            assert_eq!(inst.gold.iter().filter(|p| **p != Polarity::None).count(), 1);
            let first = inst.targets[0];
            let last = *inst.targets.last().unwrap();
            let near: Vec<&str> = [first.checked_sub(1), Some(last + 1)]
                .into_iter()
                .flatten()
                .filter_map(|i| inst.tokens.get(i).map(String::as_str))
                .collect();
            assert!(near.iter().any(|w| w.starts_with("good") || w.starts_with("bad")));
        }
    }
}
