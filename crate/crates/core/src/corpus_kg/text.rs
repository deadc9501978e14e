//! Synthetic annotated corpus: triple verbalization with a Zipfian
//! long-tail frequency profile, the shared vocabulary, and entity
//! frequency accounting.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus_kg::graph::{KnowledgeGraph, Triple};
use crate::error::{Error, Result};
use crate::numerics::mix_seed;

pub const PAD_TOKEN: &str = "[pad]";
pub const CLS_TOKEN: &str = "[cls]";
pub const MASK_TOKEN: &str = "[mask]";

/// Distractor tokens per sentence (inclusive bounds).
pub const MIN_DISTRACTORS: usize = 2;
pub const MAX_DISTRACTORS: usize = 6;

/// Token span of one entity mention, inclusive bounds into
/// [`AnnotatedSequence::tokens`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub entity: usize,
    pub start: usize,
    pub end: usize,
}

/// One synthetic sentence: raw tokens (no classification token), entity
/// spans, and the fact it verbalizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSequence {
    pub tokens: Vec<String>,
    pub spans: Vec<EntitySpan>,
    pub gold: Option<Triple>,
}

impl AnnotatedSequence {
    pub fn validate(&self, kg: &KnowledgeGraph) -> Result<()> {
        let n = self.tokens.len();
        let mut used: Vec<bool> = vec![false; n];
        for s in &self.spans {
            if s.start > s.end || s.end >= n {
                return Err(Error::IndexOutOfRange(format!("span {s:?} in {n}-token sentence")));
            }
            let surface = &kg.entities[s.entity].surface;
            let mention = self.tokens[s.start..=s.end].join(" ");
            if &mention != surface {
                return Err(Error::InvalidArgument(format!(
                    "span text '{mention}' != entity surface '{surface}'"
                )));
            }
            for p in s.start..=s.end {
                if used[p] {
                    return Err(Error::InvalidArgument("overlapping entity spans".into()));
                }
                used[p] = true;
            }
        }
        Ok(())
    }
}

/// Deterministic vocabulary shared by the corpus and the model:
/// `[pad] [cls] [mask]`, then relation surfaces, entity surfaces, and a
/// block of distractor filler tokens.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
    n_relations: usize,
    n_entities: usize,
    n_distractors: usize,
}

impl Vocab {
    pub fn build(kg: &KnowledgeGraph, n_distractors: usize) -> Self {
        let mut tokens: Vec<String> =
            vec![PAD_TOKEN.to_string(), CLS_TOKEN.to_string(), MASK_TOKEN.to_string()];
        tokens.extend(kg.relations.iter().map(|r| r.surface.clone()));
        tokens.extend(kg.entities.iter().map(|e| e.surface.clone()));
        tokens.extend((0..n_distractors).map(|i| format!("w{i:04}")));
        let index = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Self {
            tokens,
            index,
            n_relations: kg.relations.len(),
            n_entities: kg.entities.len(),
            n_distractors,
        }
    }

    /// Distractor vocabulary size that makes the total come out at `target`.
    pub fn distractors_for_total(kg: &KnowledgeGraph, target: usize) -> Result<usize> {
        let base = 3 + kg.relations.len() + kg.entities.len();
        if target <= base {
            return Err(Error::InvalidConfig(format!(
                "vocab target {target} leaves no room for distractors (base {base})"
            )));
        }
        Ok(target - base)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn cls_id(&self) -> usize {
        1
    }

    pub fn mask_id(&self) -> usize {
        2
    }

    pub fn relation_id(&self, relation: usize) -> usize {
        debug_assert!(relation < self.n_relations);
        3 + relation
    }

    pub fn entity_id(&self, entity: usize) -> usize {
        debug_assert!(entity < self.n_entities);
        3 + self.n_relations + entity
    }

    pub fn distractor_id(&self, i: usize) -> usize {
        debug_assert!(i < self.n_distractors);
        3 + self.n_relations + self.n_entities + i
    }

    pub fn n_distractors(&self) -> usize {
        self.n_distractors
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn lookup(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown token '{token}'")))
    }

    pub fn encode(&self, seq: &AnnotatedSequence) -> Result<Vec<usize>> {
        seq.tokens.iter().map(|t| self.lookup(t)).collect()
    }
}

/// Verbalizes one triple with `n_distractors` filler tokens appended:
/// `<head> <relation> <tail> w.. w..`. Span 0 is the head, span 1 the tail.
pub fn verbalize(
    kg: &KnowledgeGraph,
    vocab: &Vocab,
    triple: Triple,
    distractors: &[usize],
) -> AnnotatedSequence {
    let mut tokens = vec![
        kg.entities[triple.head].surface.clone(),
        kg.relations[triple.relation].surface.clone(),
        kg.entities[triple.tail].surface.clone(),
    ];
    tokens.extend(distractors.iter().map(|&d| vocab.tokens[vocab.distractor_id(d)].clone()));
    AnnotatedSequence {
        tokens,
        spans: vec![
            EntitySpan { entity: triple.head, start: 0, end: 0 },
            EntitySpan { entity: triple.tail, start: 2, end: 2 },
        ],
        gold: Some(triple),
    }
}

/// Generates `n_sentences` verbalized triples. Triple sampling frequency
/// follows a Zipf law with exponent `zipf_s` over a seed-shuffled triple
/// ranking, which produces head entities and a long tail. Each sentence
/// derives its randomness from `(seed, sentence index)` only.
pub fn generate_corpus(
    kg: &KnowledgeGraph,
    vocab: &Vocab,
    seed: u64,
    n_sentences: usize,
    zipf_s: f64,
) -> Result<Vec<AnnotatedSequence>> {
    if n_sentences < 1 {
        return Err(Error::InvalidArgument("n_sentences must be >= 1".into()));
    }
    if zipf_s <= 0.0 {
        return Err(Error::InvalidArgument(format!("zipf_s must be > 0, got {zipf_s}")));
    }
    if kg.triples.is_empty() {
        return Err(Error::InvalidArgument("knowledge graph has no triples".into()));
    }
    let mut rank_of: Vec<usize> = (0..kg.triples.len()).collect();
    rank_of.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::MAX)));
    let weights: Vec<f64> =
        (0..kg.triples.len()).map(|r| 1.0 / ((r + 1) as f64).powf(zipf_s)).collect();
    let zipf = WeightedIndex::new(&weights)
        .map_err(|e| Error::InvalidArgument(format!("zipf weights: {e}")))?;

    Ok((0..n_sentences)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
            let triple = kg.triples[rank_of[zipf.sample(&mut rng)]];
            let k = rng.random_range(MIN_DISTRACTORS..=MAX_DISTRACTORS);
            let distractors: Vec<usize> =
                (0..k).map(|_| rng.random_range(0..vocab.n_distractors())).collect();
            verbalize(kg, vocab, triple, &distractors)
        })
        .collect())
}

/// Mention counts per entity over the corpus spans.
pub fn entity_frequency(corpus: &[AnnotatedSequence]) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for seq in corpus {
        for span in &seq.spans {
            *counts.entry(span.entity).or_insert(0) += 1;
        }
    }
    counts
}

/// Entities whose mention count is at or below `threshold`.
pub fn detect_long_tail(
    freqs: &BTreeMap<usize, usize>,
    threshold: usize,
) -> Result<BTreeSet<usize>> {
    if threshold < 1 {
        return Err(Error::InvalidArgument("long-tail threshold must be >= 1".into()));
    }
    Ok(freqs.iter().filter(|&(_, &c)| c <= threshold).map(|(&e, _)| e).collect())
}

/// Least-squares slope of log10(count) against log10(rank) for entities
/// with at least `min_count` mentions (the quantized tail of one-off counts
/// is excluded from the fit).
pub fn rank_frequency_slope(freqs: &BTreeMap<usize, usize>, min_count: usize) -> Option<f64> {
    let mut counts: Vec<usize> = freqs.values().copied().filter(|&c| c >= min_count).collect();
    counts.sort_unstable_by(|a, b| b.cmp(a));
    if counts.len() < 3 {
        return None;
    }
    let pts: Vec<(f64, f64)> = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| (((i + 1) as f64).log10(), (c as f64).log10()))
        .collect();
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    (denom.abs() > 1e-12).then(|| (n * sxy - sx * sy) / denom)
}

pub fn write_corpus(corpus: &[AnnotatedSequence], w: &mut impl Write) -> Result<()> {
    for seq in corpus {
        serde_json::to_writer(&mut *w, seq)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_corpus(r: &mut impl BufRead) -> Result<Vec<AnnotatedSequence>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus_kg::graph::generate_kg;

    fn toy() -> (KnowledgeGraph, Vocab) {
        let kg = generate_kg(7, 100, 8, 400).unwrap();
        let v = Vocab::build(&kg, 200);
        (kg, v)
    }

    #[test]
    fn vocab_layout_and_lookup() {
        let (kg, v) = toy();
        assert_eq!(v.size(), 3 + 8 + 100 + 200);
        assert_eq!(v.lookup("[cls]").unwrap(), v.cls_id());
        assert_eq!(v.lookup("ent42").unwrap(), v.entity_id(42));
        assert_eq!(v.lookup("rel3").unwrap(), v.relation_id(3));
        assert!(v.lookup("nope").is_err());
        assert_eq!(Vocab::distractors_for_total(&kg, 2000).unwrap(), 1889);
    }

    #[test]
    fn corpus_is_deterministic_and_annotated() {
        let (kg, v) = toy();
        let a = generate_corpus(&kg, &v, 3, 500, 1.1).unwrap();
        let b = generate_corpus(&kg, &v, 3, 500, 1.1).unwrap();
        assert_eq!(a, b);
        let allowed: std::collections::HashSet<_> = kg.triples.iter().collect();
        for seq in &a {
            seq.validate(&kg).unwrap();
            assert!(allowed.contains(&seq.gold.unwrap()), "gold fact must be a kg triple");
            let n_dis = seq.tokens.len() - 3;
            assert!((MIN_DISTRACTORS..=MAX_DISTRACTORS).contains(&n_dis));
        }
    }

    #[test]
    fn head_entity_dominates_median() {
        let (kg, v) = toy();
        let corpus = generate_corpus(&kg, &v, 11, 10_000, 1.1).unwrap();
        let freqs = entity_frequency(&corpus);
        let mut counts: Vec<usize> = freqs.values().copied().collect();
        counts.sort_unstable();
        let median = counts[counts.len() / 2];
        let max = *counts.last().unwrap();
        assert!(
            max >= 10 * median,
            "most frequent {max} should be >= 10x median {median}"
        );
    }

    #[test]
    fn zipf_slope_within_band() {
        let (kg, v) = toy();
        let s = 1.1;
        let corpus = generate_corpus(&kg, &v, 11, 10_000, s).unwrap();
        let freqs = entity_frequency(&corpus);
        let slope = rank_frequency_slope(&freqs, 3).expect("enough entities");
        assert!(
            (-s - 0.5..=-s + 0.5).contains(&slope),
            "slope {slope} outside [{}, {}]",
            -s - 0.5,
            -s + 0.5
        );
    }

    #[test]
    fn frequency_matches_independent_recount() {
        let (kg, v) = toy();
        let corpus = generate_corpus(&kg, &v, 5, 10_000, 1.1).unwrap();
        let freqs = entity_frequency(&corpus);
        // brute-force recount straight off the token strings
        let mut recount: BTreeMap<usize, usize> = BTreeMap::new();
        for seq in &corpus {
            for tok in &seq.tokens {
                if let Some(num) = tok.strip_prefix("ent") {
                    if let Ok(e) = num.parse::<usize>() {
                        *recount.entry(e).or_insert(0) += 1;
                    }
                }
            }
        }
        assert_eq!(freqs, recount);
        let total: usize = freqs.values().sum();
        assert_eq!(total, 2 * corpus.len(), "two entity mentions per sentence");
    }

    #[test]
    fn long_tail_detection() {
        let mut freqs = BTreeMap::new();
        freqs.insert(0usize, 3usize); // A
        freqs.insert(1, 100); // B
        let tail = detect_long_tail(&freqs, 5).unwrap();
        assert_eq!(tail.into_iter().collect::<Vec<_>>(), vec![0]);
        // threshold below all counts -> empty
        let tail = detect_long_tail(&freqs, 1).unwrap();
        assert!(tail.is_empty());
        assert!(detect_long_tail(&freqs, 0).is_err());
    }

    #[test]
    fn empty_corpus_request_rejected() {
        let (kg, v) = toy();
        assert!(generate_corpus(&kg, &v, 1, 0, 1.1).is_err());
        assert!(generate_corpus(&kg, &v, 1, 10, 0.0).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let (kg, v) = toy();
        let corpus = generate_corpus(&kg, &v, 9, 50, 1.1).unwrap();
        let mut buf = Vec::new();
        write_corpus(&corpus, &mut buf).unwrap();
        let back = read_corpus(&mut std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(corpus, back);
    }
}
