//! Noise-aware knowledge injection: semantic-importance scoring of entity
//! spans, injection-target selection, and projection of graph embeddings
//! into the encoder width.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus_kg::text::MASK_TOKEN;
use crate::corpus_kg::{AnnotatedSequence, KgEmbeddings, Vocab};
use crate::error::{Error, Result};
use crate::model::{pooled_representation, Model, PoolingMode};
use crate::numerics::tensor::{dot, l2_norm, mm};
use crate::numerics::Tensor;

/// Sentinel for maximal dissimilarity (orthogonal or opposed
/// representations); also the ceiling for finite scores so that the
/// sentinel always ranks on top.
pub const SI_MAX: f64 = 1e8;

/// Guard threshold on the dot product in the importance ratio.
pub const SI_DOT_GUARD: f64 = 1e-8;

/// How span importance is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SiMode {
    /// The written ratio `(|h_o| * |h_rep|) / (h_o . h_rep)` — the
    /// reciprocal of cosine similarity, guarded by [`SI_MAX`].
    #[default]
    ReciprocalCosine,
    /// `1 - cos(h_o, h_rep)`: same ranking direction, bounded range.
    OneMinusCosine,
}

/// Which entity spans are eligible for injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InjectionScope {
    /// Top-k by importance, plus every long-tail span present.
    #[default]
    Union,
    /// Long-tail spans only.
    LongTailOnly,
    /// Top-k by importance among non-long-tail spans only.
    HighFreqOnly,
}

/// One selected injection position with its projected graph embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectionTarget {
    pub entity_id: usize,
    pub span: (usize, usize),
    pub si_score: f64,
    pub is_long_tail: bool,
    pub h_e: Vec<f64>,
}

/// Importance score from the two pooled representations.
pub fn si_from_vectors(h_o: &[f64], h_rep: &[f64], mode: SiMode) -> f64 {
    let d = dot(h_o, h_rep);
    let norms = l2_norm(h_o) * l2_norm(h_rep);
    match mode {
        SiMode::ReciprocalCosine => {
            // A vanishing or negative dot product signals maximal
            // dissimilarity; both map to the sentinel so they rank first.
            if d.abs() < SI_DOT_GUARD {
                return SI_MAX;
            }
            let si = norms / d;
            if si < 0.0 {
                SI_MAX
            } else {
                si.min(SI_MAX)
            }
        }
        SiMode::OneMinusCosine => {
            if norms < 1e-300 {
                return 0.0;
            }
            1.0 - d / norms
        }
    }
}

fn pooled(model: &Model, vocab: &Vocab, tokens: &[String], pooling: PoolingMode) -> Result<Vec<f64>> {
    let mut ids = Vec::with_capacity(tokens.len() + 1);
    ids.push(vocab.cls_id());
    for t in tokens {
        ids.push(vocab.lookup(t)?);
    }
    let input = model.embed_ids(&ids)?;
    let enc = model.encode(&input, &[])?;
    match pooling {
        PoolingMode::Mean => pooled_representation(&enc.hidden),
        PoolingMode::Cls => Ok(enc.cls),
    }
}

/// Importance of span `span_idx` of `sentence`: the score between the
/// pooled representation of the original sentence and of the sentence
/// with that span replaced by mask tokens.
pub fn semantic_importance(
    model: &Model,
    vocab: &Vocab,
    sentence: &AnnotatedSequence,
    span_idx: usize,
    pooling: PoolingMode,
    mode: SiMode,
) -> Result<f64> {
    let span = sentence
        .spans
        .get(span_idx)
        .ok_or_else(|| Error::IndexOutOfRange(format!("span {span_idx}")))?;
    if span.end >= sentence.tokens.len() {
        return Err(Error::IndexOutOfRange(format!("span ({}, {})", span.start, span.end)));
    }
    let h_o = pooled(model, vocab, &sentence.tokens, pooling)?;
    let mut replaced = sentence.tokens.clone();
    for p in span.start..=span.end {
        replaced[p] = MASK_TOKEN.to_string();
    }
    let h_rep = pooled(model, vocab, &replaced, pooling)?;
    Ok(si_from_vectors(&h_o, &h_rep, mode))
}

/// Projects one entity's graph embedding into the encoder width:
/// `h_e = entity_vec @ W_proj` with `W_proj` a learned model parameter.
pub fn knowledge_embedding(
    entity_id: usize,
    kg_embeddings: &KgEmbeddings,
    w_proj: &Tensor,
) -> Result<Vec<f64>> {
    let e = kg_embeddings.entity_vec(entity_id)?;
    if w_proj.rows() != kg_embeddings.dim {
        return Err(Error::shape("knowledge_embedding", "projection rows != kg dim"));
    }
    Ok(mm(e, w_proj.data(), 1, w_proj.rows(), w_proj.cols()))
}

/// Ranks entity spans by importance and keeps the top `top_k`; long-tail
/// spans are kept regardless of rank (under [`InjectionScope::Union`]).
/// Ties break toward the leftmost span. Output is ordered by span start.
#[allow(clippy::too_many_arguments)]
pub fn select_targets(
    model: &Model,
    vocab: &Vocab,
    kg_embeddings: &KgEmbeddings,
    sentence: &AnnotatedSequence,
    long_tail: &BTreeSet<usize>,
    top_k: usize,
    scope: InjectionScope,
    pooling: PoolingMode,
    mode: SiMode,
) -> Result<Vec<InjectionTarget>> {
    if sentence.spans.is_empty() {
        return Ok(Vec::new());
    }
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(sentence.spans.len());
    for idx in 0..sentence.spans.len() {
        scored.push((idx, semantic_importance(model, vocab, sentence, idx, pooling, mode)?));
    }
    let mut ranked = scored.clone();
    ranked.sort_by(|a, b| {
        b.1.total_cmp(&a.1).then(sentence.spans[a.0].start.cmp(&sentence.spans[b.0].start))
    });

    let mut chosen: BTreeSet<usize> = BTreeSet::new();
    match scope {
        InjectionScope::Union => {
            chosen.extend(ranked.iter().take(top_k).map(|&(i, _)| i));
            for (i, s) in sentence.spans.iter().enumerate() {
                if long_tail.contains(&s.entity) {
                    chosen.insert(i);
                }
            }
        }
        InjectionScope::LongTailOnly => {
            for (i, s) in sentence.spans.iter().enumerate() {
                if long_tail.contains(&s.entity) {
                    chosen.insert(i);
                }
            }
        }
        InjectionScope::HighFreqOnly => {
            chosen.extend(
                ranked
                    .iter()
                    .filter(|&&(i, _)| !long_tail.contains(&sentence.spans[i].entity))
                    .take(top_k)
                    .map(|&(i, _)| i),
            );
        }
    }

    let w_proj = model.params.w_proj();
    chosen
        .into_iter()
        .map(|i| {
            let span = sentence.spans[i];
            Ok(InjectionTarget {
                entity_id: span.entity,
                span: (span.start, span.end),
                si_score: scored[i].1,
                is_long_tail: long_tail.contains(&span.entity),
                h_e: knowledge_embedding(span.entity, kg_embeddings, w_proj)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus_kg::graph::generate_kg;
    use crate::corpus_kg::{generate_corpus, train_kg_embeddings};
    use crate::model::TransformerConfig;
    use proptest::prelude::*;

    #[test]
    fn si_formula_examples() {
        // identical representations -> 1
        let same = si_from_vectors(&[1.0, 2.0], &[1.0, 2.0], SiMode::ReciprocalCosine);
        assert!((same - 1.0).abs() < 1e-12);
        // 45 degrees -> sqrt(2)
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let si = si_from_vectors(&[1.0, 0.0], &[s, s], SiMode::ReciprocalCosine);
        assert!((si - std::f64::consts::SQRT_2).abs() < 1e-12);
        // orthogonal -> sentinel
        assert_eq!(si_from_vectors(&[1.0, 0.0], &[0.0, 1.0], SiMode::ReciprocalCosine), SI_MAX);
        // negative dot -> sentinel too
        assert_eq!(si_from_vectors(&[1.0, 0.0], &[-1.0, 0.0], SiMode::ReciprocalCosine), SI_MAX);
        // the alternative scoring is 1 - cosine
        let alt = si_from_vectors(&[1.0, 0.0], &[s, s], SiMode::OneMinusCosine);
        assert!((alt - (1.0 - s)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn si_is_scale_invariant(
            a in proptest::collection::vec(-3.0f64..3.0, 4),
            b in proptest::collection::vec(-3.0f64..3.0, 4),
            c in 0.01f64..100.0,
        ) {
            let scaled: Vec<f64> = a.iter().map(|v| v * c).collect();
            let s1 = si_from_vectors(&a, &b, SiMode::ReciprocalCosine);
            let s2 = si_from_vectors(&scaled, &b, SiMode::ReciprocalCosine);
            prop_assert!((s1 - s2).abs() <= 1e-6 * s1.abs().max(1.0));
        }
    }

    fn fixture() -> (Model, Vocab, crate::corpus_kg::KnowledgeGraph, KgEmbeddings) {
        let kg = generate_kg(3, 12, 3, 24).unwrap();
        let vocab = Vocab::build(&kg, 40);
        let cfg = TransformerConfig {
            n_layers: 2,
            hidden_dim: 16,
            n_heads: 2,
            ffn_dim: 32,
            vocab_size: vocab.size(),
            max_seq_len: 16,
            kg_dim: 4,
            seed: 5,
        };
        let model = Model::init(cfg).unwrap();
        let emb = train_kg_embeddings(&kg, 4, 5, 1.0, 0.05, 1).unwrap().embeddings;
        (model, vocab, kg, emb)
    }

    #[test]
    fn knowledge_embedding_shapes_and_linearity() {
        let (model, _, kg, emb) = fixture();
        for e in 0..kg.entities.len() {
            let h = knowledge_embedding(e, &emb, model.params.w_proj()).unwrap();
            assert_eq!(h.len(), model.cfg.hidden_dim);
        }
        assert!(knowledge_embedding(999, &emb, model.params.w_proj()).is_err());
        // zero entity vector -> zero h_e
        let zero = KgEmbeddings {
            dim: emb.dim,
            entity: Tensor::zeros(kg.entities.len(), emb.dim),
            relation: emb.relation.clone(),
        };
        let h = knowledge_embedding(0, &zero, model.params.w_proj()).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
        // identity projection passes the vector through
        let eye = Tensor::new(4, 4, {
            let mut d = vec![0.0; 16];
            for i in 0..4 {
                d[i * 4 + i] = 1.0;
            }
            d
        })
        .unwrap();
        let small = KgEmbeddings {
            dim: 4,
            entity: Tensor::new(1, 4, vec![0.1, -0.2, 0.3, 0.4]).unwrap(),
            relation: Tensor::zeros(1, 4),
        };
        assert_eq!(knowledge_embedding(0, &small, &eye).unwrap(), vec![0.1, -0.2, 0.3, 0.4]);
    }

    #[test]
    fn selection_matches_brute_force_si_ranking() {
        let (model, vocab, kg, emb) = fixture();
        let corpus = generate_corpus(&kg, &vocab, 5, 12, 1.1).unwrap();
        let long_tail = BTreeSet::new();
        for sentence in &corpus {
            let targets = select_targets(
                &model,
                &vocab,
                &emb,
                sentence,
                &long_tail,
                1,
                InjectionScope::Union,
                PoolingMode::Mean,
                SiMode::ReciprocalCosine,
            )
            .unwrap();
            assert_eq!(targets.len(), 1);
            // brute-force oracle: recompute SI for every span independently
            let best = (0..sentence.spans.len())
                .map(|i| {
                    (
                        i,
                        semantic_importance(
                            &model,
                            &vocab,
                            sentence,
                            i,
                            PoolingMode::Mean,
                            SiMode::ReciprocalCosine,
                        )
                        .unwrap(),
                    )
                })
                .max_by(|a, b| {
                    a.1.partial_cmp(&b.1).unwrap().then(
                        sentence.spans[b.0].start.cmp(&sentence.spans[a.0].start),
                    )
                })
                .unwrap();
            assert_eq!(targets[0].entity_id, sentence.spans[best.0].entity);
            assert_eq!(targets[0].si_score, best.1);
        }
    }

    #[test]
    fn top_k_zero_without_long_tail_is_empty() {
        let (model, vocab, kg, emb) = fixture();
        let corpus = generate_corpus(&kg, &vocab, 5, 3, 1.1).unwrap();
        let targets = select_targets(
            &model,
            &vocab,
            &emb,
            &corpus[0],
            &BTreeSet::new(),
            0,
            InjectionScope::Union,
            PoolingMode::Mean,
            SiMode::ReciprocalCosine,
        )
        .unwrap();
        assert!(targets.is_empty());
    }

    #[test]
    fn long_tail_spans_always_kept_under_union() {
        let (model, vocab, kg, emb) = fixture();
        let corpus = generate_corpus(&kg, &vocab, 5, 6, 1.1).unwrap();
        let sentence = &corpus[0];
        let tail_entity = sentence.spans[1].entity;
        let mut long_tail = BTreeSet::new();
        long_tail.insert(tail_entity);
        let targets = select_targets(
            &model,
            &vocab,
            &emb,
            sentence,
            &long_tail,
            0,
            InjectionScope::Union,
            PoolingMode::Mean,
            SiMode::ReciprocalCosine,
        )
        .unwrap();
        assert!(targets.iter().any(|t| t.entity_id == tail_entity && t.is_long_tail));
        // scope filters
        let lt_only = select_targets(
            &model,
            &vocab,
            &emb,
            sentence,
            &long_tail,
            2,
            InjectionScope::LongTailOnly,
            PoolingMode::Mean,
            SiMode::ReciprocalCosine,
        )
        .unwrap();
        assert!(lt_only.iter().all(|t| t.is_long_tail));
        let hf_only = select_targets(
            &model,
            &vocab,
            &emb,
            sentence,
            &long_tail,
            2,
            InjectionScope::HighFreqOnly,
            PoolingMode::Mean,
            SiMode::ReciprocalCosine,
        )
        .unwrap();
        assert!(hf_only.iter().all(|t| !t.is_long_tail));
    }

    #[test]
    fn selection_is_deterministic() {
        let (model, vocab, kg, emb) = fixture();
        let corpus = generate_corpus(&kg, &vocab, 5, 4, 1.1).unwrap();
        let run = || {
            select_targets(
                &model,
                &vocab,
                &emb,
                &corpus[2],
                &BTreeSet::new(),
                2,
                InjectionScope::Union,
                PoolingMode::Mean,
                SiMode::ReciprocalCosine,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
        for t in run() {
            assert_eq!(t.h_e.len(), model.cfg.hidden_dim);
        }
    }
}
