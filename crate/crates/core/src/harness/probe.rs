//! Cloze-style knowledge probing: verbalize a triple with the tail span
//! masked, rank the vocabulary by masked-token logits at that position,
//! and score precision-at-1 macro-averaged over relations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus_kg::{verbalize, KgEmbeddings, KnowledgeGraph, Triple, Vocab};
use crate::error::{Error, Result};
use crate::injection::knowledge_embedding;
use crate::model::Model;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationProbe {
    pub p_at_1: f64,
    pub n_queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub per_relation: BTreeMap<usize, RelationProbe>,
    /// Unweighted mean of per-relation precision-at-1.
    pub macro_p_at_1: f64,
    pub n_queries: usize,
    /// Relations with zero queries, excluded from the macro average.
    pub skipped_relations: Vec<usize>,
}

/// Probes the model on `triples`. When `inject` is set (the
/// knowledge-injected training mode), the head-entity position receives
/// its projected graph embedding, matching the decayed end state of the
/// mixing schedule; the baseline mode probes plain token embeddings.
pub fn probe(
    model: &Model,
    vocab: &Vocab,
    kg: &KnowledgeGraph,
    kg_embeddings: Option<&KgEmbeddings>,
    triples: &[Triple],
    inject: bool,
) -> Result<ProbeResult> {
    if triples.is_empty() {
        return Err(Error::InvalidArgument("no triples to probe".into()));
    }
    if inject && kg_embeddings.is_none() {
        return Err(Error::InvalidArgument("injection probing needs graph embeddings".into()));
    }
    let d = model.cfg.hidden_dim;
    let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for &triple in triples {
        let seq = verbalize(kg, vocab, triple, &[]);
        // encoder rows: [cls] head relation tail(masked)
        let mut ids = vec![vocab.cls_id()];
        for (i, tok) in seq.tokens.iter().enumerate() {
            if i == 2 {
                ids.push(vocab.mask_id());
            } else {
                ids.push(vocab.lookup(tok)?);
            }
        }
        let mut input = model.embed_ids(&ids)?;
        if inject {
            let h_e =
                knowledge_embedding(triple.head, kg_embeddings.unwrap(), model.params.w_proj())?;
            let head_row = 1; // head span starts the sentence
            let mut data = input.data().to_vec();
            data[head_row * d..(head_row + 1) * d].copy_from_slice(&h_e);
            input = Tensor::from_raw(ids.len(), d, data);
        }
        let enc = model.encode(&input, &[])?;
        let logits = model.mlm_logits(enc.hidden.row(2))?;
        let top = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        let entry = hits.entry(triple.relation).or_insert((0, 0));
        entry.1 += 1;
        if top == vocab.entity_id(triple.tail) {
            entry.0 += 1;
        }
    }

    let per_relation: BTreeMap<usize, RelationProbe> = hits
        .iter()
        .map(|(&rel, &(h, n))| (rel, RelationProbe { p_at_1: h as f64 / n as f64, n_queries: n }))
        .collect();
    let skipped_relations: Vec<usize> =
        (0..kg.relations.len()).filter(|r| !per_relation.contains_key(r)).collect();
    if !skipped_relations.is_empty() {
        log::warn!("relations without probe queries excluded from macro average: {skipped_relations:?}");
    }
    let macro_p_at_1 =
        per_relation.values().map(|r| r.p_at_1).sum::<f64>() / per_relation.len() as f64;
    Ok(ProbeResult { per_relation, macro_p_at_1, n_queries: triples.len(), skipped_relations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus_kg::graph::generate_kg;
    use crate::model::TransformerConfig;

    fn fixture() -> (Model, Vocab, KnowledgeGraph) {
        let kg = generate_kg(3, 30, 4, 80).unwrap();
        let vocab = Vocab::build(&kg, 60);
        let model = Model::init(TransformerConfig {
            n_layers: 2,
            hidden_dim: 16,
            n_heads: 2,
            ffn_dim: 32,
            vocab_size: vocab.size(),
            max_seq_len: 12,
            kg_dim: 4,
            seed: 17,
        })
        .unwrap();
        (model, vocab, kg)
    }

    #[test]
    fn untrained_model_probes_near_chance() {
        let (model, vocab, kg) = fixture();
        let r = probe(&model, &vocab, &kg, None, &kg.triples, false).unwrap();
        assert_eq!(r.n_queries, kg.triples.len());
        // chance is 1/V; with 80 queries even a few hits would be surprising
        assert!(r.macro_p_at_1 < 0.2, "untrained macro P@1 {}", r.macro_p_at_1);
        assert!(r.skipped_relations.is_empty());
        for rp in r.per_relation.values() {
            assert!((0.0..=1.0).contains(&rp.p_at_1));
        }
    }

    #[test]
    fn macro_average_is_unweighted_mean() {
        let (model, vocab, kg) = fixture();
        let r = probe(&model, &vocab, &kg, None, &kg.triples, false).unwrap();
        let mean: f64 =
            r.per_relation.values().map(|x| x.p_at_1).sum::<f64>() / r.per_relation.len() as f64;
        assert!((r.macro_p_at_1 - mean).abs() < 1e-15);
    }

    #[test]
    fn probe_is_query_order_invariant() {
        let (model, vocab, kg) = fixture();
        let mut reversed = kg.triples.clone();
        reversed.reverse();
        let a = probe(&model, &vocab, &kg, None, &kg.triples, false).unwrap();
        let b = probe(&model, &vocab, &kg, None, &reversed, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_relation_is_skipped_and_logged() {
        let (model, vocab, kg) = fixture();
        let only_rel0: Vec<Triple> =
            kg.triples.iter().copied().filter(|t| t.relation == 0).collect();
        let r = probe(&model, &vocab, &kg, None, &only_rel0, false).unwrap();
        assert_eq!(r.per_relation.len(), 1);
        assert_eq!(r.skipped_relations, vec![1, 2, 3]);
    }

    #[test]
    fn empty_probe_set_rejected() {
        let (model, vocab, kg) = fixture();
        assert!(probe(&model, &vocab, &kg, None, &[], false).is_err());
    }
}
