//! Shared fixtures for the benchmark targets.

use trelm_core::corpus_kg::{generate_corpus, generate_kg, Vocab};
use trelm_core::model::{Model, TransformerConfig};
use trelm_core::objectives::{mask_batch, PredictSide};
use trelm_core::routing::PreparedSequence;

pub struct Fixture {
    pub model: Model,
    pub vocab: Vocab,
    pub batch: Vec<PreparedSequence>,
}

/// Default-scale model over a small synthetic batch with tail-side
/// masking, ready for forward/backward and attribution benchmarks.
pub fn default_fixture(batch_size: usize) -> Fixture {
    let kg = generate_kg(7, 100, 8, 400).unwrap();
    let vocab = Vocab::build(&kg, Vocab::distractors_for_total(&kg, 2000).unwrap());
    let corpus = generate_corpus(&kg, &vocab, 7, batch_size, 1.1).unwrap();
    let model = Model::init(TransformerConfig::default()).unwrap();
    let refs: Vec<_> = corpus.iter().collect();
    let masked = mask_batch(&refs, &vocab, 0.15, 3, PredictSide::Tail).unwrap();
    let batch = masked
        .seqs
        .iter()
        .map(|msk| {
            let mut ids = vec![vocab.cls_id()];
            ids.extend_from_slice(&msk.input_ids);
            PreparedSequence {
                input: model.embed_ids(&ids).unwrap(),
                targets: msk.knowledge.iter().map(|&(p, y)| (p + 1, y)).collect(),
            }
        })
        .collect();
    Fixture { model, vocab, batch }
}
