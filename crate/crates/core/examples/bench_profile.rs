// scratch: profile one training step phase by phase
use std::time::Instant;
use trelm_core::corpus_kg::{generate_corpus, generate_kg, split_triples, train_kg_embeddings, Vocab};
use trelm_core::harness::{Mode, RunConfig, RunData};
use trelm_core::model::{Model, TransformerConfig};
use trelm_core::objectives::{mask_batch, PredictSide};
use trelm_core::numerics::Tape;

fn main() {
    let kg = generate_kg(7, 100, 8, 400).unwrap();
    let (train_kg, _heldout) = split_triples(&kg, 7, 0.1).unwrap();
    let vocab = Vocab::build(&kg, Vocab::distractors_for_total(&kg, 2000).unwrap());
    let corpus = generate_corpus(&train_kg, &vocab, 7, 64, 1.1).unwrap();
    let _ = train_kg_embeddings(&kg, 32, 5, 1.0, 0.05, 7);

    let model = Model::init(TransformerConfig::default()).unwrap();
    let refs: Vec<_> = corpus.iter().take(32).collect();
    let masked = mask_batch(&refs, &vocab, 0.15, 3, PredictSide::Tail).unwrap();

    // forward only
    let t = Instant::now();
    for msk in &masked.seqs {
        let mut ids = vec![vocab.cls_id()];
        ids.extend_from_slice(&msk.input_ids);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let input = tape.gather(bound.get(trelm_core::model::slot::TOKEN_EMB), &ids);
        let _rec = model.forward_on_tape(&mut tape, &bound, input, &[]).unwrap();
    }
    println!("32x forward only: {:?}", t.elapsed());

    // forward + mlm loss + backward
    let t = Instant::now();
    for msk in &masked.seqs {
        let mut ids = vec![vocab.cls_id()];
        ids.extend_from_slice(&msk.input_ids);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let input = tape.gather(bound.get(trelm_core::model::slot::TOKEN_EMB), &ids);
        let rec = model.forward_on_tape(&mut tape, &bound, input, &[]).unwrap();
        let positions: Vec<usize> = msk.labels.iter().map(|&(p, _)| p + 1).collect();
        let golds: Vec<usize> = msk.labels.iter().map(|&(_, y)| y).collect();
        let h = tape.gather(rec.hidden, &positions);
        let tr = tape.matmul(h, bound.get(trelm_core::model::slot::MLM_W));
        let tr = tape.add_row(tr, bound.get(trelm_core::model::slot::MLM_B));
        let logits = tape.matmul_bt(tr, bound.get(trelm_core::model::slot::TOKEN_EMB));
        let logits = tape.add_row(logits, bound.get(trelm_core::model::slot::MLM_BIAS));
        let ce = tape.cross_entropy_sum(logits, golds);
        let loss = tape.weighted_sum(vec![(ce, 0.01)]);
        tape.backward(loss).unwrap();
    }
    println!("32x forward+mlm+backward: {:?}", t.elapsed());

    // grads collection
    let t = Instant::now();
    for msk in masked.seqs.iter().take(4) {
        let mut ids = vec![vocab.cls_id()];
        ids.extend_from_slice(&msk.input_ids);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let input = tape.gather(bound.get(trelm_core::model::slot::TOKEN_EMB), &ids);
        let rec = model.forward_on_tape(&mut tape, &bound, input, &[]).unwrap();
        let positions: Vec<usize> = msk.labels.iter().map(|&(p, _)| p + 1).collect();
        let golds: Vec<usize> = msk.labels.iter().map(|&(_, y)| y).collect();
        let h = tape.gather(rec.hidden, &positions);
        let tr = tape.matmul(h, bound.get(trelm_core::model::slot::MLM_W));
        let tr = tape.add_row(tr, bound.get(trelm_core::model::slot::MLM_B));
        let logits = tape.matmul_bt(tr, bound.get(trelm_core::model::slot::TOKEN_EMB));
        let logits = tape.add_row(logits, bound.get(trelm_core::model::slot::MLM_BIAS));
        let ce = tape.cross_entropy_sum(logits, golds);
        let loss = tape.weighted_sum(vec![(ce, 0.01)]);
        tape.backward(loss).unwrap();
        let g = trelm_core::model::collect_grads(&tape, &bound, &model.params);
        std::hint::black_box(&g);
    }
    println!("4x with collect_grads: {:?}", t.elapsed());
}
