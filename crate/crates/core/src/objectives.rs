//! Training objectives: masked-language-model masking and loss, the
//! token-level contrastive knowledge-assessing (CKA) loss, and their
//! theta-weighted combination.
//!
//! Knowledge prediction alternates direction per batch when configured as
//! `both`: on even batches the tail-entity span is the prediction target,
//! on odd batches the head-entity span. Positions inside the prediction
//! span are always replaced by the mask token (anything else would leak
//! the answer to the decoder); other sampled positions follow the usual
//! 80/10/10 substitution policy.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus_kg::{AnnotatedSequence, Vocab};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::mix_seed;
use crate::numerics::tensor::log_sum_exp;

/// Which entity of the gold fact the model must assess.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CkaDirection {
    TailOnly,
    HeadOnly,
    /// Alternate per batch: tail on even batch indices, head on odd.
    #[default]
    Both,
}

impl CkaDirection {
    pub fn resolve(self, batch_index: usize) -> PredictSide {
        match self {
            CkaDirection::TailOnly => PredictSide::Tail,
            CkaDirection::HeadOnly => PredictSide::Head,
            CkaDirection::Both => {
                if batch_index % 2 == 0 {
                    PredictSide::Tail
                } else {
                    PredictSide::Head
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictSide {
    Tail,
    Head,
}

/// One masked sequence: substituted input ids (sentence positions, no
/// classification token), per-position labels, and knowledge-prediction
/// positions with their gold ids.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSequence {
    pub input_ids: Vec<usize>,
    /// `(position, original token id)` for every selected position.
    pub labels: Vec<(usize, usize)>,
    /// Prediction positions inside the gold fact's assessed entity span;
    /// always a subset of `labels`.
    pub knowledge: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub side: PredictSide,
    pub seqs: Vec<MaskedSequence>,
}

impl MaskedBatch {
    pub fn n_labels(&self) -> usize {
        self.seqs.iter().map(|s| s.labels.len()).sum()
    }

    pub fn n_knowledge(&self) -> usize {
        self.seqs.iter().map(|s| s.knowledge.len()).sum()
    }
}

/// Applies masking to a batch of sequences. Selection is per-position
/// Bernoulli(`mask_rate`) with a one-position floor; of the sampled
/// positions 80% become the mask token, 10% a random ordinary token and
/// 10% stay unchanged. Prediction-span positions are force-selected and
/// always masked. Deterministic in `(seed, index in batch)`.
pub fn mask_batch(
    sequences: &[&AnnotatedSequence],
    vocab: &Vocab,
    mask_rate: f64,
    seed: u64,
    side: PredictSide,
) -> Result<MaskedBatch> {
    if !(0.0..1.0).contains(&mask_rate) || mask_rate == 0.0 {
        return Err(Error::InvalidArgument(format!("mask_rate must be in (0,1), got {mask_rate}")));
    }
    let special_ids = 3; // pad, cls, mask occupy the low ids
    let ordinary = vocab.size() - special_ids;
    let mut seqs = Vec::with_capacity(sequences.len());
    for (i, seq) in sequences.iter().enumerate() {
        let ids = vocab.encode(seq)?;
        let eligible: Vec<usize> = (0..ids.len()).filter(|&p| ids[p] >= special_ids).collect();
        if eligible.is_empty() {
            return Err(Error::InvalidArgument(
                "sequence has no maskable (non-special) positions".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
        let mut selected: Vec<usize> =
            eligible.iter().copied().filter(|_| rng.random_bool(mask_rate)).collect();
        if selected.is_empty() {
            selected.push(eligible[rng.random_range(0..eligible.len())]);
        }

        let know_span = seq.gold.map(|g| {
            let want = match side {
                PredictSide::Tail => g.tail,
                PredictSide::Head => g.head,
            };
            seq.spans
                .iter()
                .find(|s| s.entity == want)
                .map(|s| (s.start, s.end))
                .expect("gold fact entity must have a span")
        });

        let mut input_ids = ids.clone();
        let mut labels = Vec::new();
        let mut knowledge = Vec::new();
        if let Some((l, r)) = know_span {
            for p in l..=r {
                input_ids[p] = vocab.mask_id();
                labels.push((p, ids[p]));
                knowledge.push((p, ids[p]));
            }
        }
        for &p in &selected {
            if know_span.is_some_and(|(l, r)| (l..=r).contains(&p)) {
                continue;
            }
            let roll: f64 = rng.random();
            if roll < 0.8 {
                input_ids[p] = vocab.mask_id();
            } else if roll < 0.9 {
                input_ids[p] = special_ids + rng.random_range(0..ordinary);
            }
            labels.push((p, ids[p]));
        }
        labels.sort_unstable();
        seqs.push(MaskedSequence { input_ids, labels, knowledge });
    }
    Ok(MaskedBatch { side, seqs })
}

/// Mean cross-entropy over labeled positions, from `(logits, gold)` rows.
pub fn mlm_loss(rows: &[(Vec<f64>, usize)]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("mlm_loss over zero labeled positions".into()));
    }
    let mut total = 0.0;
    for (logits, gold) in rows {
        if *gold >= logits.len() {
            return Err(Error::IndexOutOfRange(format!("gold token {gold}")));
        }
        total += log_sum_exp(logits) - logits[*gold];
    }
    Ok(total / rows.len() as f64)
}

/// Uniform negative sampling over the vocabulary minus the gold token.
/// Sample `unit` keys the per-target RNG stream.
#[derive(Clone, Copy, Debug)]
pub struct NegativeSampler {
    pub count: usize,
    pub seed: u64,
}

impl NegativeSampler {
    pub fn new(count: usize, seed: u64) -> Self {
        Self { count, seed }
    }

    pub fn sample(&self, unit: u64, gold: usize, vocab_size: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, unit));
        (0..self.count)
            .map(|_| {
                let mut tok = rng.random_range(0..vocab_size - 1);
                if tok >= gold {
                    tok += 1;
                }
                tok
            })
            .collect()
    }
}

/// Token-level contrastive loss from explicit matching scores:
/// mean over targets of `-log( exp(s_pos) / (exp(s_pos) + sum exp(s_neg)) )`.
pub fn cka_loss_from_scores(sets: &[(f64, Vec<f64>)]) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::InvalidArgument("cka_loss over zero prediction positions".into()));
    }
    let mut total = 0.0;
    for (pos, negs) in sets {
        let mut all = Vec::with_capacity(negs.len() + 1);
        all.push(*pos);
        all.extend_from_slice(negs);
        total += log_sum_exp(&all) - pos;
    }
    Ok(total / sets.len() as f64)
}

/// CKA loss over decoded hidden states, using the model's matching
/// function against sampled negatives.
pub fn cka_loss(
    model: &Model,
    targets: &[(Vec<f64>, usize)],
    sampler: &NegativeSampler,
) -> Result<f64> {
    let sets: Vec<(f64, Vec<f64>)> = targets
        .iter()
        .enumerate()
        .map(|(i, (h_d, gold))| {
            let pos = model.match_score(h_d, *gold)?;
            let negs = sampler
                .sample(i as u64, *gold, model.cfg.vocab_size)
                .into_iter()
                .map(|y| model.match_score(h_d, y))
                .collect::<Result<Vec<f64>>>()?;
            Ok((pos, negs))
        })
        .collect::<Result<_>>()?;
    cka_loss_from_scores(&sets)
}

/// Total training loss: `theta * l_mlm + (1 - theta) * l_cka`.
pub fn total_loss(l_mlm: f64, l_cka: f64, theta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::InvalidArgument(format!("theta must be in [0,1], got {theta}")));
    }
    Ok(theta * l_mlm + (1.0 - theta) * l_cka)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus_kg::graph::generate_kg;
    use crate::corpus_kg::generate_corpus;

    fn fixture() -> (crate::corpus_kg::KnowledgeGraph, Vocab, Vec<AnnotatedSequence>) {
        let kg = generate_kg(3, 20, 4, 40).unwrap();
        let vocab = Vocab::build(&kg, 80);
        let corpus = generate_corpus(&kg, &vocab, 9, 64, 1.1).unwrap();
        (kg, vocab, corpus)
    }

    #[test]
    fn masking_rate_tracks_binomial_expectation() {
        // one long sequence so the one-position floor never distorts the
        // count: 1000 positions at rate 0.15 select 150 +- binomial noise
        let (_, vocab, _) = fixture();
        let long = AnnotatedSequence {
            tokens: (0..1000).map(|i| format!("w{:04}", i % 80)).collect(),
            spans: vec![],
            gold: None,
        };
        let refs = vec![&long];
        let mut selected = 0usize;
        let n_seeds = 40;
        for seed in 0..n_seeds {
            let batch = mask_batch(&refs, &vocab, 0.15, seed, PredictSide::Tail).unwrap();
            let masked = &batch.seqs[0];
            selected += masked.labels.len();
            // per-draw count stays within 5 sigma of the binomial mean
            let sigma = (1000.0f64 * 0.15 * 0.85).sqrt();
            let dev = (masked.labels.len() as f64 - 150.0).abs();
            assert!(dev < 5.0 * sigma, "seed {seed}: {} selected", masked.labels.len());
        }
        let rate = selected as f64 / (n_seeds as f64 * 1000.0);
        assert!((0.14..=0.16).contains(&rate), "observed mask rate {rate} far from 0.15");
    }

    #[test]
    fn labels_cover_exactly_the_selected_positions() {
        let (_, vocab, corpus) = fixture();
        let refs: Vec<&AnnotatedSequence> = corpus.iter().collect();
        let batch = mask_batch(&refs, &vocab, 0.15, 3, PredictSide::Tail).unwrap();
        for (seq, masked) in corpus.iter().zip(&batch.seqs) {
            let ids = vocab.encode(seq).unwrap();
            for &(p, gold) in &masked.labels {
                assert_eq!(ids[p], gold, "label must carry the original id");
            }
            // unlabeled positions are untouched
            let labeled: std::collections::HashSet<usize> =
                masked.labels.iter().map(|&(p, _)| p).collect();
            for p in 0..ids.len() {
                if !labeled.contains(&p) {
                    assert_eq!(masked.input_ids[p], ids[p]);
                }
            }
        }
    }

    #[test]
    fn knowledge_positions_are_masked_and_labeled() {
        let (_, vocab, corpus) = fixture();
        let refs: Vec<&AnnotatedSequence> = corpus.iter().collect();
        for side in [PredictSide::Tail, PredictSide::Head] {
            let batch = mask_batch(&refs, &vocab, 0.15, 3, side).unwrap();
            for (seq, masked) in corpus.iter().zip(&batch.seqs) {
                let gold = seq.gold.unwrap();
                let want = match side {
                    PredictSide::Tail => gold.tail,
                    PredictSide::Head => gold.head,
                };
                let span = seq.spans.iter().find(|s| s.entity == want).unwrap();
                assert_eq!(masked.knowledge.len(), span.end - span.start + 1);
                for &(p, g) in &masked.knowledge {
                    assert!((span.start..=span.end).contains(&p));
                    assert_eq!(masked.input_ids[p], vocab.mask_id());
                    assert_eq!(g, vocab.entity_id(want));
                    assert!(masked.labels.contains(&(p, g)), "knowledge targets keep labels");
                }
            }
        }
    }

    #[test]
    fn direction_alternates_per_batch() {
        assert_eq!(CkaDirection::Both.resolve(0), PredictSide::Tail);
        assert_eq!(CkaDirection::Both.resolve(1), PredictSide::Head);
        assert_eq!(CkaDirection::TailOnly.resolve(1), PredictSide::Tail);
        assert_eq!(CkaDirection::HeadOnly.resolve(0), PredictSide::Head);
    }

    #[test]
    fn minimal_rate_still_yields_a_label() {
        let (_, vocab, corpus) = fixture();
        // strip the gold fact so nothing is force-masked
        let mut bare = corpus[0].clone();
        bare.gold = None;
        bare.spans.clear();
        let refs = vec![&bare];
        for seed in 0..30 {
            let batch = mask_batch(&refs, &vocab, 0.001, seed, PredictSide::Tail).unwrap();
            assert!(!batch.seqs[0].labels.is_empty(), "floor policy guarantees one label");
        }
    }

    #[test]
    fn same_seed_same_batch() {
        let (_, vocab, corpus) = fixture();
        let refs: Vec<&AnnotatedSequence> = corpus.iter().collect();
        let a = mask_batch(&refs, &vocab, 0.15, 42, PredictSide::Tail).unwrap();
        let b = mask_batch(&refs, &vocab, 0.15, 42, PredictSide::Tail).unwrap();
        assert_eq!(a, b);
        let c = mask_batch(&refs, &vocab, 0.15, 43, PredictSide::Tail).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mlm_loss_oracles() {
        // uniform logits over V = 4 -> ln 4
        let rows = vec![(vec![0.0; 4], 2usize)];
        assert!((mlm_loss(&rows).unwrap() - 4.0f64.ln()).abs() < 1e-12);
        // confident correct -> ~0
        let rows = vec![(vec![50.0, 0.0, 0.0], 0usize)];
        assert!(mlm_loss(&rows).unwrap() < 1e-12);
        // two-position case against a direct evaluation
        let rows = vec![(vec![1.0, -1.0, 0.5], 0usize), (vec![0.2, 0.9, -0.3], 1usize)];
        let direct = |l: &[f64], g: usize| {
            let z: f64 = l.iter().map(|v| v.exp()).sum();
            z.ln() - l[g]
        };
        let expect = (direct(&rows[0].0, 0) + direct(&rows[1].0, 1)) / 2.0;
        assert!((mlm_loss(&rows).unwrap() - expect).abs() < 1e-12);
        assert!(mlm_loss(&[]).is_err());
    }

    #[test]
    fn cka_loss_oracles() {
        // all scores equal with |Q| = 3 -> ln 4
        let sets = vec![(0.7, vec![0.7, 0.7, 0.7])];
        assert!((cka_loss_from_scores(&sets).unwrap() - 4.0f64.ln()).abs() < 1e-12);
        // f = 2 against negatives {0, 1}
        let sets = vec![(2.0, vec![0.0, 1.0])];
        let expect = -(2.0f64.exp() / (2.0f64.exp() + 1.0 + 1.0f64.exp())).ln();
        let got = cka_loss_from_scores(&sets).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.4076).abs() < 1e-4);
        // dominant positive -> loss to zero
        let sets = vec![(60.0, vec![0.0, 1.0])];
        assert!(cka_loss_from_scores(&sets).unwrap() < 1e-12);
        // positive loss always
        let sets = vec![(0.0, vec![-5.0])];
        assert!(cka_loss_from_scores(&sets).unwrap() > 0.0);
        assert!(cka_loss_from_scores(&[]).is_err());
    }

    #[test]
    fn cka_shift_invariance() {
        let base = vec![(1.2, vec![0.3, -0.7, 2.0])];
        let shifted = vec![(1.2 + 5.5, vec![0.3 + 5.5, -0.7 + 5.5, 2.0 + 5.5])];
        let a = cka_loss_from_scores(&base).unwrap();
        let b = cka_loss_from_scores(&shifted).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn cka_monotone_in_positive_score() {
        let negs = vec![0.1, 0.4, -0.2];
        let mut prev = f64::INFINITY;
        for s in [-1.0, 0.0, 1.0, 2.0, 4.0] {
            let l = cka_loss_from_scores(&[(s, negs.clone())]).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn negative_sampler_never_hits_gold() {
        let sampler = NegativeSampler::new(64, 9);
        for gold in [0usize, 7, 99] {
            let negs = sampler.sample(gold as u64, gold, 100);
            assert_eq!(negs.len(), 64);
            assert!(negs.iter().all(|&n| n != gold && n < 100));
        }
        // deterministic per (seed, unit)
        assert_eq!(sampler.sample(3, 5, 100), sampler.sample(3, 5, 100));
    }

    #[test]
    fn total_loss_combination() {
        assert_eq!(total_loss(2.0, 4.0, 0.5).unwrap(), 3.0);
        assert_eq!(total_loss(2.0, 4.0, 1.0).unwrap(), 2.0);
        assert_eq!(total_loss(2.0, 4.0, 0.0).unwrap(), 4.0);
        assert!(total_loss(2.0, 4.0, 1.5).is_err());
    }
}
