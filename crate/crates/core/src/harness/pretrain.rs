//! The pre-training loop.
//!
//! Per step: (1) mask the batch and select injection targets with their
//! mixed inputs, (2) forward with FFN activation recording, (3) on the
//! recompute cadence, attribute FFN neurons and rebuild the knowledge-path
//! gradient mask, (4) feed the memory bank from the final-layer outputs,
//! (5) evaluate the combined loss, (6) back-propagate and apply the
//! (masked) optimizer step. The mixing coefficient decays once per epoch;
//! a metrics row is emitted every step; checkpoints, the bank and probe
//! results are persisted every epoch (last + best by held-out probe).
//!
//! The baseline mode skips injection, routing and the bank, and forces the
//! loss weight to pure masked-language modeling.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus_kg::{
    detect_long_tail, entity_frequency, AnnotatedSequence, KgEmbeddings, KnowledgeGraph, Triple,
    Vocab,
};
use crate::error::{Error, Result};
use crate::harness::checkpoint::save_checkpoint;
use crate::harness::config::{Mode, RunConfig};
use crate::harness::probe::{probe, ProbeResult};
use crate::injection::{select_targets, semantic_importance, InjectionTarget};
use crate::memory_bank::{local_memory, update_global, update_local, MemoryBank, MixSchedule};
use crate::model::{collect_grads, slot, Model};
use crate::numerics::optim::Sgd;
use crate::numerics::{mix_seed, Tape, Tensor};
use crate::objectives::{mask_batch, MaskedSequence, NegativeSampler};
use crate::routing::{
    attribution_table, build_mask, masked_step, select_paths, GradientMask, PreparedSequence,
};

const SEED_MODEL: u64 = 1;
const SEED_SHUFFLE: u64 = 2;
const SEED_MASK: u64 = 3;
const SEED_NEG: u64 = 4;

/// Everything a run consumes, already loaded.
pub struct RunData {
    pub kg: KnowledgeGraph,
    pub corpus: Vec<AnnotatedSequence>,
    pub kg_embeddings: KgEmbeddings,
    pub heldout: Vec<Triple>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub l_mlm: f64,
    pub l_cka: f64,
    pub l_total: f64,
    pub lambda_q: f64,
    pub coverage_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochProbe {
    pub epoch: usize,
    /// Absent when the run has no held-out triples.
    pub heldout: Option<ProbeResult>,
    pub train: ProbeResult,
}

pub struct PretrainOutcome {
    pub model: Model,
    pub bank: MemoryBank,
    pub metrics: Vec<StepMetrics>,
    pub probes: Vec<EpochProbe>,
    pub best_epoch: usize,
    pub out_dir: PathBuf,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str =
        "step,epoch,l_mlm,l_cka,l_total,lambda_q,coverage_fraction";

    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.l_mlm,
            self.l_cka,
            self.l_total,
            self.lambda_q,
            self.coverage_fraction
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(Error::InvalidArgument(format!("bad metrics row '{line}'")));
        }
        let f = |s: &str| {
            s.parse::<f64>().map_err(|_| Error::InvalidArgument(format!("bad number '{s}'")))
        };
        Ok(Self {
            step: parts[0].parse().map_err(|_| Error::InvalidArgument("bad step".into()))?,
            epoch: parts[1].parse().map_err(|_| Error::InvalidArgument("bad epoch".into()))?,
            l_mlm: f(parts[2])?,
            l_cka: f(parts[3])?,
            l_total: f(parts[4])?,
            lambda_q: f(parts[5])?,
            coverage_fraction: f(parts[6])?,
        })
    }
}

struct SequenceOutcome {
    grads: Vec<Tensor>,
    ce_sum: f64,
    cka_sum: f64,
    input_value: Tensor,
    hidden_value: Tensor,
    targets: Vec<InjectionTarget>,
    knowledge_positions: Vec<(usize, usize)>,
}

pub fn pretrain(
    cfg: &RunConfig,
    data: &RunData,
    out_dir: &Path,
    si_csv: Option<&Path>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    data.kg.validate()?;
    let n_distractors = Vocab::distractors_for_total(&data.kg, cfg.model.vocab_size)?;
    let vocab = Vocab::build(&data.kg, n_distractors);
    if data.kg_embeddings.dim != cfg.model.kg_dim {
        return Err(Error::InvalidConfig(format!(
            "graph embedding dim {} != model kg_dim {}",
            data.kg_embeddings.dim, cfg.model.kg_dim
        )));
    }
    if data.kg_embeddings.entity.rows() != data.kg.entities.len() {
        return Err(Error::InvalidConfig("graph embeddings do not cover the entities".into()));
    }
    if data.corpus.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    for seq in &data.corpus {
        if seq.tokens.len() > cfg.model.max_seq_len {
            return Err(Error::InvalidConfig(format!(
                "corpus sentence of {} tokens exceeds max_seq_len {}",
                seq.tokens.len(),
                cfg.model.max_seq_len
            )));
        }
    }
    std::fs::create_dir_all(out_dir)?;

    let mut model_cfg = cfg.model.clone();
    model_cfg.seed = mix_seed(cfg.seed, SEED_MODEL);
    let mut model = Model::init(model_cfg)?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut bank = MemoryBank::new(cfg.model.hidden_dim);
    let schedule = MixSchedule::new(cfg.lambda0, cfg.beta)?;
    let trelm = cfg.mode == Mode::Trelm;
    let theta = if trelm { cfg.theta } else { 1.0 };

    let freqs = entity_frequency(&data.corpus);
    let long_tail = detect_long_tail(&freqs, cfg.long_tail_threshold)?;
    let train_triples: Vec<Triple> = data
        .corpus
        .iter()
        .filter_map(|s| s.gold)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let mut metrics_w = BufWriter::new(File::create(out_dir.join("metrics.csv"))?);
    writeln!(metrics_w, "{}", StepMetrics::CSV_HEADER)?;
    let mut timing_w = BufWriter::new(File::create(out_dir.join("timing.csv"))?);
    writeln!(timing_w, "step,wallclock_ms")?;
    let mut si_w = match si_csv {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            writeln!(w, "sentence_id,entity_id,si_score,selected")?;
            Some(w)
        }
        None => None,
    };
    std::fs::write(out_dir.join("run_config.toml"), cfg.to_toml_string()?)?;

    let mut metrics: Vec<StepMetrics> = Vec::new();
    let mut probes: Vec<EpochProbe> = Vec::new();
    let mut mask_state: Option<GradientMask> = None;
    let mut best: Option<(usize, f64)> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let lambda = schedule.at(epoch);
        let order = epoch_order(cfg.seed, epoch, data.corpus.len());
        for batch_ids in order.chunks(cfg.batch_size) {
            let t0 = Instant::now();
            let row = train_step(
                cfg,
                data,
                &vocab,
                &long_tail,
                &mut model,
                &mut opt,
                &mut bank,
                &mut mask_state,
                batch_ids,
                step,
                epoch,
                lambda,
                theta,
                si_w.as_mut(),
            )
            .map_err(|e| {
                Error::InvalidArgument(format!("run aborted at step {step} (epoch {epoch}): {e}"))
            })?;
            writeln!(metrics_w, "{}", row.csv_row())?;
            writeln!(timing_w, "{},{}", step, t0.elapsed().as_secs_f64() * 1e3)?;
            metrics.push(row);
            step += 1;
        }

        let heldout_probe = if data.heldout.is_empty() {
            None
        } else {
            Some(probe(&model, &vocab, &data.kg, Some(&data.kg_embeddings), &data.heldout, trelm)?)
        };
        let train_probe =
            probe(&model, &vocab, &data.kg, Some(&data.kg_embeddings), &train_triples, trelm)?;
        log::info!(
            "epoch {epoch}: held-out P@1 {:?}, train P@1 {:.4}",
            heldout_probe.as_ref().map(|p| p.macro_p_at_1),
            train_probe.macro_p_at_1
        );
        save_checkpoint(&out_dir.join("checkpoint_last.bin"), &model, step, cfg.mode)?;
        bank.persist(&out_dir.join("bank_last.bin"))?;
        // best checkpoint follows the held-out probe, or the train probe
        // when nothing is held out
        let score = heldout_probe.as_ref().map(|p| p.macro_p_at_1).unwrap_or(train_probe.macro_p_at_1);
        if best.map(|(_, b)| score > b).unwrap_or(true) {
            best = Some((epoch, score));
            save_checkpoint(&out_dir.join("checkpoint_best.bin"), &model, step, cfg.mode)?;
            bank.persist(&out_dir.join("bank_best.bin"))?;
        }
        probes.push(EpochProbe { epoch, heldout: heldout_probe, train: train_probe });
    }

    metrics_w.flush()?;
    timing_w.flush()?;
    if let Some(w) = si_w.as_mut() {
        w.flush()?;
    }
    let probe_json = serde_json::to_string_pretty(&probes)?;
    std::fs::write(out_dir.join("probe_history.json"), probe_json)?;

    Ok(PretrainOutcome {
        model,
        bank,
        metrics,
        probes,
        best_epoch: best.map(|(e, _)| e).unwrap_or(0),
        out_dir: out_dir.to_path_buf(),
    })
}

/// Seed-derived corpus permutation for one epoch.
fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(
        mix_seed(seed, SEED_SHUFFLE),
        epoch as u64,
    ));
    order.shuffle(&mut rng);
    order
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    cfg: &RunConfig,
    data: &RunData,
    vocab: &Vocab,
    long_tail: &BTreeSet<usize>,
    model: &mut Model,
    opt: &mut Sgd,
    bank: &mut MemoryBank,
    mask_state: &mut Option<GradientMask>,
    batch_ids: &[usize],
    step: usize,
    epoch: usize,
    lambda: f64,
    theta: f64,
    mut si_w: Option<&mut BufWriter<File>>,
) -> Result<StepMetrics> {
    let trelm = cfg.mode == Mode::Trelm;
    let side = cfg.cka_direction.resolve(step);
    let sequences: Vec<&AnnotatedSequence> =
        batch_ids.iter().map(|&i| &data.corpus[i]).collect();

    // (1) masking and injection-target selection on the current snapshot
    let masked = mask_batch(
        &sequences,
        vocab,
        cfg.mask_rate,
        mix_seed(mix_seed(cfg.seed, SEED_MASK), step as u64),
        side,
    )?;
    let mut targets_per_seq: Vec<Vec<InjectionTarget>> = vec![Vec::new(); sequences.len()];
    if trelm {
        targets_per_seq = sequences
            .par_iter()
            .zip(masked.seqs.par_iter())
            .map(|(seq, msk)| {
                let mut ts = select_targets(
                    model,
                    vocab,
                    &data.kg_embeddings,
                    seq,
                    long_tail,
                    cfg.top_k,
                    cfg.injection_scope,
                    cfg.pooling,
                    cfg.si_mode,
                )?;
                // never inject into the span being predicted
                let know: Vec<usize> = msk.knowledge.iter().map(|&(p, _)| p).collect();
                ts.retain(|t| !know.iter().any(|&p| (t.span.0..=t.span.1).contains(&p)));
                Ok(ts)
            })
            .collect::<Result<_>>()?;
        if let Some(w) = si_w.as_mut() {
            for ((seq, &sid), ts) in sequences.iter().zip(batch_ids).zip(&targets_per_seq) {
                for (i, span) in seq.spans.iter().enumerate() {
                    let si = semantic_importance(model, vocab, seq, i, cfg.pooling, cfg.si_mode)?;
                    let selected = ts.iter().any(|t| t.span == (span.start, span.end));
                    writeln!(w, "{sid},{},{si},{}", span.entity, selected as u8)?;
                }
            }
        }
    }

    let n_mlm: usize = masked.n_labels();
    let n_cka: usize = if trelm { masked.n_knowledge() } else { 0 };

    // (2) taped forward + loss graph per sequence, gradients per sequence
    let outcomes: Vec<SequenceOutcome> = masked
        .seqs
        .par_iter()
        .enumerate()
        .map(|(si, msk)| {
            run_sequence(
                cfg,
                model,
                vocab,
                &data.kg_embeddings,
                bank,
                msk,
                &targets_per_seq[si],
                lambda,
                theta,
                n_mlm,
                n_cka,
                step,
                si,
                trelm,
            )
        })
        .collect::<Result<_>>()?;

    // (3) attribution + path selection on the recompute cadence
    let routing_on = trelm && cfg.routing_enabled;
    if routing_on && step % cfg.recompute_every == 0 {
        let prepared: Vec<PreparedSequence> = outcomes
            .iter()
            .map(|o| PreparedSequence {
                input: o.input_value.clone(),
                targets: o.knowledge_positions.iter().map(|&(p, y)| (p + 1, y)).collect(),
            })
            .filter(|p| !p.targets.is_empty())
            .collect();
        if !prepared.is_empty() {
            let table = attribution_table(model, &prepared, cfg.riemann_steps)?;
            let path = select_paths(&table, cfg.select_fraction, &model.params)?;
            *mask_state = Some(build_mask(&path, cfg.model.hidden_dim, cfg.model.ffn_dim)?);
        }
    }

    // (4) memory bank updates from the final-layer outputs, in batch order
    if trelm {
        let d = cfg.model.hidden_dim;
        for o in &outcomes {
            let rows = o.hidden_value.rows();
            let sentence =
                Tensor::from_raw(rows - 1, d, o.hidden_value.data()[d..].to_vec());
            let cls = o.hidden_value.row(0);
            for t in &o.targets {
                let observed = local_memory(
                    &sentence,
                    t.span,
                    cfg.half_window,
                    cfg.literal_local_normalizer,
                )?;
                let entry = bank.entry_mut(t.entity_id);
                update_local(entry, &observed, cfg.gamma)?;
                update_global(entry, cls)?;
            }
        }
    }

    // (5) loss values
    let l_mlm = if n_mlm > 0 {
        outcomes.iter().map(|o| o.ce_sum).sum::<f64>() / n_mlm as f64
    } else {
        0.0
    };
    let l_cka = if n_cka > 0 {
        outcomes.iter().map(|o| o.cka_sum).sum::<f64>() / n_cka as f64
    } else {
        0.0
    };
    let l_total = crate::objectives::total_loss(l_mlm, l_cka, theta)?;
    if !l_total.is_finite() {
        return Err(Error::NonFinite { op: "train_step" });
    }

    // (6) gradient accumulation in batch order, then the (masked) step
    let mut grads: Vec<Tensor> =
        model.params.tensors().iter().map(|t| Tensor::zeros(t.shape().0, t.shape().1)).collect();
    for o in &outcomes {
        for (acc, g) in grads.iter_mut().zip(&o.grads) {
            let buf = acc.data_mut();
            for (a, b) in buf.iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    drop(outcomes);
    let coverage = if routing_on {
        let m = mask_state
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("no gradient mask available".into()))?;
        masked_step(&mut model.params, &grads, opt, m, cfg.non_ffn_policy)?;
        m.coverage_fraction
    } else {
        opt.step(model.params.tensors_mut(), &grads, None)?;
        1.0
    };

    Ok(StepMetrics {
        step,
        epoch,
        l_mlm,
        l_cka,
        l_total,
        lambda_q: lambda,
        coverage_fraction: coverage,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_sequence(
    cfg: &RunConfig,
    model: &Model,
    vocab: &Vocab,
    kg_embeddings: &KgEmbeddings,
    bank: &MemoryBank,
    msk: &MaskedSequence,
    targets: &[InjectionTarget],
    lambda: f64,
    theta: f64,
    n_mlm: usize,
    n_cka: usize,
    step: usize,
    seq_index: usize,
    trelm: bool,
) -> Result<SequenceOutcome> {
    let d = cfg.model.hidden_dim;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);

    // input assembly: gathered token embeddings with injected rows mixed in
    let mut ids = Vec::with_capacity(msk.input_ids.len() + 1);
    ids.push(vocab.cls_id());
    ids.extend_from_slice(&msk.input_ids);
    let base = tape.gather(bound.get(slot::TOKEN_EMB), &ids);
    let substituted: Vec<bool> = {
        let labeled: std::collections::HashMap<usize, usize> =
            msk.labels.iter().copied().collect();
        msk.input_ids
            .iter()
            .enumerate()
            .map(|(p, &id)| labeled.get(&p).map(|&orig| orig != id).unwrap_or(false))
            .collect()
    };
    let mut overrides = Vec::new();
    for t in targets {
        let evec = tape.constant_vec(1, kg_embeddings.dim, kg_embeddings.entity_vec(t.entity_id)?.to_vec());
        let h_e = tape.matmul(evec, bound.get(slot::W_PROJ));
        let entry = bank.get(t.entity_id);
        let row = match entry {
            Some(e) if e.ready() && lambda > 0.0 => {
                let scaled = tape.scale(h_e, 1.0 - lambda);
                let mem: Vec<f64> = e
                    .local
                    .iter()
                    .zip(&e.global)
                    .map(|(l, g)| lambda / 2.0 * (l + g))
                    .collect();
                let mem = tape.constant_vec(1, d, mem);
                tape.add(scaled, mem)
            }
            _ => h_e,
        };
        for p in t.span.0..=t.span.1 {
            if !substituted[p] {
                overrides.push((p + 1, row));
            }
        }
    }
    let input = if overrides.is_empty() { base } else { tape.override_rows(base, overrides) };

    let record = model.forward_on_tape(&mut tape, &bound, input, &[])?;

    // masked-token loss over the labeled positions
    let positions: Vec<usize> = msk.labels.iter().map(|&(p, _)| p + 1).collect();
    let golds: Vec<usize> = msk.labels.iter().map(|&(_, y)| y).collect();
    let h_rows = tape.gather(record.hidden, &positions);
    let transformed = tape.matmul(h_rows, bound.get(slot::MLM_W));
    let transformed = tape.add_row(transformed, bound.get(slot::MLM_B));
    let logits = tape.matmul_bt(transformed, bound.get(slot::TOKEN_EMB));
    let logits = tape.add_row(logits, bound.get(slot::MLM_BIAS));
    let ce_sum = tape.cross_entropy_sum(logits, golds);

    // contrastive knowledge assessment at the prediction positions
    let mut cka_sum = None;
    if trelm && !msk.knowledge.is_empty() {
        let sampler =
            NegativeSampler::new(cfg.negatives, mix_seed(mix_seed(cfg.seed, SEED_NEG), step as u64));
        let mut parts = Vec::with_capacity(msk.knowledge.len());
        for (ti, &(p, gold)) in msk.knowledge.iter().enumerate() {
            let unit = ((seq_index as u64) << 16) | ti as u64;
            let mut cand = vec![gold];
            cand.extend(sampler.sample(unit, gold, cfg.model.vocab_size));
            let cand_rows = tape.gather(bound.get(slot::TOKEN_EMB), &cand);
            let h_row = tape.gather(record.hidden, &[p + 1]);
            let scores = tape.matmul_bt(cand_rows, h_row);
            let nce = tape.info_nce(scores);
            parts.push((nce, 1.0));
        }
        cka_sum = Some(tape.weighted_sum(parts));
    }

    // one scalar per sequence so batch-mean gradients come out exact
    let mut parts = Vec::new();
    if n_mlm > 0 {
        parts.push((ce_sum, theta / n_mlm as f64));
    }
    if let Some(ck) = cka_sum {
        if n_cka > 0 {
            parts.push((ck, (1.0 - theta) / n_cka as f64));
        }
    }
    let loss = tape.weighted_sum(parts);
    tape.backward(loss)?;

    Ok(SequenceOutcome {
        grads: collect_grads(&tape, &bound, &model.params),
        ce_sum: tape.scalar_value(ce_sum),
        cka_sum: cka_sum.map(|v| tape.scalar_value(v)).unwrap_or(0.0),
        input_value: tape.value_tensor(input),
        hidden_value: tape.value_tensor(record.hidden),
        targets: targets.to_vec(),
        knowledge_positions: msk.knowledge.clone(),
    })
}
