//! Dynamic knowledge routing: integrated-gradients attribution of FFN
//! neurons against the knowledge-decoding objective, knowledge-path
//! selection, and gradient masks for selective parameter updates.
//!
//! Attribution of neuron `(l, i)` integrates the gradient of the correct-
//! response probability while the neuron's post-activation value scales
//! from 0 to its recorded baseline, Riemann-approximated with `m` steps:
//! `Attr = (v/m) * sum_{k=1..m} dP(k v / m) / dv`. Clamps apply at each
//! sequence's prediction position; batch scores average the per-sequence
//! attributions.
//!
//! Two implementations are kept deliberately distinct:
//! * [`neuron_attribution`] clamps one neuron per forward pass (the
//!   definition; single-coordinate completeness holds exactly);
//! * [`attribution_table`] scales a whole layer's activation row per
//!   forward pass and reads all of the layer's gradients from one backward
//!   (the per-batch production path). The two coincide on linear probes
//!   and at `m = 1`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{slot, Bound, Model, ModelParams};
use crate::numerics::optim::{ParamMask, Sgd};
use crate::numerics::{Tape, Tensor, Var};

/// One model input as the attribution machinery sees it: fully mixed
/// token-level embeddings (classification row 0) plus the knowledge
/// targets `(encoder position, gold token id)`. Clamps apply at the first
/// target's position.
#[derive(Clone, Debug)]
pub struct PreparedSequence {
    pub input: Tensor,
    pub targets: Vec<(usize, usize)>,
}

impl PreparedSequence {
    pub fn clamp_position(&self) -> Option<usize> {
        self.targets.first().map(|&(p, _)| p)
    }
}

/// Per-sequence clamp values for one neuron.
#[derive(Clone, Debug)]
pub enum ClampValues {
    Shared(f64),
    PerSequence(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct NeuronClamp {
    pub layer: usize,
    pub neuron: usize,
    pub values: ClampValues,
}

/// Attribution scores; one entry per `(layer, neuron)`.
#[derive(Clone, Debug)]
pub struct AttributionTable {
    pub riemann_steps: usize,
    /// Per layer: batch-mean baseline activation at the prediction
    /// position, and the attribution score, both indexed by neuron.
    pub layers: Vec<LayerAttribution>,
}

#[derive(Clone, Debug)]
pub struct LayerAttribution {
    pub baseline: Vec<f64>,
    pub score: Vec<f64>,
}

/// Per-layer selected neuron index sets forming the knowledge path:
/// input-side coordinates, intermediate neurons, output-side coordinates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgePath {
    pub layers: Vec<LayerPath>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPath {
    pub input: Vec<usize>,
    pub inter: Vec<usize>,
    pub output: Vec<usize>,
}

/// Boolean masks over the FFN parameter arrays of every layer, plus the
/// fraction of maskable FFN entries (`w_in`, `b_in`, `w_out`) set true.
/// `b_out` is position-independent plumbing and never joins a path mask.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMask {
    pub layers: Vec<LayerMask>,
    pub coverage_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerMask {
    pub w_in: Vec<bool>,
    pub b_in: Vec<bool>,
    pub w_out: Vec<bool>,
    pub b_out: Vec<bool>,
}

/// What happens to non-FFN parameters under a masked step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NonFfnPolicy {
    /// Attention, embeddings, heads and the knowledge projection update
    /// fully; only FFN parameters are restricted.
    #[default]
    Full,
    /// Everything outside the masked FFN entries is frozen.
    Freeze,
}

// ── Correct-response probability ─────────────────────────────────────

fn check_batch(model: &Model, batch: &[PreparedSequence]) -> Result<()> {
    if batch.iter().all(|s| s.targets.is_empty()) {
        return Err(Error::InvalidArgument("batch has no knowledge targets".into()));
    }
    for seq in batch {
        for &(p, y) in &seq.targets {
            if p == 0 || p >= seq.input.rows() {
                return Err(Error::IndexOutOfRange(format!("target position {p}")));
            }
            if y >= model.cfg.vocab_size {
                return Err(Error::IndexOutOfRange(format!("target token {y}")));
            }
        }
    }
    Ok(())
}

/// Builds the mean decoding probability of the gold tokens for one
/// sequence on `tape`, optionally clamping one activation slot to a leaf.
/// Returns `(p_mean_var, clamp_leaf)`.
#[allow(clippy::too_many_arguments)]
fn sequence_prob_on_tape(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    seq: &PreparedSequence,
    layer: usize,
    clamp: Option<(usize, ClampKind)>,
    weight_per_target: f64,
) -> Result<(Var, Option<Var>)> {
    let input = tape.constant(&seq.input);
    let positions: Vec<usize> = (0..seq.input.rows()).collect();
    let pos_emb = tape.gather(bound.get(slot::POS_EMB), &positions);
    let mut x = tape.add(input, pos_emb);

    let mut leaf = None;
    for l in 0..model.cfg.n_layers {
        let h = model.attention_half(tape, bound, l, x);
        let (act, out) = if l == layer {
            if let Some((pos, kind)) = &clamp {
                let ln2 = tape.layer_norm(
                    h,
                    bound.layer(l, slot::LN2_G),
                    bound.layer(l, slot::LN2_B),
                    crate::model::LAYER_NORM_EPS,
                );
                let pre = tape.matmul(ln2, bound.layer(l, slot::W_IN));
                let pre = tape.add_row(pre, bound.layer(l, slot::B_IN));
                let act = tape.gelu(pre);
                let ClampKind::Entry { neuron, value } = kind;
                let lf = tape.leaf(1, 1, vec![*value]);
                leaf = Some(lf);
                let act = tape.override_entries(act, vec![(*pos, *neuron, lf)]);
                let out = model.ffn_output_half(tape, bound, l, h, act);
                (act, out)
            } else {
                model.ffn_half(tape, bound, l, h, &[])
            }
        } else {
            model.ffn_half(tape, bound, l, h, &[])
        };
        let _ = act;
        x = out;
    }
    let hidden = model.final_norm(tape, bound, x);

    let emb = bound.get(slot::TOKEN_EMB);
    let mut parts = Vec::with_capacity(seq.targets.len());
    for &(p, y) in &seq.targets {
        let h_row = tape.gather(hidden, &[p]);
        let scores = tape.matmul_bt(emb, h_row);
        let prob = tape.target_prob(scores, y);
        parts.push((prob, weight_per_target));
    }
    Ok((tape.weighted_sum(parts), leaf))
}

enum ClampKind {
    Entry { neuron: usize, value: f64 },
}

/// Probability of producing the correct response: the full-softmax
/// decoding probability of the gold token at each prediction position,
/// averaged over every target in the batch, optionally under a one-neuron
/// clamp applied at each sequence's prediction position.
pub fn correct_response_prob(
    model: &Model,
    batch: &[PreparedSequence],
    clamp: Option<&NeuronClamp>,
) -> Result<f64> {
    check_batch(model, batch)?;
    if let Some(c) = clamp {
        if c.layer >= model.cfg.n_layers || c.neuron >= model.cfg.ffn_dim {
            return Err(Error::IndexOutOfRange(format!(
                "clamp layer {} neuron {}",
                c.layer, c.neuron
            )));
        }
        if let ClampValues::PerSequence(v) = &c.values {
            if v.len() != batch.len() {
                return Err(Error::shape("correct_response_prob", "one clamp value per sequence"));
            }
        }
    }
    let total: usize = batch.iter().map(|s| s.targets.len()).sum();
    let w = 1.0 / total as f64;
    let mut p = 0.0;
    for (si, seq) in batch.iter().enumerate() {
        if seq.targets.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let clamp_arg = clamp.map(|c| {
            let value = match &c.values {
                ClampValues::Shared(v) => *v,
                ClampValues::PerSequence(vs) => vs[si],
            };
            (
                c.layer,
                seq.clamp_position().expect("non-empty targets"),
                ClampKind::Entry { neuron: c.neuron, value },
            )
        });
        let (pv, _) = match clamp_arg {
            Some((layer, pos, kind)) => {
                sequence_prob_on_tape(model, &mut tape, &bound, seq, layer, Some((pos, kind)), w)?
            }
            None => sequence_prob_on_tape(model, &mut tape, &bound, seq, 0, None, w)?,
        };
        p += tape.scalar_value(pv);
    }
    Ok(p)
}

/// Baseline activations at each sequence's prediction position:
/// `out[seq][layer][neuron]`.
pub fn baseline_activations(
    model: &Model,
    batch: &[PreparedSequence],
) -> Result<Vec<Vec<Vec<f64>>>> {
    check_batch(model, batch)?;
    batch
        .iter()
        .map(|seq| {
            let enc = model.encode(&seq.input, &[])?;
            let pos = seq.clamp_position().unwrap_or(0);
            Ok(enc.ffn_activations.iter().map(|a| a.row(pos).to_vec()).collect())
        })
        .collect()
}

/// Reference per-neuron attribution (Riemann sum over single-coordinate
/// clamps): `(v/m) * sum_k dP(k v / m)/dv`, averaged over the batch.
pub fn neuron_attribution(
    model: &Model,
    batch: &[PreparedSequence],
    layer: usize,
    neuron: usize,
    m: usize,
) -> Result<f64> {
    if m < 1 {
        return Err(Error::InvalidArgument("riemann steps must be >= 1".into()));
    }
    if layer >= model.cfg.n_layers || neuron >= model.cfg.ffn_dim {
        return Err(Error::IndexOutOfRange(format!("layer {layer} neuron {neuron}")));
    }
    check_batch(model, batch)?;
    let baselines = baseline_activations(model, batch)?;
    let mut total = 0.0;
    let mut counted = 0usize;
    for (seq, base) in batch.iter().zip(&baselines) {
        let Some(pos) = seq.clamp_position() else { continue };
        counted += 1;
        let v_bar = base[layer][neuron];
        if v_bar == 0.0 {
            continue;
        }
        let w = 1.0 / seq.targets.len() as f64;
        let mut grad_sum = 0.0;
        for k in 1..=m {
            let value = v_bar * k as f64 / m as f64;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let (pv, leaf) = sequence_prob_on_tape(
                model,
                &mut tape,
                &bound,
                seq,
                layer,
                Some((pos, ClampKind::Entry { neuron, value })),
                w,
            )?;
            tape.backward(pv)?;
            grad_sum += leaf.and_then(|l| tape.grad(l)).map(|g| g[0]).unwrap_or(0.0);
        }
        total += v_bar / m as f64 * grad_sum;
    }
    Ok(total / counted.max(1) as f64)
}

/// Production attribution: for each layer and Riemann step, one forward
/// with the whole activation row at the prediction position clamped to
/// `(k/m) * baseline`, and one backward yielding every neuron's gradient
/// of that sequence's correct-response probability at once.
pub fn attribution_table(
    model: &Model,
    batch: &[PreparedSequence],
    m: usize,
) -> Result<AttributionTable> {
    if m < 1 {
        return Err(Error::InvalidArgument("riemann steps must be >= 1".into()));
    }
    check_batch(model, batch)?;
    let n_layers = model.cfg.n_layers;
    let d_ff = model.cfg.ffn_dim;
    let mut layers = vec![
        LayerAttribution { baseline: vec![0.0; d_ff], score: vec![0.0; d_ff] };
        n_layers
    ];
    let mut counted = 0usize;

    for seq in batch {
        let Some(pos) = seq.clamp_position() else { continue };
        counted += 1;
        let w = 1.0 / seq.targets.len() as f64;

        // Baseline forward once; keep the per-layer stream and residual
        // values so each (layer, alpha) pass re-runs only the layers above.
        let mut base_tape = Tape::new();
        let base_bound = model.bind(&mut base_tape, false);
        let input = base_tape.constant(&seq.input);
        let record = model.forward_on_tape(&mut base_tape, &base_bound, input, &[])?;
        let stream_vals: Vec<Tensor> =
            record.stream.iter().map(|&v| base_tape.value_tensor(v)).collect();
        let residual_rows: Vec<Vec<f64>> = record
            .attn_residual
            .iter()
            .map(|&v| {
                let (_, c) = base_tape.shape(v);
                base_tape.value(v)[pos * c..(pos + 1) * c].to_vec()
            })
            .collect();
        let act_rows: Vec<Vec<f64>> = record
            .ffn_acts
            .iter()
            .map(|&v| {
                let (_, c) = base_tape.shape(v);
                base_tape.value(v)[pos * c..(pos + 1) * c].to_vec()
            })
            .collect();
        drop(base_tape);

        for l in 0..n_layers {
            let v_bar = &act_rows[l];
            for (b, v) in layers[l].baseline.iter_mut().zip(v_bar) {
                *b += v;
            }
            if v_bar.iter().all(|&v| v == 0.0) {
                continue;
            }
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let x_next_base = tape.constant(&stream_vals[l + 1]);
            let h_row = tape.constant_vec(1, model.cfg.hidden_dim, residual_rows[l].clone());
            let mark = tape.mark();
            let mut grad_acc = vec![0.0; d_ff];
            for k in 1..=m {
                tape.rollback(mark);
                let alpha = k as f64 / m as f64;
                let clamped: Vec<f64> = v_bar.iter().map(|v| v * alpha).collect();
                let leaf = tape.leaf(1, d_ff, clamped);
                // patch only the prediction row of the next stream value:
                // x_next[pos] = h_row + leaf W_out + b_out
                let row_ffn = tape.matmul(leaf, bound.layer(l, slot::W_OUT));
                let row_ffn = tape.add_row(row_ffn, bound.layer(l, slot::B_OUT));
                let x_row = tape.add(row_ffn, h_row);
                let x_next = tape.override_rows(x_next_base, vec![(pos, x_row)]);
                let hidden = model.forward_tail(&mut tape, &bound, l + 1, x_next);
                let emb = bound.get(slot::TOKEN_EMB);
                let mut parts = Vec::with_capacity(seq.targets.len());
                for &(p, y) in &seq.targets {
                    let h_t = tape.gather(hidden, &[p]);
                    let scores = tape.matmul_bt(emb, h_t);
                    let prob = tape.target_prob(scores, y);
                    parts.push((prob, w));
                }
                let p_mean = tape.weighted_sum(parts);
                tape.backward(p_mean)?;
                if let Some(g) = tape.grad(leaf) {
                    for (acc, gv) in grad_acc.iter_mut().zip(g) {
                        *acc += gv;
                    }
                }
            }
            for i in 0..d_ff {
                layers[l].score[i] += v_bar[i] / m as f64 * grad_acc[i];
            }
        }
    }

    let denom = counted.max(1) as f64;
    for layer in layers.iter_mut() {
        for v in layer.baseline.iter_mut() {
            *v /= denom;
        }
        for v in layer.score.iter_mut() {
            *v /= denom;
        }
    }
    Ok(AttributionTable { riemann_steps: m, layers })
}

// ── Path selection and masks ─────────────────────────────────────────

/// Selects the top `ceil(p * d_ff)` intermediate neurons per layer by
/// attribution score (ties toward the lower index); input- and
/// output-side path members are the coordinates reachable from the
/// selected neurons through nonzero weights.
pub fn select_paths(
    table: &AttributionTable,
    select_fraction: f64,
    params: &ModelParams,
) -> Result<KnowledgePath> {
    if !(0.0..=1.0).contains(&select_fraction) || select_fraction == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "selection fraction must be in (0,1], got {select_fraction}"
        )));
    }
    if table.layers.is_empty() {
        return Err(Error::InvalidArgument("empty attribution table".into()));
    }
    let d_ff = table.layers[0].score.len();
    let keep = ((select_fraction * d_ff as f64).ceil() as usize).clamp(1, d_ff);
    let layers = table
        .layers
        .iter()
        .enumerate()
        .map(|(l, attr)| {
            let mut order: Vec<usize> = (0..d_ff).collect();
            order.sort_by(|&a, &b| {
                attr.score[b].total_cmp(&attr.score[a]).then(a.cmp(&b))
            });
            let mut inter: Vec<usize> = order.into_iter().take(keep).collect();
            inter.sort_unstable();
            let w_in = params.layer(l, slot::W_IN);
            let w_out = params.layer(l, slot::W_OUT);
            let d1 = w_in.rows();
            let input: Vec<usize> = (0..d1)
                .filter(|&c| inter.iter().any(|&j| w_in.at(c, j) != 0.0))
                .collect();
            let output: Vec<usize> = (0..d1)
                .filter(|&c| inter.iter().any(|&j| w_out.at(j, c) != 0.0))
                .collect();
            LayerPath { input, inter, output }
        })
        .collect();
    Ok(KnowledgePath { layers })
}

impl GradientMask {
    /// Mask with every maskable FFN entry enabled (selective update off).
    pub fn full(n_layers: usize, hidden: usize, ffn: usize) -> Self {
        let layers = (0..n_layers)
            .map(|_| LayerMask {
                w_in: vec![true; hidden * ffn],
                b_in: vec![true; ffn],
                w_out: vec![true; ffn * hidden],
                b_out: vec![true; hidden],
            })
            .collect();
        GradientMask { layers, coverage_fraction: 1.0 }
    }
}

/// Builds the gradient mask induced by a knowledge path: for each selected
/// intermediate neuron `j`, column `j` of `w_in`, entry `j` of `b_in` and
/// row `j` of `w_out` update; everything else in the FFN stays frozen.
pub fn build_mask(path: &KnowledgePath, hidden: usize, ffn: usize) -> Result<GradientMask> {
    let mut true_entries = 0usize;
    let mut layers = Vec::with_capacity(path.layers.len());
    for lp in &path.layers {
        let mut lm = LayerMask {
            w_in: vec![false; hidden * ffn],
            b_in: vec![false; ffn],
            w_out: vec![false; ffn * hidden],
            b_out: vec![false; hidden],
        };
        for &j in &lp.inter {
            if j >= ffn {
                return Err(Error::IndexOutOfRange(format!("neuron {j} out of {ffn}")));
            }
            for c in 0..hidden {
                lm.w_in[c * ffn + j] = true;
            }
            lm.b_in[j] = true;
            for c in 0..hidden {
                lm.w_out[j * hidden + c] = true;
            }
            true_entries += 2 * hidden + 1;
        }
        layers.push(lm);
    }
    let denom = path.layers.len() * (hidden * ffn + ffn + ffn * hidden);
    let coverage_fraction = if denom == 0 { 0.0 } else { true_entries as f64 / denom as f64 };
    Ok(GradientMask { layers, coverage_fraction })
}

/// Expands a gradient mask and non-FFN policy into a full parameter mask.
pub fn expand_mask(
    mask: &GradientMask,
    params: &ModelParams,
    policy: NonFfnPolicy,
) -> Result<ParamMask> {
    let n = params.tensors().len();
    let expected = (n - crate::model::GLOBAL_SLOTS) / crate::model::LAYER_SLOTS;
    if mask.layers.len() != expected {
        return Err(Error::shape("expand_mask", "mask layer count != model layers"));
    }
    let mut slots: Vec<Option<Vec<bool>>> = match policy {
        NonFfnPolicy::Full => vec![None; n],
        NonFfnPolicy::Freeze => {
            params.tensors().iter().map(|t| Some(vec![false; t.len()])).collect()
        }
    };
    for (l, lm) in mask.layers.iter().enumerate() {
        slots[slot::layer(l, slot::W_IN)] = Some(lm.w_in.clone());
        slots[slot::layer(l, slot::B_IN)] = Some(lm.b_in.clone());
        slots[slot::layer(l, slot::W_OUT)] = Some(lm.w_out.clone());
        slots[slot::layer(l, slot::B_OUT)] = Some(lm.b_out.clone());
    }
    Ok(ParamMask { slots })
}

/// One selective optimizer step: FFN parameters update only inside the
/// mask; non-FFN parameters follow `policy`.
pub fn masked_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    opt: &mut Sgd,
    mask: &GradientMask,
    policy: NonFfnPolicy,
) -> Result<()> {
    let pm = expand_mask(mask, params, policy)?;
    opt.step(params.tensors_mut(), grads, Some(&pm))
}

/// Attribution dump rows: step, layer, neuron, baseline, score, selected.
pub fn write_attribution_csv(
    w: &mut impl Write,
    step: usize,
    table: &AttributionTable,
    path: &KnowledgePath,
) -> Result<()> {
    writeln!(w, "step,layer,neuron,baseline_activation,attr_score,selected")?;
    for (l, attr) in table.layers.iter().enumerate() {
        let selected: std::collections::HashSet<usize> =
            path.layers[l].inter.iter().copied().collect();
        for i in 0..attr.score.len() {
            writeln!(
                w,
                "{step},{l},{i},{},{},{}",
                attr.baseline[i],
                attr.score[i],
                selected.contains(&i) as u8
            )?;
        }
    }
    Ok(())
}
