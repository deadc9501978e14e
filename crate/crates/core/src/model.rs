//! The mini transformer encoder.
//!
//! Pre-LN blocks: `h = x + Attn(LN1(x))`, `x' = h + FFN(LN2(h))`, with one
//! final layer norm after the last block. The FFN keeps the key-value view
//! the routing module relies on: per position,
//! `ffn_out = W_out^T  * act + b_out` with `act = gelu(W_in^T * ln_x + b_in)`,
//! and every post-activation value `act[position][neuron]` is recorded and
//! individually clampable through an [`Intervention`].
//!
//! Two heads share the token embedding table:
//! * masked-token logits: `logits = (h W_mlm + b_mlm) E^T + b_vocab`,
//! * knowledge decoding: `match_score(h, y) = h . E[y]` (the output
//!   embedding table is tied to the input one).
//!
//! Row 0 of every sequence is the classification token; sentence tokens
//! occupy rows `1..=n`. Positional embeddings are added inside the encoder,
//! so callers hand over token-level input embeddings only.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::{dot, mm, softmax_row};
use crate::numerics::{Tape, Tensor, Var};

/// Layer-norm epsilon used everywhere in the encoder.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Dimension of the knowledge-graph embeddings projected by `w_proj`.
    #[serde(default = "default_kg_dim")]
    pub kg_dim: usize,
    pub seed: u64,
}

fn default_kg_dim() -> usize {
    32
}

impl Default for TransformerConfig {
    /// The desk-scale default: 4 layers, width 64, 4 heads, FFN 256,
    /// vocabulary about 2000, sentences up to 32 tokens.
    fn default() -> Self {
        Self {
            n_layers: 4,
            hidden_dim: 64,
            n_heads: 4,
            ffn_dim: 256,
            vocab_size: 2000,
            max_seq_len: 32,
            kg_dim: 32,
            seed: 0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let all_dims = [
            self.n_layers,
            self.hidden_dim,
            self.n_heads,
            self.ffn_dim,
            self.vocab_size,
            self.max_seq_len,
            self.kg_dim,
        ];
        if all_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig("all model dimensions must be >= 1".into()));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.kg_dim < 2 {
            return Err(Error::InvalidConfig("kg_dim must be >= 2".into()));
        }
        Ok(())
    }

    /// Total learnable scalar count; a pure function of the config.
    pub fn param_count(&self) -> usize {
        ParamLayout::new(self).shapes().iter().map(|&(_, r, c)| r * c).sum()
    }
}

/// Names and shapes of every parameter tensor, in storage order.
pub(crate) struct ParamLayout {
    n_layers: usize,
    hidden: usize,
    ffn: usize,
    vocab: usize,
    max_seq: usize,
    kg_dim: usize,
}

pub(crate) const GLOBAL_SLOTS: usize = 8;
pub(crate) const LAYER_SLOTS: usize = 16;

impl ParamLayout {
    pub fn new(cfg: &TransformerConfig) -> Self {
        Self {
            n_layers: cfg.n_layers,
            hidden: cfg.hidden_dim,
            ffn: cfg.ffn_dim,
            vocab: cfg.vocab_size,
            max_seq: cfg.max_seq_len,
            kg_dim: cfg.kg_dim,
        }
    }

    pub fn shapes(&self) -> Vec<(String, usize, usize)> {
        let d = self.hidden;
        let mut out = vec![
            ("token_emb".into(), self.vocab, d),
            ("pos_emb".into(), self.max_seq + 1, d),
            ("w_proj".into(), self.kg_dim, d),
            ("mlm_w".into(), d, d),
            ("mlm_b".into(), 1, d),
            ("mlm_bias".into(), 1, self.vocab),
            ("ln_f_g".into(), 1, d),
            ("ln_f_b".into(), 1, d),
        ];
        for l in 0..self.n_layers {
            for (name, r, c) in [
                ("wq", d, d),
                ("bq", 1, d),
                ("wk", d, d),
                ("bk", 1, d),
                ("wv", d, d),
                ("bv", 1, d),
                ("wo", d, d),
                ("bo", 1, d),
                ("ln1_g", 1, d),
                ("ln1_b", 1, d),
                ("w_in", d, self.ffn),
                ("b_in", 1, self.ffn),
                ("w_out", self.ffn, d),
                ("b_out", 1, d),
                ("ln2_g", 1, d),
                ("ln2_b", 1, d),
            ] {
                out.push((format!("layer{l}.{name}"), r, c));
            }
        }
        out
    }
}

/// Index helpers shared by [`ModelParams`] and tape bindings.
pub mod slot {
    use super::{GLOBAL_SLOTS, LAYER_SLOTS};

    pub const TOKEN_EMB: usize = 0;
    pub const POS_EMB: usize = 1;
    pub const W_PROJ: usize = 2;
    pub const MLM_W: usize = 3;
    pub const MLM_B: usize = 4;
    pub const MLM_BIAS: usize = 5;
    pub const LN_F_G: usize = 6;
    pub const LN_F_B: usize = 7;

    pub const WQ: usize = 0;
    pub const BQ: usize = 1;
    pub const WK: usize = 2;
    pub const BK: usize = 3;
    pub const WV: usize = 4;
    pub const BV: usize = 5;
    pub const WO: usize = 6;
    pub const BO: usize = 7;
    pub const LN1_G: usize = 8;
    pub const LN1_B: usize = 9;
    pub const W_IN: usize = 10;
    pub const B_IN: usize = 11;
    pub const W_OUT: usize = 12;
    pub const B_OUT: usize = 13;
    pub const LN2_G: usize = 14;
    pub const LN2_B: usize = 15;

    pub fn layer(l: usize, which: usize) -> usize {
        GLOBAL_SLOTS + l * LAYER_SLOTS + which
    }
}

/// All learnable weights, stored as a flat list of named tensors so the
/// optimizer, gradient masks and checkpoints can treat them uniformly.
#[derive(Clone, Debug)]
pub struct ModelParams {
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Random toy initialization: N(0, 0.02) for embeddings and projection
    /// matrices, zeros for biases, ones for layer-norm gains.
    pub fn init(cfg: &TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, 0.02).expect("valid stddev");
        let tensors = ParamLayout::new(cfg)
            .shapes()
            .into_iter()
            .map(|(name, r, c)| {
                let base = name.rsplit('.').next().unwrap_or(&name);
                let data: Vec<f64> = match base {
                    "ln_f_g" | "ln1_g" | "ln2_g" => vec![1.0; r * c],
                    "mlm_b" | "mlm_bias" | "ln_f_b" | "ln1_b" | "ln2_b" | "bq" | "bk" | "bv"
                    | "bo" | "b_in" | "b_out" => vec![0.0; r * c],
                    _ => (0..r * c).map(|_| normal.sample(&mut rng)).collect(),
                };
                Tensor::from_raw(r, c, data)
            })
            .collect();
        Ok(Self { tensors })
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut Vec<Tensor> {
        &mut self.tensors
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn token_emb(&self) -> &Tensor {
        &self.tensors[slot::TOKEN_EMB]
    }

    pub fn w_proj(&self) -> &Tensor {
        &self.tensors[slot::W_PROJ]
    }

    pub fn layer(&self, l: usize, which: usize) -> &Tensor {
        &self.tensors[slot::layer(l, which)]
    }

    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bit_eq(b))
    }
}

/// Forward-only clamp of one post-activation FFN neuron at one sequence
/// position (0 = classification token). Upstream gradients flow through
/// untouched neurons only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intervention {
    pub layer: usize,
    pub position: usize,
    pub neuron: usize,
    pub value: f64,
}

/// Tape handles for every parameter tensor.
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    pub fn layer(&self, l: usize, which: usize) -> Var {
        self.vars[slot::layer(l, which)]
    }
}

/// Values recorded by a taped forward pass, for loss heads, attribution
/// baselines and memory-bank updates.
pub struct ForwardRecord {
    /// `stream[l]` is the residual-stream input of layer `l`;
    /// `stream[n_layers]` is the pre-final-norm output.
    pub stream: Vec<Var>,
    /// Post-attention residual per layer (input to the FFN half).
    pub attn_residual: Vec<Var>,
    /// Post-activation (and post-clamp) FFN values per layer, `[n+1, ffn]`.
    pub ffn_acts: Vec<Var>,
    /// Final hidden states after the last layer norm, `[n+1, hidden]`.
    pub hidden: Var,
}

/// Plain-value outcome of [`Model::encode`].
pub struct EncodedStates {
    /// Final hidden states of the sentence tokens (rows `1..`), `[n, hidden]`.
    pub hidden: Tensor,
    /// Final hidden state of the classification token.
    pub cls: Vec<f64>,
    /// Recorded post-activation FFN values per layer, `[n+1, ffn]`,
    /// row 0 being the classification token.
    pub ffn_activations: Vec<Tensor>,
}

pub struct Model {
    pub cfg: TransformerConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn init(cfg: TransformerConfig) -> Result<Self> {
        let params = ModelParams::init(&cfg)?;
        Ok(Self { cfg, params })
    }

    pub fn new(cfg: TransformerConfig, params: ModelParams) -> Self {
        Self { cfg, params }
    }

    /// Binds every parameter onto `tape` (cheap; storage is shared).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t) } else { tape.constant(t) })
            .collect();
        Bound { vars }
    }

    fn check_interventions(&self, seq_len: usize, interventions: &[Intervention]) -> Result<()> {
        for iv in interventions {
            if iv.layer >= self.cfg.n_layers
                || iv.neuron >= self.cfg.ffn_dim
                || iv.position >= seq_len
            {
                return Err(Error::IndexOutOfRange(format!(
                    "intervention layer {} position {} neuron {}",
                    iv.layer, iv.position, iv.neuron
                )));
            }
        }
        Ok(())
    }

    /// Taped forward pass over prepared token-level input embeddings
    /// (`[n+1, hidden]`, row 0 = classification token). Adds positional
    /// embeddings internally and applies `interventions` as forward-only
    /// clamps on the recorded FFN activations.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: Var,
        interventions: &[Intervention],
    ) -> Result<ForwardRecord> {
        let (rows, cols) = tape.shape(input);
        if cols != self.cfg.hidden_dim {
            return Err(Error::shape("forward", "input width != hidden_dim"));
        }
        if rows == 0 || rows > self.cfg.max_seq_len + 1 {
            return Err(Error::shape("forward", format!("sequence length {rows} out of range")));
        }
        self.check_interventions(rows, interventions)?;

        let positions: Vec<usize> = (0..rows).collect();
        let pos = tape.gather(bound.get(slot::POS_EMB), &positions);
        let mut x = tape.add(input, pos);

        let mut record = ForwardRecord {
            stream: Vec::with_capacity(self.cfg.n_layers + 1),
            attn_residual: Vec::with_capacity(self.cfg.n_layers),
            ffn_acts: Vec::with_capacity(self.cfg.n_layers),
            hidden: x,
        };

        for l in 0..self.cfg.n_layers {
            record.stream.push(x);
            let h = self.attention_half(tape, bound, l, x);
            record.attn_residual.push(h);
            let clamps: Vec<(usize, usize, f64)> = interventions
                .iter()
                .filter(|iv| iv.layer == l)
                .map(|iv| (iv.position, iv.neuron, iv.value))
                .collect();
            let (act, out) = self.ffn_half(tape, bound, l, h, &clamps);
            record.ffn_acts.push(act);
            x = out;
        }
        record.stream.push(x);
        record.hidden = self.final_norm(tape, bound, x);
        Ok(record)
    }

    /// Attention half of layer `l`: `x + Wo * mhsa(LN1(x))`.
    pub(crate) fn attention_half(&self, tape: &mut Tape, bound: &Bound, l: usize, x: Var) -> Var {
        let ln1 = tape.layer_norm(
            x,
            bound.layer(l, slot::LN1_G),
            bound.layer(l, slot::LN1_B),
            LAYER_NORM_EPS,
        );
        let q = tape.matmul(ln1, bound.layer(l, slot::WQ));
        let q = tape.add_row(q, bound.layer(l, slot::BQ));
        let k = tape.matmul(ln1, bound.layer(l, slot::WK));
        let k = tape.add_row(k, bound.layer(l, slot::BK));
        let v = tape.matmul(ln1, bound.layer(l, slot::WV));
        let v = tape.add_row(v, bound.layer(l, slot::BV));
        let ctx = tape.mhsa(q, k, v, self.cfg.n_heads);
        let proj = tape.matmul(ctx, bound.layer(l, slot::WO));
        let proj = tape.add_row(proj, bound.layer(l, slot::BO));
        tape.add(x, proj)
    }

    /// FFN half of layer `l` from the post-attention residual `h`; returns
    /// the (possibly clamped) activation matrix and the layer output.
    pub(crate) fn ffn_half(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        l: usize,
        h: Var,
        clamps: &[(usize, usize, f64)],
    ) -> (Var, Var) {
        let ln2 = tape.layer_norm(
            h,
            bound.layer(l, slot::LN2_G),
            bound.layer(l, slot::LN2_B),
            LAYER_NORM_EPS,
        );
        let pre = tape.matmul(ln2, bound.layer(l, slot::W_IN));
        let pre = tape.add_row(pre, bound.layer(l, slot::B_IN));
        let mut act = tape.gelu(pre);
        if !clamps.is_empty() {
            let entries: Vec<(usize, usize, Var)> = clamps
                .iter()
                .map(|&(pos, neuron, value)| (pos, neuron, tape.constant_vec(1, 1, vec![value])))
                .collect();
            act = tape.override_entries(act, entries);
        }
        let out = self.ffn_output_half(tape, bound, l, h, act);
        (act, out)
    }

    /// Output side of the FFN half: `h + act W_out + b_out`.
    pub(crate) fn ffn_output_half(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        l: usize,
        h: Var,
        act: Var,
    ) -> Var {
        let out = tape.matmul(act, bound.layer(l, slot::W_OUT));
        let out = tape.add_row(out, bound.layer(l, slot::B_OUT));
        tape.add(h, out)
    }

    pub(crate) fn final_norm(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        tape.layer_norm(x, bound.get(slot::LN_F_G), bound.get(slot::LN_F_B), LAYER_NORM_EPS)
    }

    /// Runs layers `from..n_layers` plus the final norm from a residual
    /// stream value; used by the attribution sweep.
    pub(crate) fn forward_tail(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        from: usize,
        mut x: Var,
    ) -> Var {
        for l in from..self.cfg.n_layers {
            let h = self.attention_half(tape, bound, l, x);
            let (_, out) = self.ffn_half(tape, bound, l, h, &[]);
            x = out;
        }
        self.final_norm(tape, bound, x)
    }

    /// Plain-value forward: hidden states, classification vector, and the
    /// recorded per-layer FFN activations.
    pub fn encode(
        &self,
        input_embeddings: &Tensor,
        interventions: &[Intervention],
    ) -> Result<EncodedStates> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let input = tape.constant(input_embeddings);
        let record = self.forward_on_tape(&mut tape, &bound, input, interventions)?;
        let hidden_full = tape.value_tensor(record.hidden);
        let rows = hidden_full.rows();
        let d = self.cfg.hidden_dim;
        let cls = hidden_full.row(0).to_vec();
        let sentence = Tensor::from_raw(rows - 1, d, hidden_full.data()[d..].to_vec());
        let ffn_activations = record.ffn_acts.iter().map(|&v| tape.value_tensor(v)).collect();
        Ok(EncodedStates { hidden: sentence, cls, ffn_activations })
    }

    /// Token-level input embeddings for raw ids (no injection, no memory),
    /// `[len, hidden]`. Ids must include the classification token at 0.
    pub fn embed_ids(&self, ids: &[usize]) -> Result<Tensor> {
        let emb = self.params.token_emb();
        let d = self.cfg.hidden_dim;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= self.cfg.vocab_size {
                return Err(Error::IndexOutOfRange(format!("token id {id}")));
            }
            data.extend_from_slice(emb.row(id));
        }
        Ok(Tensor::from_raw(ids.len(), d, data))
    }

    /// Vocabulary logits for one final-layer hidden vector.
    pub fn mlm_logits(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        let d = self.cfg.hidden_dim;
        if hidden.len() != d {
            return Err(Error::shape("mlm_logits", "hidden width != hidden_dim"));
        }
        let mut t = mm(hidden, self.params.get(slot::MLM_W).data(), 1, d, d);
        for (tv, b) in t.iter_mut().zip(self.params.get(slot::MLM_B).data()) {
            *tv += b;
        }
        let emb = self.params.token_emb();
        let bias = self.params.get(slot::MLM_BIAS).data();
        Ok((0..self.cfg.vocab_size).map(|y| dot(&t, emb.row(y)) + bias[y]).collect())
    }

    /// Knowledge-decoding matching function: `f(h, y) = h . E[y]` against the
    /// tied output-embedding table.
    pub fn match_score(&self, hidden: &[f64], token_id: usize) -> Result<f64> {
        if token_id >= self.cfg.vocab_size {
            return Err(Error::IndexOutOfRange(format!("token id {token_id}")));
        }
        if hidden.len() != self.cfg.hidden_dim {
            return Err(Error::shape("match_score", "hidden width != hidden_dim"));
        }
        Ok(dot(hidden, self.params.token_emb().row(token_id)))
    }

    /// Decoding scores for every vocabulary token (tied table).
    pub fn decode_scores(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        if hidden.len() != self.cfg.hidden_dim {
            return Err(Error::shape("decode_scores", "hidden width != hidden_dim"));
        }
        let emb = self.params.token_emb();
        Ok((0..self.cfg.vocab_size).map(|y| dot(hidden, emb.row(y))).collect())
    }

    /// Decoding probability of `token_id` under the full-vocabulary softmax.
    pub fn decode_prob(&self, hidden: &[f64], token_id: usize) -> Result<f64> {
        let mut scores = self.decode_scores(hidden)?;
        if token_id >= scores.len() {
            return Err(Error::IndexOutOfRange(format!("token id {token_id}")));
        }
        softmax_row(&mut scores);
        Ok(scores[token_id])
    }
}

/// Sentence pooling: mean over the (non-padding) sentence rows.
pub fn pooled_representation(hidden: &Tensor) -> Result<Vec<f64>> {
    if hidden.rows() == 0 {
        return Err(Error::InvalidArgument("cannot pool an empty sequence".into()));
    }
    let c = hidden.cols();
    let mut out = vec![0.0; c];
    for row in hidden.data().chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o /= hidden.rows() as f64;
    }
    Ok(out)
}

/// Which vector stands in for the sentence representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    #[default]
    Mean,
    Cls,
}

/// Collects per-parameter gradients off a tape into dense tensors
/// (zeros for parameters the loss never reached).
pub fn collect_grads(tape: &Tape, bound: &Bound, params: &ModelParams) -> Vec<Tensor> {
    params
        .tensors()
        .iter()
        .zip(&bound.vars)
        .map(|(p, &v)| {
            let (r, c) = p.shape();
            match tape.grad(v) {
                Some(g) => Tensor::from_raw(r, c, g.to_vec()),
                None => Tensor::zeros(r, c),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> TransformerConfig {
        TransformerConfig {
            n_layers: 2,
            hidden_dim: 8,
            n_heads: 2,
            ffn_dim: 16,
            vocab_size: 20,
            max_seq_len: 6,
            kg_dim: 4,
            seed: 11,
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_cfg();
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.n_layers = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn param_count_is_pure_function_of_config() {
        let cfg = tiny_cfg();
        let m = Model::init(cfg.clone()).unwrap();
        let total: usize = m.params.tensors().iter().map(|t| t.len()).sum();
        assert_eq!(total, cfg.param_count());
    }

    #[test]
    fn encode_is_deterministic() {
        let m = Model::init(tiny_cfg()).unwrap();
        let input = m.embed_ids(&[0, 3, 5, 7]).unwrap();
        let a = m.encode(&input, &[]).unwrap();
        let b = m.encode(&input, &[]).unwrap();
        assert!(a.hidden.bit_eq(&b.hidden));
        assert_eq!(a.cls, b.cls);
        for (x, y) in a.ffn_activations.iter().zip(&b.ffn_activations) {
            assert!(x.bit_eq(y));
        }
    }

    #[test]
    fn noop_intervention_leaves_output_unchanged() {
        let m = Model::init(tiny_cfg()).unwrap();
        let input = m.embed_ids(&[0, 3, 5, 7]).unwrap();
        let base = m.encode(&input, &[]).unwrap();
        let v = base.ffn_activations[0].at(2, 1);
        let clamped = m
            .encode(&input, &[Intervention { layer: 0, position: 2, neuron: 1, value: v }])
            .unwrap();
        for (a, b) in base.hidden.data().iter().zip(clamped.hidden.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn intervention_locality_below_clamped_layer() {
        let m = Model::init(tiny_cfg()).unwrap();
        let input = m.embed_ids(&[0, 3, 5, 7]).unwrap();
        let base = m.encode(&input, &[]).unwrap();
        let clamped = m
            .encode(&input, &[Intervention { layer: 1, position: 1, neuron: 0, value: 9.0 }])
            .unwrap();
        // layer 0 recordings identical, layer 1 differs exactly at the clamp
        assert!(base.ffn_activations[0].bit_eq(&clamped.ffn_activations[0]));
        assert_eq!(clamped.ffn_activations[1].at(1, 0), 9.0);
    }

    #[test]
    fn out_of_range_intervention_rejected() {
        let m = Model::init(tiny_cfg()).unwrap();
        let input = m.embed_ids(&[0, 3]).unwrap();
        let bad = Intervention { layer: 5, position: 0, neuron: 0, value: 0.0 };
        assert!(m.encode(&input, &[bad]).is_err());
    }

    #[test]
    fn mlm_logits_zero_hidden_zero_head_is_uniform() {
        let mut m = Model::init(tiny_cfg()).unwrap();
        let v = m.cfg.vocab_size;
        for idx in [slot::MLM_W, slot::MLM_B, slot::MLM_BIAS] {
            let (r, c) = m.params.get(idx).shape();
            m.params.tensors_mut()[idx] = Tensor::zeros(r, c);
        }
        let logits = m.mlm_logits(&vec![0.0; m.cfg.hidden_dim]).unwrap();
        let mut p = logits;
        softmax_row(&mut p);
        for pi in p {
            assert!((pi - 1.0 / v as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariance_of_logits() {
        let m = Model::init(tiny_cfg()).unwrap();
        let input = m.embed_ids(&[0, 3, 5]).unwrap();
        let enc = m.encode(&input, &[]).unwrap();
        let logits = m.mlm_logits(enc.hidden.row(1)).unwrap();
        let mut p1 = logits.clone();
        softmax_row(&mut p1);
        let mut p2: Vec<f64> = logits.iter().map(|x| x + 7.3).collect();
        softmax_row(&mut p2);
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn match_score_hand_set_embeddings() {
        let mut m = Model::init(TransformerConfig {
            n_layers: 1,
            hidden_dim: 2,
            n_heads: 1,
            ffn_dim: 4,
            vocab_size: 3,
            max_seq_len: 4,
            kg_dim: 2,
            seed: 0,
        })
        .unwrap();
        m.params.tensors_mut()[slot::TOKEN_EMB] =
            Tensor::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let h = [2.0, 1.0];
        assert_eq!(m.match_score(&h, 0).unwrap(), 2.0);
        assert_eq!(m.match_score(&h, 1).unwrap(), 1.0);
        assert_eq!(m.match_score(&h, 2).unwrap(), 3.0);
        assert!(m.match_score(&h, 3).is_err());
        // zero hidden scores zero everywhere
        assert_eq!(m.match_score(&[0.0, 0.0], 2).unwrap(), 0.0);
        // h equal to an embedding scores its squared norm
        assert_eq!(m.match_score(&[1.0, 1.0], 2).unwrap(), 2.0);
    }

    #[test]
    fn pooling_examples() {
        let single = Tensor::new(1, 2, vec![4.0, -2.0]).unwrap();
        assert_eq!(pooled_representation(&single).unwrap(), vec![4.0, -2.0]);
        let two = Tensor::new(2, 2, vec![1.0, 0.0, 3.0, 0.0]).unwrap();
        assert_eq!(pooled_representation(&two).unwrap(), vec![2.0, 0.0]);
        let swapped = Tensor::new(2, 2, vec![3.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(pooled_representation(&two).unwrap(), pooled_representation(&swapped).unwrap());
        assert!(pooled_representation(&Tensor::zeros(0, 2)).is_err());
    }
}
