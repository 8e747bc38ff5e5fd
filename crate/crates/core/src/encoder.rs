//! Sequence encoders, inner-product scoring and the pointwise losses.
//!
//! Two encoders share one parameter container:
//!
//! * `self_attention`: a causal transformer stack in the SASRec layout:
//!   scaled item embeddings plus learned positions, pre-norm queries,
//!   residual connections, a pointwise feed-forward block and a final layer
//!   norm.
//! * `mean_pool`: the running mean of item embeddings. It has no other
//!   weights, which keeps gradient and mining oracles tractable.
//!
//! Positions are counted from the first non-padding item, so extra
//! left-padding never changes the representation of a valid step.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix};
use crate::Rng;

/// Logistic function, evaluated without overflow for any finite input.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `softplus(x) = ln(1 + e^x)` in a form that neither overflows nor loses the
/// small-`x` tail.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Binary cross entropy of a logit against a label in `[0, 1]`.
///
/// Uses `-y ln σ(x) - (1-y) ln(1-σ(x)) = softplus(x) - y·x`, which is exact
/// for soft labels and stays finite where the two-log form would not.
#[inline]
pub fn bce_loss(logit: f64, label: f64) -> f64 {
    (softplus(logit) - label * logit).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    SelfAttention,
    MeanPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub encoder_kind: EncoderKind,
    /// Score with the input item table instead of a separate output table.
    pub shared_embeddings: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            max_len: 50,
            dropout_rate: 0.2,
            encoder_kind: EncoderKind::SelfAttention,
            shared_embeddings: true,
        }
    }
}

impl EncoderConfig {
    pub fn mean_pool(d_model: usize, max_len: usize) -> Self {
        EncoderConfig {
            d_model,
            n_layers: 1,
            n_heads: 1,
            max_len,
            dropout_rate: 0.0,
            encoder_kind: EncoderKind::MeanPool,
            shared_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.max_len == 0 {
            return Err(Error::Config(
                "d_model, n_heads, n_layers and max_len must be positive".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Init {
    Embedding,
    Xavier,
    Zeros,
    Ones,
}

fn param_specs(cfg: &EncoderConfig, item_count: usize) -> Vec<(String, usize, usize, Init)> {
    let d = cfg.d_model;
    let mut specs = vec![("item_emb".to_string(), item_count + 1, d, Init::Embedding)];
    if !cfg.shared_embeddings {
        specs.push(("out_emb".to_string(), item_count + 1, d, Init::Embedding));
    }
    if cfg.encoder_kind == EncoderKind::SelfAttention {
        specs.push(("pos_emb".to_string(), cfg.max_len, d, Init::Embedding));
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            specs.push((p("attn_ln.gamma"), 1, d, Init::Ones));
            specs.push((p("attn_ln.beta"), 1, d, Init::Zeros));
            for w in ["q", "k", "v", "o"] {
                specs.push((p(&format!("w{w}")), d, d, Init::Xavier));
                specs.push((p(&format!("b{w}")), 1, d, Init::Zeros));
            }
            specs.push((p("ffn_ln.gamma"), 1, d, Init::Ones));
            specs.push((p("ffn_ln.beta"), 1, d, Init::Zeros));
            specs.push((p("w1"), d, d, Init::Xavier));
            specs.push((p("b1"), 1, d, Init::Zeros));
            specs.push((p("w2"), d, d, Init::Xavier));
            specs.push((p("b2"), 1, d, Init::Zeros));
        }
        specs.push(("final_ln.gamma".to_string(), 1, d, Init::Ones));
        specs.push(("final_ln.beta".to_string(), 1, d, Init::Zeros));
    }
    specs
}

/// Normal draw truncated to two standard deviations.
fn truncated_normal(rng: &mut Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let z: f64 = normal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
}

/// All trainable arrays of one encoder, in a fixed order derived from its
/// configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    params: Vec<Param>,
    item_count: usize,
}

impl ModelParams {
    pub fn init(cfg: &EncoderConfig, item_count: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let params = param_specs(cfg, item_count)
            .into_iter()
            .map(|(name, rows, cols, init)| {
                let mut m = Matrix::zeros(rows, cols);
                match init {
                    Init::Zeros => {}
                    Init::Ones => m.data_mut().iter_mut().for_each(|x| *x = 1.0),
                    Init::Embedding => {
                        m.data_mut()
                            .iter_mut()
                            .for_each(|x| *x = truncated_normal(rng, 0.02));
                    }
                    Init::Xavier => {
                        let std = (2.0 / (rows + cols) as f64).sqrt();
                        m.data_mut()
                            .iter_mut()
                            .for_each(|x| *x = truncated_normal(rng, std));
                    }
                }
                if matches!(init, Init::Embedding) && name != "pos_emb" {
                    m.row_mut(0).iter_mut().for_each(|x| *x = 0.0);
                }
                Param { name, value: m }
            })
            .collect();
        Ok(ModelParams { params, item_count })
    }

    /// Rebuilds a parameter set from named arrays, checking names and shapes
    /// against what `cfg` requires.
    pub fn from_arrays(
        cfg: &EncoderConfig,
        item_count: usize,
        arrays: Vec<(String, Matrix)>,
    ) -> Result<Self> {
        let specs = param_specs(cfg, item_count);
        if specs.len() != arrays.len() {
            return Err(Error::Format(format!(
                "expected {} parameter arrays, found {}",
                specs.len(),
                arrays.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for ((name, rows, cols, _), (got_name, value)) in specs.into_iter().zip(arrays) {
            if name != got_name {
                return Err(Error::Format(format!("expected array {name}, found {got_name}")));
            }
            if value.shape() != (rows, cols) {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: (rows, cols),
                    got: value.shape(),
                });
            }
            params.push(Param { name, value });
        }
        Ok(ModelParams { params, item_count })
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn item_embeddings(&self) -> &Matrix {
        &self.params[0].value
    }

    /// Index of the table used for scoring.
    fn output_index(&self) -> usize {
        if self.params.get(1).is_some_and(|p| p.name == "out_emb") {
            1
        } else {
            0
        }
    }

    pub fn output_embeddings(&self) -> &Matrix {
        &self.params[self.output_index()].value
    }

    /// Indices of the tables whose row 0 is the padding row.
    pub fn padded_tables(&self) -> Vec<usize> {
        let mut out = vec![0];
        if self.output_index() == 1 {
            out.push(1);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    pub fn first_non_finite(&self) -> Option<&str> {
        self.params
            .iter()
            .find(|p| !p.value.all_finite())
            .map(|p| p.name.as_str())
    }

    pub fn same_shapes(&self, other: &ModelParams) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn on_tape(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(self.params.iter().map(|p| tape.leaf(p.value.clone())).collect())
    }

    /// `dot(user_rep, output_embedding[item])`.
    pub fn score(&self, user_rep: &[f64], item: usize) -> Result<f64> {
        let table = self.output_embeddings();
        if item >= table.rows() {
            return Err(Error::OutOfVocabulary {
                index: item,
                item_count: self.item_count,
            });
        }
        Ok(dot(user_rep, table.row(item)))
    }
}

/// Tape handles for one [`ModelParams`], in parameter order.
#[derive(Clone, Debug)]
pub struct ParamVars(pub Vec<Var>);

impl ParamVars {
    pub fn output_embeddings(&self, params: &ModelParams) -> Var {
        self.0[params.output_index()]
    }
}

/// Left-padded item sequences, `batch × len`, `0` marking padding.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    pub batch: usize,
    pub len: usize,
    pub items: Vec<usize>,
}

impl SeqBatch {
    /// Right-aligns each sequence in a window of `len`, keeping the most
    /// recent `len` items.
    pub fn from_sequences<S: AsRef<[usize]>>(seqs: &[S], len: usize) -> Self {
        let mut items = vec![0; seqs.len() * len];
        for (b, s) in seqs.iter().enumerate() {
            let s = s.as_ref();
            let keep = &s[s.len().saturating_sub(len)..];
            let start = b * len + len - keep.len();
            items[start..start + keep.len()].copy_from_slice(keep);
        }
        SeqBatch {
            batch: seqs.len(),
            len,
            items,
        }
    }

    pub fn valid(&self) -> Vec<bool> {
        self.items.iter().map(|&i| i != 0).collect()
    }

    pub fn row(&self, b: usize, t: usize) -> usize {
        b * self.len + t
    }
}

/// Encoder output: one `d_model` row per (sequence, step).
#[derive(Clone, Debug, PartialEq)]
pub struct UserRepBatch {
    pub batch: usize,
    pub steps: usize,
    pub values: Matrix,
    pub valid_mask: Vec<bool>,
}

impl UserRepBatch {
    pub fn rep(&self, b: usize, t: usize) -> &[f64] {
        self.values.row(b * self.steps + t)
    }

    /// Representation at the last step of sequence `b`.
    pub fn last(&self, b: usize) -> &[f64] {
        self.rep(b, self.steps - 1)
    }
}

fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut Rng>) -> Var {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let n = tape.value(x).data().len();
            let mask = (0..n)
                .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                .collect();
            tape.mul_const(x, mask)
        }
        _ => x,
    }
}

/// Records the encoder forward pass on `tape`, returning the `(batch·len) ×
/// d_model` representation node. Dropout is active iff `rng` is given.
pub fn forward_on_tape(
    tape: &mut Tape,
    vars: &ParamVars,
    params: &ModelParams,
    cfg: &EncoderConfig,
    batch: &SeqBatch,
    mut rng: Option<&mut Rng>,
) -> Result<Var> {
    if batch.len > cfg.max_len {
        return Err(Error::Config(format!(
            "batch window {} exceeds max_len {}",
            batch.len, cfg.max_len
        )));
    }
    if let Some(&bad) = batch.items.iter().find(|&&i| i > params.item_count) {
        return Err(Error::OutOfVocabulary {
            index: bad,
            item_count: params.item_count,
        });
    }
    let valid = batch.valid();
    let mask: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let mut next = vars.0.iter().copied();
    let item_emb = next.next().expect("item table");
    if !cfg.shared_embeddings {
        next.next();
    }
    let rate = cfg.dropout_rate;

    let emb = tape.gather(item_emb, batch.items.clone());
    match cfg.encoder_kind {
        EncoderKind::MeanPool => {
            let emb = dropout(tape, emb, rate, rng.as_deref_mut());
            Ok(tape.causal_mean(emb, batch.len, valid))
        }
        EncoderKind::SelfAttention => {
            let pos_emb = next.next().expect("position table");
            let mut positions = Vec::with_capacity(batch.items.len());
            for b in 0..batch.batch {
                let mut seen = 0;
                for t in 0..batch.len {
                    if valid[batch.row(b, t)] {
                        positions.push(seen);
                        seen += 1;
                    } else {
                        positions.push(0);
                    }
                }
            }
            let x = tape.scale(emb, (cfg.d_model as f64).sqrt());
            let pos = tape.gather(pos_emb, positions);
            let x = tape.add(x, pos);
            let x = dropout(tape, x, rate, rng.as_deref_mut());
            let mut x = tape.mul_const(x, expand(&mask, cfg.d_model));
            for _ in 0..cfg.n_layers {
                let mut take = || next.next().expect("layer parameter");
                let (ln1_g, ln1_b) = (take(), take());
                let (wq, bq, wk, bk) = (take(), take(), take(), take());
                let (wv, bv, wo, bo) = (take(), take(), take(), take());
                let (ln2_g, ln2_b) = (take(), take());
                let (w1, b1, w2, b2) = (take(), take(), take(), take());

                let qn = tape.layer_norm(x, ln1_g, ln1_b);
                let q = tape.matmul(qn, wq);
                let q = tape.add_row(q, bq);
                let k = tape.matmul(x, wk);
                let k = tape.add_row(k, bk);
                let v = tape.matmul(x, wv);
                let v = tape.add_row(v, bv);
                let a = tape.causal_attention(q, k, v, cfg.n_heads, batch.len, valid.clone());
                let a = tape.matmul(a, wo);
                let a = tape.add_row(a, bo);
                let a = dropout(tape, a, rate, rng.as_deref_mut());
                let h = tape.add(qn, a);
                let h = tape.layer_norm(h, ln2_g, ln2_b);

                let f = tape.matmul(h, w1);
                let f = tape.add_row(f, b1);
                let f = dropout(tape, f, rate, rng.as_deref_mut());
                let f = tape.relu(f);
                let f = tape.matmul(f, w2);
                let f = tape.add_row(f, b2);
                let f = dropout(tape, f, rate, rng.as_deref_mut());
                let h = tape.add(f, h);
                x = tape.mul_const(h, expand(&mask, cfg.d_model));
            }
            let g = next.next().expect("final norm gain");
            let b = next.next().expect("final norm bias");
            let out = tape.layer_norm(x, g, b);
            Ok(tape.mul_const(out, expand(&mask, cfg.d_model)))
        }
    }
}

fn expand(row_mask: &[f64], cols: usize) -> Vec<f64> {
    row_mask
        .iter()
        .flat_map(|&m| std::iter::repeat(m).take(cols))
        .collect()
}

/// Inference-mode encoding (no dropout, no gradients).
pub fn encode(params: &ModelParams, cfg: &EncoderConfig, batch: &SeqBatch) -> Result<UserRepBatch> {
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape);
    let out = forward_on_tape(&mut tape, &vars, params, cfg, batch, None)?;
    Ok(UserRepBatch {
        batch: batch.batch,
        steps: batch.len,
        values: tape.value(out).clone(),
        valid_mask: batch.valid(),
    })
}

/// Representation after the last item of each sequence.
pub fn encode_last<S: AsRef<[usize]>>(
    params: &ModelParams,
    cfg: &EncoderConfig,
    seqs: &[S],
) -> Result<Matrix> {
    let batch = SeqBatch::from_sequences(seqs, cfg.max_len);
    let reps = encode(params, cfg, &batch)?;
    let mut out = Matrix::zeros(seqs.len(), cfg.d_model);
    for b in 0..seqs.len() {
        out.row_mut(b).copy_from_slice(reps.last(b));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    fn attention_cfg() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_len: 6,
            dropout_rate: 0.0,
            encoder_kind: EncoderKind::SelfAttention,
            shared_embeddings: true,
        }
    }

    #[test]
    fn sigmoid_reference_points() {
        assert_eq!(sigmoid(0.0), 0.5);
        for &x in &[-30.0, -2.5, -1e-3, 0.7, 4.0, 36.0, 499.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() <= 1e-12);
        }
        let tiny = sigmoid(-500.0);
        assert!(tiny.is_finite() && tiny > 0.0 && tiny <= 1e-100);
        // e^-500 = 7.124576406741286e-218, so σ(-500) agrees with it to
        // relative precision 1e-200.
        assert!((tiny / 7.124_576_406_741_286e-218 - 1.0).abs() < 1e-12);
        assert_eq!(sigmoid(500.0), 1.0);
    }

    #[test]
    fn bce_reference_points() {
        let ln2 = std::f64::consts::LN_2;
        assert!((bce_loss(0.0, 1.0) - ln2).abs() < 1e-15);
        assert!((bce_loss(0.0, 0.5) - ln2).abs() < 1e-15);
        assert!((bce_loss(0.0, 0.0) - ln2).abs() < 1e-15);
        assert!(bce_loss(800.0, 0.0).is_finite());
        assert!(bce_loss(-800.0, 1.0).is_finite());
    }

    proptest! {
        #[test]
        // |x| <= 15 keeps 1 - σ(x) >= 3e-7, where the two-log form itself is
        // accurate to well below 1e-9.
        fn bce_matches_naive_formula(x in -15.0f64..15.0, y in 0.0f64..=1.0) {
            let s = 1.0 / (1.0 + (-x).exp());
            let naive = -y * s.ln() - (1.0 - y) * (1.0 - s).ln();
            prop_assume!(naive.is_finite());
            prop_assert!((bce_loss(x, y) - naive).abs() <= 1e-9);
        }

        #[test]
        fn score_is_homogeneous(a in -5.0f64..5.0, seed in 0u64..1000) {
            let cfg = EncoderConfig::mean_pool(6, 4);
            let params = ModelParams::init(&cfg, 9, &mut rng(seed)).unwrap();
            let u: Vec<f64> = (0..6).map(|i| (i as f64 + seed as f64).sin()).collect();
            let au: Vec<f64> = u.iter().map(|x| a * x).collect();
            let item = (seed % 9) as usize + 1;
            let lhs = params.score(&au, item).unwrap();
            let rhs = a * params.score(&u, item).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn score_self_and_orthogonal() {
        let cfg = EncoderConfig::mean_pool(3, 4);
        let mut params = ModelParams::init(&cfg, 3, &mut rng(1)).unwrap();
        let emb = params.get_mut("item_emb").unwrap();
        emb.row_mut(1).copy_from_slice(&[1.0, 0.0, 0.0]);
        emb.row_mut(2).copy_from_slice(&[0.0, 2.0, 0.0]);
        assert_eq!(params.score(&[1.0, 0.0, 0.0], 1).unwrap(), 1.0);
        assert_eq!(params.score(&[1.0, 0.0, 0.0], 2).unwrap(), 0.0);
        assert!(matches!(
            params.score(&[1.0, 0.0, 0.0], 4),
            Err(Error::OutOfVocabulary { .. })
        ));
    }

    #[test]
    fn score_matches_scalar_loop() {
        let cfg = attention_cfg();
        let params = ModelParams::init(&cfg, 20, &mut rng(3)).unwrap();
        let mut r = rng(4);
        for _ in 0..200 {
            let u: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
            let item = r.gen_range(1..=20);
            let mut expect = 0.0;
            for (c, &uc) in u.iter().enumerate() {
                expect += uc * params.item_embeddings().get(item, c);
            }
            assert!((params.score(&u, item).unwrap() - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn mean_pool_is_running_mean() {
        let cfg = EncoderConfig::mean_pool(4, 3);
        let params = ModelParams::init(&cfg, 5, &mut rng(2)).unwrap();
        let reps = encode(&params, &cfg, &SeqBatch::from_sequences(&[vec![2, 5]], 3)).unwrap();
        let e = params.item_embeddings();
        assert_eq!(reps.rep(0, 1), e.row(2));
        for c in 0..4 {
            assert!((reps.rep(0, 2)[c] - (e.get(2, c) + e.get(5, c)) / 2.0).abs() < 1e-15);
        }
        assert!(reps.rep(0, 0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_is_causal() {
        let cfg = attention_cfg();
        let params = ModelParams::init(&cfg, 30, &mut rng(5)).unwrap();
        let mut r = rng(6);
        for _ in 0..50 {
            let len = r.gen_range(2..=6);
            let seq: Vec<usize> = (0..len).map(|_| r.gen_range(1..=30)).collect();
            let cut = r.gen_range(1..len);
            let mut other = seq.clone();
            for item in other.iter_mut().skip(cut) {
                *item = r.gen_range(1..=30);
            }
            let a = encode(&params, &cfg, &SeqBatch::from_sequences(&[seq.clone()], len)).unwrap();
            let b = encode(&params, &cfg, &SeqBatch::from_sequences(&[other], len)).unwrap();
            for t in 0..cut {
                assert_eq!(a.rep(0, t), b.rep(0, t), "step {t} changed");
            }
        }
    }

    #[test]
    fn left_padding_is_neutral() {
        for cfg in [attention_cfg(), EncoderConfig::mean_pool(8, 6)] {
            let params = ModelParams::init(&cfg, 30, &mut rng(7)).unwrap();
            let seq = vec![4, 17, 9];
            let short = encode(&params, &cfg, &SeqBatch::from_sequences(&[seq.clone()], 3)).unwrap();
            let long = encode(&params, &cfg, &SeqBatch::from_sequences(&[seq], 6)).unwrap();
            for t in 0..3 {
                assert_eq!(short.rep(0, t), long.rep(0, t + 3));
            }
        }
    }

    #[test]
    fn out_of_vocabulary_is_rejected() {
        let cfg = attention_cfg();
        let params = ModelParams::init(&cfg, 10, &mut rng(8)).unwrap();
        let err = encode(&params, &cfg, &SeqBatch::from_sequences(&[vec![3, 11]], 6)).unwrap_err();
        assert!(matches!(err, Error::OutOfVocabulary { index: 11, .. }));
    }

    #[test]
    fn padding_row_starts_at_zero_and_heads_must_divide() {
        let cfg = EncoderConfig {
            shared_embeddings: false,
            ..attention_cfg()
        };
        let params = ModelParams::init(&cfg, 10, &mut rng(9)).unwrap();
        for t in params.padded_tables() {
            assert!(params.params()[t].value.row(0).iter().all(|&v| v == 0.0));
        }
        let bad = EncoderConfig {
            n_heads: 3,
            ..attention_cfg()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
