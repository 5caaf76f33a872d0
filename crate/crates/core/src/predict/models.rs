//! The four arrival-time regressors: parameter initialization, closed-form
//! parameter counts, and tape-graph construction for batched forwards.
//!
//! All four end in a single linear head producing one scalar per window;
//! nothing clamps the output, negative predictions are allowed here.

use super::tape::{NodeId, Tape};
use super::{ModelConfig, PredictError};
use crate::linalg::Mat;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Feedforward,
    Lstm,
    Gru,
    Attention,
}

pub const ALL_ARCHITECTURES: [Architecture; 4] = [
    Architecture::Feedforward,
    Architecture::Lstm,
    Architecture::Gru,
    Architecture::Attention,
];

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Architecture::Feedforward => "feedforward",
            Architecture::Lstm => "lstm",
            Architecture::Gru => "gru",
            Architecture::Attention => "attention",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "feedforward" => Ok(Architecture::Feedforward),
            "lstm" => Ok(Architecture::Lstm),
            "gru" => Ok(Architecture::Gru),
            "attention" => Ok(Architecture::Attention),
            _ => Err(format!("unknown architecture {s:?}")),
        }
    }
}

/// Named parameter matrices in a fixed order; the order pairs them with
/// optimizer state and tape leaves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<(String, Mat)>,
}

impl ParamSet {
    fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    fn push(&mut self, name: String, mat: Mat) {
        debug_assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate parameter {name}"
        );
        self.entries.push((name, mat));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn mats(&self) -> impl Iterator<Item = &Mat> {
        self.entries.iter().map(|(_, m)| m)
    }

    pub fn mats_mut(&mut self) -> impl Iterator<Item = &mut Mat> {
        self.entries.iter_mut().map(|(_, m)| m)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.len()).sum()
    }
}

/// Parameters materialized as tape leaves for one graph build.
pub struct BoundParams {
    pub ids: Vec<NodeId>,
    index: BTreeMap<String, usize>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &ParamSet) -> Self {
        let mut ids = Vec::with_capacity(params.entries.len());
        let mut index = BTreeMap::new();
        for (i, (name, mat)) in params.entries.iter().enumerate() {
            ids.push(tape.leaf(mat.clone()));
            index.insert(name.clone(), i);
        }
        BoundParams { ids, index }
    }

    fn get(&self, name: &str) -> NodeId {
        self.ids[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-limit..limit))
}

fn dense(params: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) {
    params.push(format!("{name}.w"), xavier(rng, d_in, d_out));
    params.push(format!("{name}.b"), Mat::zeros(1, d_out));
}

fn layer_norm(params: &mut ParamSet, name: &str, dim: usize) {
    params.push(format!("{name}.g"), Mat::from_fn(1, dim, |_, _| 1.0));
    params.push(format!("{name}.b"), Mat::zeros(1, dim));
}

const LSTM_GATES: [&str; 4] = ["i", "f", "g", "o"];
const GRU_GATES: [&str; 3] = ["z", "r", "n"];

/// Seeded Xavier-uniform initialization. Biases start at zero except LSTM
/// forget gates (one) and layer-norm gains (one).
pub fn init_params(config: &ModelConfig) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamSet::new();
    let d = config.input_dim;
    match config.architecture {
        Architecture::Feedforward => {
            let mut prev = config.window * d;
            for (i, &width) in config.ff_widths.iter().enumerate() {
                dense(&mut params, &mut rng, &format!("ff{i}"), prev, width);
                prev = width;
            }
            dense(&mut params, &mut rng, "head", prev, 1);
        }
        Architecture::Lstm => {
            let h = config.rnn_hidden;
            let mut d_in = d;
            for l in 0..config.rnn_layers {
                for gate in LSTM_GATES {
                    params.push(format!("lstm{l}.w{gate}"), xavier(&mut rng, d_in, h));
                    params.push(format!("lstm{l}.u{gate}"), xavier(&mut rng, h, h));
                    let bias = if gate == "f" {
                        Mat::from_fn(1, h, |_, _| 1.0)
                    } else {
                        Mat::zeros(1, h)
                    };
                    params.push(format!("lstm{l}.b{gate}"), bias);
                }
                d_in = h;
            }
            dense(&mut params, &mut rng, "head", h, 1);
        }
        Architecture::Gru => {
            let h = config.rnn_hidden;
            let mut d_in = d;
            for l in 0..config.rnn_layers {
                for gate in GRU_GATES {
                    params.push(format!("gru{l}.w{gate}"), xavier(&mut rng, d_in, h));
                    params.push(format!("gru{l}.u{gate}"), xavier(&mut rng, h, h));
                    params.push(format!("gru{l}.b{gate}"), Mat::zeros(1, h));
                }
                d_in = h;
            }
            dense(&mut params, &mut rng, "head", h, 1);
        }
        Architecture::Attention => {
            let e = config.embed_dim;
            let f = config.ff_inner;
            dense(&mut params, &mut rng, "embed", d, e);
            for l in 0..config.encoder_layers {
                for proj in ["wq", "wk", "wv", "wo"] {
                    dense(&mut params, &mut rng, &format!("enc{l}.{proj}"), e, e);
                }
                layer_norm(&mut params, &format!("enc{l}.ln1"), e);
                dense(&mut params, &mut rng, &format!("enc{l}.ff1"), e, f);
                dense(&mut params, &mut rng, &format!("enc{l}.ff2"), f, e);
                layer_norm(&mut params, &format!("enc{l}.ln2"), e);
            }
            params.push("query".into(), xavier(&mut rng, 1, e));
            for l in 0..config.decoder_layers {
                for proj in ["self_wq", "self_wk", "self_wv", "self_wo"] {
                    dense(&mut params, &mut rng, &format!("dec{l}.{proj}"), e, e);
                }
                layer_norm(&mut params, &format!("dec{l}.ln1"), e);
                for proj in ["cross_wq", "cross_wk", "cross_wv", "cross_wo"] {
                    dense(&mut params, &mut rng, &format!("dec{l}.{proj}"), e, e);
                }
                layer_norm(&mut params, &format!("dec{l}.ln2"), e);
                dense(&mut params, &mut rng, &format!("dec{l}.ff1"), e, f);
                dense(&mut params, &mut rng, &format!("dec{l}.ff2"), f, e);
                layer_norm(&mut params, &format!("dec{l}.ln3"), e);
            }
            dense(&mut params, &mut rng, "head", e, 1);
        }
    }
    params
}

/// Closed-form scalar parameter count for a configuration.
pub fn param_count(config: &ModelConfig) -> usize {
    let d = config.input_dim;
    match config.architecture {
        Architecture::Feedforward => {
            let mut dims = vec![config.window * d];
            dims.extend(&config.ff_widths);
            dims.push(1);
            dims.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
        }
        Architecture::Lstm => {
            let h = config.rnn_hidden;
            let mut total = 0;
            let mut d_in = d;
            for _ in 0..config.rnn_layers {
                total += 4 * (d_in * h + h * h + h);
                d_in = h;
            }
            total + h + 1
        }
        Architecture::Gru => {
            let h = config.rnn_hidden;
            let mut total = 0;
            let mut d_in = d;
            for _ in 0..config.rnn_layers {
                total += 3 * (d_in * h + h * h + h);
                d_in = h;
            }
            total + h + 1
        }
        Architecture::Attention => {
            let e = config.embed_dim;
            let f = config.ff_inner;
            let mha = 4 * (e * e + e);
            let ffn = e * f + f + f * e + e;
            let ln = 2 * e;
            let enc = config.encoder_layers * (mha + 2 * ln + ffn);
            let dec = config.decoder_layers * (2 * mha + 3 * ln + ffn);
            (d * e + e) + enc + e + dec + ffn_head(e)
        }
    }
}

fn ffn_head(e: usize) -> usize {
    e + 1
}

/// Sinusoidal positional encoding, W x E.
pub fn positional_encoding(window: usize, embed: usize) -> Mat {
    Mat::from_fn(window, embed, |pos, j| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / embed as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Batched predictions: either one n x 1 node or one 1 x 1 node per sample.
pub enum PredNodes {
    Batched(NodeId),
    PerSample(Vec<NodeId>),
}

impl PredNodes {
    pub fn values(&self, tape: &Tape) -> Vec<f64> {
        match self {
            PredNodes::Batched(id) => tape.value(*id).as_slice().to_vec(),
            PredNodes::PerSample(ids) => ids.iter().map(|id| tape.scalar(*id)).collect(),
        }
    }
}

/// Build the forward graph for a batch of standardized W x D windows.
pub(super) fn build_predictions(
    tape: &mut Tape,
    config: &ModelConfig,
    bound: &BoundParams,
    batch: &[Mat],
) -> PredNodes {
    match config.architecture {
        Architecture::Feedforward => {
            PredNodes::Batched(feedforward_graph(tape, config, bound, batch))
        }
        Architecture::Lstm => PredNodes::Batched(lstm_graph(tape, config, bound, batch)),
        Architecture::Gru => PredNodes::Batched(gru_graph(tape, config, bound, batch)),
        Architecture::Attention => PredNodes::PerSample(
            batch
                .iter()
                .map(|sample| attention_graph(tape, config, bound, sample))
                .collect(),
        ),
    }
}

/// MSE loss over the batch plus the prediction nodes it was built from.
pub fn build_loss(
    tape: &mut Tape,
    config: &ModelConfig,
    bound: &BoundParams,
    batch: &[Mat],
    targets: &[f64],
) -> (NodeId, PredNodes) {
    assert_eq!(batch.len(), targets.len());
    let preds = build_predictions(tape, config, bound, batch);
    let loss = match &preds {
        PredNodes::Batched(pred) => {
            let t = tape.leaf(Mat::from_vec(targets.len(), 1, targets.to_vec()));
            let diff = tape.sub(*pred, t);
            let sq = tape.square(diff);
            tape.mean_all(sq)
        }
        PredNodes::PerSample(ids) => {
            let mut sum = None;
            for (id, &target) in ids.iter().zip(targets) {
                let t = tape.leaf(Mat::from_vec(1, 1, vec![target]));
                let diff = tape.sub(*id, t);
                let sq = tape.square(diff);
                sum = Some(match sum {
                    None => sq,
                    Some(s) => tape.add(s, sq),
                });
            }
            let total = sum.expect("nonempty batch");
            tape.scale(total, 1.0 / targets.len() as f64)
        }
    };
    (loss, preds)
}

fn dense_layer(tape: &mut Tape, bound: &BoundParams, name: &str, x: NodeId) -> NodeId {
    let w = bound.get(&format!("{name}.w"));
    let b = bound.get(&format!("{name}.b"));
    let h = tape.matmul(x, w);
    tape.add_row(h, b)
}

fn feedforward_graph(
    tape: &mut Tape,
    config: &ModelConfig,
    bound: &BoundParams,
    batch: &[Mat],
) -> NodeId {
    let n = batch.len();
    let flat_dim = config.window * config.input_dim;
    let x = Mat::from_fn(n, flat_dim, |s, j| {
        batch[s].get(j / config.input_dim, j % config.input_dim)
    });
    let mut h = tape.leaf(x);
    for i in 0..config.ff_widths.len() {
        h = dense_layer(tape, bound, &format!("ff{i}"), h);
        h = tape.relu(h);
    }
    dense_layer(tape, bound, "head", h)
}

/// One n x D leaf per timestep.
fn timestep_leaves(tape: &mut Tape, config: &ModelConfig, batch: &[Mat]) -> Vec<NodeId> {
    (0..config.window)
        .map(|t| {
            let x = Mat::from_fn(batch.len(), config.input_dim, |s, j| batch[s].get(t, j));
            tape.leaf(x)
        })
        .collect()
}

fn gate(
    tape: &mut Tape,
    bound: &BoundParams,
    layer: &str,
    g: &str,
    x: NodeId,
    h: NodeId,
) -> NodeId {
    let wx = tape.matmul(x, bound.get(&format!("{layer}.w{g}")));
    let uh = tape.matmul(h, bound.get(&format!("{layer}.u{g}")));
    let s = tape.add(wx, uh);
    tape.add_row(s, bound.get(&format!("{layer}.b{g}")))
}

fn lstm_graph(
    tape: &mut Tape,
    config: &ModelConfig,
    bound: &BoundParams,
    batch: &[Mat],
) -> NodeId {
    let n = batch.len();
    let hdim = config.rnn_hidden;
    let mut seq = timestep_leaves(tape, config, batch);
    let mut last_h = None;
    for l in 0..config.rnn_layers {
        let layer = format!("lstm{l}");
        let mut h = tape.leaf(Mat::zeros(n, hdim));
        let mut c = tape.leaf(Mat::zeros(n, hdim));
        let mut outputs = Vec::with_capacity(seq.len());
        for &x in &seq {
            let i_raw = gate(tape, bound, &layer, "i", x, h);
            let i = tape.sigmoid(i_raw);
            let f_raw = gate(tape, bound, &layer, "f", x, h);
            let f = tape.sigmoid(f_raw);
            let g_raw = gate(tape, bound, &layer, "g", x, h);
            let g = tape.tanh(g_raw);
            let o_raw = gate(tape, bound, &layer, "o", x, h);
            let o = tape.sigmoid(o_raw);
            let fc = tape.mul(f, c);
            let ig = tape.mul(i, g);
            c = tape.add(fc, ig);
            let ct = tape.tanh(c);
            h = tape.mul(o, ct);
            outputs.push(h);
        }
        last_h = Some(h);
        seq = outputs;
    }
    dense_layer(tape, bound, "head", last_h.expect("at least one layer"))
}

fn gru_graph(
    tape: &mut Tape,
    config: &ModelConfig,
    bound: &BoundParams,
    batch: &[Mat],
) -> NodeId {
    let n = batch.len();
    let hdim = config.rnn_hidden;
    let mut seq = timestep_leaves(tape, config, batch);
    let mut last_h = None;
    for l in 0..config.rnn_layers {
        let layer = format!("gru{l}");
        let mut h = tape.leaf(Mat::zeros(n, hdim));
        let mut outputs = Vec::with_capacity(seq.len());
        for &x in &seq {
            let z_raw = gate(tape, bound, &layer, "z", x, h);
            let z = tape.sigmoid(z_raw);
            let r_raw = gate(tape, bound, &layer, "r", x, h);
            let r = tape.sigmoid(r_raw);
            // Candidate: tanh(x Wn + r * (h Un) + bn).
            let wx = tape.matmul(x, bound.get(&format!("{layer}.wn")));
            let uh = tape.matmul(h, bound.get(&format!("{layer}.un")));
            let ruh = tape.mul(r, uh);
            let pre = tape.add(wx, ruh);
            let pre = tape.add_row(pre, bound.get(&format!("{layer}.bn")));
            let cand = tape.tanh(pre);
            // h' = (1 - z) * cand + z * h.
            let zc = tape.mul(z, cand);
            let keep = tape.sub(cand, zc);
            let zh = tape.mul(z, h);
            h = tape.add(keep, zh);
            outputs.push(h);
        }
        last_h = Some(h);
        seq = outputs;
    }
    dense_layer(tape, bound, "head", last_h.expect("at least one layer"))
}

/// Multi-head attention of `q_in` against `kv_in`, heads split by column.
fn multi_head_attention(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    heads: usize,
    q_in: NodeId,
    kv_in: NodeId,
) -> NodeId {
    let e = tape.value(q_in).cols();
    assert_eq!(e % heads, 0, "embed dim must divide into heads");
    let dh = e / heads;
    let q = dense_layer(tape, bound, &format!("{prefix}q"), q_in);
    let k = dense_layer(tape, bound, &format!("{prefix}k"), kv_in);
    let v = dense_layer(tape, bound, &format!("{prefix}v"), kv_in);
    let mut ctx = None;
    for hd in 0..heads {
        let qh = tape.slice_cols(q, hd * dh, dh);
        let kh = tape.slice_cols(k, hd * dh, dh);
        let vh = tape.slice_cols(v, hd * dh, dh);
        let scores = tape.matmul_t(qh, kh);
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax_rows(scores);
        let ctx_h = tape.matmul(attn, vh);
        ctx = Some(match ctx {
            None => ctx_h,
            Some(c) => tape.concat_cols(c, ctx_h),
        });
    }
    dense_layer(tape, bound, &format!("{prefix}o"), ctx.expect("heads >= 1"))
}

fn add_norm(
    tape: &mut Tape,
    bound: &BoundParams,
    name: &str,
    residual: NodeId,
    branch: NodeId,
) -> NodeId {
    let s = tape.add(residual, branch);
    let normed = tape.layer_norm_rows(s);
    let scaled = tape.mul_row(normed, bound.get(&format!("{name}.g")));
    tape.add_row(scaled, bound.get(&format!("{name}.b")))
}

fn feed_forward_block(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    x: NodeId,
) -> NodeId {
    let h = dense_layer(tape, bound, &format!("{prefix}.ff1"), x);
    let h = tape.relu(h);
    dense_layer(tape, bound, &format!("{prefix}.ff2"), h)
}

/// Encoder stack for one sample; exposed for the permutation-equivariance
/// test (positional encoding optional).
pub(super) fn encode_sample(
    tape: &mut Tape,
    config: &ModelConfig,
    bound: &BoundParams,
    sample: &Mat,
    with_positional: bool,
) -> NodeId {
    let x = tape.leaf(sample.clone());
    let mut h = dense_layer(tape, bound, "embed", x);
    if with_positional {
        let pe = tape.leaf(positional_encoding(sample.rows(), config.embed_dim));
        h = tape.add(h, pe);
    }
    for l in 0..config.encoder_layers {
        let attn = multi_head_attention(tape, bound, &format!("enc{l}.w"), config.heads, h, h);
        h = add_norm(tape, bound, &format!("enc{l}.ln1"), h, attn);
        let ffn = feed_forward_block(tape, bound, &format!("enc{l}"), h);
        h = add_norm(tape, bound, &format!("enc{l}.ln2"), h, ffn);
    }
    h
}

fn attention_graph(
    tape: &mut Tape,
    config: &ModelConfig,
    bound: &BoundParams,
    sample: &Mat,
) -> NodeId {
    let memory = encode_sample(tape, config, bound, sample, true);
    let mut y = bound.get("query");
    for l in 0..config.decoder_layers {
        let self_attn =
            multi_head_attention(tape, bound, &format!("dec{l}.self_w"), config.heads, y, y);
        y = add_norm(tape, bound, &format!("dec{l}.ln1"), y, self_attn);
        let cross = multi_head_attention(
            tape,
            bound,
            &format!("dec{l}.cross_w"),
            config.heads,
            y,
            memory,
        );
        y = add_norm(tape, bound, &format!("dec{l}.ln2"), y, cross);
        let ffn = feed_forward_block(tape, bound, &format!("dec{l}"), y);
        y = add_norm(tape, bound, &format!("dec{l}.ln3"), y, ffn);
    }
    dense_layer(tape, bound, "head", y)
}

/// Adam with fixed default moment coefficients; state is kept in parameter
/// order so updates are deterministic.
pub(super) struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamSet) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.mats().map(|m| Mat::zeros(m.rows(), m.cols())).collect(),
            v: params.mats().map(|m| Mat::zeros(m.rows(), m.cols())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<&Mat>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((param, grad), m), v) in params
            .mats_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let Some(grad) = grad else { continue };
            for ((p, &g), (mi, vi)) in param
                .as_mut_slice()
                .iter_mut()
                .zip(grad.as_slice())
                .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice().iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug)]
pub(super) struct DimCheck {
    pub expected_rows: usize,
    pub expected_cols: usize,
}

impl DimCheck {
    pub fn check(&self, features: &Mat) -> Result<(), PredictError> {
        if features.rows() != self.expected_rows || features.cols() != self.expected_cols {
            return Err(PredictError::DimensionMismatch {
                expected_rows: self.expected_rows,
                expected_cols: self.expected_cols,
                got_rows: features.rows(),
                got_cols: features.cols(),
            });
        }
        Ok(())
    }
}
