//! Position-aware embedding of biased short sequences and the weight-shared
//! self-attention encoder that summarizes each of them into one vector.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::corpus::PaddedWindow;
use crate::error::{Error, Result};
use crate::numeric::{AttentionSpec, ParamId, ParamSet, Tape, Tensor, Var};

pub const EMBED_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub n_layers: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub causal: bool,
    pub ffn_residual: bool,
    pub mask_padding: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.n_layers == 0 || self.max_len == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

/// Parameters of one transformer block. Per-head projections are stored as
/// column blocks of the `d×d` matrices `w_q`, `w_k`, `w_v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerIds {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub w_1: ParamId,
    pub b_1: ParamId,
    pub w_2: ParamId,
    pub b_2: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderIds {
    /// `(|I|+1)×d`, row 0 is the frozen zero padding row.
    pub item_emb: ParamId,
    /// `L×d` learnable positions.
    pub pos_emb: ParamId,
    pub layers: Vec<LayerIds>,
}

pub fn normal_init(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("sized buffer")
}

/// Fan-average uniform (Glorot) initialization.
pub fn xavier_init(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("sized buffer")
}

impl EncoderIds {
    pub fn init(params: &mut ParamSet, n_items: usize, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut table = normal_init(rng, n_items + 1, d, EMBED_INIT_STD);
        table.row_mut(0).fill(0.0);
        let item_emb = params.add_with_frozen_rows("item_emb", table, vec![0]);
        let pos_emb = params.add("pos_emb", normal_init(rng, cfg.max_len, d, EMBED_INIT_STD));
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let mut mat = |name: &str, rng: &mut _| params.add(format!("layer{l}.{name}"), xavier_init(rng, d, d));
            let w_q = mat("w_q", rng);
            let w_k = mat("w_k", rng);
            let w_v = mat("w_v", rng);
            let w_o = mat("w_o", rng);
            let w_1 = mat("w_1", rng);
            let w_2 = mat("w_2", rng);
            let mut vec = |name: &str, v: f64| params.add(format!("layer{l}.{name}"), Tensor::full(&[1, d], v));
            layers.push(LayerIds {
                w_q,
                w_k,
                w_v,
                w_o,
                ln1_gamma: vec("ln1_gamma", 1.0),
                ln1_beta: vec("ln1_beta", 0.0),
                w_1,
                b_1: vec("b_1", 0.0),
                w_2,
                b_2: vec("b_2", 0.0),
                ln2_gamma: vec("ln2_gamma", 1.0),
                ln2_beta: vec("ln2_beta", 0.0),
            });
        }
        Ok(Self {
            item_emb,
            pos_emb,
            layers,
        })
    }

    pub fn bind(&self, tape: &mut Tape, params: &ParamSet) -> EncoderVars {
        let mut p = |id| tape.param(params, id);
        let item_emb = p(self.item_emb);
        let pos_emb = p(self.pos_emb);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                w_q: p(l.w_q),
                w_k: p(l.w_k),
                w_v: p(l.w_v),
                w_o: p(l.w_o),
                ln1_gamma: p(l.ln1_gamma),
                ln1_beta: p(l.ln1_beta),
                w_1: p(l.w_1),
                b_1: p(l.b_1),
                w_2: p(l.w_2),
                b_2: p(l.b_2),
                ln2_gamma: p(l.ln2_gamma),
                ln2_beta: p(l.ln2_beta),
            })
            .collect();
        EncoderVars {
            item_emb,
            pos_emb,
            layers,
        }
    }
}

/// Closed-form count of encoder scalars: embeddings plus, per layer, four
/// `d×d` attention projections, the two-layer FFN and two layer norms.
pub fn encoder_param_count(n_items: usize, d: usize, n_layers: usize, max_len: usize) -> usize {
    (n_items + 1) * d + max_len * d + n_layers * (6 * d * d + 6 * d)
}

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub w_1: Var,
    pub b_1: Var,
    pub w_2: Var,
    pub b_2: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub item_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
}

/// Rows `j` of the result are `table[slots[j]] + P[j]`, stacked over windows,
/// with embedding dropout applied on training tapes.
pub fn embed_with_positions(
    tape: &mut Tape,
    table: Var,
    pos: Var,
    windows: &[&PaddedWindow],
    dropout: f64,
) -> Result<Var> {
    let l = tape.value(pos).rows();
    if tape.value(table).cols() != tape.value(pos).cols() {
        return Err(Error::Shape(format!(
            "item width {} vs position width {}",
            tape.value(table).cols(),
            tape.value(pos).cols()
        )));
    }
    let mut idx = Vec::with_capacity(windows.len() * l);
    for w in windows {
        if w.len() != l {
            return Err(Error::Shape(format!("window of {} slots, positions for {l}", w.len())));
        }
        idx.extend_from_slice(&w.slots);
    }
    let rows = tape.gather_rows(table, &idx)?;
    let with_pos = tape.add_tiled(rows, pos)?;
    tape.dropout(with_pos, dropout)
}

fn key_mask(windows: &[&PaddedWindow]) -> Vec<bool> {
    windows
        .iter()
        .flat_map(|w| {
            let pad = w.len() - w.valid_len;
            (0..w.len()).map(move |j| j >= pad)
        })
        .collect()
}

/// Multi-head self-attention projected by `W_o`, before the residual.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: Var,
    layer: &LayerVars,
    cfg: &EncoderConfig,
    key_valid: Option<Vec<bool>>,
) -> Result<Var> {
    let q = tape.matmul(x, layer.w_q)?;
    let k = tape.matmul(x, layer.w_k)?;
    let v = tape.matmul(x, layer.w_v)?;
    let heads = tape.attention(
        q,
        k,
        v,
        AttentionSpec {
            seq_len: cfg.max_len,
            heads: cfg.heads,
            causal: cfg.causal,
            key_valid,
            dropout: cfg.dropout,
        },
    )?;
    tape.matmul(heads, layer.w_o)
}

/// `LayerNorm(x + MHA(x))`.
pub fn attention_block(
    tape: &mut Tape,
    x: Var,
    layer: &LayerVars,
    cfg: &EncoderConfig,
    key_valid: Option<Vec<bool>>,
) -> Result<Var> {
    let att = multi_head_attention(tape, x, layer, cfg, key_valid)?;
    let res = tape.add(x, att)?;
    tape.layer_norm(res, layer.ln1_gamma, layer.ln1_beta)
}

/// Position-wise `GELU(x W_1 + b_1) W_2 + b_2` with output dropout, then
/// residual and layer norm when `cfg.ffn_residual` is set.
pub fn ffn(tape: &mut Tape, x: Var, layer: &LayerVars, cfg: &EncoderConfig) -> Result<Var> {
    let h = tape.matmul(x, layer.w_1)?;
    let h = tape.add_bias(h, layer.b_1)?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, layer.w_2)?;
    let h = tape.add_bias(h, layer.b_2)?;
    let h = tape.dropout(h, cfg.dropout)?;
    if !cfg.ffn_residual {
        return Ok(h);
    }
    let res = tape.add(x, h)?;
    tape.layer_norm(res, layer.ln2_gamma, layer.ln2_beta)
}

/// Run the block stack over a stacked `(N·L)×d` input.
pub fn encode_sequences(
    tape: &mut Tape,
    vars: &EncoderVars,
    x: Var,
    windows: &[&PaddedWindow],
    cfg: &EncoderConfig,
) -> Result<Var> {
    let mask = cfg.mask_padding.then(|| key_mask(windows));
    let mut h = x;
    for layer in &vars.layers {
        h = attention_block(tape, h, layer, cfg, mask.clone())?;
        h = ffn(tape, h, layer, cfg)?;
    }
    Ok(h)
}

/// Encode every window against its own item matrix and return one
/// `(Σ N_v)×d` matrix of last-slot summaries, view after view. Empty windows
/// skip the encoder and yield zero rows.
///
/// All views go through the one parameter set in `vars`; the number of views
/// has no bearing on the parameters.
pub fn encode_views(
    tape: &mut Tape,
    vars: &EncoderVars,
    tables: &[Var],
    windows: &[Vec<&PaddedWindow>],
    cfg: &EncoderConfig,
) -> Result<Var> {
    if tables.len() != windows.len() || tables.is_empty() {
        return Err(Error::Shape(format!(
            "{} tables for {} views",
            tables.len(),
            windows.len()
        )));
    }
    let d = cfg.embed_dim;
    let total: usize = windows.iter().map(Vec::len).sum();

    // Stack distinct tables so that one gather serves every view.
    let shared = tables.iter().all(|&t| t == tables[0]);
    let (table, offsets) = if shared {
        (tables[0], vec![0u32; tables.len()])
    } else {
        let rows = tape.value(tables[0]).rows() as u32;
        let stacked = tape.concat_rows(tables)?;
        (stacked, (0..tables.len() as u32).map(|v| v * rows).collect())
    };

    let mut live: Vec<&PaddedWindow> = Vec::new();
    let mut live_offsets = Vec::new();
    let mut dest = Vec::new();
    let mut row = 0u32;
    for (view, ws) in windows.iter().enumerate() {
        for w in ws {
            if !w.is_empty() {
                live.push(w);
                live_offsets.push(offsets[view]);
                dest.push(row);
            }
            row += 1;
        }
    }
    if live.is_empty() {
        return Ok(tape.constant(Tensor::zeros(&[total, d])));
    }

    let l = cfg.max_len;
    let mut idx = Vec::with_capacity(live.len() * l);
    for (w, &off) in live.iter().zip(&live_offsets) {
        if w.len() != l {
            return Err(Error::Shape(format!("window of {} slots, positions for {l}", w.len())));
        }
        // Padding always reads row 0 of the first table, which is zero.
        idx.extend(w.slots.iter().map(|&s| if s == 0 { 0 } else { s + off }));
    }
    let x = tape.gather_rows(table, &idx)?;
    let x = tape.add_tiled(x, vars.pos_emb)?;
    let x = tape.dropout(x, cfg.dropout)?;
    let h = encode_sequences(tape, vars, x, &live, cfg)?;
    let last: Vec<u32> = (0..live.len() as u32).map(|s| (s + 1) * l as u32 - 1).collect();
    let summary = tape.gather_rows(h, &last)?;
    if live.len() == total {
        return Ok(summary);
    }
    tape.scatter_rows(summary, &dest, total)
}
