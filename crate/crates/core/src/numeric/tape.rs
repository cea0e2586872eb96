//! Reverse-mode differentiation over a fixed kernel vocabulary.
//!
//! A [`Tape`] records every kernel application eagerly: values are computed
//! on the spot and the op keeps whatever it needs for its backward rule.
//! [`Tape::backward`] walks the records in reverse and accumulates parameter
//! gradients into a [`ParamSet`].

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::kernels;
use super::params::{ParamId, ParamSet};
use super::sparse::CsrMatrix;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Shape and masking of a batched multi-head attention call.
#[derive(Debug, Clone)]
pub struct AttentionSpec {
    pub seq_len: usize,
    pub heads: usize,
    pub causal: bool,
    /// Per row of the batch, whether that slot may be attended to as a key.
    pub key_valid: Option<Vec<bool>>,
    pub dropout: f64,
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, f64),
    Mean(Vec<Var>),
    Sum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<u32>),
    ScatterRows(Var, Vec<u32>),
    RowScale(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Dropout(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    SpMM(Arc<CsrMatrix>, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
        drop: Option<Vec<f64>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    train: bool,
    rng: ChaCha8Rng,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
    }
    Ok(())
}

impl Tape {
    /// Inference tape: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training tape with its own dropout stream.
    pub fn training(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Param(_) => true,
            Op::Constant => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, &[])
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.push(params.value(id).clone(), Op::Param(id), &[])
    }

    /// `op(a) · op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return shape_err(format!("matmul {m}x{k} by {k2}x{n}"));
        }
        let out = kernels::gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMul { a, b, ta, tb, m, k, n }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::matrix(c, r, out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!("add {:?} + {:?}", self.value(a).shape(), self.value(b).shape()));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Add a length-`cols` bias to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.dims(a);
        if self.value(bias).numel() != c {
            return shape_err(format!("bias of {} for {c} columns", self.value(bias).numel()));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_mut(c) {
            for (x, y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        Ok(self.push(value, Op::AddBias(a, bias), &[a, bias]))
    }

    /// Add `p` (`L×d`) to each consecutive block of `L` rows of `a`.
    pub fn add_tiled(&mut self, a: Var, p: Var) -> Result<Var> {
        let (ar, ac) = self.dims(a);
        let (pr, pc) = self.dims(p);
        if ac != pc || pr == 0 || ar % pr != 0 {
            return shape_err(format!("tile {pr}x{pc} over {ar}x{ac}"));
        }
        let pd = self.value(p).data().to_vec();
        let mut value = self.value(a).clone();
        for block in value.data_mut().chunks_mut(pr * pc) {
            for (x, y) in block.iter_mut().zip(&pd) {
                *x += y;
            }
        }
        Ok(self.push(value, Op::AddTiled(a, p), &[a, p]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let mut value = self.value(a).clone();
        for x in value.data_mut() {
            *x *= factor;
        }
        Ok(self.push(value, Op::Scale(a, factor), &[a]))
    }

    /// Elementwise arithmetic mean `(v_1 + … + v_n) / n`.
    pub fn mean(&mut self, vs: &[Var]) -> Result<Var> {
        let Some(&first) = vs.first() else {
            return shape_err("mean of nothing");
        };
        let shape = self.value(first).shape().to_vec();
        let mut acc = self.value(first).data().to_vec();
        for &v in &vs[1..] {
            if self.value(v).shape() != shape.as_slice() {
                return shape_err("mean over differing shapes");
            }
            for (a, b) in acc.iter_mut().zip(self.value(v).data()) {
                *a += b;
            }
        }
        let n = vs.len() as f64;
        for a in &mut acc {
            *a /= n;
        }
        let value = Tensor::from_vec(&shape, acc)?;
        Ok(self.push(value, Op::Mean(vs.to_vec()), vs))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    pub fn concat_cols(&mut self, vs: &[Var]) -> Result<Var> {
        let Some(&first) = vs.first() else {
            return shape_err("concat of nothing");
        };
        let rows = self.dims(first).0;
        let widths: Vec<usize> = vs.iter().map(|&v| self.dims(v).1).collect();
        if vs.iter().any(|&v| self.dims(v).0 != rows) {
            return shape_err("concat_cols over differing row counts");
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in vs {
                out.extend_from_slice(self.value(v).row(r));
            }
        }
        let value = Tensor::matrix(rows, total, out)?;
        Ok(self.push(value, Op::ConcatCols(vs.to_vec()), vs))
    }

    pub fn concat_rows(&mut self, vs: &[Var]) -> Result<Var> {
        let Some(&first) = vs.first() else {
            return shape_err("concat of nothing");
        };
        let cols = self.dims(first).1;
        if vs.iter().any(|&v| self.dims(v).1 != cols) {
            return shape_err("concat_rows over differing widths");
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for &v in vs {
            rows += self.dims(v).0;
            out.extend_from_slice(self.value(v).data());
        }
        let value = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(value, Op::ConcatRows(vs.to_vec()), vs))
    }

    /// Rows `start..start + count`.
    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + count > r {
            return shape_err(format!("rows {start}..{} of {r}", start + count));
        }
        let data = self.value(a).data()[start * c..(start + count) * c].to_vec();
        let value = Tensor::matrix(count, c, data)?;
        Ok(self.push(value, Op::SliceRows(a, start), &[a]))
    }

    /// Columns `start..start + count`.
    pub fn slice_cols(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + count > c {
            return shape_err(format!("cols {start}..{} of {c}", start + count));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(r * count);
        for i in 0..r {
            out.extend_from_slice(&src.row(i)[start..start + count]);
        }
        let value = Tensor::matrix(r, count, out)?;
        Ok(self.push(value, Op::SliceCols(a, start), &[a]))
    }

    /// Embedding lookup: output row `i` is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: &[u32]) -> Result<Var> {
        let (r, c) = self.dims(a);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            let i = i as usize;
            if i >= r {
                return Err(Error::IndexOutOfRange { index: i, max: r - 1 });
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let value = Tensor::matrix(idx.len(), c, out)?;
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    /// Inverse of a gather: an `n_rows` matrix of zeros with row `idx[i]`
    /// set to row `i` of `a`. Indices must be distinct.
    pub fn scatter_rows(&mut self, a: Var, idx: &[u32], n_rows: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r != idx.len() {
            return shape_err(format!("scatter {r} rows with {} indices", idx.len()));
        }
        let mut out = vec![0.0; n_rows * c];
        for (src, &dst) in idx.iter().enumerate() {
            let dst = dst as usize;
            if dst >= n_rows {
                return Err(Error::IndexOutOfRange {
                    index: dst,
                    max: n_rows - 1,
                });
            }
            out[dst * c..(dst + 1) * c].copy_from_slice(self.value(a).row(src));
        }
        let value = Tensor::matrix(n_rows, c, out)?;
        Ok(self.push(value, Op::ScatterRows(a, idx.to_vec()), &[a]))
    }

    /// Multiply each row `r` of `a` by the scalar `s[r]` (`s` is `rows×1`).
    pub fn row_scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.value(s).numel() != r {
            return shape_err(format!("row scale of {} for {r} rows", self.value(s).numel()));
        }
        let sv = self.value(s).data().to_vec();
        let mut value = self.value(a).clone();
        for (row, f) in value.data_mut().chunks_mut(c).zip(sv) {
            for x in row {
                *x *= f;
            }
        }
        Ok(self.push(value, Op::RowScale(a, s), &[a, s]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.dims(a);
        let mut value = self.value(a).clone();
        kernels::softmax_rows(value.data_mut(), c);
        Ok(self.push(value, Op::Softmax(a), &[a]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return shape_err("layer norm affine width");
        }
        let (y, xhat, inv_std) = kernels::layer_norm(
            self.value(x).data(),
            c,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::matrix(r, c, y)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let mut value = self.value(a).clone();
        for x in value.data_mut() {
            *x = f(*x);
        }
        self.push(value, op, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, kernels::gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, kernels::relu, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    fn dropout_mask(&mut self, n: usize, rate: f64) -> Vec<f64> {
        let keep = 1.0 / (1.0 - rate);
        (0..n)
            .map(|_| if self.rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect()
    }

    /// Inverted dropout; identity on inference tapes or at rate 0.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        check_rate(rate)?;
        if !self.train || rate == 0.0 {
            return Ok(a);
        }
        let mask = self.dropout_mask(self.value(a).numel(), rate);
        let mut value = self.value(a).clone();
        for (x, m) in value.data_mut().iter_mut().zip(&mask) {
            *x *= m;
        }
        Ok(self.push(value, Op::Dropout(a, mask), &[a]))
    }

    /// Mean softmax cross-entropy of each row against its target column.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return shape_err(format!("{} targets for {r} rows", targets.len()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::IndexOutOfRange { index: t, max: c - 1 });
        }
        let mut probs = self.value(logits).data().to_vec();
        kernels::softmax_rows(&mut probs, c);
        let total: f64 = (0..r)
            .map(|i| kernels::cross_entropy(self.value(logits).row(i), targets[i]))
            .sum();
        let value = Tensor::scalar(total / r as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Sparse-dense product `matrix · x`.
    pub fn spmm(&mut self, matrix: Arc<CsrMatrix>, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if matrix.n_cols() != r {
            return shape_err(format!("sparse {}x{} by {r}x{c}", matrix.n_rows(), matrix.n_cols()));
        }
        let out = matrix.matmul_dense(self.value(x).data(), c);
        let value = Tensor::matrix(matrix.n_rows(), c, out)?;
        Ok(self.push(value, Op::SpMM(matrix, x), &[x]))
    }

    /// Batched scaled dot-product attention over `heads` column groups.
    ///
    /// `q`, `k`, `v` are `(N·L)×d` with `N` sequences of `spec.seq_len` rows.
    /// Output has the same layout with heads concatenated along columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        check_rate(spec.dropout)?;
        let (rows, d) = self.dims(q);
        let l = spec.seq_len;
        let h = spec.heads;
        if self.dims(k) != (rows, d) || self.dims(v) != (rows, d) {
            return shape_err("attention q/k/v shapes differ");
        }
        if l == 0 || rows % l != 0 || h == 0 || d % h != 0 {
            return shape_err(format!("attention rows {rows}, seq_len {l}, width {d}, heads {h}"));
        }
        if spec.key_valid.as_ref().is_some_and(|m| m.len() != rows) {
            return shape_err("key mask length");
        }
        let n = rows / l;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();

        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let mut probs = vec![0.0; n * h * l * l];
        probs.par_chunks_mut(h * l * l).enumerate().for_each(|(s, block)| {
            for head in 0..h {
                let p = &mut block[head * l * l..(head + 1) * l * l];
                for i in 0..l {
                    let qi = &qd[(s * l + i) * d + head * dh..][..dh];
                    for j in 0..l {
                        let masked = (spec.causal && j > i) || spec.key_valid.as_ref().is_some_and(|m| !m[s * l + j]);
                        p[i * l + j] = if masked {
                            f64::NEG_INFINITY
                        } else {
                            let kj = &kd[(s * l + j) * d + head * dh..][..dh];
                            qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                        };
                    }
                }
                kernels::softmax_rows(p, l);
            }
        });

        let drop = if self.train && spec.dropout > 0.0 {
            Some(self.dropout_mask(probs.len(), spec.dropout))
        } else {
            None
        };

        let vd = self.value(v).data();
        let mut out = vec![0.0; rows * d];
        out.par_chunks_mut(l * d).enumerate().for_each(|(s, block)| {
            for head in 0..h {
                let pbase = (s * h + head) * l * l;
                for i in 0..l {
                    let dst = &mut block[i * d + head * dh..][..dh];
                    for j in 0..l {
                        let mut w = probs[pbase + i * l + j];
                        if let Some(m) = &drop {
                            w *= m[pbase + i * l + j];
                        }
                        if w == 0.0 {
                            continue;
                        }
                        let vj = &vd[(s * l + j) * d + head * dh..][..dh];
                        for (o, x) in dst.iter_mut().zip(vj) {
                            *o += w * x;
                        }
                    }
                }
            }
        });
        let value = Tensor::matrix(rows, d, out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
                drop,
            },
            &[q, k, v],
        ))
    }

    /// Populate parameter gradients from a scalar `loss`. Gradients add onto
    /// whatever the accumulators already hold.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return shape_err(format!("loss must be scalar, got {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads, params);
        }
        Ok(())
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], params: &mut ParamSet) {
        let nodes = &self.nodes;
        let (_, out_cols) = (node.value.rows(), node.value.cols());

        match &node.op {
            Op::Constant => {}
            Op::Param(id) => params.accumulate_grad(*id, g),
            &Op::MatMul { a, b, ta, tb, m, k, n } => {
                if let Some(ga) = slot(nodes, grads, a) {
                    if ta {
                        kernels::gemm_into(k, n, m, self.value(b).data(), tb, g, true, 1.0, ga);
                    } else {
                        kernels::gemm_into(m, n, k, g, false, self.value(b).data(), !tb, 1.0, ga);
                    }
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    if tb {
                        kernels::gemm_into(n, m, k, g, true, self.value(a).data(), ta, 1.0, gb);
                    } else {
                        kernels::gemm_into(k, m, n, self.value(a).data(), !ta, g, false, 1.0, gb);
                    }
                }
            }
            &Op::Transpose(a) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    let (r, c) = (self.value(a).rows(), self.value(a).cols());
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = slot(nodes, grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            &Op::AddBias(a, bias) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(nodes, grads, bias) {
                    for row in g.chunks(out_cols) {
                        add_into(gb, row);
                    }
                }
            }
            &Op::AddTiled(a, p) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    add_into(ga, g);
                }
                if let Some(gp) = slot(nodes, grads, p) {
                    let block = self.value(p).numel();
                    for chunk in g.chunks(block) {
                        add_into(gp, chunk);
                    }
                }
            }
            &Op::Scale(a, f) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += f * y;
                    }
                }
            }
            Op::Mean(vs) => {
                let n = vs.len() as f64;
                for &v in vs {
                    if let Some(gv) = slot(nodes, grads, v) {
                        for (x, y) in gv.iter_mut().zip(g) {
                            *x += y / n;
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::ConcatCols(vs) => {
                let mut offset = 0;
                for &v in vs {
                    let w = self.value(v).cols();
                    if let Some(gv) = slot(nodes, grads, v) {
                        for (r, dst) in gv.chunks_mut(w).enumerate() {
                            add_into(dst, &g[r * out_cols + offset..][..w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(vs) => {
                let mut offset = 0;
                for &v in vs {
                    let len = self.value(v).numel();
                    if let Some(gv) = slot(nodes, grads, v) {
                        add_into(gv, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            &Op::SliceRows(a, start) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    let c = out_cols;
                    add_into(&mut ga[start * c..start * c + g.len()], g);
                }
            }
            &Op::SliceCols(a, start) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    let c = self.value(a).cols();
                    for (r, row) in g.chunks(out_cols).enumerate() {
                        add_into(&mut ga[r * c + start..][..out_cols], row);
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let c = out_cols;
                    for (r, &i) in idx.iter().enumerate() {
                        let i = i as usize;
                        add_into(&mut ga[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::ScatterRows(a, idx) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let c = out_cols;
                    for (r, &i) in idx.iter().enumerate() {
                        let i = i as usize;
                        add_into(&mut ga[r * c..(r + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                }
            }
            &Op::RowScale(a, s) => {
                let c = out_cols;
                if let Some(ga) = slot(nodes, grads, a) {
                    let sv = self.value(s).data();
                    for (r, row) in ga.chunks_mut(c).enumerate() {
                        for (x, y) in row.iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *x += sv[r] * y;
                        }
                    }
                }
                if let Some(gs) = slot(nodes, grads, s) {
                    let av = self.value(a);
                    for (r, x) in gs.iter_mut().enumerate() {
                        *x += av
                            .row(r)
                            .iter()
                            .zip(&g[r * c..(r + 1) * c])
                            .map(|(p, q)| p * q)
                            .sum::<f64>();
                    }
                }
            }
            &Op::Softmax(a) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    kernels::softmax_rows_backward(node.value.data(), g, out_cols, ga);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gamma_v = self.value(*gamma).data().to_vec();
                let mut dx = slot(nodes, grads, *x).map(std::mem::take);
                let mut dgamma = slot(nodes, grads, *gamma).map(std::mem::take);
                let mut dbeta = slot(nodes, grads, *beta).map(std::mem::take);
                kernels::layer_norm_backward(
                    g,
                    xhat,
                    inv_std,
                    &gamma_v,
                    out_cols,
                    dx.as_deref_mut(),
                    dgamma.as_deref_mut(),
                    dbeta.as_deref_mut(),
                );
                for (v, buf) in [(*x, dx), (*gamma, dgamma), (*beta, dbeta)] {
                    if let Some(buf) = buf {
                        grads[v.0] = Some(buf);
                    }
                }
            }
            &Op::Gelu(a) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    for ((x, y), &input) in ga.iter_mut().zip(g).zip(self.value(a).data()) {
                        *x += y * kernels::gelu_grad(input);
                    }
                }
            }
            &Op::Relu(a) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    for ((x, y), &input) in ga.iter_mut().zip(g).zip(self.value(a).data()) {
                        if input > 0.0 {
                            *x += y;
                        }
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    for ((x, y), &s) in ga.iter_mut().zip(g).zip(node.value.data()) {
                        *x += y * s * (1.0 - s);
                    }
                }
            }
            Op::Dropout(a, mask) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((x, y), m) in ga.iter_mut().zip(g).zip(mask) {
                        *x += y * m;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if let Some(gl) = slot(nodes, grads, *logits) {
                    let c = self.value(*logits).cols();
                    let f = g[0] / targets.len() as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let ind = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += f * (probs[r * c + j] - ind);
                        }
                    }
                }
            }
            Op::SpMM(matrix, x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let back = matrix.transpose_matmul_dense(g, out_cols);
                    add_into(gx, &back);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
                drop,
            } => self.attention_backward(*q, *k, *v, spec, probs, drop.as_deref(), g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[f64],
        drop: Option<&[f64]>,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (rows, d) = (self.value(q).rows(), self.value(q).cols());
        let l = spec.seq_len;
        let h = spec.heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();

        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        dq.par_chunks_mut(l * d)
            .zip(dk.par_chunks_mut(l * d))
            .zip(dv.par_chunks_mut(l * d))
            .enumerate()
            .for_each(|(s, ((dqs, dks), dvs))| {
                let mut dp = vec![0.0; l * l];
                let mut ds = vec![0.0; l * l];
                for head in 0..h {
                    let pbase = (s * h + head) * l * l;
                    let p = &probs[pbase..pbase + l * l];
                    let mask = drop.map(|m| &m[pbase..pbase + l * l]);
                    let col = head * dh;
                    for i in 0..l {
                        let go = &g[(s * l + i) * d + col..][..dh];
                        for j in 0..l {
                            let mut w = p[i * l + j];
                            if let Some(m) = mask {
                                w *= m[i * l + j];
                            }
                            let vj = &vd[(s * l + j) * d + col..][..dh];
                            // dP through dropout
                            let dot: f64 = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                            dp[i * l + j] = match mask {
                                Some(m) => dot * m[i * l + j],
                                None => dot,
                            };
                            if w != 0.0 {
                                let dvj = &mut dvs[j * d + col..][..dh];
                                for (x, y) in dvj.iter_mut().zip(go) {
                                    *x += w * y;
                                }
                            }
                        }
                    }
                    ds.fill(0.0);
                    kernels::softmax_rows_backward(p, &dp, l, &mut ds);
                    for i in 0..l {
                        for j in 0..l {
                            let sij = ds[i * l + j] * scale;
                            if sij == 0.0 {
                                continue;
                            }
                            let kj = &kd[(s * l + j) * d + col..][..dh];
                            let qi = &qd[(s * l + i) * d + col..][..dh];
                            let dqi = &mut dqs[i * d + col..][..dh];
                            for (x, y) in dqi.iter_mut().zip(kj) {
                                *x += sij * y;
                            }
                            let dkj = &mut dks[j * d + col..][..dh];
                            for (x, y) in dkj.iter_mut().zip(qi) {
                                *x += sij * y;
                            }
                        }
                    }
                }
            });

        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if !self.nodes[var.0].requires_grad {
                continue;
            }
            match &mut grads[var.0] {
                Some(existing) => add_into(existing, &buf),
                empty => *empty = Some(buf),
            }
        }
    }
}

/// Accumulator for an input; `None` when the input needs no gradient.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
