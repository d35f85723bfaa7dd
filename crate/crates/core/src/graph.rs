//! Tape-based reverse-mode automatic differentiation.
//!
//! Every value in a [`Graph`] is a row-major matrix; vectors are `1 x n` and
//! scalars `1 x 1`. Operations append nodes to the tape and return a [`Var`]
//! handle. [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients for leaves and trainable parameters.

use std::collections::HashMap;

use crate::error::{shape_err, CoreError, Result};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Layout of several sequences stacked along the row axis.
///
/// Each block is `(start_row, len)`; `mask[r]` is false for padding rows.
/// Attention and pooling never look across blocks or at masked rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    blocks: Vec<(usize, usize)>,
    mask: Vec<bool>,
}

impl SeqBatch {
    /// Sequences packed back to back without padding.
    pub fn packed(lengths: &[usize]) -> Result<Self> {
        let mask = vec![true; lengths.iter().sum()];
        Self::from_blocks(lengths, mask)
    }

    /// One sequence with an explicit mask (true = real token).
    pub fn single(mask: Vec<bool>) -> Result<Self> {
        Self::from_blocks(&[mask.len()], mask)
    }

    /// Block lengths plus a row mask covering all blocks.
    pub fn from_blocks(lengths: &[usize], mask: Vec<bool>) -> Result<Self> {
        let total: usize = lengths.iter().sum();
        if total != mask.len() {
            return shape_err("seq_batch", total, mask.len());
        }
        let mut blocks = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &len in lengths {
            if len == 0 || !mask[start..start + len].iter().any(|&m| m) {
                return Err(CoreError::Invalid(format!(
                    "sequence {} has no unmasked position",
                    blocks.len()
                )));
            }
            blocks.push((start, len));
            start += len;
        }
        Ok(SeqBatch { blocks, mask })
    }

    pub fn rows(&self) -> usize {
        self.mask.len()
    }

    pub fn blocks(&self) -> &[(usize, usize)] {
        &self.blocks
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn num_sequences(&self) -> usize {
        self.blocks.len()
    }

    pub fn max_len(&self) -> usize {
        self.blocks.iter().map(|b| b.1).max().unwrap_or(0)
    }
}

enum Op<T> {
    Constant,
    Leaf,
    Param(ParamId),
    Embedding {
        table: ParamId,
        indices: Vec<usize>,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    AddRow {
        x: Var,
        row: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: SeqBatch,
        probs: Vec<T>,
    },
    GatherRows {
        x: Var,
        indices: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SegmentMean {
        x: Var,
        batch: SeqBatch,
    },
    SoftmaxRows(Var),
    Mixture {
        gates: Var,
        experts: Vec<Var>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Bce {
        p: Var,
        labels: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Vec<T>,
    rows: usize,
    cols: usize,
    op: Op<T>,
    requires_grad: bool,
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    params: Vec<Option<Vec<T>>>,
    nodes: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(id.index())?.as_deref()
    }

    /// Gradient w.r.t. a leaf created by [`Graph::leaf`].
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0)?.as_deref()
    }

    /// Stores each computed parameter gradient into `Parameter::grad`,
    /// replacing whatever was there.
    pub fn apply_to(self, store: &mut ParamStore<T>) -> Result<()> {
        store.zero_grad();
        for (i, g) in self.params.into_iter().enumerate() {
            if let Some(g) = g {
                let id = ParamId(i);
                let shape = store.get(id).value.shape().to_vec();
                store.get_mut(id).grad = Some(Tensor::new(shape, g)?);
            }
        }
        Ok(())
    }
}

pub struct Graph<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub const BCE_CLAMP: f64 = 1e-7;

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, rows: usize, cols: usize, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(vec![n.rows, n.cols], n.value.clone()).expect("node shape")
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        if rows * cols != data.len() {
            return shape_err("constant", rows * cols, data.len());
        }
        Ok(self.push(data, rows, cols, Op::Constant, false))
    }

    pub fn constant_tensor(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.data().to_vec(), t.rows(), t.cols(), Op::Constant, false)
    }

    /// Input whose gradient is reported by [`Gradients::of`].
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.data().to_vec(), t.rows(), t.cols(), Op::Leaf, true)
    }

    /// Dense view of a parameter (1-D parameters become `1 x n`).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = self.push(
            p.value.data().to_vec(),
            p.value.rows(),
            p.value.cols(),
            Op::Param(id),
            p.trainable,
        );
        self.param_vars.insert(id, v);
        v
    }

    /// Row lookup in an embedding table parameter; repeated indices
    /// accumulate gradient into the same row.
    pub fn embedding(&mut self, table: ParamId, indices: &[usize]) -> Result<Var> {
        let p = self.store.get(table);
        let (vocab, dim) = (p.value.rows(), p.value.cols());
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            if i >= vocab {
                return Err(CoreError::IndexOutOfRange {
                    table: p.name.clone(),
                    index: i,
                    size: vocab,
                });
            }
            out.extend_from_slice(p.value.row(i));
        }
        if indices.is_empty() {
            return Err(CoreError::Invalid(format!("{}: empty index list", p.name)));
        }
        let rg = p.trainable;
        Ok(self.push(
            out,
            indices.len(),
            dim,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// `a * b`, or `a * b^T` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != bk {
            return shape_err("matmul", format!("inner dim {k}"), format!("{bk}"));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a), false, self.value(b), trans_b, &mut out, T::zero());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, m, n, Op::MatMul { a, b, trans_b }, rg))
    }

    /// Adds a `1 x c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(row) != (1, c) {
            return shape_err("add_row", (1, c), self.shape(row));
        }
        let rv = self.value(row);
        let mut out = self.value(x).to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, b) in chunk.iter_mut().zip(rv) {
                *o += *b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, r, c, Op::AddRow { x, row }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, self.shape(a), self.shape(b));
        }
        Ok(self.shape(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, r, c, Op::Add(a, b), rg))
    }

    /// Left-to-right sum of several same-shape values.
    pub fn sum_all(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| CoreError::Invalid("sum of zero terms".into()))?;
        rest.iter().try_fold(first, |acc, &p| self.add(acc, p))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, r, c, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|v| *v * s).collect();
        let rg = self.rg(x);
        self.push(out, r, c, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|v| v.max(T::zero())).collect();
        let rg = self.rg(x);
        self.push(out, r, c, Op::Relu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let (k, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
        let out = self
            .value(x)
            .iter()
            .map(|&v| half * v * (T::one() + (k * (v + a * v * v * v)).tanh()))
            .collect();
        let rg = self.rg(x);
        self.push(out, r, c, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let rg = self.rg(x);
        self.push(out, r, c, Op::Sigmoid(x), rg)
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return shape_err("layer_norm", (1, c), (self.shape(gamma), self.shape(beta)));
        }
        let eps = T::of(eps);
        let n = T::of(c as f64);
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            r,
            c,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Scaled dot-product attention, `heads` heads, independently per
    /// sequence block of `batch`. Masked rows receive zero weight as keys.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, batch: &SeqBatch) -> Result<Var> {
        let (r, d) = self.shape(q);
        if self.shape(k) != (r, d) || self.shape(v) != (r, d) {
            return shape_err("attention", (r, d), (self.shape(k), self.shape(v)));
        }
        if batch.rows() != r {
            return shape_err("attention mask", r, batch.rows());
        }
        if heads == 0 || d % heads != 0 {
            return Err(CoreError::Invalid(format!("{d} columns not divisible into {heads} heads")));
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mask = batch.mask();
        let mut out = vec![T::zero(); r * d];
        let probs_len: usize = batch.blocks().iter().map(|b| b.1 * b.1 * heads).sum();
        let mut probs = vec![T::zero(); probs_len];
        let mut off = 0;
        let mut scores = Vec::new();
        for &(s, len) in batch.blocks() {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..len {
                    let qi = &qv[(s + i) * d + c0..(s + i) * d + c0 + dh];
                    scores.clear();
                    let mut max = T::neg_infinity();
                    for j in 0..len {
                        let sc = if mask[s + j] {
                            let kj = &kv[(s + j) * d + c0..(s + j) * d + c0 + dh];
                            dot(qi, kj) * scale
                        } else {
                            T::neg_infinity()
                        };
                        max = max.max(sc);
                        scores.push(sc);
                    }
                    let mut z = T::zero();
                    for sc in scores.iter_mut() {
                        *sc = if sc.is_finite() { (*sc - max).exp() } else { T::zero() };
                        z += *sc;
                    }
                    let prow = &mut probs[off + i * len..off + (i + 1) * len];
                    let orow = &mut out[(s + i) * d + c0..(s + i) * d + c0 + dh];
                    for j in 0..len {
                        let p = scores[j] / z;
                        prow[j] = p;
                        if p != T::zero() {
                            let vj = &vv[(s + j) * d + c0..(s + j) * d + c0 + dh];
                            for (o, x) in orow.iter_mut().zip(vj) {
                                *o += p * *x;
                            }
                        }
                    }
                }
                off += len * len;
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            r,
            d,
            Op::Attention {
                q,
                k,
                v,
                heads,
                batch: batch.clone(),
                probs,
            },
            rg,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(x);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(CoreError::IndexOutOfRange {
                    table: "gather_rows".into(),
                    index: i,
                    size: r,
                });
            }
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            indices.len(),
            c,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = match parts.first() {
            Some(&p) => self.shape(p).0,
            None => return Err(CoreError::Invalid("concat of zero parts".into())),
        };
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).0 != r) {
            return shape_err("concat_cols", format!("{r} rows"), self.shape(bad));
        }
        let c: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                let pc = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, r, c, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Mean over the unmasked rows of each block; one output row per block.
    pub fn segment_mean(&mut self, x: Var, batch: &SeqBatch) -> Result<Var> {
        let (r, c) = self.shape(x);
        if batch.rows() != r {
            return shape_err("segment_mean", r, batch.rows());
        }
        let xv = self.value(x);
        let mut out = vec![T::zero(); batch.num_sequences() * c];
        for (b, &(s, len)) in batch.blocks().iter().enumerate() {
            let orow = &mut out[b * c..(b + 1) * c];
            let mut count = 0usize;
            for i in s..s + len {
                if batch.mask()[i] {
                    count += 1;
                    for (o, v) in orow.iter_mut().zip(&xv[i * c..(i + 1) * c]) {
                        *o += *v;
                    }
                }
            }
            let inv = T::one() / T::of(count as f64);
            orow.iter_mut().for_each(|o| *o *= inv);
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            batch.num_sequences(),
            c,
            Op::SegmentMean {
                x,
                batch: batch.clone(),
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(out, r, c, Op::SoftmaxRows(x), rg)
    }

    /// Per-row convex combination: `out[b] = sum_i gates[b, i] * experts[i][b]`.
    pub fn mixture(&mut self, gates: Var, experts: &[Var]) -> Result<Var> {
        let (r, n) = self.shape(gates);
        if n != experts.len() || experts.is_empty() {
            return shape_err("mixture", n, experts.len());
        }
        let c = self.shape(experts[0]).1;
        if let Some(&bad) = experts.iter().find(|&&e| self.shape(e) != (r, c)) {
            return shape_err("mixture", (r, c), self.shape(bad));
        }
        let g = self.value(gates);
        let mut out = vec![T::zero(); r * c];
        for (i, &e) in experts.iter().enumerate() {
            let ev = self.value(e);
            for b in 0..r {
                let w = g[b * n + i];
                for j in 0..c {
                    out[b * c + j] += w * ev[b * c + j];
                }
            }
        }
        let rg = self.rg(gates) || experts.iter().any(|&e| self.rg(e));
        Ok(self.push(
            out,
            r,
            c,
            Op::Mixture {
                gates,
                experts: experts.to_vec(),
            },
            rg,
        ))
    }

    /// L2-normalizes every row; zero rows are rejected.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let mut out = self.value(x).to_vec();
        let mut norms = Vec::with_capacity(r);
        for (i, row) in out.chunks_mut(c).enumerate() {
            let n = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
            if !(n > T::zero()) || !n.is_finite() {
                return Err(CoreError::Invalid(format!("row {i} has zero norm")));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(x);
        Ok(self.push(out, r, c, Op::NormalizeRows { x, norms }, rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if targets.len() != r || r == 0 {
            return shape_err("softmax_cross_entropy", r, targets.len());
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = T::zero();
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let t = targets[i];
            if t >= c {
                return Err(CoreError::IndexOutOfRange {
                    table: "softmax_cross_entropy".into(),
                    index: t,
                    size: c,
                });
            }
            let lse = log_sum_exp(row);
            loss += lse - row[t];
            softmax_in_place(row);
        }
        loss /= T::of(r as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![loss],
            1,
            1,
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 labels.
    /// Probabilities are clamped to `[1e-7, 1 - 1e-7]` before the logs.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != labels.len() || labels.is_empty() {
            return shape_err("bce", pv.len(), labels.len());
        }
        let labels: Vec<T> = labels.iter().map(|&y| T::of(y)).collect();
        let loss = bce_value(pv, &labels);
        let rg = self.rg(p);
        Ok(self.push(vec![loss], 1, 1, Op::Bce { p, labels }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![s], 1, 1, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().copied().sum::<T>() / T::of(v.len() as f64);
        let rg = self.rg(x);
        self.push(vec![s], 1, 1, Op::Mean(x), rg)
    }

    /// Reverse pass from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != (1, 1) {
            return shape_err("backward", (1, 1), self.shape(loss));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: Vec<Option<Vec<T>>> = (0..self.store.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads, &mut params);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { params, nodes: grads })
    }

    fn backward_node(
        &self,
        idx: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        params: &mut [Option<Vec<T>>],
    ) {
        let node = &self.nodes[idx];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Constant | Op::Leaf => {}
            Op::Param(id) => {
                add_into(slot(params, id.index(), g.len()), g);
            }
            Op::Embedding { table, indices } => {
                let numel = self.store.get(*table).value.numel();
                let acc = slot(params, table.index(), numel);
                for (r, &i) in indices.iter().enumerate() {
                    add_into(&mut acc[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.shape(*a);
                let n = cols;
                if self.rg(*a) {
                    let bv = self.value(*b);
                    let ga = slot(grads, a.0, m * k);
                    T::gemm(m, n, k, g, false, bv, !trans_b, ga, T::one());
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let gb = slot(grads, b.0, k * n);
                    if *trans_b {
                        T::gemm(n, m, k, g, true, av, false, gb, T::one());
                    } else {
                        T::gemm(k, m, n, av, true, g, false, gb, T::one());
                    }
                }
            }
            Op::AddRow { x, row } => {
                if self.rg(*x) {
                    add_into(slot(grads, x.0, g.len()), g);
                }
                if self.rg(*row) {
                    let gr = slot(grads, row.0, cols);
                    for chunk in g.chunks(cols) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        add_into(slot(grads, v.0, g.len()), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if self.rg(*v) {
                        let ov = self.value(*other);
                        let gv = slot(grads, v.0, g.len());
                        for i in 0..g.len() {
                            gv[i] += g[i] * ov[i];
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                let gx = slot(grads, x.0, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * *s;
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let gx = slot(grads, x.0, g.len());
                for i in 0..g.len() {
                    if xv[i] > T::zero() {
                        gx[i] += g[i];
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let (k, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
                let three = T::of(3.0);
                let gx = slot(grads, x.0, g.len());
                for i in 0..g.len() {
                    let v = xv[i];
                    let t = (k * (v + a * v * v * v)).tanh();
                    let dt = k * (T::one() + three * a * v * v) * (T::one() - t * t);
                    gx[i] += g[i] * (half * (T::one() + t) + half * v * dt);
                }
            }
            Op::Sigmoid(x) => {
                let yv = &node.value;
                let gx = slot(grads, x.0, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * yv[i] * (T::one() - yv[i]);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma);
                if self.rg(*gamma) {
                    let gg = slot(grads, gamma.0, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            gg[j] += g[i * cols + j] * xhat[i * cols + j];
                        }
                    }
                }
                if self.rg(*beta) {
                    let gb = slot(grads, beta.0, cols);
                    for chunk in g.chunks(cols) {
                        add_into(gb, chunk);
                    }
                }
                if self.rg(*x) {
                    let n = T::of(cols as f64);
                    let gx = slot(grads, x.0, rows * cols);
                    let mut dxhat = vec![T::zero(); cols];
                    for i in 0..rows {
                        let xh = &xhat[i * cols..(i + 1) * cols];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..cols {
                            dxhat[j] = g[i * cols + j] * gam[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xh[j];
                        }
                        m1 /= n;
                        m2 /= n;
                        for j in 0..cols {
                            gx[i * cols + j] += rstd[i] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                batch,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *heads, batch, probs, grads),
            Op::GatherRows { x, indices } => {
                let numel = self.value(*x).len();
                let gx = slot(grads, x.0, numel);
                for (r, &i) in indices.iter().enumerate() {
                    add_into(&mut gx[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    if self.rg(p) {
                        let gp = slot(grads, p.0, rows * pc);
                        for i in 0..rows {
                            add_into(&mut gp[i * pc..(i + 1) * pc], &g[i * cols + c0..i * cols + c0 + pc]);
                        }
                    }
                    c0 += pc;
                }
            }
            Op::SegmentMean { x, batch } => {
                let numel = self.value(*x).len();
                let gx = slot(grads, x.0, numel);
                for (b, &(s, len)) in batch.blocks().iter().enumerate() {
                    let count = batch.mask()[s..s + len].iter().filter(|&&m| m).count();
                    let inv = T::one() / T::of(count as f64);
                    let gb = &g[b * cols..(b + 1) * cols];
                    for i in s..s + len {
                        if batch.mask()[i] {
                            for j in 0..cols {
                                gx[i * cols + j] += gb[j] * inv;
                            }
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let gx = slot(grads, x.0, g.len());
                for i in 0..rows {
                    let yr = &y[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let dotp = dot(yr, gr);
                    for j in 0..cols {
                        gx[i * cols + j] += yr[j] * (gr[j] - dotp);
                    }
                }
            }
            Op::Mixture { gates, experts } => {
                let n = experts.len();
                let gv = self.value(*gates);
                for (i, &e) in experts.iter().enumerate() {
                    if self.rg(e) {
                        let ge = slot(grads, e.0, rows * cols);
                        for b in 0..rows {
                            let w = gv[b * n + i];
                            for j in 0..cols {
                                ge[b * cols + j] += w * g[b * cols + j];
                            }
                        }
                    }
                }
                if self.rg(*gates) {
                    let gg = slot(grads, gates.0, rows * n);
                    for (i, &e) in experts.iter().enumerate() {
                        let ev = self.value(e);
                        for b in 0..rows {
                            gg[b * n + i] += dot(&g[b * cols..(b + 1) * cols], &ev[b * cols..(b + 1) * cols]);
                        }
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let gx = slot(grads, x.0, g.len());
                for i in 0..rows {
                    let yr = &y[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let dotp = dot(yr, gr);
                    for j in 0..cols {
                        gx[i * cols + j] += (gr[j] - yr[j] * dotp) / norms[i];
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let (r, c) = self.shape(*logits);
                let scale = g[0] / T::of(r as f64);
                let gl = slot(grads, logits.0, r * c);
                for i in 0..r {
                    for j in 0..c {
                        let onehot = if targets[i] == j { T::one() } else { T::zero() };
                        gl[i * c + j] += scale * (probs[i * c + j] - onehot);
                    }
                }
            }
            Op::Bce { p, labels } => {
                let pv = self.value(*p);
                let n = T::of(labels.len() as f64);
                let (lo, hi) = (T::of(BCE_CLAMP), T::one() - T::of(BCE_CLAMP));
                let gp = slot(grads, p.0, pv.len());
                for i in 0..pv.len() {
                    let x = pv[i];
                    if x > lo && x < hi {
                        let y = labels[i];
                        gp[i] += g[0] * (-(y / x) + (T::one() - y) / (T::one() - x)) / n;
                    }
                }
            }
            Op::Sum(x) => {
                let numel = self.value(*x).len();
                let gx = slot(grads, x.0, numel);
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Mean(x) => {
                let numel = self.value(*x).len();
                let s = g[0] / T::of(numel as f64);
                let gx = slot(grads, x.0, numel);
                gx.iter_mut().for_each(|v| *v += s);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: &SeqBatch,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (r, d) = self.shape(q);
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut gq = vec![T::zero(); r * d];
        let mut gk = vec![T::zero(); r * d];
        let mut gvv = vec![T::zero(); r * d];
        let mut dp = Vec::new();
        let mut off = 0;
        for &(s, len) in batch.blocks() {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..len {
                    let prow = &probs[off + i * len..off + (i + 1) * len];
                    let go = &g[(s + i) * d + c0..(s + i) * d + c0 + dh];
                    dp.clear();
                    let mut sum = T::zero();
                    for j in 0..len {
                        let p = prow[j];
                        let vj = &vv[(s + j) * d + c0..(s + j) * d + c0 + dh];
                        let dpj = dot(go, vj);
                        dp.push(dpj);
                        sum += p * dpj;
                        if p != T::zero() {
                            let gvj = &mut gvv[(s + j) * d + c0..(s + j) * d + c0 + dh];
                            for (a, b) in gvj.iter_mut().zip(go) {
                                *a += p * *b;
                            }
                        }
                    }
                    for j in 0..len {
                        let p = prow[j];
                        if p == T::zero() {
                            continue;
                        }
                        let ds = p * (dp[j] - sum) * scale;
                        for c in 0..dh {
                            gq[(s + i) * d + c0 + c] += ds * kv[(s + j) * d + c0 + c];
                            gk[(s + j) * d + c0 + c] += ds * qv[(s + i) * d + c0 + c];
                        }
                    }
                }
                off += len * len;
            }
        }
        for (var, gv) in [(q, gq), (k, gk), (v, gvv)] {
            if self.rg(var) {
                add_into(slot(grads, var.0, r * d), &gv);
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], i: usize, len: usize) -> &mut Vec<T> {
    grads[i].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// Mean binary cross-entropy with the `[1e-7, 1 - 1e-7]` clamp.
pub fn bce_value<T: Scalar>(p: &[T], labels: &[T]) -> T {
    let (lo, hi) = (T::of(BCE_CLAMP), T::one() - T::of(BCE_CLAMP));
    let mut s = T::zero();
    for (&x, &y) in p.iter().zip(labels) {
        let x = x.max(lo).min(hi);
        s += y * x.ln() + (T::one() - y) * (T::one() - x).ln();
    }
    -s / T::of(p.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    /// Checks d(sum(w * f(x)))/dx for a single-input op against finite differences.
    fn check_unary(rows: usize, cols: usize, f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) {
        let store = ParamStore::<f64>::new(0);
        let x0 = t(rows, cols, &pseudo(rows * cols, 11));
        let err = grad_check(
            |x, want| {
                let mut g = Graph::new(&store);
                let xv = g.leaf(x);
                let y = f(&mut g, xv)?;
                let (r, c) = g.shape(y);
                let w = g.constant(r, c, pseudo(r * c, 5))?;
                let prod = g.mul(y, w)?;
                let loss = g.sum(prod);
                let grad = if want {
                    Some(Tensor::new(x.shape().to_vec(), g.backward(loss)?.of(xv).unwrap().to_vec())?)
                } else {
                    None
                };
                Ok((g.scalar(loss), grad))
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn elementwise_ops_pass_grad_check() {
        check_unary(3, 4, |g, x| Ok(g.gelu(x)));
        check_unary(3, 4, |g, x| Ok(g.sigmoid(x)));
        check_unary(3, 4, |g, x| Ok(g.relu(x)));
        check_unary(3, 4, |g, x| Ok(g.scale(x, -2.5)));
        check_unary(3, 4, |g, x| g.mul(x, x));
        check_unary(3, 4, |g, x| Ok(g.softmax_rows(x)));
        check_unary(3, 4, |g, x| g.normalize_rows(x));
        check_unary(3, 4, |g, x| Ok(g.mean(x)));
    }

    #[test]
    fn structural_ops_pass_grad_check() {
        check_unary(3, 4, |g, x| g.matmul(x, x, true));
        check_unary(4, 4, |g, x| g.matmul(x, x, false));
        check_unary(3, 4, |g, x| g.gather_rows(x, &[2, 0, 2]));
        check_unary(3, 4, |g, x| g.concat_cols(&[x, x]));
        check_unary(3, 4, |g, x| {
            let row = g.constant(1, 4, vec![0.1, 0.2, 0.3, 0.4])?;
            g.add_row(x, row)
        });
        check_unary(5, 2, |g, x| {
            let b = SeqBatch::from_blocks(&[3, 2], vec![true, false, true, true, true])?;
            g.segment_mean(x, &b)
        });
        check_unary(3, 4, |g, x| {
            let gates = g.gather_rows(x, &[0, 1, 2])?;
            let gates = g.concat_cols(&[gates])?;
            let gates = g.softmax_rows(gates);
            let e = g.scale(x, 2.0);
            g.mixture(gates, &[x, e, x, e])
        });
        check_unary(3, 4, |g, x| {
            let gamma = g.constant(1, 4, vec![1.0, 0.5, -0.3, 2.0])?;
            let beta = g.constant(1, 4, vec![0.0, 0.1, 0.2, 0.3])?;
            g.layer_norm(x, gamma, beta, 1e-5)
        });
    }

    #[test]
    fn attention_passes_grad_check() {
        check_unary(5, 4, |g, x| {
            let b = SeqBatch::from_blocks(&[3, 2], vec![true, true, false, true, true])?;
            let k = g.scale(x, 0.7);
            let v = g.gelu(x);
            g.attention(x, k, v, 2, &b)
        });
    }

    #[test]
    fn losses_pass_grad_check() {
        check_unary(3, 4, |g, x| g.softmax_cross_entropy(x, &[1, 0, 3]));
        check_unary(3, 1, |g, x| {
            let p = g.sigmoid(x);
            g.bce(p, &[1.0, 0.0, 1.0])
        });
    }

    #[test]
    fn embedding_accumulates_repeated_rows() {
        let mut store = ParamStore::<f64>::new(0);
        let table = store.gaussian("tbl", &[4, 3], 0.1).unwrap();
        let mut g = Graph::new(&store);
        let e = g.embedding(table, &[0, 0]).unwrap();
        let w = g.constant(2, 3, vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]).unwrap();
        let p = g.mul(e, w).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        let gt = grads.param(table).unwrap();
        assert_eq!(&gt[..3], &[3.0, 3.0, 3.0]);
        assert!(gt[3..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let mut store = ParamStore::<f32>::new(0);
        let table = store.constant("items", &[3, 2], 0.0).unwrap();
        let mut g = Graph::new(&store);
        let err = g.embedding(table, &[1, 3]).unwrap_err();
        assert_eq!(
            err,
            CoreError::IndexOutOfRange {
                table: "items".into(),
                index: 3,
                size: 3
            }
        );
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::<f64>::new(0);
        let w = store.constant("w", &[2, 2], 1.0).unwrap();
        store.get_mut(w).trainable = false;
        let mut g = Graph::new(&store);
        let x = g.constant(1, 2, vec![1.0, 2.0]).unwrap();
        let wv = g.param(w);
        let y = g.matmul(x, wv, false).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.param(w).is_none());
    }

    #[test]
    fn bce_clamps_extreme_probabilities() {
        let v: f64 = bce_value(&[1.0, 0.0], &[0.0, 1.0]);
        assert!((v - (-(1e-7f64).ln())).abs() < 1e-6);
    }
}
