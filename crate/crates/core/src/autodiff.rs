//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Graph`] records every operation applied to its variables. Values are
//! computed eagerly when an operation is added; [`Graph::backward`] walks the
//! tape in reverse and accumulates gradients for every node that depends on a
//! trainable leaf. Leaves can borrow their storage (model weights are bound
//! without copying) or own it.
//!
//! All values are `Array2<f64>`; scalars are `1 x 1` matrices and row vectors
//! are `1 x n`.

use std::borrow::Cow;
use std::ops::Range;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        rstd: Vec<f64>,
    },
    Rope {
        x: Var,
        head_dim: usize,
        positions: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        segments: Vec<Range<usize>>,
        probs: Vec<Array2<f64>>,
    },
    LogSoftmax(Var),
    Cols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Rows {
        x: Var,
        rows: Vec<usize>,
    },
    AddToRow {
        x: Var,
        row: usize,
        v: Var,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    SumSq(Var),
    Pick {
        x: Var,
        idx: Vec<(usize, usize)>,
    },
}

struct Node<'a> {
    value: Cow<'a, Array2<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Tape of recorded operations.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss through any trainable path.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled to `shape` when absent.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

fn rope_angles(pos: usize, head_dim: usize) -> impl Iterator<Item = (f64, f64)> {
    (0..head_dim / 2).map(move |i| {
        let freq = 10_000f64.powf(-(2.0 * i as f64) / head_dim as f64);
        let theta = pos as f64 * freq;
        (theta.cos(), theta.sin())
    })
}

/// Rotates (or un-rotates when `inverse`) consecutive column pairs of every
/// `head_dim` chunk by the position angle of each row.
fn rope_apply(x: &Array2<f64>, head_dim: usize, positions: &[usize], inverse: bool) -> Array2<f64> {
    let mut out = x.clone();
    let n_chunks = x.ncols() / head_dim;
    for (r, &pos) in positions.iter().enumerate() {
        let angles: Vec<(f64, f64)> = rope_angles(pos, head_dim).collect();
        let mut row = out.row_mut(r);
        for c in 0..n_chunks {
            let base = c * head_dim;
            for (i, &(cos, sin)) in angles.iter().enumerate() {
                let a = row[base + 2 * i];
                let b = row[base + 2 * i + 1];
                let sin = if inverse { -sin } else { sin };
                row[base + 2 * i] = a * cos - b * sin;
                row[base + 2 * i + 1] = a * sin + b * cos;
            }
        }
    }
    out
}

fn softmax_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        row.mapv_inplace(|x| x / sum);
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Array2<f64>>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, value: Array2<f64>, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// Non-trainable input borrowed from the caller.
    pub fn constant_ref(&mut self, value: &'a Array2<f64>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Trainable leaf borrowed from the caller.
    pub fn leaf_ref(&mut self, value: &'a Array2<f64>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.owned(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.owned(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.owned(value, Op::Sub(a, b), &[a, b])
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.owned(value, Op::Mul(a, b), &[a, b])
    }

    /// Adds the `1 x n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.owned(value, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.owned(value, Op::Scale(a, c), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.owned(value, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.owned(value, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.owned(value, Op::Exp(a), &[a])
    }

    /// Row-wise layer normalization with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            rstd.push(r);
        }
        let value = &xhat * self.value(gain) + self.value(bias);
        self.owned(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Rotary position embedding applied to every `head_dim` chunk of the
    /// columns; row `r` is rotated by the angles of `positions[r]`.
    pub fn rope(&mut self, x: Var, head_dim: usize, positions: &[usize]) -> Var {
        debug_assert_eq!(self.value(x).nrows(), positions.len());
        let value = rope_apply(self.value(x), head_dim, positions, false);
        self.owned(
            value,
            Op::Rope {
                x,
                head_dim,
                positions: positions.to_vec(),
            },
            &[x],
        )
    }

    /// Causal multi-query attention.
    ///
    /// `q` holds all heads side by side (`N x H*dh`); `k` and `v` are the
    /// single shared projections (`N x dh`). Rows are partitioned into
    /// independent `segments`; within a segment row `r` attends to rows
    /// `<= r`. The result is `N x H*dh`, head `h` in columns `h*dh..(h+1)*dh`.
    pub fn mq_attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize, segments: &[Range<usize>]) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dh = kv.ncols();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((qv.nrows(), n_heads * dh));
        let mut probs = Vec::with_capacity(segments.len() * n_heads);
        for seg in segments {
            let kseg = kv.slice(s![seg.clone(), ..]);
            let vseg = vv.slice(s![seg.clone(), ..]);
            for h in 0..n_heads {
                let qh = qv.slice(s![seg.clone(), h * dh..(h + 1) * dh]);
                let mut scores = qh.dot(&kseg.t()) * scale;
                for (r, mut row) in scores.rows_mut().into_iter().enumerate() {
                    row.slice_mut(s![r + 1..]).fill(f64::NEG_INFINITY);
                }
                softmax_rows_inplace(&mut scores);
                out.slice_mut(s![seg.clone(), h * dh..(h + 1) * dh]).assign(&scores.dot(&vseg));
                probs.push(scores);
            }
        }
        self.owned(
            out,
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                segments: segments.to_vec(),
                probs,
            },
            &[q, k, v],
        )
    }

    /// Attention probabilities recorded by an [`Graph::mq_attention`] node,
    /// ordered segment-major then head.
    pub fn attention_probs(&self, v: Var) -> Option<&[Array2<f64>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.owned(value, Op::LogSoftmax(a), &[a])
    }

    /// Column block `start..start+len`.
    pub fn cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.owned(value, Op::Cols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        self.owned(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Gathers the listed rows of `x` (repeats allowed).
    pub fn rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let value = self.value(x).select(Axis(0), rows);
        self.owned(
            value,
            Op::Rows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        )
    }

    /// `x` with the `1 x n` vector `v` added to row `row`.
    pub fn add_to_row(&mut self, x: Var, row: usize, v: Var) -> Var {
        let mut value = self.value(x).clone();
        {
            let vv = self.value(v);
            let mut r = value.row_mut(row);
            r += &vv.row(0);
        }
        self.owned(value, Op::AddToRow { x, row, v }, &[x, v])
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes row `i`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let value = self.value(table).select(Axis(0), ids);
        self.owned(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.owned(value, Op::Sum(a), &[a])
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).iter().map(|x| x * x).sum());
        self.owned(value, Op::SumSq(a), &[a])
    }

    /// Sum of the listed `(row, col)` entries of `x`.
    pub fn pick_sum(&mut self, x: Var, idx: &[(usize, usize)]) -> Var {
        let xv = self.value(x);
        let total: f64 = idx.iter().map(|&(r, c)| xv[[r, c]]).sum();
        self.owned(
            Array2::from_elem((1, 1), total),
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<'a>, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.dot(&self.value(*b).t()));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], -g);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g * self.value(*b));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*row) {
                    accumulate(&mut grads[row.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, c) => accumulate(&mut grads[a.0], g * *c),
            Op::Gelu(a) => {
                let mut d = self.value(*a).mapv(gelu_grad);
                d *= g;
                accumulate(&mut grads[a.0], d);
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| if x <= 0.0 { *d = 0.0 });
                accumulate(&mut grads[a.0], d);
            }
            Op::Exp(a) => accumulate(&mut grads[a.0], g * node.value.as_ref()),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                if self.wants(*gain) {
                    accumulate(&mut grads[gain.0], (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.wants(*bias) {
                    accumulate(&mut grads[bias.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.wants(*x) {
                    let dxhat = g * self.value(*gain);
                    let n = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dxr = dxhat.row(r);
                        let xr = xhat.row(r);
                        let mean_d = dxr.sum() / n;
                        let mean_dx = dxr.dot(&xr) / n;
                        let mut out = dx.row_mut(r);
                        for c in 0..xhat.ncols() {
                            out[c] = rstd[r] * (dxr[c] - mean_d - xr[c] * mean_dx);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Rope {
                x,
                head_dim,
                positions,
            } => accumulate(&mut grads[x.0], rope_apply(g, *head_dim, positions, true)),
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                segments,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let dh = kv.ncols();
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Array2::zeros(qv.dim());
                let mut dk = Array2::zeros(kv.dim());
                let mut dv = Array2::zeros(vv.dim());
                for (si, seg) in segments.iter().enumerate() {
                    let kseg = kv.slice(s![seg.clone(), ..]);
                    let vseg = vv.slice(s![seg.clone(), ..]);
                    for h in 0..*n_heads {
                        let a = &probs[si * n_heads + h];
                        let cols = h * dh..(h + 1) * dh;
                        let go = g.slice(s![seg.clone(), cols.clone()]);
                        let da = go.dot(&vseg.t());
                        dv.slice_mut(s![seg.clone(), ..]).scaled_add(1.0, &a.t().dot(&go));
                        let mut ds = &da * a;
                        for (r, mut row) in ds.rows_mut().into_iter().enumerate() {
                            let dot = row.sum();
                            let arow = a.row(r);
                            for (c, x) in row.iter_mut().enumerate() {
                                *x -= arow[c] * dot;
                            }
                        }
                        ds *= scale;
                        let qh = qv.slice(s![seg.clone(), cols.clone()]);
                        dq.slice_mut(s![seg.clone(), cols]).scaled_add(1.0, &ds.dot(&kseg));
                        dk.slice_mut(s![seg.clone(), ..]).scaled_add(1.0, &ds.t().dot(&qh));
                    }
                }
                if self.wants(*q) {
                    accumulate(&mut grads[q.0], dq);
                }
                if self.wants(*k) {
                    accumulate(&mut grads[k.0], dk);
                }
                if self.wants(*v) {
                    accumulate(&mut grads[v.0], dv);
                }
            }
            Op::LogSoftmax(a) => {
                let mut d = g.clone();
                let out = node.value.as_ref();
                for (mut drow, orow) in d.rows_mut().into_iter().zip(out.rows()) {
                    let total = drow.sum();
                    Zip::from(&mut drow).and(&orow).for_each(|d, &lp| *d -= lp.exp() * total);
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::Cols { x, start } => {
                let mut d = Array2::zeros(self.shape(*x));
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                accumulate(&mut grads[x.0], d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if self.wants(*p) {
                        accumulate(&mut grads[p.0], g.slice(s![.., offset..offset + w]).to_owned());
                    }
                    offset += w;
                }
            }
            Op::Rows { x, rows } => {
                let mut d = Array2::zeros(self.shape(*x));
                for (i, &r) in rows.iter().enumerate() {
                    let mut dr = d.row_mut(r);
                    dr += &g.row(i);
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::AddToRow { x, row, v } => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.clone());
                }
                if self.wants(*v) {
                    accumulate(&mut grads[v.0], g.row(*row).to_owned().insert_axis(Axis(0)));
                }
            }
            Op::Gather { table, ids } => {
                let mut d = Array2::zeros(self.shape(*table));
                for (i, &id) in ids.iter().enumerate() {
                    let mut dr = d.row_mut(id);
                    dr += &g.row(i);
                }
                accumulate(&mut grads[table.0], d);
            }
            Op::Sum(a) => {
                let shape = self.shape(*a);
                accumulate(&mut grads[a.0], Array2::from_elem(shape, g[[0, 0]]));
            }
            Op::SumSq(a) => accumulate(&mut grads[a.0], self.value(*a) * (2.0 * g[[0, 0]])),
            Op::Pick { x, idx } => {
                let mut d = Array2::zeros(self.shape(*x));
                for &(r, c) in idx {
                    d[[r, c]] += g[[0, 0]];
                }
                accumulate(&mut grads[x.0], d);
            }
        }
    }
}
