//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are
//! appended after their parents, so reverse creation order is a valid
//! topological order and [`Graph::backward`] visits each node once.
//!
//! Besides the usual elementwise and matrix operations the tape offers two
//! grouped attention primitives, [`Graph::attn_scores`] and
//! [`Graph::attn_apply`]. Rows are split into `G` groups (one group per
//! observing agent, or per mixing sample); queries of group `g` only see
//! keys and values of group `g`. This keeps every batched network in this
//! crate a handful of large operations instead of thousands of tiny ones.
//!
//! The graph also tallies multiply-accumulates for matrix-style operations
//! (`matmul`, `attn_scores`, `attn_apply`). Elementwise work, normalisation
//! and reductions are not counted.

use crate::array::Array;
use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use std::collections::HashMap;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Abs,
    Sigmoid,
    Tanh,
    Elu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Unary(Unary, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Interleave { parts: Vec<(Var, usize)>, groups: usize },
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Array, inv_std: Vec<f64> },
    AttnScores { q: Var, k: Var, nq: usize, nk: usize, heads: usize, scale: f64 },
    AttnApply { w: Var, v: Var, nq: usize, nk: usize, heads: usize },
    SumRowGroups(Var, usize),
    TileRows(Var, usize),
    SumCols(Var),
    SumAll(Var),
    Pick(Var, Vec<usize>),
    Reshape(Var),
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Epsilon inside the layer-norm variance denominator.
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Array>>,
    backward_done: bool,
    track_grad: bool,
    macs: u64,
    bound: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            track_grad: true,
            macs: 0,
            bound: HashMap::new(),
        }
    }

    /// A graph whose parameter leaves never require gradients.
    pub fn inference() -> Self {
        Self {
            track_grad: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; gradients do not flow into it.
    pub fn input(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that accumulates a gradient (ignored on inference graphs).
    pub fn leaf(&mut self, value: Array) -> Var {
        let track = self.track_grad;
        self.push(value, Op::Leaf, track)
    }

    /// Bind a stored parameter, reusing the node if it was bound before.
    pub fn bind(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let v = self.leaf(store.get(id).clone());
        self.bound.insert(id, v);
        v
    }

    /// Gradients of every bound parameter after [`Graph::backward`].
    pub fn param_grads(&self) -> Vec<(ParamId, &Array)> {
        let mut out: Vec<(ParamId, &Array)> = self
            .bound
            .iter()
            .filter_map(|(id, v)| self.grad(*v).map(|g| (*id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.value(a).dims();
        let (q2, r) = self.value(b).dims();
        if q != q2 {
            return Err(shape_err("matmul", format!("[{p}, {q}] x [{q2}, {r}]")));
        }
        let mut out = vec![0.0; p * r];
        if p > 0 && q > 0 && r > 0 {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            // SAFETY: slices are sized p*q, q*r and p*r with the row-major
            // strides passed here.
            unsafe {
                matrixmultiply::dgemm(
                    p,
                    q,
                    r,
                    1.0,
                    av.as_ptr(),
                    q as isize,
                    1,
                    bv.as_ptr(),
                    r as isize,
                    1,
                    0.0,
                    out.as_mut_ptr(),
                    r as isize,
                    1,
                );
            }
        }
        self.macs += (p * q * r) as u64;
        let needs = self.needs(&[a, b]);
        Ok(self.push(Array::matrix(p, r, out)?, Op::MatMul(a, b), needs))
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let da = self.value(a).dims();
        let db = self.value(b).dims();
        if da != db {
            return Err(shape_err("elementwise", format!("{da:?} vs {db:?}")));
        }
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let needs = self.needs(&[a, b]);
        Ok(self.push(
            Array::matrix(da.0, da.1, data)?,
            Op::Binary(kind, a, b),
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// `a[r, c] + row[1, c]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims();
        if self.value(row).dims() != (1, c) {
            return Err(shape_err(
                "add_row",
                format!("[{r}, {c}] + {:?}", self.value(row).dims()),
            ));
        }
        let bias = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(c.max(1)) {
            for (x, b) in chunk.iter_mut().zip(&bias) {
                *x += b;
            }
        }
        let needs = self.needs(&[a, row]);
        Ok(self.push(Array::matrix(r, c, data)?, Op::AddRow(a, row), needs))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.value(a).dims();
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let needs = self.needs(&[a]);
        self.push(
            Array::matrix(r, c, data).expect("same size"),
            Op::Scale(a, s),
            needs,
        )
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let (r, c) = self.value(a).dims();
        let f = match kind {
            Unary::Relu => |x: f64| if x < 0.0 { 0.0 } else { x },
            Unary::Abs => f64::abs,
            Unary::Sigmoid => |x: f64| 1.0 / (1.0 + (-x).exp()),
            Unary::Tanh => f64::tanh,
            Unary::Elu => |x: f64| if x > 0.0 { x } else { x.exp_m1() },
        };
        let data = self.value(a).data().iter().map(|x| f(*x)).collect();
        let needs = self.needs(&[a]);
        self.push(
            Array::matrix(r, c, data).expect("same size"),
            Op::Unary(kind, a),
            needs,
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(Unary::Elu, a)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|v| self.value(*v).rows())
            .ok_or(Error::Empty("concat_cols"))?;
        if parts.iter().any(|v| self.value(*v).rows() != rows) {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|v| self.value(*v).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in parts {
                data.extend_from_slice(self.value(*v).row_slice(r));
            }
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Array::matrix(rows, total, data)?,
            Op::ConcatCols(parts.to_vec()),
            needs,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims();
        if start + len > c {
            return Err(shape_err(
                "slice_cols",
                format!("[{start}, {}) of {c} columns", start + len),
            ));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.value(a).row_slice(i)[start..start + len]);
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Array::matrix(r, len, data)?, Op::SliceCols(a, start), needs))
    }

    /// Interleave row blocks: part `i` holds `groups * per_i` rows and the
    /// output holds, for each group, `per_0` rows of part 0, then `per_1`
    /// rows of part 1, and so on.
    pub fn interleave(&mut self, parts: &[(Var, usize)], groups: usize) -> Result<Var> {
        let cols = parts
            .first()
            .map(|(v, _)| self.value(*v).cols())
            .ok_or(Error::Empty("interleave"))?;
        for (v, per) in parts {
            let (r, c) = self.value(*v).dims();
            if c != cols || r != groups * per {
                return Err(shape_err(
                    "interleave",
                    format!("part [{r}, {c}] for {groups} groups of {per}"),
                ));
            }
        }
        let per_group: usize = parts.iter().map(|(_, p)| p).sum();
        let mut data = Vec::with_capacity(groups * per_group * cols);
        for g in 0..groups {
            for (v, per) in parts {
                let src = self.value(*v).data();
                data.extend_from_slice(&src[g * per * cols..(g + 1) * per * cols]);
            }
        }
        let vars: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
        let needs = self.needs(&vars);
        Ok(self.push(
            Array::matrix(groups * per_group, cols, data)?,
            Op::Interleave {
                parts: parts.to_vec(),
                groups,
            },
            needs,
        ))
    }

    /// Row-wise softmax. `-inf` entries get probability exactly zero.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims();
        let x = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            if row.iter().any(|v| v.is_nan()) {
                return Err(shape_err("softmax", "NaN input"));
            }
            let max = row
                .iter()
                .copied()
                .filter(|v| *v != f64::NEG_INFINITY)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::FullyMaskedSoftmax { row: i });
            }
            let out = &mut data[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for (o, v) in out.iter_mut().zip(row) {
                *o = if *v == f64::NEG_INFINITY {
                    0.0
                } else {
                    (v - max).exp()
                };
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Array::matrix(r, c, data)?, Op::SoftmaxRows(a), needs))
    }

    /// Row-wise layer normalisation with learnable `gain` and `bias` rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, d) = self.value(x).dims();
        if d < 2 {
            return Err(Error::LayerNormWidth(d));
        }
        if self.value(gain).dims() != (1, d) || self.value(bias).dims() != (1, d) {
            return Err(shape_err("layer_norm", "gain/bias must be [1, d]"));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut xhat = vec![0.0; r * d];
        let mut out = vec![0.0; r * d];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv[j] + bv[j];
            }
        }
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Array::matrix(r, d, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: Array::matrix(r, d, xhat)?,
                inv_std,
            },
            needs,
        ))
    }

    /// Grouped multi-head dot products.
    ///
    /// `q` is `[G*nq, D]`, `k` is `[G*nk, D]`, `D = heads * d_k`. Output row
    /// `(g*nq + i)*heads + h`, column `j` holds
    /// `scale * <q[g*nq+i], k[g*nk+j]>` restricted to head `h`'s columns.
    pub fn attn_scores(
        &mut self,
        q: Var,
        k: Var,
        nq: usize,
        nk: usize,
        heads: usize,
        scale: f64,
    ) -> Result<Var> {
        let (qr, d) = self.value(q).dims();
        let (kr, d2) = self.value(k).dims();
        if nq == 0 || nk == 0 || heads == 0 || d != d2 || d % heads != 0 || qr % nq != 0 {
            return Err(shape_err(
                "attn_scores",
                format!("q [{qr}, {d}] k [{kr}, {d2}] nq={nq} nk={nk} heads={heads}"),
            ));
        }
        let groups = qr / nq;
        if kr != groups * nk {
            return Err(shape_err(
                "attn_scores",
                format!("{groups} groups need {} key rows, got {kr}", groups * nk),
            ));
        }
        let dk = d / heads;
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let mut out = vec![0.0; groups * nq * heads * nk];
        for g in 0..groups {
            for i in 0..nq {
                let qrow = &qv[(g * nq + i) * d..(g * nq + i + 1) * d];
                for h in 0..heads {
                    let orow = (g * nq + i) * heads + h;
                    let qh = &qrow[h * dk..(h + 1) * dk];
                    for j in 0..nk {
                        let krow = &kv[(g * nk + j) * d + h * dk..(g * nk + j) * d + (h + 1) * dk];
                        let dot: f64 = qh.iter().zip(krow).map(|(a, b)| a * b).sum();
                        out[orow * nk + j] = scale * dot;
                    }
                }
            }
        }
        self.macs += (groups * nq * nk * d) as u64;
        let needs = self.needs(&[q, k]);
        Ok(self.push(
            Array::matrix(groups * nq * heads, nk, out)?,
            Op::AttnScores {
                q,
                k,
                nq,
                nk,
                heads,
                scale,
            },
            needs,
        ))
    }

    /// Grouped multi-head weighted sums, the counterpart of
    /// [`Graph::attn_scores`]: `w` is `[G*nq*heads, nk]`, `v` is `[G*nk, D]`
    /// and the output is `[G*nq, D]` with head `h`'s columns of row
    /// `g*nq + i` equal to `sum_j w[(g*nq+i)*heads+h, j] * v[g*nk+j]`.
    pub fn attn_apply(
        &mut self,
        w: Var,
        v: Var,
        nq: usize,
        nk: usize,
        heads: usize,
    ) -> Result<Var> {
        let (wr, wc) = self.value(w).dims();
        let (vr, d) = self.value(v).dims();
        if nq == 0 || nk == 0 || heads == 0 || wc != nk || d % heads != 0 || wr % (nq * heads) != 0
        {
            return Err(shape_err(
                "attn_apply",
                format!("w [{wr}, {wc}] v [{vr}, {d}] nq={nq} nk={nk} heads={heads}"),
            ));
        }
        let groups = wr / (nq * heads);
        if vr != groups * nk {
            return Err(shape_err(
                "attn_apply",
                format!("{groups} groups need {} value rows, got {vr}", groups * nk),
            ));
        }
        let dk = d / heads;
        let wv = self.value(w).data();
        let vv = self.value(v).data();
        let mut out = vec![0.0; groups * nq * d];
        for g in 0..groups {
            for i in 0..nq {
                let orow = &mut out[(g * nq + i) * d..(g * nq + i + 1) * d];
                for h in 0..heads {
                    let wrow = &wv[((g * nq + i) * heads + h) * nk..][..nk];
                    let oh = &mut orow[h * dk..(h + 1) * dk];
                    for (j, wj) in wrow.iter().enumerate() {
                        let vrow = &vv[(g * nk + j) * d + h * dk..][..dk];
                        for (o, x) in oh.iter_mut().zip(vrow) {
                            *o += wj * x;
                        }
                    }
                }
            }
        }
        self.macs += (groups * nq * nk * d) as u64;
        let needs = self.needs(&[w, v]);
        Ok(self.push(
            Array::matrix(groups * nq, d, out)?,
            Op::AttnApply {
                w,
                v,
                nq,
                nk,
                heads,
            },
            needs,
        ))
    }

    /// Sum each run of `k` consecutive rows: `[R*k, c] -> [R, c]`.
    pub fn sum_row_groups(&mut self, a: Var, k: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims();
        if k == 0 || r % k != 0 {
            return Err(shape_err("sum_row_groups", format!("{r} rows by {k}")));
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; (r / k) * c];
        for i in 0..r {
            let dst = &mut out[(i / k) * c..(i / k + 1) * c];
            for (o, v) in dst.iter_mut().zip(&x[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Array::matrix(r / k, c, out)?, Op::SumRowGroups(a, k), needs))
    }

    /// Stack `times` copies of `a` vertically.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        let (r, c) = self.value(a).dims();
        let data = self.value(a).data().repeat(times);
        let needs = self.needs(&[a]);
        self.push(
            Array::matrix(r * times, c, data).expect("sized"),
            Op::TileRows(a, times),
            needs,
        )
    }

    /// `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).dims();
        let x = self.value(a).data();
        let data = (0..r).map(|i| x[i * c..(i + 1) * c].iter().sum()).collect();
        let needs = self.needs(&[a]);
        self.push(
            Array::matrix(r, 1, data).expect("sized"),
            Op::SumCols(a),
            needs,
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(&[a]);
        self.push(Array::scalar(s), Op::SumAll(a), needs)
    }

    /// Select one column per row: `out[r] = a[r, idx[r]]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.value(a).dims();
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            return Err(shape_err("pick", format!("{} indices into [{r}, {c}]", idx.len())));
        }
        let x = self.value(a);
        let data = idx.iter().enumerate().map(|(i, &j)| x.get(i, j)).collect();
        let needs = self.needs(&[a]);
        Ok(self.push(Array::matrix(r, 1, data)?, Op::Pick(a, idx.to_vec()), needs))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).clone().reshaped(rows, cols)?;
        let needs = self.needs(&[a]);
        Ok(self.push(value, Op::Reshape(a), needs))
    }

    /// Clear accumulated gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Reverse sweep from a `1 x 1` loss node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::RepeatedBackward);
        }
        let shape = self.value(loss).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let (r, c) = self.value(loss).dims();
        self.grads[loss.0] = Some(Array::filled(r, c, 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if let Some(mut buf) = self.take_buf(v) {
            f(buf.data_mut());
            self.grads[v.0] = Some(buf);
        }
    }

    /// Detach the gradient buffer of `v` (zero-filled on first use), or
    /// `None` when `v` needs no gradient.
    fn take_buf(&mut self, v: Var) -> Option<Array> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let (r, c) = self.nodes[v.0].value.dims();
        Some(self.grads[v.0].take().unwrap_or_else(|| Array::zeros(r, c)))
    }

    fn acc_array(&mut self, v: Var, delta: &[f64]) {
        self.acc(v, |buf| {
            for (b, d) in buf.iter_mut().zip(delta) {
                *b += d;
            }
        });
    }

    fn propagate(&mut self, i: usize, g: &Array) {
        let gd = g.data();
        // Ops are moved out temporarily so parent values can be borrowed
        // while gradient buffers are written.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (p, q) = self.value(*a).dims();
                let r = self.value(*b).cols();
                if let Some(mut ga) = self.take_buf(*a) {
                    let bv = self.nodes[b.0].value.data();
                    // SAFETY: ga is p*q, g is p*r, b is q*r (read transposed).
                    unsafe {
                        matrixmultiply::dgemm(
                            p,
                            r,
                            q,
                            1.0,
                            gd.as_ptr(),
                            r as isize,
                            1,
                            bv.as_ptr(),
                            1,
                            r as isize,
                            1.0,
                            ga.data_mut().as_mut_ptr(),
                            q as isize,
                            1,
                        );
                    }
                    self.grads[a.0] = Some(ga);
                }
                if let Some(mut gb) = self.take_buf(*b) {
                    let av = self.nodes[a.0].value.data();
                    // SAFETY: gb is q*r, a is p*q (read transposed), g is p*r.
                    unsafe {
                        matrixmultiply::dgemm(
                            q,
                            p,
                            r,
                            1.0,
                            av.as_ptr(),
                            1,
                            q as isize,
                            gd.as_ptr(),
                            r as isize,
                            1,
                            1.0,
                            gb.data_mut().as_mut_ptr(),
                            r as isize,
                            1,
                        );
                    }
                    self.grads[b.0] = Some(gb);
                }
            }
            Op::Binary(kind, a, b) => match kind {
                Binary::Add => {
                    self.acc_array(*a, gd);
                    self.acc_array(*b, gd);
                }
                Binary::Sub => {
                    self.acc_array(*a, gd);
                    let neg: Vec<f64> = gd.iter().map(|x| -x).collect();
                    self.acc_array(*b, &neg);
                }
                Binary::Mul => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let da: Vec<f64> = gd.iter().zip(bv).map(|(g, y)| g * y).collect();
                    let db: Vec<f64> = gd.iter().zip(av).map(|(g, x)| g * x).collect();
                    self.acc_array(*a, &da);
                    self.acc_array(*b, &db);
                }
            },
            Op::AddRow(a, row) => {
                self.acc_array(*a, gd);
                let c = g.cols();
                let mut sum = vec![0.0; c];
                for chunk in gd.chunks(c.max(1)) {
                    for (s, v) in sum.iter_mut().zip(chunk) {
                        *s += v;
                    }
                }
                self.acc_array(*row, &sum);
            }
            Op::Scale(a, s) => {
                let d: Vec<f64> = gd.iter().map(|x| x * s).collect();
                self.acc_array(*a, &d);
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let y = self.nodes[i].value.data();
                let d: Vec<f64> = match kind {
                    Unary::Relu => gd
                        .iter()
                        .zip(x)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                    Unary::Abs => gd
                        .iter()
                        .zip(x)
                        .map(|(g, x)| {
                            if *x > 0.0 {
                                *g
                            } else if *x < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                    Unary::Sigmoid => gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    Unary::Tanh => gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Unary::Elu => gd
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(g, (x, y))| if *x > 0.0 { *g } else { g * (y + 1.0) })
                        .collect(),
                };
                self.acc_array(*a, &d);
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for v in parts {
                    let c = self.value(*v).cols();
                    if self.nodes[v.0].needs_grad {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + c]);
                        }
                        self.acc_array(*v, &d);
                    }
                    offset += c;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, len) = g.dims();
                let c = self.value(*a).cols();
                let start = *start;
                self.acc(*a, |ga| {
                    for r in 0..rows {
                        for j in 0..len {
                            ga[r * c + start + j] += gd[r * len + j];
                        }
                    }
                });
            }
            Op::Interleave { parts, groups } => {
                let cols = g.cols();
                let per_group: usize = parts.iter().map(|(_, p)| p).sum();
                let mut offset = 0;
                for (v, per) in parts {
                    if self.nodes[v.0].needs_grad {
                        let mut d = Vec::with_capacity(groups * per * cols);
                        for gi in 0..*groups {
                            let start = (gi * per_group + offset) * cols;
                            d.extend_from_slice(&gd[start..start + per * cols]);
                        }
                        self.acc_array(*v, &d);
                    }
                    offset += per;
                }
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = g.dims();
                let y = self.nodes[i].value.data();
                let mut d = vec![0.0; r * c];
                for row in 0..r {
                    let ys = &y[row * c..(row + 1) * c];
                    let gs = &gd[row * c..(row + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[row * c + j] = ys[j] * (gs[j] - dot);
                    }
                }
                self.acc_array(*a, &d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, dim) = g.dims();
                let gv = self.value(*gain).data().to_vec();
                let xh = xhat.data();
                let mut dgain = vec![0.0; dim];
                let mut dbias = vec![0.0; dim];
                let mut dx = vec![0.0; r * dim];
                for row in 0..r {
                    let gs = &gd[row * dim..(row + 1) * dim];
                    let hs = &xh[row * dim..(row + 1) * dim];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..dim {
                        dgain[j] += gs[j] * hs[j];
                        dbias[j] += gs[j];
                        let dh = gs[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hs[j];
                    }
                    let n = dim as f64;
                    for j in 0..dim {
                        let dh = gs[j] * gv[j];
                        dx[row * dim + j] =
                            inv_std[row] / n * (n * dh - sum_dh - hs[j] * sum_dh_h);
                    }
                }
                self.acc_array(*x, &dx);
                self.acc_array(*gain, &dgain);
                self.acc_array(*bias, &dbias);
            }
            Op::AttnScores {
                q,
                k,
                nq,
                nk,
                heads,
                scale,
            } => {
                let (nq, nk, heads, scale) = (*nq, *nk, *heads, *scale);
                let d = self.value(*q).cols();
                let dk = d / heads;
                let groups = self.value(*q).rows() / nq;
                let qv = self.value(*q).data();
                let kv = self.value(*k).data();
                let want_q = self.nodes[q.0].needs_grad;
                let want_k = self.nodes[k.0].needs_grad;
                let mut dq = if want_q { vec![0.0; qv.len()] } else { Vec::new() };
                let mut dkv = if want_k { vec![0.0; kv.len()] } else { Vec::new() };
                for gi in 0..groups {
                    for qi in 0..nq {
                        let qrow = (gi * nq + qi) * d;
                        for h in 0..heads {
                            let orow = ((gi * nq + qi) * heads + h) * nk;
                            for j in 0..nk {
                                let go = scale * gd[orow + j];
                                if go == 0.0 {
                                    continue;
                                }
                                let krow = (gi * nk + j) * d + h * dk;
                                let qoff = qrow + h * dk;
                                if want_q {
                                    for c in 0..dk {
                                        dq[qoff + c] += go * kv[krow + c];
                                    }
                                }
                                if want_k {
                                    for c in 0..dk {
                                        dkv[krow + c] += go * qv[qoff + c];
                                    }
                                }
                            }
                        }
                    }
                }
                if want_q {
                    self.acc_array(*q, &dq);
                }
                if want_k {
                    self.acc_array(*k, &dkv);
                }
            }
            Op::AttnApply {
                w,
                v,
                nq,
                nk,
                heads,
            } => {
                let (nq, nk, heads) = (*nq, *nk, *heads);
                let d = self.value(*v).cols();
                let dk = d / heads;
                let groups = self.value(*w).rows() / (nq * heads);
                let wv = self.value(*w).data();
                let vv = self.value(*v).data();
                let want_w = self.nodes[w.0].needs_grad;
                let want_v = self.nodes[v.0].needs_grad;
                let mut dw = if want_w { vec![0.0; wv.len()] } else { Vec::new() };
                let mut dv = if want_v { vec![0.0; vv.len()] } else { Vec::new() };
                for gi in 0..groups {
                    for qi in 0..nq {
                        let orow = (gi * nq + qi) * d;
                        for h in 0..heads {
                            let wrow = ((gi * nq + qi) * heads + h) * nk;
                            let go = &gd[orow + h * dk..orow + (h + 1) * dk];
                            for j in 0..nk {
                                let voff = (gi * nk + j) * d + h * dk;
                                if want_w {
                                    dw[wrow + j] += go
                                        .iter()
                                        .zip(&vv[voff..voff + dk])
                                        .map(|(a, b)| a * b)
                                        .sum::<f64>();
                                }
                                if want_v {
                                    let wj = wv[wrow + j];
                                    for c in 0..dk {
                                        dv[voff + c] += wj * go[c];
                                    }
                                }
                            }
                        }
                    }
                }
                if want_w {
                    self.acc_array(*w, &dw);
                }
                if want_v {
                    self.acc_array(*v, &dv);
                }
            }
            Op::SumRowGroups(a, k) => {
                let c = g.cols();
                let k = *k;
                self.acc(*a, |ga| {
                    for (idx, x) in ga.iter_mut().enumerate() {
                        let row = idx / c;
                        *x += gd[(row / k) * c + idx % c];
                    }
                });
            }
            Op::TileRows(a, times) => {
                let n = self.value(*a).len();
                let times = *times;
                self.acc(*a, |ga| {
                    for t in 0..times {
                        for (x, d) in ga.iter_mut().zip(&gd[t * n..(t + 1) * n]) {
                            *x += d;
                        }
                    }
                });
            }
            Op::SumCols(a) => {
                let c = self.value(*a).cols();
                self.acc(*a, |ga| {
                    for (idx, x) in ga.iter_mut().enumerate() {
                        *x += gd[idx / c];
                    }
                });
            }
            Op::SumAll(a) => {
                let s = gd[0];
                self.acc(*a, |ga| {
                    for x in ga.iter_mut() {
                        *x += s;
                    }
                });
            }
            Op::Pick(a, idx) => {
                let c = self.value(*a).cols();
                self.acc(*a, |ga| {
                    for (row, &j) in idx.iter().enumerate() {
                        ga[row * c + j] += gd[row];
                    }
                });
            }
            Op::Reshape(a) => self.acc_array(*a, gd),
        }
        self.nodes[i].op = op;
    }
}
