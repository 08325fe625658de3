use super::kernels::{axpy, col_sum_acc, matmul_nn_acc, matmul_nt, matmul_tn_acc, sigmoid};
use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::trajkit::wrap_angle;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and queue a running-stat update.
    Train,
    /// Normalize with the stored running statistics.
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

/// Gate weights in `(input, forget, cell, output)` block order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstmWeights {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

/// A running-statistics update produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStatUpdate {
    mean_id: ParamId,
    var_id: ParamId,
    momentum: f64,
    rows: usize,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

impl RunningStatUpdate {
    pub fn apply(&self, store: &mut ParamStore) {
        let m = self.momentum;
        for (r, b) in store.value_mut(self.mean_id).data_mut().iter_mut().zip(&self.batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in store.value_mut(self.var_id).data_mut().iter_mut().zip(&self.batch_var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }

    /// Replaces the running statistics with the population mean and biased
    /// variance of all rows behind `parts`, grouped per layer.
    pub fn assign_population(parts: &[RunningStatUpdate], store: &mut ParamStore) {
        let mut layers: Vec<ParamId> = parts.iter().map(|u| u.mean_id).collect();
        layers.sort_unstable();
        layers.dedup();
        for id in layers {
            let group: Vec<&RunningStatUpdate> = parts.iter().filter(|u| u.mean_id == id).collect();
            let n: usize = group.iter().map(|u| u.rows).sum();
            if n == 0 {
                continue;
            }
            let c = group[0].batch_mean.len();
            let mut mean = vec![0.0; c];
            for u in &group {
                axpy(u.rows as f64 / n as f64, &u.batch_mean, &mut mean);
            }
            let mut var = vec![0.0; c];
            for u in &group {
                let r = u.rows as f64;
                let shrink = if u.rows > 1 { (r - 1.0) / r } else { 0.0 };
                for j in 0..c {
                    let dm = u.batch_mean[j] - mean[j];
                    var[j] += r / n as f64 * (u.batch_var[j] * shrink + dm * dm);
                }
            }
            store.value_mut(id).data_mut().copy_from_slice(&mean);
            store.value_mut(group[0].var_id).data_mut().copy_from_slice(&var);
        }
    }
}

enum GateSource {
    Raw { x: Var, w_ih: Var, bias: Var },
    Projected(Var),
}

enum Op {
    Leaf,
    Param(ParamId),
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleCols(Var, Vec<f64>),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Softmax(Var),
    LogSoftmax(Var),
    SegmentMax {
        x: Var,
        argmax: Vec<Option<usize>>,
    },
    Lstm {
        gates: GateSource,
        h: Var,
        c: Var,
        w_hh: Var,
        /// activated gates, `[rows, 4H]`
        acts: Vec<f64>,
        tanh_c: Vec<f64>,
        hidden: usize,
    },
    GaussianNll {
        mean: Var,
        chol: Var,
        dim: usize,
        z: Vec<f64>,
        u: Vec<f64>,
        ldiag: Vec<f64>,
        inside: Vec<bool>,
    },
    Sum(Var),
    Pick(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records forward operations for one backward pass.
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    bn_updates: Vec<RunningStatUpdate>,
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).expect("operator produced consistent shape")
}

/// `0.5·ln(2π)`
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Bounds on the log of each Cholesky diagonal entry.
pub const LOG_DIAG_CLAMP: f64 = 4.0;

/// Number of Cholesky parameters for a `dim`-dimensional Gaussian.
pub fn chol_len(dim: usize) -> usize {
    dim + dim * (dim - 1) / 2
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::with_capacity(1024),
            bn_updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
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

    pub fn running_stat_updates(&self) -> &[RunningStatUpdate] {
        &self.bn_updates
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let p = self.store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param(id),
            needs_grad: p.trainable,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x·Wᵀ + b` with `x: [R, I]`, `W: [O, I]`, `b: [O]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (r, i) = self.dims(x);
        let (o, wi) = self.dims(w);
        if wi != i {
            return Err(Error::shape(format!(
                "affine: input x is [{r}, {i}] but weight W is [{o}, {wi}]"
            )));
        }
        if let Some(b) = b {
            if self.nodes[b.0].value.len() != o {
                return Err(Error::shape(format!(
                    "affine: bias b has {} entries, W has {o} outputs",
                    self.nodes[b.0].value.len()
                )));
            }
        }
        let mut out = vec![0.0; r * o];
        matmul_nt(
            self.data(x),
            r,
            i,
            self.data(w),
            o,
            b.map(|b| self.data(b)),
            &mut out,
            false,
        );
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(mat(r, o, out), Op::Affine { x, w, b }, &parents))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape(format!("{what}: operands are {da:?} and {db:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (r, c) = self.dims(a);
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(mat(r, c, out), Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (r, c) = self.dims(a);
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(mat(r, c, out), Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.data(a).iter().map(|x| x * s).collect();
        self.push(mat(r, c, out), Op::Scale(a, s), &[a])
    }

    /// Multiplies column `j` by `factors[j]`.
    pub fn scale_cols(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let (r, c) = self.dims(a);
        if factors.len() != c {
            return Err(Error::shape(format!(
                "scale_cols: {} factors for {c} columns",
                factors.len()
            )));
        }
        let out = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x * factors[i % c])
            .collect();
        Ok(self.push(mat(r, c, out), Op::ScaleCols(a, factors), &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(mat(r, c, out), Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.data(a).iter().map(|x| x.tanh()).collect();
        self.push(mat(r, c, out), Op::Tanh(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self
            .data(a)
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        self.push(mat(r, c, out), Op::LeakyRelu(a, slope), &[a])
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat: no operands"));
        };
        let rows = self.dims(first).0;
        if let Some(bad) = parts.iter().find(|v| self.dims(**v).0 != rows) {
            return Err(Error::shape(format!(
                "concat: operand has {} rows, expected {rows}",
                self.dims(*bad).0
            )));
        }
        let widths: Vec<usize> = parts.iter().map(|v| self.dims(*v).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(*v)[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(mat(rows, total, out), Op::Concat(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > c {
            return Err(Error::shape(format!(
                "slice_cols: columns {start}..{} of a [{r}, {c}] operand",
                start + len
            )));
        }
        let d = self.data(a);
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&d[row * c + start..row * c + start + len]);
        }
        Ok(self.push(mat(r, len, out), Op::SliceCols(a, start), &[a]))
    }

    /// Row `k` of the output is row `index[k]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::shape(format!("gather_rows: row {bad} of a {r}-row operand")));
        }
        let d = self.data(a);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in &index {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        let n = index.len();
        Ok(self.push(mat(n, c, out), Op::GatherRows(a, index), &[a]))
    }

    /// Per-column normalization over the rows of `x`.
    pub fn batch_norm(&mut self, x: Var, bn: &BatchNormParams, mode: BatchNormMode) -> Result<Var> {
        let (r, c) = self.dims(x);
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[v.0].value.len() != c {
                return Err(Error::shape(format!(
                    "batch_norm: {name} has {} entries for {c} columns",
                    self.nodes[v.0].value.len()
                )));
            }
        }
        let train = mode == BatchNormMode::Train;
        let (mean, var) = if train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            if r > 0 {
                let d = self.data(x);
                for row in 0..r {
                    axpy(1.0, &d[row * c..(row + 1) * c], &mut mean);
                }
                mean.iter_mut().for_each(|m| *m /= r as f64);
                for row in 0..r {
                    for j in 0..c {
                        let e = d[row * c + j] - mean[j];
                        var[j] += e * e;
                    }
                }
                var.iter_mut().for_each(|v| *v /= r as f64);
                let unbiased = if r > 1 {
                    var.iter().map(|v| v * r as f64 / (r - 1) as f64).collect()
                } else {
                    var.clone()
                };
                self.bn_updates.push(RunningStatUpdate {
                    mean_id: bn.running_mean,
                    var_id: bn.running_var,
                    momentum: bn.momentum,
                    rows: r,
                    batch_mean: mean.clone(),
                    batch_var: unbiased,
                });
            }
            (mean, var)
        } else {
            (
                self.store.value(bn.running_mean).data().to_vec(),
                self.store.value(bn.running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
        let d = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![0.0; r * c];
        let mut out = vec![0.0; r * c];
        for row in 0..r {
            for j in 0..c {
                let i = row * c + j;
                xhat[i] = (d[i] - mean[j]) * inv_std[j];
                out[i] = g[j] * xhat[i] + b[j];
            }
        }
        Ok(self.push(
            mat(r, c, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(mat(r, c, out), Op::Softmax(a), &[a])
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(mat(r, c, out), Op::LogSoftmax(a), &[a])
    }

    /// Element-wise max over each group of rows. `groups[k] = (start, len)`
    /// selects rows of `x` for output row `k`; empty groups give zeros.
    pub fn max_pool_over_set(&mut self, x: Var, groups: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(&(s, l)) = groups.iter().find(|(s, l)| s + l > r) {
            return Err(Error::shape(format!(
                "max_pool_over_set: group rows {s}..{} of a {r}-row operand",
                s + l
            )));
        }
        let d = self.data(x);
        let mut out = vec![0.0; groups.len() * c];
        let mut argmax = vec![None; groups.len() * c];
        for (k, &(start, len)) in groups.iter().enumerate() {
            if len == 0 {
                continue;
            }
            for j in 0..c {
                let mut best = start;
                for row in start + 1..start + len {
                    if d[row * c + j] > d[best * c + j] {
                        best = row;
                    }
                }
                out[k * c + j] = d[best * c + j];
                argmax[k * c + j] = Some(best);
            }
        }
        Ok(self.push(mat(groups.len(), c, out), Op::SegmentMax { x, argmax }, &[x]))
    }

    /// Argmax source rows recorded by a [`Tape::max_pool_over_set`] node.
    pub fn pool_argmax(&self, v: Var) -> Option<&[Option<usize>]> {
        match &self.nodes[v.0].op {
            Op::SegmentMax { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    /// One LSTM step. Returns `(h', c')`.
    pub fn lstm_cell(&mut self, x: Var, h: Var, c: Var, w: &LstmWeights) -> Result<(Var, Var)> {
        let w_ih = self.param(w.w_ih);
        let bias = self.param(w.bias);
        let w_hh = self.param(w.w_hh);
        self.lstm_cell_with(GateSource::Raw { x, w_ih, bias }, h, c, w_hh, w.hidden)
    }

    /// LSTM step whose input contribution `x·W_ihᵀ + b` was computed
    /// beforehand (useful when the input is the same at every step).
    pub fn lstm_cell_projected(&mut self, gates_in: Var, h: Var, c: Var, w_hh: Var, hidden: usize) -> Result<(Var, Var)> {
        self.lstm_cell_with(GateSource::Projected(gates_in), h, c, w_hh, hidden)
    }

    fn lstm_cell_with(&mut self, src: GateSource, h: Var, c: Var, w_hh: Var, hid: usize) -> Result<(Var, Var)> {
        let (r, hc) = self.dims(h);
        if hc != hid || self.dims(c) != (r, hid) {
            return Err(Error::shape(format!(
                "lstm_cell: state h {:?} / c {:?} for hidden size {hid}",
                self.dims(h),
                self.dims(c)
            )));
        }
        if self.dims(w_hh) != (4 * hid, hid) {
            return Err(Error::shape(format!(
                "lstm_cell: W_hh is {:?}, expected [{}, {hid}]",
                self.dims(w_hh),
                4 * hid
            )));
        }
        let mut gates = vec![0.0; r * 4 * hid];
        match &src {
            GateSource::Raw { x, w_ih, bias } => {
                let (xr, xi) = self.dims(*x);
                if xr != r || self.dims(*w_ih) != (4 * hid, xi) || self.nodes[bias.0].value.len() != 4 * hid {
                    return Err(Error::shape(format!(
                        "lstm_cell: input x {:?}, W_ih {:?}, bias {} for {r} rows and hidden size {hid}",
                        self.dims(*x),
                        self.dims(*w_ih),
                        self.nodes[bias.0].value.len()
                    )));
                }
                matmul_nt(self.data(*x), r, xi, self.data(*w_ih), 4 * hid, Some(self.data(*bias)), &mut gates, false);
            }
            GateSource::Projected(g) => {
                if self.dims(*g) != (r, 4 * hid) {
                    return Err(Error::shape(format!(
                        "lstm_cell: projected gates {:?}, expected [{r}, {}]",
                        self.dims(*g),
                        4 * hid
                    )));
                }
                gates.copy_from_slice(self.data(*g));
            }
        }
        matmul_nt(self.data(h), r, hid, self.data(w_hh), 4 * hid, None, &mut gates, true);
        let cd = self.data(c);
        let mut out = vec![0.0; r * 2 * hid];
        let mut tanh_c = vec![0.0; r * hid];
        for row in 0..r {
            let g = &mut gates[row * 4 * hid..(row + 1) * 4 * hid];
            for j in 0..hid {
                g[j] = sigmoid(g[j]);
                g[hid + j] = sigmoid(g[hid + j]);
                g[2 * hid + j] = g[2 * hid + j].tanh();
                g[3 * hid + j] = sigmoid(g[3 * hid + j]);
                let cn = g[hid + j] * cd[row * hid + j] + g[j] * g[2 * hid + j];
                let tc = cn.tanh();
                tanh_c[row * hid + j] = tc;
                out[row * 2 * hid + j] = g[3 * hid + j] * tc;
                out[row * 2 * hid + hid + j] = cn;
            }
        }
        let mut parents = vec![h, c, w_hh];
        match &src {
            GateSource::Raw { x, w_ih, bias } => parents.extend([*x, *w_ih, *bias]),
            GateSource::Projected(g) => parents.push(*g),
        }
        let both = self.push(
            mat(r, 2 * hid, out),
            Op::Lstm {
                gates: src,
                h,
                c,
                w_hh,
                acts: gates,
                tanh_c,
                hidden: hid,
            },
            &parents,
        );
        let h_new = self.slice_cols(both, 0, hid)?;
        let c_new = self.slice_cols(both, hid, hid)?;
        Ok((h_new, c_new))
    }

    /// Per-row negative log-likelihood of `target` under
    /// `N(mean, L·Lᵀ)`. `chol` holds `dim` log-diagonal entries (clamped to
    /// `±4`) followed by the strict lower triangle in row order. The
    /// residual in column `angular`, if given, is wrapped to `(-π, π]`.
    pub fn gaussian_nll(&mut self, target: &Tensor, mean: Var, chol: Var, angular: Option<usize>) -> Result<Var> {
        let (r, d) = self.dims(mean);
        if target.dims() != (r, d) {
            return Err(Error::shape(format!(
                "gaussian_nll: target {:?} vs mean {:?}",
                target.dims(),
                (r, d)
            )));
        }
        let m = chol_len(d);
        if self.dims(chol) != (r, m) {
            return Err(Error::shape(format!(
                "gaussian_nll: chol_params {:?}, expected [{r}, {m}]",
                self.dims(chol)
            )));
        }
        if !target.is_finite() || !self.nodes[mean.0].value.is_finite() || !self.nodes[chol.0].value.is_finite() {
            return Err(Error::Numeric("gaussian_nll: non-finite input".into()));
        }
        let (md, cd, td) = (self.data(mean), self.data(chol), target.data());
        let mut out = vec![0.0; r];
        let mut zs = vec![0.0; r * d];
        let mut us = vec![0.0; r * d];
        let mut ldiag = vec![0.0; r * d];
        let mut inside = vec![false; r * d];
        let mut l = vec![0.0; d * d];
        for row in 0..r {
            let cp = &cp_row(cd, row, m);
            l.fill(0.0);
            let mut logdet = 0.0;
            for i in 0..d {
                let s = cp[i];
                inside[row * d + i] = s > -LOG_DIAG_CLAMP && s < LOG_DIAG_CLAMP;
                let ls = s.clamp(-LOG_DIAG_CLAMP, LOG_DIAG_CLAMP);
                logdet += ls;
                l[i * d + i] = ls.exp();
                ldiag[row * d + i] = l[i * d + i];
            }
            let mut k = d;
            for i in 1..d {
                for j in 0..i {
                    l[i * d + j] = cp[k];
                    k += 1;
                }
            }
            let z = &mut zs[row * d..(row + 1) * d];
            for i in 0..d {
                let mut res = td[row * d + i] - md[row * d + i];
                if angular == Some(i) {
                    res = wrap_angle(res);
                }
                let mut acc = res;
                for j in 0..i {
                    acc -= l[i * d + j] * z[j];
                }
                z[i] = acc / l[i * d + i];
            }
            let u = &mut us[row * d..(row + 1) * d];
            for i in (0..d).rev() {
                let mut acc = z[i];
                for j in i + 1..d {
                    acc -= l[j * d + i] * u[j];
                }
                u[i] = acc / l[i * d + i];
            }
            out[row] = d as f64 * HALF_LN_2PI + logdet + 0.5 * z.iter().map(|v| v * v).sum::<f64>();
        }
        Ok(self.push(
            mat(r, 1, out),
            Op::GaussianNll {
                mean,
                chol,
                dim: d,
                z: zs,
                u: us,
                ldiag,
                inside,
            },
            &[mean, chol],
        ))
    }

    /// Sum of all entries, as a `[1, 1]` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// `out[r] = a[r, index[r]]`.
    pub fn pick(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        let (r, c) = self.dims(a);
        if index.len() != r || index.iter().any(|&i| i >= c) {
            return Err(Error::shape(format!(
                "pick: {} indices into a [{r}, {c}] operand",
                index.len()
            )));
        }
        let d = self.data(a);
        let out = index.iter().enumerate().map(|(row, &i)| d[row * c + i]).collect();
        Ok(self.push(mat(r, 1, out), Op::Pick(a, index), &[a]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut out = self.store.empty_gradients();
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], out: &mut Gradients) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let slot = out.grads[id.0].get_or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
                axpy(1.0, g, slot.data_mut());
            }
            Op::Affine { x, w, b } => {
                let (r, inp) = self.dims(*x);
                let o = node.value.cols();
                if let Some(dx) = self.grad_slot(grads, *x) {
                    matmul_nn_acc(g, r, o, self.data(*w), inp, dx);
                }
                if let Some(dw) = self.grad_slot(grads, *w) {
                    matmul_tn_acc(g, r, o, self.data(*x), inp, dw);
                }
                if let Some(b) = b {
                    if let Some(db) = self.grad_slot(grads, *b) {
                        col_sum_acc(g, r, o, db);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.grad_slot(grads, v) {
                        axpy(1.0, g, d);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = self.grad_slot(grads, *a) {
                    for ((d, gi), bi) in da.iter_mut().zip(g).zip(self.data(*b)) {
                        *d += gi * bi;
                    }
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    for ((d, gi), ai) in db.iter_mut().zip(g).zip(self.data(*a)) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(d) = self.grad_slot(grads, *a) {
                    axpy(*s, g, d);
                }
            }
            Op::ScaleCols(a, f) => {
                let c = f.len();
                if let Some(d) = self.grad_slot(grads, *a) {
                    for (k, (dk, gk)) in d.iter_mut().zip(g).enumerate() {
                        *dk += gk * f[k % c];
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(d) = self.grad_slot(grads, *a) {
                    for ((dk, gk), y) in d.iter_mut().zip(g).zip(node.value.data()) {
                        *dk += gk * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(d) = self.grad_slot(grads, *a) {
                    for ((dk, gk), y) in d.iter_mut().zip(g).zip(node.value.data()) {
                        *dk += gk * (1.0 - y * y);
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.data(*a);
                if let Some(d) = self.grad_slot(grads, *a) {
                    for ((dk, gk), xk) in d.iter_mut().zip(g).zip(x) {
                        *dk += if *xk > 0.0 { *gk } else { slope * gk };
                    }
                }
            }
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for v in parts {
                    let w = self.dims(*v).1;
                    if let Some(d) = self.grad_slot(grads, *v) {
                        for r in 0..rows {
                            axpy(1.0, &g[r * total + off..r * total + off + w], &mut d[r * w..(r + 1) * w]);
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.dims(*a);
                let len = node.value.cols();
                if let Some(d) = self.grad_slot(grads, *a) {
                    for row in 0..r {
                        axpy(1.0, &g[row * len..(row + 1) * len], &mut d[row * c + start..row * c + start + len]);
                    }
                }
            }
            Op::GatherRows(a, index) => {
                let c = self.dims(*a).1;
                if let Some(d) = self.grad_slot(grads, *a) {
                    for (k, &src) in index.iter().enumerate() {
                        axpy(1.0, &g[k * c..(k + 1) * c], &mut d[src * c..(src + 1) * c]);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (r, c) = self.dims(*x);
                let gm = self.data(*gamma);
                if let Some(db) = self.grad_slot(grads, *beta) {
                    col_sum_acc(g, r, c, db);
                }
                if let Some(dg) = self.grad_slot(grads, *gamma) {
                    for row in 0..r {
                        for j in 0..c {
                            dg[j] += g[row * c + j] * xhat[row * c + j];
                        }
                    }
                }
                if let Some(dx) = self.grad_slot(grads, *x) {
                    if *train {
                        let mut s1 = vec![0.0; c];
                        let mut s2 = vec![0.0; c];
                        for row in 0..r {
                            for j in 0..c {
                                let dxh = g[row * c + j] * gm[j];
                                s1[j] += dxh;
                                s2[j] += dxh * xhat[row * c + j];
                            }
                        }
                        let n = r as f64;
                        for row in 0..r {
                            for j in 0..c {
                                let k = row * c + j;
                                let dxh = g[k] * gm[j];
                                dx[k] += inv_std[j] / n * (n * dxh - s1[j] - xhat[k] * s2[j]);
                            }
                        }
                    } else {
                        for row in 0..r {
                            for j in 0..c {
                                dx[row * c + j] += g[row * c + j] * gm[j] * inv_std[j];
                            }
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                let y = node.value.data();
                if let Some(d) = self.grad_slot(grads, *a) {
                    for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((dk, gk), yk) in dr.iter_mut().zip(gr).zip(yr) {
                            *dk += yk * (gk - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                let y = node.value.data();
                if let Some(d) = self.grad_slot(grads, *a) {
                    for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s: f64 = gr.iter().sum();
                        for ((dk, gk), yk) in dr.iter_mut().zip(gr).zip(yr) {
                            *dk += gk - yk.exp() * s;
                        }
                    }
                }
            }
            Op::SegmentMax { x, argmax } => {
                let c = self.dims(*x).1;
                if let Some(d) = self.grad_slot(grads, *x) {
                    for (k, src) in argmax.iter().enumerate() {
                        if let Some(row) = src {
                            d[row * c + k % c] += g[k];
                        }
                    }
                }
            }
            Op::Lstm {
                gates,
                h,
                c,
                w_hh,
                acts,
                tanh_c,
                hidden,
            } => self.backprop_lstm(g, grads, gates, *h, *c, *w_hh, acts, tanh_c, *hidden),
            Op::GaussianNll {
                mean,
                chol,
                dim,
                z,
                u,
                ldiag,
                inside,
            } => {
                let d = *dim;
                let m = chol_len(d);
                let r = node.value.rows();
                if let Some(dm) = self.grad_slot(grads, *mean) {
                    for row in 0..r {
                        for i in 0..d {
                            dm[row * d + i] -= g[row] * u[row * d + i];
                        }
                    }
                }
                if let Some(dc) = self.grad_slot(grads, *chol) {
                    for row in 0..r {
                        let gr = g[row];
                        let (zr, ur) = (&z[row * d..(row + 1) * d], &u[row * d..(row + 1) * d]);
                        let dcr = &mut dc[row * m..(row + 1) * m];
                        for i in 0..d {
                            if inside[row * d + i] {
                                dcr[i] += gr * (1.0 - ur[i] * zr[i] * ldiag[row * d + i]);
                            }
                        }
                        let mut k = d;
                        for i in 1..d {
                            for j in 0..i {
                                dcr[k] -= gr * ur[i] * zr[j];
                                k += 1;
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(d) = self.grad_slot(grads, *a) {
                    let s = g[0];
                    d.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::Pick(a, index) => {
                let c = self.dims(*a).1;
                if let Some(d) = self.grad_slot(grads, *a) {
                    for (row, &i) in index.iter().enumerate() {
                        d[row * c + i] += g[row];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_lstm(
        &self,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        src: &GateSource,
        h: Var,
        c: Var,
        w_hh: Var,
        acts: &[f64],
        tanh_c: &[f64],
        hid: usize,
    ) {
        let r = self.dims(h).0;
        let cprev = self.data(c);
        let g4 = 4 * hid;
        let mut dgates = vec![0.0; r * g4];
        let mut dc_prev = vec![0.0; r * hid];
        for row in 0..r {
            let a = &acts[row * g4..(row + 1) * g4];
            let dg = &mut dgates[row * g4..(row + 1) * g4];
            for j in 0..hid {
                let (ig, fg, cg, og) = (a[j], a[hid + j], a[2 * hid + j], a[3 * hid + j]);
                let tc = tanh_c[row * hid + j];
                let dh = g[row * 2 * hid + j];
                let dc = g[row * 2 * hid + hid + j] + dh * og * (1.0 - tc * tc);
                dg[j] = dc * cg * ig * (1.0 - ig);
                dg[hid + j] = dc * cprev[row * hid + j] * fg * (1.0 - fg);
                dg[2 * hid + j] = dc * ig * (1.0 - cg * cg);
                dg[3 * hid + j] = dh * tc * og * (1.0 - og);
                dc_prev[row * hid + j] = dc * fg;
            }
        }
        if let Some(d) = self.grad_slot(grads, c) {
            axpy(1.0, &dc_prev, d);
        }
        if let Some(d) = self.grad_slot(grads, h) {
            matmul_nn_acc(&dgates, r, g4, self.data(w_hh), hid, d);
        }
        if let Some(d) = self.grad_slot(grads, w_hh) {
            matmul_tn_acc(&dgates, r, g4, self.data(h), hid, d);
        }
        match src {
            GateSource::Raw { x, w_ih, bias } => {
                let xi = self.dims(*x).1;
                if let Some(d) = self.grad_slot(grads, *x) {
                    matmul_nn_acc(&dgates, r, g4, self.data(*w_ih), xi, d);
                }
                if let Some(d) = self.grad_slot(grads, *w_ih) {
                    matmul_tn_acc(&dgates, r, g4, self.data(*x), xi, d);
                }
                if let Some(d) = self.grad_slot(grads, *bias) {
                    col_sum_acc(&dgates, r, g4, d);
                }
            }
            GateSource::Projected(v) => {
                if let Some(d) = self.grad_slot(grads, *v) {
                    axpy(1.0, &dgates, d);
                }
            }
        }
    }
}

fn cp_row(cd: &[f64], row: usize, m: usize) -> [f64; 6] {
    let mut out = [0.0; 6];
    out[..m].copy_from_slice(&cd[row * m..(row + 1) * m]);
    out
}

/// Dense reference for tests: `-log N(r | 0, Σ)` using an explicit inverse.
#[cfg(test)]
pub(crate) fn dense_nll_oracle(residual: &[f64], sigma: &[f64]) -> f64 {
    let d = residual.len();
    // Gauss-Jordan inverse and determinant
    let mut a = sigma.to_vec();
    let mut inv: Vec<f64> = (0..d * d).map(|k| if k / d == k % d { 1.0 } else { 0.0 }).collect();
    let mut det = 1.0;
    for col in 0..d {
        let piv = (col..d).max_by(|&x, &y| a[x * d + col].abs().total_cmp(&a[y * d + col].abs())).unwrap();
        if piv != col {
            for k in 0..d {
                a.swap(piv * d + k, col * d + k);
                inv.swap(piv * d + k, col * d + k);
            }
            det = -det;
        }
        let p = a[col * d + col];
        det *= p;
        for k in 0..d {
            a[col * d + k] /= p;
            inv[col * d + k] /= p;
        }
        for row in 0..d {
            if row != col {
                let f = a[row * d + col];
                for k in 0..d {
                    a[row * d + k] -= f * a[col * d + k];
                    inv[row * d + k] -= f * inv[col * d + k];
                }
            }
        }
    }
    let mut quad = 0.0;
    for i in 0..d {
        for j in 0..d {
            quad += residual[i] * inv[i * d + j] * residual[j];
        }
    }
    0.5 * (d as f64 * std::f64::consts::TAU.ln() + det.ln() + quad)
}
