//! Reverse-mode differentiation over row-major `f64` matrices.
//!
//! The op set covers what the routing policy needs: affine maps, batch
//! normalisation, grouped multi-head attention with masks, row gathers and
//! the clipped pointer log-probability. Every op caches what its backward pass
//! needs at record time.

use ndarray::{s, Array2, ArrayView2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape of a grouped attention call.
///
/// Queries are stacked as `groups * queries_per_group` rows, keys and values
/// as `groups * keys_per_group` rows; each row holds `heads` equal column
/// slices. `allowed[(g * nq + i) * nk + j]` gates query `i` against key `j`
/// in group `g`; a query with no allowed key attends to nothing and outputs
/// zeros.
#[derive(Debug, Clone)]
pub struct AttentionSpec {
    pub groups: usize,
    pub queries_per_group: usize,
    pub keys_per_group: usize,
    pub heads: usize,
    pub allowed: Option<Vec<bool>>,
}

impl AttentionSpec {
    fn allowed(&self, g: usize, i: usize, j: usize) -> bool {
        match &self.allowed {
            None => true,
            Some(a) => a[(g * self.queries_per_group + i) * self.keys_per_group + j],
        }
    }
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub rows: usize,
}

#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    /// Normalise with the batch's own statistics.
    Train,
    /// Normalise with frozen running statistics.
    Frozen { mean: &'a [f64], var: &'a [f64] },
}

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Relu(Var),
    BatchNorm {
        x: Var,
        weight: Var,
        bias: Var,
        normalized: Mat,
        inv_std: Vec<f64>,
        train: bool,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
    SegmentMean {
        x: Var,
        groups: usize,
    },
    Gather {
        src: Var,
        fill: Var,
        rows: Vec<Option<usize>>,
    },
    ConcatCols(Vec<Var>),
    Pointer {
        q: Var,
        k: Var,
        keys_per_group: usize,
        scale: f64,
        clip: f64,
        allowed: Vec<bool>,
        tanh: Vec<f64>,
        probs: Vec<f64>,
        selected: Vec<usize>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    MeanSquaredError {
        x: Var,
        targets: Vec<f64>,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Result of a pointer evaluation, exposed before the selection is made.
#[derive(Debug, Clone)]
pub struct PointerView<'a> {
    /// Row-major `groups x keys` probabilities; masked entries are exactly 0.
    pub probs: &'a [f64],
    /// Clipped logits `C * tanh(.)`; masked entries hold [`MASKED_LOGIT`].
    pub logits: &'a [f64],
    pub keys_per_group: usize,
}

/// Sentinel for masked logits.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `x W^T + b` with `W` stored as `out x in` and `b` as `1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let mut y = self.value(x).dot(&self.value(w).t());
        if let Some(b) = b {
            y += &self.value(b).row(0);
        }
        self.push(y, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        self.push(y, Op::Add(a, b))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.max(0.0));
        self.push(y, Op::Relu(x))
    }

    /// Column-wise batch normalisation followed by `weight * x + bias`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        mode: NormMode<'_>,
        eps: f64,
    ) -> (Var, Option<BatchStats>) {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                let mean: Vec<f64> = xv.mean_axis(Axis(0)).expect("non-empty").to_vec();
                let var: Vec<f64> = (0..cols)
                    .map(|c| {
                        xv.column(c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>()
                            / rows as f64
                    })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    rows,
                };
                (mean, var, Some(stats))
            }
            NormMode::Frozen { mean, var } => (mean.to_vec(), var.to_vec(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut normalized = xv.to_owned();
        for mut row in normalized.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[c]) * inv_std[c];
            }
        }
        let w = self.value(weight).row(0).to_owned();
        let b = self.value(bias).row(0).to_owned();
        let mut y = normalized.clone();
        for mut row in y.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = *v * w[c] + b[c];
            }
        }
        let train = matches!(mode, NormMode::Train);
        let out = self.push(
            y,
            Op::BatchNorm {
                x,
                weight,
                bias,
                normalized,
                inv_std,
                train,
            },
        );
        (out, stats)
    }

    /// Grouped scaled dot-product attention, heads packed along columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (g_n, nq, nk, heads) = (
            spec.groups,
            spec.queries_per_group,
            spec.keys_per_group,
            spec.heads,
        );
        assert_eq!(qv.nrows(), g_n * nq, "query rows");
        assert_eq!(kv.nrows(), g_n * nk, "key rows");
        assert_eq!(vv.nrows(), g_n * nk, "value rows");
        let dk = qv.ncols() / heads;
        let dv = vv.ncols() / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qs, ks, vs) = (
            qv.as_slice().expect("standard layout"),
            kv.as_slice().expect("standard layout"),
            vv.as_slice().expect("standard layout"),
        );
        let (qc, kc, vc) = (qv.ncols(), kv.ncols(), vv.ncols());
        let mut out = Mat::zeros((g_n * nq, heads * dv));
        let oc = heads * dv;
        let os = out.as_slice_mut().expect("standard layout");
        let mut probs = vec![0.0; g_n * heads * nq * nk];
        let mut scores = vec![0.0; nk];
        for g in 0..g_n {
            for h in 0..heads {
                for i in 0..nq {
                    let qrow = &qs[(g * nq + i) * qc + h * dk..][..dk];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..nk {
                        if spec.allowed(g, i, j) {
                            let krow = &ks[(g * nk + j) * kc + h * dk..][..dk];
                            let sc = dot(qrow, krow) * scale;
                            scores[j] = sc;
                            max = max.max(sc);
                        } else {
                            scores[j] = f64::NEG_INFINITY;
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let p = &mut probs[((g * heads + h) * nq + i) * nk..][..nk];
                    let mut z = 0.0;
                    for j in 0..nk {
                        p[j] = if scores[j] == f64::NEG_INFINITY {
                            0.0
                        } else {
                            (scores[j] - max).exp()
                        };
                        z += p[j];
                    }
                    let orow = &mut os[(g * nq + i) * oc + h * dv..][..dv];
                    for j in 0..nk {
                        p[j] /= z;
                        if p[j] != 0.0 {
                            let vrow = &vs[(g * nk + j) * vc + h * dv..][..dv];
                            axpy(p[j], vrow, orow);
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
        )
    }

    /// Mean over consecutive equal-sized row groups.
    pub fn segment_mean(&mut self, x: Var, groups: usize) -> Var {
        let xv = self.value(x);
        let per = xv.nrows() / groups;
        assert_eq!(per * groups, xv.nrows(), "rows divisible by groups");
        let mut out = Mat::zeros((groups, xv.ncols()));
        for g in 0..groups {
            let block = xv.slice(s![g * per..(g + 1) * per, ..]);
            out.row_mut(g)
                .assign(&block.mean_axis(Axis(0)).expect("non-empty"));
        }
        self.push(out, Op::SegmentMean { x, groups })
    }

    /// Row `r` of the output is `src[rows[r]]`, or the single row of `fill`.
    pub fn gather(&mut self, src: Var, fill: Var, rows: Vec<Option<usize>>) -> Var {
        let sv = self.value(src);
        let fv = self.value(fill);
        let mut out = Mat::zeros((rows.len(), sv.ncols()));
        for (r, sel) in rows.iter().enumerate() {
            match sel {
                Some(i) => out.row_mut(r).assign(&sv.row(*i)),
                None => out.row_mut(r).assign(&fv.row(0)),
            }
        }
        self.push(out, Op::Gather { src, fill, rows })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("equal row counts");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Clipped single-head pointer: one query row per group against that
    /// group's keys. `select` sees the probabilities and logits and returns
    /// one chosen key per group; the output is the `groups x 1` column of
    /// chosen log-probabilities.
    pub fn pointer<F>(
        &mut self,
        q: Var,
        k: Var,
        allowed: Vec<bool>,
        clip: f64,
        select: F,
    ) -> Var
    where
        F: FnOnce(&PointerView<'_>) -> Vec<usize>,
    {
        let (qv, kv) = (self.value(q), self.value(k));
        let groups = qv.nrows();
        let nk = kv.nrows() / groups;
        assert_eq!(nk * groups, kv.nrows(), "keys divisible by groups");
        assert_eq!(allowed.len(), groups * nk, "mask size");
        let d = qv.ncols();
        let scale = 1.0 / (d as f64).sqrt();
        let mut tanh = vec![0.0; groups * nk];
        let mut logits = vec![MASKED_LOGIT; groups * nk];
        let mut probs = vec![0.0; groups * nk];
        for g in 0..groups {
            let qrow = qv.row(g);
            let qrow = qrow.as_slice().expect("standard layout");
            let mut max = f64::NEG_INFINITY;
            for j in 0..nk {
                let idx = g * nk + j;
                if !allowed[idx] {
                    continue;
                }
                let krow = kv.row(g * nk + j);
                let th = (dot(qrow, krow.as_slice().expect("standard layout")) * scale).tanh();
                tanh[idx] = th;
                logits[idx] = clip * th;
                max = max.max(logits[idx]);
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for j in 0..nk {
                let idx = g * nk + j;
                if allowed[idx] {
                    probs[idx] = (logits[idx] - max).exp();
                    z += probs[idx];
                }
            }
            for p in &mut probs[g * nk..(g + 1) * nk] {
                *p /= z;
            }
        }
        let selected = select(&PointerView {
            probs: &probs,
            logits: &logits,
            keys_per_group: nk,
        });
        assert_eq!(selected.len(), groups, "one selection per group");
        let mut out = Mat::zeros((groups, 1));
        for (g, &j) in selected.iter().enumerate() {
            let idx = g * nk + j;
            assert!(allowed[idx], "selected a masked key");
            // log softmax computed from logits for accuracy on tiny probabilities
            let max = (0..nk)
                .filter(|&jj| allowed[g * nk + jj])
                .map(|jj| logits[g * nk + jj])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + (0..nk)
                    .filter(|&jj| allowed[g * nk + jj])
                    .map(|jj| (logits[g * nk + jj] - max).exp())
                    .sum::<f64>()
                    .ln();
            out[[g, 0]] = logits[idx] - lse;
        }
        self.push(
            out,
            Op::Pointer {
                q,
                k,
                keys_per_group: nk,
                scale,
                clip,
                allowed,
                tanh,
                probs,
                selected,
            },
        )
    }

    /// Scalar `sum_i weights[i] * x[i]` over a column vector.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), weights.len(), "one weight per entry");
        let total: f64 = xv.iter().zip(&weights).map(|(a, w)| a * w).sum();
        self.push(Mat::from_elem((1, 1), total), Op::WeightedSum { x, weights })
    }

    /// Scalar mean of `(x[i] - targets[i])^2`.
    pub fn mean_squared_error(&mut self, x: Var, targets: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), targets.len(), "one target per entry");
        let total: f64 = xv
            .iter()
            .zip(&targets)
            .map(|(a, t)| (a - t).powi(2))
            .sum::<f64>()
            / targets.len() as f64;
        self.push(Mat::from_elem((1, 1), total), Op::MeanSquaredError { x, targets })
    }

    /// Back-propagates from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Mat>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::Linear { x, w, b } => {
                    let dx = dy.dot(self.value(*w));
                    let dw = dy.t().dot(self.value(*x));
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    if let Some(b) = b {
                        let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, dy.clone());
                    accumulate(&mut grads, *a, dy);
                }
                Op::Relu(x) => {
                    let mut dx = dy;
                    dx.zip_mut_with(&node.value, |d, &y| {
                        if y <= 0.0 {
                            *d = 0.0
                        }
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Op::BatchNorm {
                    x,
                    weight,
                    bias,
                    normalized,
                    inv_std,
                    train,
                } => {
                    let w = self.value(*weight).row(0).to_owned();
                    let rows = dy.nrows() as f64;
                    let dbias = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dweight = (&dy * normalized).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let mut dxhat = dy;
                    for mut row in dxhat.rows_mut() {
                        for (c, v) in row.iter_mut().enumerate() {
                            *v *= w[c];
                        }
                    }
                    let mut dx = dxhat.clone();
                    if *train {
                        let sum_d = dxhat.sum_axis(Axis(0));
                        let sum_dx = (&dxhat * normalized).sum_axis(Axis(0));
                        for ((mut row, xhat), _) in
                            dx.rows_mut().into_iter().zip(normalized.rows()).zip(0..)
                        {
                            for (c, v) in row.iter_mut().enumerate() {
                                *v = inv_std[c] / rows
                                    * (rows * *v - sum_d[c] - xhat[c] * sum_dx[c]);
                            }
                        }
                    } else {
                        for mut row in dx.rows_mut() {
                            for (c, v) in row.iter_mut().enumerate() {
                                *v *= inv_std[c];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *weight, dweight);
                    accumulate(&mut grads, *bias, dbias);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    spec,
                    probs,
                } => {
                    let (dq, dk, dv) = self.attention_backward(&dy, *q, *k, *v, spec, probs);
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::SegmentMean { x, groups } => {
                    let xv = self.value(*x);
                    let per = xv.nrows() / groups;
                    let mut dx = Mat::zeros(xv.dim());
                    for g in 0..*groups {
                        let row = dy.row(g).mapv(|v| v / per as f64);
                        for r in g * per..(g + 1) * per {
                            dx.row_mut(r).assign(&row);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gather { src, fill, rows } => {
                    let mut dsrc = Mat::zeros(self.value(*src).dim());
                    let mut dfill = Mat::zeros(self.value(*fill).dim());
                    for (r, sel) in rows.iter().enumerate() {
                        match sel {
                            Some(i) => {
                                let mut t = dsrc.row_mut(*i);
                                t += &dy.row(r);
                            }
                            None => {
                                let mut t = dfill.row_mut(0);
                                t += &dy.row(r);
                            }
                        }
                    }
                    accumulate(&mut grads, *src, dsrc);
                    accumulate(&mut grads, *fill, dfill);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        let d = dy.slice(s![.., col..col + w]).to_owned();
                        accumulate(&mut grads, *p, d);
                        col += w;
                    }
                }
                Op::Pointer {
                    q,
                    k,
                    keys_per_group,
                    scale,
                    clip,
                    allowed,
                    tanh,
                    probs,
                    selected,
                } => {
                    let (qv, kv) = (self.value(*q), self.value(*k));
                    let nk = *keys_per_group;
                    let mut dq = Mat::zeros(qv.dim());
                    let mut dk = Mat::zeros(kv.dim());
                    for (g, &sel) in selected.iter().enumerate() {
                        let up = dy[[g, 0]];
                        if up == 0.0 {
                            continue;
                        }
                        for j in 0..nk {
                            let idx = g * nk + j;
                            if !allowed[idx] {
                                continue;
                            }
                            let dlogit = up * (f64::from(u8::from(j == sel)) - probs[idx]);
                            let ds = dlogit * clip * (1.0 - tanh[idx] * tanh[idx]) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let mut dqr = dq.row_mut(g);
                            dqr.scaled_add(ds, &kv.row(g * nk + j));
                            let mut dkr = dk.row_mut(g * nk + j);
                            dkr.scaled_add(ds, &qv.row(g));
                        }
                    }
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                }
                Op::WeightedSum { x, weights } => {
                    let g = dy[[0, 0]];
                    let shape = self.value(*x).dim();
                    let dx = Mat::from_shape_vec(shape, weights.iter().map(|w| w * g).collect())
                        .expect("shape matches");
                    accumulate(&mut grads, *x, dx);
                }
                Op::MeanSquaredError { x, targets } => {
                    let g = dy[[0, 0]];
                    let xv = self.value(*x);
                    let n = targets.len() as f64;
                    let dx = Mat::from_shape_vec(
                        xv.dim(),
                        xv.iter()
                            .zip(targets)
                            .map(|(a, t)| 2.0 * (a - t) / n * g)
                            .collect(),
                    )
                    .expect("shape matches");
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        Gradients { grads }
    }

    fn attention_backward(
        &self,
        dy: &Mat,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[f64],
    ) -> (Mat, Mat, Mat) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (g_n, nq, nk, heads) = (
            spec.groups,
            spec.queries_per_group,
            spec.keys_per_group,
            spec.heads,
        );
        let dk_ = qv.ncols() / heads;
        let dv_ = vv.ncols() / heads;
        let scale = 1.0 / (dk_ as f64).sqrt();
        let (qc, kc, vc, oc) = (qv.ncols(), kv.ncols(), vv.ncols(), dy.ncols());
        let mut dq = Mat::zeros(qv.dim());
        let mut dk = Mat::zeros(kv.dim());
        let mut dv = Mat::zeros(vv.dim());
        let (qs, ks, vs) = (
            qv.as_slice().expect("standard layout"),
            kv.as_slice().expect("standard layout"),
            vv.as_slice().expect("standard layout"),
        );
        let dys = dy.as_standard_layout();
        let dys = dys.as_slice().expect("standard layout");
        let dqs = dq.as_slice_mut().expect("standard layout");
        let dks = dk.as_slice_mut().expect("standard layout");
        let dvs = dv.as_slice_mut().expect("standard layout");
        let mut dp = vec![0.0; nk];
        for g in 0..g_n {
            for h in 0..heads {
                for i in 0..nq {
                    let p = &probs[((g * heads + h) * nq + i) * nk..][..nk];
                    let dout = &dys[(g * nq + i) * oc + h * dv_..][..dv_];
                    let mut inner = 0.0;
                    for j in 0..nk {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vrow = &vs[(g * nk + j) * vc + h * dv_..][..dv_];
                        dp[j] = dot(dout, vrow);
                        inner += p[j] * dp[j];
                        axpy(p[j], dout, &mut dvs[(g * nk + j) * vc + h * dv_..][..dv_]);
                    }
                    let qoff = (g * nq + i) * qc + h * dk_;
                    for j in 0..nk {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - inner) * scale;
                        let koff = (g * nk + j) * kc + h * dk_;
                        for c in 0..dk_ {
                            dqs[qoff + c] += ds * ks[koff + c];
                            dks[koff + c] += ds * qs[qoff + c];
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, d: Mat) {
    let d = if d.is_standard_layout() {
        d
    } else {
        d.as_standard_layout().into_owned()
    };
    match &mut grads[v.0] {
        Some(g) => *g += &d,
        slot @ None => *slot = Some(d),
    }
}

/// Gradients of a scalar with respect to every reachable node.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Checks d(loss)/d(input) against central differences for each input.
    fn check<F>(inputs: Vec<Mat>, build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss);
        let eval = |inputs: &[Mat]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs.iter().map(|m| t.leaf(m.clone())).collect();
            let l = build(&mut t, &vs);
            t.value(l)[[0, 0]]
        };
        let h = 1e-6;
        for (n, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[n])
                .cloned()
                .unwrap_or_else(|| Mat::zeros(input.dim()));
            for idx in 0..input.len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[n].as_slice_mut().unwrap()[idx] += h;
                minus[n].as_slice_mut().unwrap()[idx] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {n} idx {idx}: analytic {a} numeric {numeric}");
            }
        }
    }

    /// Reduces a matrix to a scalar through fixed random weights.
    fn project(t: &mut Tape, x: Var, seed: u64) -> Var {
        let (r, c) = t.value(x).dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = t.leaf(random(&mut rng, 1, c));
        let y = t.linear(x, w, None);
        let rows: Vec<f64> = (0..r).map(|_| rng.gen_range(-1.0..1.0)).collect();
        t.weighted_sum(y, rows)
    }

    #[test]
    fn linear_relu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(
            vec![random(&mut rng, 4, 3), random(&mut rng, 5, 3), random(&mut rng, 1, 5)],
            |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]));
                let y = t.relu(y);
                project(t, y, 7)
            },
        );
    }

    #[test]
    fn batch_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![random(&mut rng, 6, 3), random(&mut rng, 1, 3), random(&mut rng, 1, 3)];
        check(inputs.clone(), |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], NormMode::Train, 1e-5);
            project(t, y, 3)
        });
        check(inputs, |t, v| {
            let mean = [0.1, -0.2, 0.3];
            let var = [0.5, 1.5, 2.0];
            let (y, _) = t.batch_norm(
                v[0],
                v[1],
                v[2],
                NormMode::Frozen {
                    mean: &mean,
                    var: &var,
                },
                1e-5,
            );
            project(t, y, 4)
        });
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (groups, n, heads) = (2, 4, 2);
        let allowed: Vec<bool> = (0..groups * n * n).map(|i| (i % n) != (i / n) % n).collect();
        check(
            vec![
                random(&mut rng, groups * n, 6),
                random(&mut rng, groups * n, 6),
                random(&mut rng, groups * n, 4),
            ],
            move |t, v| {
                let y = t.attention(
                    v[0],
                    v[1],
                    v[2],
                    AttentionSpec {
                        groups,
                        queries_per_group: n,
                        keys_per_group: n,
                        heads,
                        allowed: Some(allowed.clone()),
                    },
                );
                project(t, y, 5)
            },
        );
    }

    #[test]
    fn attention_with_no_allowed_keys_outputs_zero() {
        let mut t = Tape::new();
        let q = t.leaf(Mat::ones((1, 2)));
        let k = t.leaf(Mat::ones((2, 2)));
        let v = t.leaf(Mat::ones((2, 2)));
        let y = t.attention(
            q,
            k,
            v,
            AttentionSpec {
                groups: 1,
                queries_per_group: 1,
                keys_per_group: 2,
                heads: 1,
                allowed: Some(vec![false, false]),
            },
        );
        assert!(t.value(y).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gather_concat_mean_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(
            vec![random(&mut rng, 6, 3), random(&mut rng, 1, 3), random(&mut rng, 2, 3)],
            |t, v| {
                let g = t.gather(v[0], v[1], vec![Some(4), None, Some(4), Some(0)]);
                let m = t.segment_mean(g, 2);
                let c = t.concat_cols(&[m, v[2]]);
                project(t, c, 6)
            },
        );
    }

    #[test]
    fn pointer_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let allowed = vec![true, false, true, true, true, true, false, true];
        check(
            vec![random(&mut rng, 2, 3), random(&mut rng, 8, 3)],
            move |t, v| {
                let lp = t.pointer(v[0], v[1], allowed.clone(), 10.0, |_| vec![2, 3]);
                t.weighted_sum(lp, vec![0.7, -1.3])
            },
        );
    }

    #[test]
    fn pointer_probabilities_respect_mask() {
        let mut t = Tape::new();
        let q = t.leaf(Mat::from_shape_vec((1, 2), vec![3.0, -1.0]).unwrap());
        let k = t.leaf(Mat::from_shape_vec((3, 2), vec![1.0, 0.0, 0.0, 1.0, 5.0, 5.0]).unwrap());
        let mut seen = Vec::new();
        let lp = t.pointer(q, k, vec![true, false, true], 10.0, |view| {
            seen = view.probs.to_vec();
            assert!(view
                .logits
                .iter()
                .enumerate()
                .all(|(i, &l)| if i == 1 { l == MASKED_LOGIT } else { l.abs() <= 10.0 }));
            vec![0]
        });
        assert_eq!(seen[1], 0.0);
        assert!((seen.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((t.value(lp)[[0, 0]] - seen[0].ln()).abs() < 1e-12);
    }

    #[test]
    fn mse_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        check(vec![random(&mut rng, 3, 1)], |t, v| {
            t.mean_squared_error(v[0], vec![0.5, -0.1, 2.0])
        });
    }
}
