//! Define-by-run reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! through [`Graph::param`] and receive gradients in [`Graph::backward`];
//! everything else is a constant. The graph is dropped after each step.

use rand::Rng;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Contiguous run of rows `[start, start + len)` treated as one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

enum Op<S> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    Gelu { x: Var, tanh: Matrix<S> },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<S>,
        rstd: Vec<S>,
    },
    Attention {
        qkv: Var,
        spans: Vec<Span>,
        heads: usize,
        probs: Vec<Vec<S>>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    PlaceRows {
        parts: Vec<(Var, Vec<usize>)>,
    },
    Dropout {
        x: Var,
        mask: Vec<S>,
    },
    HCat(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<S>,
        probs: Matrix<S>,
    },
    Mean(Var),
    LogMeanExp {
        x: Var,
        weights: Vec<S>,
        clamped: bool,
    },
    MeanExpShift {
        x: Var,
        shift: S,
    },
}

struct Node<S> {
    value: Matrix<S>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix<S> {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> S {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.as_slice()[0]
    }

    pub fn constant(&mut self, value: Matrix<S>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Parameter leaf. Frozen parameters enter as constants and never
    /// accumulate gradient.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId, trainable: bool) -> Var {
        let value = store.get(id).clone();
        if trainable {
            self.push(value, Op::Param(id), true)
        } else {
            self.push(value, Op::Constant, false)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    /// Adds a 1×c row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        assert_eq!(bv.shape(), (1, xv.cols()), "bias shape mismatch");
        let mut out = xv.clone();
        let b = bv.as_slice();
        for r in 0..out.rows() {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(b) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(out, Op::AddRow(x, bias), ng)
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        let v = self.value(x).map(|a| a * s);
        let ng = self.ng(x);
        self.push(v, Op::Scale(x, s), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let tanh = xv.map(gelu_tanh);
        let v = xv.zip_map(&tanh, |a, t| S::lit(0.5) * a * (S::one() + t));
        let ng = self.ng(x);
        let tanh = if ng { tanh } else { Matrix::zeros(0, 0) };
        self.push(v, Op::Gelu { x, tanh }, ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).as_slice();
        let b = self.value(beta).as_slice();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        let n = S::lit(cols as f64);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<S>() / n;
            let rs = S::one() / (var + S::lit(LN_EPS)).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for c in 0..cols {
                xh[c] = (row[c] - mean) * rs;
            }
            let o = out.row_mut(r);
            let xh = xhat.row(r);
            for c in 0..cols {
                o[c] = xh[c] * g[c] + b[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Multi-head causal self-attention over a packed `n × 3d` query/key/value
    /// matrix. Each span attends only within itself and only to earlier or
    /// equal positions.
    pub fn causal_attention(&mut self, qkv: Var, spans: &[Span], heads: usize) -> Var {
        let qv = self.value(qkv);
        let (n, three_d) = qv.shape();
        assert_eq!(three_d % 3, 0, "qkv width must be 3d");
        let d = three_d / 3;
        assert_eq!(d % heads, 0, "d must be divisible by heads");
        let (out, probs) = attention_forward(qv.as_slice(), n, d, spans, heads);
        let ng = self.ng(qkv);
        self.push(
            out,
            Op::Attention {
                qkv,
                spans: spans.to_vec(),
                heads,
                probs,
            },
            ng,
        )
    }

    /// Embedding lookup: row `i` of the output is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let v = self.value(table).select_rows(ids);
        let ng = self.ng(table);
        self.push(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let v = self.value(x).select_rows(idx);
        let ng = self.ng(x);
        self.push(
            v,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    /// Builds an `n_rows × cols` matrix whose row `dest[i]` is row `i` of the
    /// corresponding part. Unassigned rows are zero.
    pub fn place_rows(&mut self, parts: Vec<(Var, Vec<usize>)>, n_rows: usize) -> Var {
        let cols = parts
            .first()
            .map(|(v, _)| self.value(*v).cols())
            .expect("place_rows needs a part");
        let mut out = Matrix::zeros(n_rows, cols);
        let mut ng = false;
        for (v, dest) in &parts {
            let src = self.value(*v);
            assert_eq!(src.rows(), dest.len(), "place_rows index length");
            assert_eq!(src.cols(), cols, "place_rows width");
            for (i, &d) in dest.iter().enumerate() {
                out.row_mut(d).copy_from_slice(src.row(i));
            }
            ng |= self.ng(*v);
        }
        self.push(out, Op::PlaceRows { parts }, ng)
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = S::lit(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<S> = (0..xv.len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = xv
            .as_slice()
            .iter()
            .zip(&mask)
            .map(|(&a, &m)| a * m)
            .collect();
        let v = Matrix::from_vec(xv.rows(), xv.cols(), data);
        let ng = self.ng(x);
        self.push(v, Op::Dropout { x, mask }, ng)
    }

    /// Column concatenation `[a ‖ b]`.
    pub fn hcat(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).hcat(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::HCat(a, b), ng)
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[targets_i])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[S]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target per logit row");
        assert_eq!(targets.len(), weights.len(), "one weight per target");
        let probs = softmax_rows(lv);
        let mut loss = S::zero();
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            loss += w * -log_softmax_at(lv.row(r), t);
        }
        let ng = self.ng(logits);
        self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Mean of all entries, as a 1×1 node.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.as_slice().iter().copied().sum::<S>() / S::lit(xv.len() as f64);
        let ng = self.ng(x);
        self.push(Matrix::filled(1, 1, m), Op::Mean(x), ng)
    }

    /// `max(log(mean(exp(x))), floor)` computed with max-subtraction.
    pub fn log_mean_exp(&mut self, x: Var, floor: S) -> Var {
        let xv = self.value(x).as_slice();
        let (lme, weights) = log_mean_exp_weights(xv);
        let clamped = lme < floor;
        let v = if clamped { floor } else { lme };
        let ng = self.ng(x);
        self.push(
            Matrix::filled(1, 1, v),
            Op::LogMeanExp {
                x,
                weights,
                clamped,
            },
            ng,
        )
    }

    /// `mean(exp(x − shift))`; `shift` is a detached constant.
    pub fn mean_exp_shift(&mut self, x: Var, shift: S) -> Var {
        let xv = self.value(x).as_slice();
        let n = S::lit(xv.len() as f64);
        let v = xv.iter().map(|&a| (a - shift).exp()).sum::<S>() / n;
        let ng = self.ng(x);
        self.push(Matrix::filled(1, 1, v), Op::MeanExpShift { x, shift }, ng)
    }

    /// Back-propagates from the 1×1 node `loss` and returns gradients for every
    /// trainable parameter leaf (summed over repeated uses).
    pub fn backward(&self, loss: Var, store: &ParamStore<S>) -> Gradients<S> {
        let mut grads = Gradients::zeros_like(store);
        self.backward_into(loss, &mut grads);
        grads
    }

    /// Like [`Graph::backward`] but accumulates into an existing buffer and
    /// also returns gradients w.r.t. the requested non-parameter nodes.
    pub fn backward_into(&self, loss: Var, out: &mut Gradients<S>) {
        self.backward_with_taps(loss, out, &[]);
    }

    pub fn backward_with_taps(
        &self,
        loss: Var,
        out: &mut Gradients<S>,
        taps: &[Var],
    ) -> Vec<Option<Matrix<S>>> {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut g: Vec<Option<Matrix<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Matrix::filled(1, 1, S::one()));
        for i in (0..=loss.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            if !self.nodes[i].needs_grad && !taps.contains(&Var(i)) {
                continue;
            }
            self.propagate(i, &gi, &mut g, out);
            if taps.contains(&Var(i)) {
                g[i] = Some(gi);
            }
        }
        taps.iter().map(|t| g[t.0].take()).collect()
    }

    fn acc(&self, g: &mut [Option<Matrix<S>>], v: Var, delta: Matrix<S>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut g[v.0] {
            Some(m) => m.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(
        &self,
        i: usize,
        gi: &Matrix<S>,
        g: &mut [Option<Matrix<S>>],
        out: &mut Gradients<S>,
    ) {
        match &self.nodes[i].op {
            Op::Constant => {}
            Op::Param(id) => out.accumulate(*id, gi),
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.acc(g, *a, gi.matmul_t(self.value(*b)));
                }
                if self.ng(*b) {
                    self.acc(g, *b, self.value(*a).t_matmul(gi));
                }
            }
            Op::MatMulT(a, b) => {
                // y = a bᵀ ; da = gy b ; db = gyᵀ a
                if self.ng(*a) {
                    self.acc(g, *a, gi.matmul(self.value(*b)));
                }
                if self.ng(*b) {
                    self.acc(g, *b, gi.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.acc(g, *a, gi.clone());
                self.acc(g, *b, gi.clone());
            }
            Op::Sub(a, b) => {
                self.acc(g, *a, gi.clone());
                self.acc(g, *b, gi.map(|v| -v));
            }
            Op::AddRow(x, bias) => {
                self.acc(g, *x, gi.clone());
                if self.ng(*bias) {
                    let mut db = Matrix::zeros(1, gi.cols());
                    for r in 0..gi.rows() {
                        for (d, &v) in db.as_mut_slice().iter_mut().zip(gi.row(r)) {
                            *d += v;
                        }
                    }
                    self.acc(g, *bias, db);
                }
            }
            Op::Scale(x, s) => self.acc(g, *x, gi.map(|v| v * *s)),
            Op::Gelu { x, tanh } => {
                let c = S::lit(GELU_C);
                let k3 = S::lit(3.0 * GELU_K);
                let half = S::lit(0.5);
                let mut d = self.value(*x).zip_map(tanh, |a, t| {
                    half * (S::one() + t) + half * a * (S::one() - t * t) * c * (S::one() + k3 * a * a)
                });
                for (v, &gy) in d.as_mut_slice().iter_mut().zip(gi.as_slice()) {
                    *v *= gy;
                }
                self.acc(g, *x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = gi.shape();
                let gam = self.value(*gamma).as_slice();
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = Matrix::zeros(1, cols);
                    let mut db = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        let (gr, xr) = (gi.row(r), xhat.row(r));
                        for c in 0..cols {
                            dg.as_mut_slice()[c] += gr[c] * xr[c];
                            db.as_mut_slice()[c] += gr[c];
                        }
                    }
                    self.acc(g, *gamma, dg);
                    self.acc(g, *beta, db);
                }
                if self.ng(*x) {
                    let n = S::lit(cols as f64);
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let (gr, xr) = (gi.row(r), xhat.row(r));
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for c in 0..cols {
                            let dxh = gr[c] * gam[c];
                            m1 += dxh;
                            m2 += dxh * xr[c];
                        }
                        m1 /= n;
                        m2 /= n;
                        let o = dx.row_mut(r);
                        for c in 0..cols {
                            let dxh = gr[c] * gam[c];
                            o[c] = rstd[r] * (dxh - m1 - xr[c] * m2);
                        }
                    }
                    self.acc(g, *x, dx);
                }
            }
            Op::Attention {
                qkv,
                spans,
                heads,
                probs,
            } => {
                let qv = self.value(*qkv);
                let d = qv.cols() / 3;
                let dq = attention_backward(qv.as_slice(), gi, d, spans, *heads, probs);
                self.acc(g, *qkv, dq);
            }
            Op::Gather { table, ids } | Op::SelectRows { x: table, idx: ids } => {
                if self.ng(*table) {
                    let tv = self.value(*table);
                    let mut d = Matrix::zeros(tv.rows(), tv.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &v) in d.row_mut(id).iter_mut().zip(gi.row(r)) {
                            *o += v;
                        }
                    }
                    self.acc(g, *table, d);
                }
            }
            Op::PlaceRows { parts } => {
                for (v, dest) in parts {
                    if self.ng(*v) {
                        self.acc(g, *v, gi.select_rows(dest));
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let data = gi
                    .as_slice()
                    .iter()
                    .zip(mask)
                    .map(|(&a, &m)| a * m)
                    .collect();
                self.acc(g, *x, Matrix::from_vec(gi.rows(), gi.cols(), data));
            }
            Op::HCat(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let rows = gi.rows();
                let mut da = Matrix::zeros(rows, ca);
                let mut db = Matrix::zeros(rows, cb);
                for r in 0..rows {
                    da.row_mut(r).copy_from_slice(&gi.row(r)[..ca]);
                    db.row_mut(r).copy_from_slice(&gi.row(r)[ca..]);
                }
                self.acc(g, *a, da);
                self.acc(g, *b, db);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let gy = gi.as_slice()[0];
                let mut d = probs.clone();
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let row = d.row_mut(r);
                    row[t] -= S::one();
                    for v in row.iter_mut() {
                        *v *= w * gy;
                    }
                }
                self.acc(g, *logits, d);
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let v = gi.as_slice()[0] / S::lit(xv.len() as f64);
                self.acc(g, *x, Matrix::filled(xv.rows(), xv.cols(), v));
            }
            Op::LogMeanExp {
                x,
                weights,
                clamped,
            } => {
                let xv = self.value(*x);
                let gy = if *clamped {
                    S::zero()
                } else {
                    gi.as_slice()[0]
                };
                let data = weights.iter().map(|&w| w * gy).collect();
                self.acc(g, *x, Matrix::from_vec(xv.rows(), xv.cols(), data));
            }
            Op::MeanExpShift { x, shift } => {
                let xv = self.value(*x);
                let n = S::lit(xv.len() as f64);
                let gy = gi.as_slice()[0];
                let d = xv.map(|a| gy * (a - *shift).exp() / n);
                self.acc(g, *x, d);
            }
        }
    }
}

#[inline]
pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    S::lit(0.5) * x * (S::one() + gelu_tanh(x))
}

/// `tanh(c·(x + k·x³))` through one `exp`, which is cheaper than `tanh`.
#[inline]
fn gelu_tanh<S: Scalar>(x: S) -> S {
    let u = S::lit(GELU_C) * (x + S::lit(GELU_K) * x * x * x);
    let two = S::lit(2.0);
    S::one() - two / ((two * u).exp() + S::one())
}

pub(crate) fn softmax_rows<S: Scalar>(m: &Matrix<S>) -> Matrix<S> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn log_softmax_at<S: Scalar>(row: &[S], t: usize) -> S {
    let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<S>().ln();
    row[t] - lse
}

/// Returns `log(mean(exp(x)))` and the softmax weights `exp(x_i) / Σ exp(x)`.
pub(crate) fn log_mean_exp_weights<S: Scalar>(x: &[S]) -> (S, Vec<S>) {
    let mx = x.iter().copied().fold(S::neg_infinity(), S::max);
    let e: Vec<S> = x.iter().map(|&v| (v - mx).exp()).collect();
    let sum: S = e.iter().copied().sum();
    let lme = mx + (sum / S::lit(x.len() as f64)).ln();
    (lme, e.into_iter().map(|v| v / sum).collect())
}

pub(crate) fn attention_forward<S: Scalar>(
    qkv: &[S],
    n: usize,
    d: usize,
    spans: &[Span],
    heads: usize,
) -> (Matrix<S>, Vec<Vec<S>>) {
    let dh = d / heads;
    let rs = (3 * d) as isize;
    let scale = S::one() / S::lit(dh as f64).sqrt();
    let mut out = Matrix::zeros(n, d);
    let mut probs = Vec::with_capacity(spans.len() * heads);
    for sp in spans {
        let len = sp.len;
        for h in 0..heads {
            let q_off = sp.start * 3 * d + h * dh;
            let k_off = q_off + d;
            let v_off = q_off + 2 * d;
            let mut p = vec![S::zero(); len * len];
            S::gemm(
                len,
                dh,
                len,
                scale,
                &qkv[q_off..],
                rs,
                1,
                &qkv[k_off..],
                1,
                rs,
                S::zero(),
                &mut p,
                len as isize,
                1,
            );
            for i in 0..len {
                let row = &mut p[i * len..(i + 1) * len];
                softmax_in_place(&mut row[..=i]);
                row[i + 1..].iter_mut().for_each(|v| *v = S::zero());
            }
            let o_off = sp.start * d + h * dh;
            S::gemm(
                len,
                len,
                dh,
                S::one(),
                &p,
                len as isize,
                1,
                &qkv[v_off..],
                rs,
                1,
                S::zero(),
                &mut out.as_mut_slice()[o_off..],
                d as isize,
                1,
            );
            probs.push(p);
        }
    }
    (out, probs)
}

fn attention_backward<S: Scalar>(
    qkv: &[S],
    dout: &Matrix<S>,
    d: usize,
    spans: &[Span],
    heads: usize,
    probs: &[Vec<S>],
) -> Matrix<S> {
    let n = dout.rows();
    let dh = d / heads;
    let rs = (3 * d) as isize;
    let scale = S::one() / S::lit(dh as f64).sqrt();
    let mut dqkv = Matrix::zeros(n, 3 * d);
    let go = dout.as_slice();
    for (si, sp) in spans.iter().enumerate() {
        let len = sp.len;
        for h in 0..heads {
            let p = &probs[si * heads + h];
            let q_off = sp.start * 3 * d + h * dh;
            let k_off = q_off + d;
            let v_off = q_off + 2 * d;
            let o_off = sp.start * d + h * dh;
            // dV = Pᵀ dO
            S::gemm(
                len,
                len,
                dh,
                S::one(),
                p,
                1,
                len as isize,
                &go[o_off..],
                d as isize,
                1,
                S::one(),
                &mut dqkv.as_mut_slice()[v_off..],
                rs,
                1,
            );
            // dP = dO Vᵀ
            let mut dp = vec![S::zero(); len * len];
            S::gemm(
                len,
                dh,
                len,
                S::one(),
                &go[o_off..],
                d as isize,
                1,
                &qkv[v_off..],
                1,
                rs,
                S::zero(),
                &mut dp,
                len as isize,
                1,
            );
            // dS = P ⊙ (dP − rowsum(P ⊙ dP)), pre-scaled
            for i in 0..len {
                let pr = &p[i * len..(i + 1) * len];
                let dr = &mut dp[i * len..(i + 1) * len];
                let dot: S = pr[..=i].iter().zip(&dr[..=i]).map(|(&a, &b)| a * b).sum();
                for j in 0..len {
                    dr[j] = if j <= i {
                        pr[j] * (dr[j] - dot) * scale
                    } else {
                        S::zero()
                    };
                }
            }
            // dQ = dS K
            S::gemm(
                len,
                len,
                dh,
                S::one(),
                &dp,
                len as isize,
                1,
                &qkv[k_off..],
                rs,
                1,
                S::one(),
                &mut dqkv.as_mut_slice()[q_off..],
                rs,
                1,
            );
            // dK = dSᵀ Q
            S::gemm(
                len,
                len,
                dh,
                S::one(),
                &dp,
                1,
                len as isize,
                &qkv[q_off..],
                rs,
                1,
                S::one(),
                &mut dqkv.as_mut_slice()[k_off..],
                rs,
                1,
            );
        }
    }
    dqkv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of every parameter entry against `backward`.
    fn check<F>(store: &mut ParamStore<f64>, f: F) -> f64
    where
        F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
    {
        let mut g = Graph::new();
        let loss = f(&mut g, store);
        let grads = g.backward(loss, store);
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for id in store.ids() {
            for k in 0..store.get(id).len() {
                let orig = store.get(id).as_slice()[k];
                store.get_mut(id).as_mut_slice()[k] = orig + eps;
                let mut gp = Graph::new();
                let lp = f(&mut gp, store);
                let up = gp.scalar(lp);
                store.get_mut(id).as_mut_slice()[k] = orig - eps;
                let mut gm = Graph::new();
                let lm = f(&mut gm, store);
                let dn = gm.scalar(lm);
                store.get_mut(id).as_mut_slice()[k] = orig;
                let num = (up - dn) / (2.0 * eps);
                let ana = grads.get(id).as_slice()[k];
                let rel = (num - ana).abs() / (num.abs() + ana.abs()).max(1e-4);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn attention_layernorm_gelu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Matrix::randn(5, 6, 1.0, &mut rng));
        let w = store.add("w", Matrix::randn(6, 6, 0.5, &mut rng));
        let gam = store.add("g", Matrix::randn(1, 2, 1.0, &mut rng));
        let bet = store.add("b", Matrix::randn(1, 2, 1.0, &mut rng));
        let spans = [Span { start: 0, len: 3 }, Span { start: 3, len: 2 }];
        let worst = check(&mut store, |g, s| {
            let xv = g.param(s, x, true);
            let wv = g.param(s, w, true);
            let qkv = g.matmul(xv, wv);
            let att = g.causal_attention(qkv, &spans, 1);
            let ga = g.param(s, gam, true);
            let be = g.param(s, bet, true);
            let ln = g.layer_norm(att, ga, be);
            let act = g.gelu(ln);
            let sel = g.select_rows(act, &[4, 0, 2]);
            let targets = [1, 0, 1];
            g.cross_entropy(sel, &targets, &[0.5, 0.25, 1.0])
        });
        assert!(worst < 1e-4, "relative error {worst}");
    }

    #[test]
    fn log_mean_exp_and_shift_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Matrix::randn(4, 1, 1.0, &mut rng));
        let y = store.add("y", Matrix::randn(4, 1, 1.0, &mut rng));
        let worst = check(&mut store, |g, s| {
            let a = g.param(s, x, true);
            let b = g.param(s, y, true);
            let ab = g.hcat(a, b);
            let m = g.mean(ab);
            let l = g.log_mean_exp(a, -30.0);
            let e = g.mean_exp_shift(b, 0.3);
            let t = g.sub(m, l);
            g.add(t, e)
        });
        assert!(worst < 1e-4, "relative error {worst}");
    }

    #[test]
    fn attention_is_causal_within_spans() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 4;
        let n = 5;
        let qkv = Matrix::<f64>::randn(n, 3 * d, 1.0, &mut rng);
        let spans = [Span { start: 0, len: n }];
        let (base, _) = attention_forward(qkv.as_slice(), n, d, &spans, 2);
        let mut perturbed = qkv.clone();
        for c in 0..3 * d {
            perturbed.set(3, c, 7.0);
        }
        let (moved, _) = attention_forward(perturbed.as_slice(), n, d, &spans, 2);
        for r in 0..3 {
            assert_eq!(base.row(r), moved.row(r));
        }
        assert_ne!(base.row(3), moved.row(3));
    }
}
