//! A small reverse-mode autodiff tape over dense `f64` matrices, with the
//! handful of fused operations an encoder-decoder needs.
//!
//! Parameter leaves borrow their tensors; every other node owns its forward
//! value. Operations that need forward
//! intermediates for the backward pass (softmax probabilities, normalized
//! activations, dropout masks) keep them in the op record.

use std::borrow::Cow;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Array2<f64>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Shape information for a batched multi-head attention call. Rows of the
/// query matrix are `batch × q_len` (batch-major), rows of key/value are
/// `batch × k_len`.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// Valid key positions per batch entry; later positions are padding.
    pub key_lengths: Vec<usize>,
    /// Forbid attending to key positions after the query position.
    pub causal: bool,
}

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Mat,
    },
    Gather {
        table: Var,
        ids: Vec<u32>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<Mat>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        ignore: u32,
        smoothing: f64,
        probs: Mat,
        count: usize,
    },
}

/// Operation tape. Parameter leaves borrow their tensors.
pub struct Graph<'a> {
    values: Vec<Cow<'a, Mat>>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    dropout_rng: Option<ChaCha8Rng>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'a> Graph<'a> {
    /// A tape without dropout.
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            dropout_rng: None,
        }
    }

    /// A tape whose dropout masks are drawn from `rng`.
    pub fn with_dropout(rng: ChaCha8Rng) -> Self {
        Self {
            dropout_rng: Some(rng),
            ..Self::new()
        }
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.values.push(Cow::Owned(value));
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.values[v.0]
    }

    fn v(&self, x: Var) -> &Mat {
        &self.values[x.0]
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad[v.0])
    }

    /// A constant input.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable tensor; its gradient is reported under `index`.
    pub fn param(&mut self, index: usize, value: &'a Mat) -> Var {
        self.values.push(Cow::Borrowed(value));
        self.ops.push(Op::Param(index));
        self.needs_grad.push(true);
        Var(self.values.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.v(a).dot(self.v(b));
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.v(a).dot(&self.v(b).t());
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.v(a) + self.v(b);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.v(row).row(0);
        let mut out = self.v(a).clone();
        for mut o in out.rows_mut() {
            o += &r;
        }
        let ng = self.ng(&[a, row]);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.v(a) * factor;
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, factor), ng)
    }

    /// `x W + b`
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let h = self.matmul(x, weight);
        self.add_row(h, bias)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .v(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        let ng = self.ng(&[a]);
        self.push(out, Op::Gelu(a), ng)
    }

    /// Row-wise layer normalization with `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.v(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let (gv, bv) = (self.v(gain).row(0), self.v(bias).row(0));
        let mut out = xhat.clone();
        for mut o in out.rows_mut() {
            Zip::from(&mut o)
                .and(&gv)
                .and(&bv)
                .for_each(|o, &g, &b| *o = *o * g + b);
        }
        let ng = self.ng(&[x, gain, bias]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Inverted dropout; the identity when the tape has no dropout stream or
    /// `rate` is zero.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let shape = self.v(x).raw_dim();
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        let keep = 1.0 / (1.0 - rate);
        let mask = Mat::from_shape_simple_fn(shape, || {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        });
        let out = self.v(x) * &mask;
        let ng = self.ng(&[x]);
        self.push(out, Op::Dropout { x, mask }, ng)
    }

    /// Selects rows of `table`.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = self.v(table);
        let mut out = Mat::zeros((ids.len(), t.ncols()));
        for (mut row, &id) in out.rows_mut().into_iter().zip(ids) {
            row.assign(&t.row(id as usize));
        }
        let ng = self.ng(&[table]);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Scaled dot-product attention over `layout.heads` column blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Var {
        let (qv, kv, vv) = (self.v(q), self.v(k), self.v(v));
        let d = qv.ncols();
        let dh = d / layout.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((layout.batch * layout.q_len, d));
        let mut probs = Vec::with_capacity(layout.batch * layout.heads);
        for b in 0..layout.batch {
            let qr = b * layout.q_len..(b + 1) * layout.q_len;
            let kr = b * layout.k_len..(b + 1) * layout.k_len;
            let valid = layout.key_lengths[b];
            for h in 0..layout.heads {
                let cols = h * dh..(h + 1) * dh;
                let qb = qv.slice(s![qr.clone(), cols.clone()]);
                let kb = kv.slice(s![kr.clone(), cols.clone()]);
                let vb = vv.slice(s![kr.clone(), cols.clone()]);
                let mut p = qb.dot(&kb.t());
                for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                    let limit = if layout.causal {
                        valid.min(i + 1)
                    } else {
                        valid
                    };
                    let mut max = f64::NEG_INFINITY;
                    for x in row.iter_mut().take(limit) {
                        *x *= scale;
                        max = max.max(*x);
                    }
                    let mut sum = 0.0;
                    for (j, x) in row.iter_mut().enumerate() {
                        if j < limit {
                            *x = (*x - max).exp();
                            sum += *x;
                        } else {
                            *x = 0.0;
                        }
                    }
                    if sum > 0.0 {
                        row.mapv_inplace(|x| x / sum);
                    }
                }
                general_mat_mul(1.0, &p, &vb, 0.0, &mut out.slice_mut(s![qr.clone(), cols]));
                probs.push(p);
            }
        }
        let ng = self.ng(&[q, k, v]);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            ng,
        )
    }

    /// Mean label-smoothed cross-entropy over rows whose target is not
    /// `ignore`. The smoothing distribution is uniform over the vocabulary:
    /// `loss = (1-ε)·NLL(gold) + ε·mean_v NLL(v)`. Returns the loss node and
    /// the number of counted rows.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        ignore: u32,
        smoothing: f64,
    ) -> (Var, usize) {
        let lv = self.v(logits);
        let vocab = lv.ncols() as f64;
        let mut probs = lv.clone();
        let mut total = 0.0;
        let mut count = 0;
        for (mut row, &t) in probs.rows_mut().into_iter().zip(targets) {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            if t != ignore {
                let nll_gold = lse - row[t as usize];
                let nll_mean = lse - row.sum() / vocab;
                total += (1.0 - smoothing) * nll_gold + smoothing * nll_mean;
                count += 1;
            }
            row.mapv_inplace(|x| (x - lse).exp());
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let ng = self.ng(&[logits]);
        let var = self.push(
            Mat::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                smoothing,
                probs,
                count,
            },
            ng,
        );
        (var, count)
    }

    /// Back-propagates from the scalar `loss` and returns gradients indexed
    /// by parameter index (`None` for parameters not on the tape).
    pub fn backward(&self, loss: Var, num_params: usize) -> Vec<Option<Mat>> {
        let mut grads: Vec<Option<Mat>> = (0..self.values.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones(self.v(loss).raw_dim()));
        let mut param_grads: Vec<Option<Mat>> = (0..num_params).map(|_| None).collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.needs_grad[idx] {
                continue;
            }
            match &self.ops[idx] {
                Op::Leaf => {}
                Op::Param(p) => accumulate(&mut param_grads[*p], g),
                Op::MatMul(a, b) => {
                    if self.needs_grad[a.0] {
                        let ga = g.dot(&self.v(*b).t());
                        accumulate(&mut grads[a.0], ga);
                    }
                    if self.needs_grad[b.0] {
                        let gb = self.v(*a).t().dot(&g);
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.needs_grad[a.0] {
                        let ga = g.dot(self.v(*b));
                        accumulate(&mut grads[a.0], ga);
                    }
                    if self.needs_grad[b.0] {
                        let gb = g.t().dot(self.v(*a));
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs_grad[b.0] {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                    if self.needs_grad[a.0] {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs_grad[row.0] {
                        accumulate(&mut grads[row.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.needs_grad[a.0] {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Scale(a, f) => accumulate(&mut grads[a.0], g * *f),
                Op::Gelu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.v(*a)).for_each(|gv, &x| {
                        let inner = GELU_C * (x + GELU_A * x * x * x);
                        let t = inner.tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *gv *= d;
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    if self.needs_grad[bias.0] {
                        accumulate(&mut grads[bias.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.needs_grad[gain.0] {
                        accumulate(
                            &mut grads[gain.0],
                            (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                        );
                    }
                    if self.needs_grad[x.0] {
                        let gv = self.v(*gain).row(0);
                        let mut dxhat = g;
                        let n = dxhat.ncols() as f64;
                        for ((mut row, xh), &is) in
                            dxhat.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std)
                        {
                            row *= &gv;
                            let mean_d = row.sum() / n;
                            let mean_dx = row.iter().zip(xh).map(|(d, x)| d * x).sum::<f64>() / n;
                            Zip::from(&mut row).and(&xh).for_each(|d, &x| {
                                *d = is * (*d - mean_d - x * mean_dx);
                            });
                        }
                        accumulate(&mut grads[x.0], dxhat);
                    }
                }
                Op::Dropout { x, mask } => accumulate(&mut grads[x.0], g * mask),
                Op::Gather { table, ids } => {
                    let t = self.v(*table);
                    let mut gt = Mat::zeros(t.raw_dim());
                    for (row, &id) in g.rows().into_iter().zip(ids) {
                        let mut dst = gt.row_mut(id as usize);
                        dst += &row;
                    }
                    accumulate(&mut grads[table.0], gt);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    probs,
                } => {
                    let (gq, gk, gv) = self.attention_backward(&g, *q, *k, *v, layout, probs);
                    accumulate(&mut grads[q.0], gq);
                    accumulate(&mut grads[k.0], gk);
                    accumulate(&mut grads[v.0], gv);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    ignore,
                    smoothing,
                    probs,
                    count,
                } => {
                    if *count == 0 {
                        continue;
                    }
                    let upstream = g[[0, 0]] / *count as f64;
                    let uniform = smoothing / probs.ncols() as f64;
                    let mut gl = probs.clone();
                    for (mut row, &t) in gl.rows_mut().into_iter().zip(targets) {
                        if t == *ignore {
                            row.fill(0.0);
                            continue;
                        }
                        row.mapv_inplace(|p| (p - uniform) * upstream);
                        row[t as usize] -= (1.0 - smoothing) * upstream;
                    }
                    accumulate(&mut grads[logits.0], gl);
                }
            }
        }
        param_grads
    }

    fn attention_backward(
        &self,
        g: &Mat,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[Mat],
    ) -> (Mat, Mat, Mat) {
        let (qv, kv, vv) = (self.v(q), self.v(k), self.v(v));
        let d = qv.ncols();
        let dh = d / layout.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Mat::zeros(qv.raw_dim());
        let mut gk = Mat::zeros(kv.raw_dim());
        let mut gv = Mat::zeros(vv.raw_dim());
        for b in 0..layout.batch {
            let qr = b * layout.q_len..(b + 1) * layout.q_len;
            let kr = b * layout.k_len..(b + 1) * layout.k_len;
            for h in 0..layout.heads {
                let cols = h * dh..(h + 1) * dh;
                let p = &probs[b * layout.heads + h];
                let go: ArrayView2<f64> = g.slice(s![qr.clone(), cols.clone()]);
                let qb = qv.slice(s![qr.clone(), cols.clone()]);
                let kb = kv.slice(s![kr.clone(), cols.clone()]);
                let vb = vv.slice(s![kr.clone(), cols.clone()]);
                // dV = Pᵀ dO
                general_mat_mul(
                    1.0,
                    &p.t(),
                    &go,
                    1.0,
                    &mut gv.slice_mut(s![kr.clone(), cols.clone()]),
                );
                // dP = dO Vᵀ; dS = P ⊙ (dP − rowsum(dP ⊙ P))
                let mut ds = go.dot(&vb.t());
                for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot: f64 = row.iter().zip(prow).map(|(a, b)| a * b).sum();
                    Zip::from(&mut row)
                        .and(&prow)
                        .for_each(|x, &pp| *x = pp * (*x - dot) * scale);
                }
                general_mat_mul(
                    1.0,
                    &ds,
                    &kb,
                    1.0,
                    &mut gq.slice_mut(s![qr.clone(), cols.clone()]),
                );
                general_mat_mul(
                    1.0,
                    &ds.t(),
                    &qb,
                    1.0,
                    &mut gk.slice_mut(s![kr.clone(), cols]),
                );
            }
        }
        (gq, gk, gv)
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed_rng;

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = keyed_rng(seed, 0);
        Mat::from_shape_simple_fn((rows, cols), || rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Checks the analytic gradient of `f` against central differences for
    /// every element of every input.
    fn check(inputs: Vec<Mat>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let eval = |inputs: &[Mat]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, m)| g.param(i, m))
                .collect();
            let out = f(&mut g, &vars);
            g.value(out)[[0, 0]]
        };
        let grads = {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, m)| g.param(i, m))
                .collect();
            let out = f(&mut g, &vars);
            g.backward(out, inputs.len())
        };
        let h = 1e-5;
        for (i, m) in inputs.iter().enumerate() {
            let analytic = grads[i].clone().unwrap_or_else(|| Mat::zeros(m.raw_dim()));
            for idx in 0..m.len() {
                let (r, c) = (idx / m.ncols(), idx % m.ncols());
                let mut plus = inputs.clone();
                plus[i][[r, c]] += h;
                let mut minus = inputs.clone();
                minus[i][[r, c]] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[[r, c]];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    err < 1e-5,
                    "input {i} [{r},{c}]: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    fn sum_weighted(g: &mut Graph, x: Var, seed: u64) -> Var {
        // Reduce to a scalar through a fixed random projection.
        let shape = g.value(x).raw_dim();
        let w = g.constant(random_mat(shape[1], 1, seed));
        let col = g.matmul(x, w);
        let ones = g.constant(Mat::ones((1, shape[0])));
        g.matmul(ones, col)
    }

    #[test]
    fn matmul_family() {
        check(
            vec![
                random_mat(3, 4, 1),
                random_mat(4, 2, 2),
                random_mat(1, 2, 3),
            ],
            |g, v| {
                let m = g.matmul(v[0], v[1]);
                let m = g.add_row(m, v[2]);
                let m = g.scale(m, 0.7);
                sum_weighted(g, m, 9)
            },
        );
        check(vec![random_mat(3, 4, 4), random_mat(5, 4, 5)], |g, v| {
            let m = g.matmul_t(v[0], v[1]);
            let m2 = g.add(m, m);
            sum_weighted(g, m2, 10)
        });
    }

    #[test]
    fn gelu_and_layer_norm() {
        check(
            vec![
                random_mat(4, 6, 6),
                random_mat(1, 6, 7),
                random_mat(1, 6, 8),
            ],
            |g, v| {
                let n = g.layer_norm(v[0], v[1], v[2]);
                let a = g.gelu(n);
                sum_weighted(g, a, 11)
            },
        );
    }

    #[test]
    fn gather_rows() {
        check(vec![random_mat(5, 3, 12)], |g, v| {
            let x = g.gather(v[0], &[4, 0, 4, 2]);
            sum_weighted(g, x, 13)
        });
    }

    #[test]
    fn attention_masked_and_causal() {
        for causal in [false, true] {
            check(
                vec![
                    random_mat(6, 4, 14),
                    random_mat(8, 4, 15),
                    random_mat(8, 4, 16),
                ],
                move |g, v| {
                    let layout = AttentionLayout {
                        batch: 2,
                        q_len: 3,
                        k_len: 4,
                        heads: 2,
                        key_lengths: vec![4, 2],
                        causal,
                    };
                    let a = g.attention(v[0], v[1], v[2], layout);
                    sum_weighted(g, a, 17)
                },
            );
        }
    }

    #[test]
    fn cross_entropy_smoothed() {
        check(vec![random_mat(4, 5, 18)], |g, v| {
            g.cross_entropy(v[0], &[1, 0, 3, 4], 0, 0.1).0
        });
    }

    #[test]
    fn cross_entropy_hand_computed() {
        // Three-token vocabulary, one row, logits (0, ln 2, ln 3): softmax
        // probabilities 1/6, 2/6, 3/6. Gold token 2, ε = 0.3.
        let logits = Mat::from_shape_vec((1, 3), vec![0.0, 2f64.ln(), 3f64.ln()]).unwrap();
        let mut g = Graph::new();
        let l = g.constant(logits);
        let (loss, count) = g.cross_entropy(l, &[2], 99, 0.3);
        let nll = |p: f64| -p.ln();
        let expected =
            0.7 * nll(0.5) + 0.3 * (nll(1.0 / 6.0) + nll(2.0 / 6.0) + nll(3.0 / 6.0)) / 3.0;
        assert_eq!(count, 1);
        assert!((g.value(loss)[[0, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn ignored_rows_do_not_count() {
        let mut g = Graph::new();
        let l = g.constant(random_mat(3, 4, 19));
        let (_, count) = g.cross_entropy(l, &[0, 2, 0], 0, 0.0);
        assert_eq!(count, 1);
    }

    #[test]
    fn dropout_without_stream_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(random_mat(2, 2, 20));
        assert_eq!(g.dropout(x, 0.5), x);
    }

    #[test]
    fn dropout_keeps_expectation() {
        let mut g = Graph::with_dropout(keyed_rng(1, 1));
        let x = g.constant(Mat::ones((200, 200)));
        let y = g.dropout(x, 0.25);
        let mean = g.value(y).mean().unwrap();
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }
}
