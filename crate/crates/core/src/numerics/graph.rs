//! Tape-based reverse-mode differentiation. Ops are recorded in execution
//! order, so the tape is already topologically sorted and `backward` is a
//! single reverse sweep.

use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{matmul_into, Tensor};
use crate::error::{shape_err, Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Row(Var, usize),
    StackRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    Sum(Var),
    CrossEntropySum { logits: Var, targets: Vec<usize> },
    MaskedAbsSum { pred: Var, target: Vec<f64>, mask: Vec<f64> },
    MaskedSqSum { pred: Var, target: Vec<f64>, mask: Vec<f64> },
    FocalSum { p: Var, target: Vec<f64>, alpha: Option<f64>, gamma: f64 },
    GradScale(Var, f64),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    /// Softmax probabilities kept for the cross-entropy backward rule.
    aux: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        check_finite(name, &value)?;
        self.nodes.push(Node { op, value, aux: None });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Input, t, "input")
    }

    /// Binds a parameter onto the tape. Repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push(Op::Param(id), store.value(id).clone(), "param")?;
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn param_named(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        self.param(store, id)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let (k2, m) = match self.value(b).shape() {
            [k2, m] => (*k2, *m),
            s => return Err(shape_err("matmul", format!("rhs must be 2-D, got {s:?}"))),
        };
        if k != k2 {
            return Err(shape_err("matmul", format!("[{n},{k}] x [{k2},{m}]")));
        }
        let mut out = vec![0.0; n * m];
        matmul_into(self.value(a).data(), self.value(b).data(), n, k, m, &mut out);
        self.push(Op::MatMul(a, b), Tensor::new(vec![n, m], out)?, "matmul")
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if self.value(b).len() != m {
            return Err(shape_err(
                "add_bias",
                format!("[{n},{m}] + {:?}", self.value(b).shape()),
            ));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push(Op::AddBias(x, b), Tensor::new(vec![n, m], out)?, "add_bias")
    }

    fn zip_op(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(name, self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(self.value(a).shape().to_vec(), data)
    }

    fn map_op(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        let data = t.data().iter().map(|x| f(*x)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same length")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op(a, b, "add", |x, y| x + y)?;
        self.push(Op::Add(a, b), t, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op(a, b, "sub", |x, y| x - y)?;
        self.push(Op::Sub(a, b), t, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op(a, b, "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), t, "mul")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let t = self.map_op(a, |x| x * k);
        self.push(Op::Scale(a, k), t, "scale")
    }

    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let t = self.map_op(a, |x| 1.0 - x);
        self.push(Op::OneMinus(a), t, "one_minus")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.map_op(a, sigmoid);
        self.push(Op::Sigmoid(a), t, "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.map_op(a, f64::tanh);
        self.push(Op::Tanh(a), t, "tanh")
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = None;
        let mut total = 0;
        for &p in parts {
            let (n, m) = self.value(p).dims2()?;
            if *rows.get_or_insert(n) != n {
                return Err(shape_err("concat", "row counts differ"));
            }
            total += m;
        }
        let n = rows.unwrap_or(1);
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                let (_, m) = self.value(p).dims2()?;
                out.extend_from_slice(&self.value(p).data()[r * m..(r + 1) * m]);
            }
        }
        self.push(Op::Concat(parts.to_vec()), Tensor::new(vec![n, total], out)?, "concat")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if start + len > m {
            return Err(shape_err("slice_cols", format!("{start}+{len} > {m}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&src[r * m + start..r * m + start + len]);
        }
        self.push(Op::SliceCols(x, start), Tensor::new(vec![n, len], out)?, "slice_cols")
    }

    /// Row `r` of a 2-D tensor as a `[1, m]` tensor.
    pub fn row(&mut self, x: Var, r: usize) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if r >= n {
            return Err(shape_err("row", format!("row {r} of {n}")));
        }
        let t = Tensor::row(self.value(x).row_slice(r).to_vec());
        let _ = m;
        self.push(Op::Row(x, r), t, "row")
    }

    /// Stacks `[1, m]` rows into `[n, m]`.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let mut width = None;
        let mut out = Vec::new();
        for &r in rows {
            let (n, m) = self.value(r).dims2()?;
            if n != 1 || *width.get_or_insert(m) != m {
                return Err(shape_err("stack_rows", "rows must be [1, m] of equal width"));
            }
            out.extend_from_slice(self.value(r).data());
        }
        let m = width.unwrap_or(0);
        self.push(
            Op::StackRows(rows.to_vec()),
            Tensor::new(vec![rows.len(), m], out)?,
            "stack_rows",
        )
    }

    /// Rows of `table` selected by `ids`, `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Token { id, vocab: v });
            }
            out.extend_from_slice(self.value(table).row_slice(id));
        }
        self.push(Op::Gather(table, ids.to_vec()), Tensor::new(vec![ids.len(), d], out)?, "gather")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), "sum")
    }

    /// Sum over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.value(logits).dims2()?;
        if targets.len() != n {
            return Err(shape_err("cross_entropy", format!("{n} rows, {} targets", targets.len())));
        }
        let mut probs = Vec::with_capacity(n * v);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Token { id: t, vocab: v });
            }
            let row = self.value(logits).row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + z.ln();
            total += log_z - row[t];
            probs.extend(row.iter().map(|x| (x - log_z).exp()));
        }
        let v = self.push(
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
            },
            Tensor::scalar(total),
            "cross_entropy",
        )?;
        self.nodes[v.0].aux = Some(probs);
        Ok(v)
    }

    fn check_mask(&self, pred: Var, target: &[f64], mask: &[f64], op: &'static str) -> Result<()> {
        let n = self.value(pred).len();
        if target.len() != n || mask.len() != n {
            return Err(shape_err(op, format!("pred {n}, target {}, mask {}", target.len(), mask.len())));
        }
        Ok(())
    }

    /// `Σ mask·|pred − target|`.
    pub fn masked_abs_sum(&mut self, pred: Var, target: &[f64], mask: &[f64]) -> Result<Var> {
        self.check_mask(pred, target, mask, "masked_abs_sum")?;
        let s = self
            .value(pred)
            .data()
            .iter()
            .zip(target)
            .zip(mask)
            .map(|((p, t), m)| m * (p - t).abs())
            .sum();
        self.push(
            Op::MaskedAbsSum {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
            },
            Tensor::scalar(s),
            "masked_abs_sum",
        )
    }

    /// `Σ mask·(pred − target)²`.
    pub fn masked_sq_sum(&mut self, pred: Var, target: &[f64], mask: &[f64]) -> Result<Var> {
        self.check_mask(pred, target, mask, "masked_sq_sum")?;
        let s = self
            .value(pred)
            .data()
            .iter()
            .zip(target)
            .zip(mask)
            .map(|((p, t), m)| m * (p - t) * (p - t))
            .sum();
        self.push(
            Op::MaskedSqSum {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
            },
            Tensor::scalar(s),
            "masked_sq_sum",
        )
    }

    /// Sum of element-wise focal losses of probabilities `p` against 0/1
    /// targets. `alpha = None` weights both classes by 1.
    pub fn focal_sum(&mut self, p: Var, target: &[f64], alpha: Option<f64>, gamma: f64) -> Result<Var> {
        if target.len() != self.value(p).len() {
            return Err(shape_err("focal_sum", "target length"));
        }
        let s = self
            .value(p)
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &y)| focal(p, y >= 0.5, alpha, gamma))
            .sum();
        self.push(
            Op::FocalSum {
                p,
                target: target.to_vec(),
                alpha,
                gamma,
            },
            Tensor::scalar(s),
            "focal_sum",
        )
    }

    /// Identity forward; backward multiplies the incoming gradient by `k`.
    /// `k = -1` is a gradient-reversal layer.
    pub fn grad_scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let t = self.value(x).clone();
        self.push(Op::GradScale(x, k), t, "grad_scale")
    }

    /// Adds dLoss/dParam for every parameter on the tape into `store`'s
    /// accumulators.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss, store)?;
        store.accumulate(&grads)
    }

    /// Gradients of a scalar `loss` w.r.t. every parameter of `store`.
    /// Parameters not reachable from `loss` get zero tensors.
    pub fn gradients(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        let mut out = store.zero_gradients();
        self.backward_into(loss, &mut out)?;
        Ok(out)
    }

    pub fn backward_into(&self, loss: Var, out: &mut Gradients) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let acc = out.tensors[id.0].data_mut();
                    for (a, gv) in acc.iter_mut().zip(&g) {
                        *a += gv;
                    }
                }
                Op::MatMul(a, b) => {
                    let (n, k) = self.value(*a).dims2()?;
                    let (_, m) = self.value(*b).dims2()?;
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let mut ga = vec![0.0; n * k];
                    for i in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += g[i * m + j] * bv[p * m + j];
                            }
                            ga[i * k + p] = s;
                        }
                    }
                    let mut gb = vec![0.0; k * m];
                    for i in 0..n {
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for j in 0..m {
                                gb[p * m + j] += a_ip * g[i * m + j];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddBias(x, b) => {
                    let m = self.value(*b).len();
                    let mut gb = vec![0.0; m];
                    for row in g.chunks(m) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.iter().map(|v| -v).collect());
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let ga = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                    let gb = g.iter().zip(av).map(|(g, a)| g * a).collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, k) | Op::GradScale(a, k) => {
                    accumulate(&mut grads, *a, g.iter().map(|v| v * k).collect());
                }
                Op::OneMinus(a) => {
                    accumulate(&mut grads, *a, g.iter().map(|v| -v).collect());
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let ga = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let ga = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let (n, total) = node.value.dims2()?;
                    let widths: Vec<usize> = parts
                        .iter()
                        .map(|p| self.value(*p).dims2().map(|d| d.1))
                        .collect::<Result<_>>()?;
                    let mut pieces: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(n * w)).collect();
                    for r in 0..n {
                        let mut off = r * total;
                        for (piece, w) in pieces.iter_mut().zip(&widths) {
                            piece.extend_from_slice(&g[off..off + w]);
                            off += w;
                        }
                    }
                    for (p, piece) in parts.iter().zip(pieces) {
                        accumulate(&mut grads, *p, piece);
                    }
                }
                Op::SliceCols(x, start) => {
                    let (n, m) = self.value(*x).dims2()?;
                    let (_, len) = node.value.dims2()?;
                    let mut gx = vec![0.0; n * m];
                    for r in 0..n {
                        gx[r * m + start..r * m + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Row(x, r) => {
                    let (n, m) = self.value(*x).dims2()?;
                    let mut gx = vec![0.0; n * m];
                    gx[r * m..(r + 1) * m].copy_from_slice(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::StackRows(rows) => {
                    let (_, m) = node.value.dims2()?;
                    for (i, r) in rows.iter().enumerate() {
                        accumulate(&mut grads, *r, g[i * m..(i + 1) * m].to_vec());
                    }
                }
                Op::Gather(table, ids) => {
                    let (v, d) = self.value(*table).dims2()?;
                    let mut gt = vec![0.0; v * d];
                    for (i, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[id * d + c] += g[i * d + c];
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads, *x, vec![g[0]; n]);
                }
                Op::CrossEntropySum { logits, targets } => {
                    let (_, v) = self.value(*logits).dims2()?;
                    let mut gl = node.aux.clone().expect("softmax cached in forward");
                    for (r, &t) in targets.iter().enumerate() {
                        gl[r * v + t] -= 1.0;
                    }
                    gl.iter_mut().for_each(|x| *x *= g[0]);
                    accumulate(&mut grads, *logits, gl);
                }
                Op::MaskedAbsSum { pred, target, mask } => {
                    let p = self.value(*pred).data();
                    let gp = p
                        .iter()
                        .zip(target)
                        .zip(mask)
                        .map(|((p, t), m)| {
                            let d = p - t;
                            let s = if d > 0.0 {
                                1.0
                            } else if d < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            g[0] * m * s
                        })
                        .collect();
                    accumulate(&mut grads, *pred, gp);
                }
                Op::MaskedSqSum { pred, target, mask } => {
                    let p = self.value(*pred).data();
                    let gp = p
                        .iter()
                        .zip(target)
                        .zip(mask)
                        .map(|((p, t), m)| g[0] * 2.0 * m * (p - t))
                        .collect();
                    accumulate(&mut grads, *pred, gp);
                }
                Op::FocalSum { p, target, alpha, gamma } => {
                    let pv = self.value(*p).data();
                    let gp = pv
                        .iter()
                        .zip(target)
                        .map(|(&p, &y)| g[0] * focal_grad(p, y >= 0.5, *alpha, *gamma))
                        .collect();
                    accumulate(&mut grads, *p, gp);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn alpha_t(alpha: Option<f64>, positive: bool) -> f64 {
    match (alpha, positive) {
        (None, _) => 1.0,
        (Some(a), true) => a,
        (Some(a), false) => 1.0 - a,
    }
}

/// Focal loss `-α_t (1 − p_t)^γ ln p_t` for one probability, with
/// `p_t = p` for positives and `1 − p` otherwise.
pub fn focal(p: f64, positive: bool, alpha: Option<f64>, gamma: f64) -> f64 {
    let c = clamp_prob(p);
    let pt = if positive { c } else { 1.0 - c };
    let at = alpha_t(alpha, positive);
    -at * (1.0 - pt).powf(gamma) * pt.ln()
}

/// d focal / d p. Zero where the clamp is active.
pub fn focal_grad(p: f64, positive: bool, alpha: Option<f64>, gamma: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    let (pt, sign) = if positive { (p, 1.0) } else { (1.0 - p, -1.0) };
    let at = alpha_t(alpha, positive);
    let q = 1.0 - pt;
    let mod_term = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * pt.ln() };
    sign * at * (mod_term - q.powf(gamma) / pt)
}
