//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Trainable inputs
//! enter through [`Tape::param`], everything else through
//! [`Tape::constant`]. [`Tape::backward`] walks the record in reverse and
//! returns [`Gradients`]. [`Tape::detach`] cuts the graph: the result holds
//! the same value but gradients stop there.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::params::ParamId;
use crate::tensor::{
    broadcast_binary, gemm, matmul_shapes, reduce_to_shape, Contraction,
    MatmulPlan, Tensor,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Tanh(usize),
    Sigmoid(usize),
    Gelu(usize),
    Relu(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    NanToNum(usize),
    Sum(usize),
    SumAxis(usize),
    Softmax(usize),
    CausalMask(usize),
    Matmul(usize, usize, MatmulPlan),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Contract(usize, usize, Contraction),
    Embedding(usize, Vec<usize>),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        smoothing: f64,
        probs: Tensor,
    },
    SelectLast(usize, usize),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(usize, ParamId)>,
}

/// Result of [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter, summed over every place it entered the tape.
    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        let mut acc: Option<Tensor> = None;
        for &(node, pid) in &self.params {
            if pid != id {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                acc = Some(match acc {
                    None => g.clone(),
                    Some(a) => add_same(&a, g),
                });
            }
        }
        acc
    }
}

fn add_same(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
    out
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (x, y) in acc.data_mut().iter_mut().zip(g.data()) {
                *x += y;
            }
        }
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + math::erf(x / core::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    // 1 / sqrt(2 pi)
    0.398_942_280_401_432_7 * math::exp(-0.5 * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let g = self.nodes[x.0].needs_grad;
        self.push(value, op, g)
    }

    fn binary_grad(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
    }

    /// Value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Trainable leaf; its gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((v.0, id));
        v
    }

    /// Same value, no gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = broadcast_binary(self.value(a), self.value(b), |x, y| x + y)?;
        let g = self.binary_grad(a, b);
        Ok(self.push(Tensor::new(&s, d)?, Op::Add(a.0, b.0), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = broadcast_binary(self.value(a), self.value(b), |x, y| x - y)?;
        let g = self.binary_grad(a, b);
        Ok(self.push(Tensor::new(&s, d)?, Op::Sub(a.0, b.0), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = broadcast_binary(self.value(a), self.value(b), |x, y| x * y)?;
        let g = self.binary_grad(a, b);
        Ok(self.push(Tensor::new(&s, d)?, Op::Mul(a.0, b.0), g))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = broadcast_binary(self.value(a), self.value(b), |x, y| x / y)?;
        let g = self.binary_grad(a, b);
        Ok(self.push(Tensor::new(&s, d)?, Op::Div(a.0, b.0), g))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a * c);
        self.unary(x, v, Op::Scale(x.0, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a + c);
        self.unary(x, v, Op::AddScalar(x.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(math::exp);
        self.unary(x, v, Op::Exp(x.0))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.value(x).map(math::ln);
        self.unary(x, v, Op::Ln(x.0))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.value(x).map(math::sqrt);
        self.unary(x, v, Op::Sqrt(x.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(math::tanh);
        self.unary(x, v, Op::Tanh(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(math::sigmoid);
        self.unary(x, v, Op::Sigmoid(x.0))
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * std_normal_cdf(a));
        self.unary(x, v, Op::Gelu(x.0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { 0.0 });
        self.unary(x, v, Op::Relu(x.0))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a);
        self.unary(x, v, Op::Square(x.0))
    }

    /// Gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(x).map(|a| a.clamp(lo, hi));
        self.unary(x, v, Op::Clamp(x.0, lo, hi))
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.clamp(x, lo, f64::INFINITY)
    }

    /// Explicit sanitization; gradient passes only through finite entries.
    pub fn nan_to_num(&mut self, x: Var, nan: f64, posinf: f64, neginf: f64) -> Var {
        let v = self.value(x).nan_to_num(nan, posinf, neginf);
        self.unary(x, v, Op::NanToNum(x.0))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.unary(x, v, Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over one axis, keeping it with extent one.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::shape("sum_axis", format!("axis {axis} of {:?}", t.shape())));
        }
        let shape = t.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        let v = Tensor::new(&oshape, out)?;
        Ok(self.unary(x, v, Op::SumAxis(x.0)))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self
            .shape(x)
            .get(axis)
            .copied()
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Global mean and unbiased standard deviation, as recorded ops.
    pub fn mean_std(&mut self, x: Var) -> (Var, Var) {
        let n = self.value(x).len();
        let m = self.mean(x);
        let c = self.sub(x, m).expect("scalar broadcast");
        let sq = self.square(c);
        let ss = self.sum(sq);
        let var = self.scale(ss, 1.0 / (n.max(2) - 1) as f64);
        let sd = self.sqrt(var);
        (m, sd)
    }

    /// Softmax over the last axis, row maximum subtracted first.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = crate::tensor::softmax_rows(self.value(x));
        self.unary(x, v, Op::Softmax(x.0))
    }

    /// Sets entries strictly above the diagonal of the last two axes to `-inf`.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let r = t.rank();
        if r < 2 || t.shape()[r - 1] != t.shape()[r - 2] {
            return Err(Error::shape("causal_mask", format!("{:?}", t.shape())));
        }
        let n = t.shape()[r - 1];
        let mut v = t.clone();
        for m in v.data_mut().chunks_mut(n * n) {
            for i in 0..n {
                for j in i + 1..n {
                    m[i * n + j] = f64::NEG_INFINITY;
                }
            }
        }
        Ok(self.unary(x, v, Op::CausalMask(x.0)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = matmul_shapes(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; plan.out_shape.iter().product()];
        plan.run(self.value(a).data(), self.value(b).data(), &mut out);
        let v = Tensor::new(&plan.out_shape, out)?;
        let g = self.binary_grad(a, b);
        Ok(self.push(v, Op::Matmul(a.0, b.0, plan), g))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(x).permute(axes)?;
        Ok(self.unary(x, v, Op::Permute(x.0, axes.to_vec())))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.unary(x, v, Op::Reshape(x.0)))
    }

    /// Differentiable einsum-style contraction, e.g. `"btr,tk->rk"`.
    pub fn contract(&mut self, a: Var, b: Var, spec: &str) -> Result<Var> {
        let c = Contraction::parse(spec)?;
        let v = c.apply(self.value(a), self.value(b))?;
        let g = self.binary_grad(a, b);
        Ok(self.push(v, Op::Contract(a.0, b.0, c), g))
    }

    /// Rows of `table` ([V, D]) selected by `ids`, shaped `out_shape ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], out_shape: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("embedding", "table must be [V, D]"));
        }
        let (v, d) = (t.dim(0), t.dim(1));
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::TokenOutOfRange {
                token: bad,
                vocab: v,
            });
        }
        if out_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding", "ids do not fill the output shape"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        let val = Tensor::new(&shape, out)?;
        Ok(self.unary(table, val, Op::Embedding(table.0, ids.to_vec())))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", "affine parameters must match last axis"));
        }
        let rows = t.len() / d.max(1);
        let mut xhat = Vec::with_capacity(t.len());
        let mut rstd = Vec::with_capacity(rows);
        for row in t.data().chunks(d) {
            let m = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&a| (a - m) * (a - m)).sum::<f64>() / d as f64;
            let r = 1.0 / math::sqrt(var + eps);
            rstd.push(r);
            xhat.extend(row.iter().map(|&a| (a - m) * r));
        }
        let xhat = Tensor::new(t.shape(), xhat)?;
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(d) {
            for j in 0..d {
                row[j] = row[j] * gv[j] + bv[j];
            }
        }
        let g = self.nodes[x.0].needs_grad
            || self.nodes[gamma.0].needs_grad
            || self.nodes[beta.0].needs_grad;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            g,
        ))
    }

    /// Summed token cross-entropy of `logits` ([N, V]) against `targets`,
    /// with label smoothing `smoothing` spread uniformly over all classes.
    pub fn cross_entropy_sum(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
    ) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.dim(0) != targets.len() {
            return Err(Error::shape(
                "cross_entropy_sum",
                format!("logits {:?} vs {} targets", t.shape(), targets.len()),
            ));
        }
        let v = t.dim(1);
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(Error::TokenOutOfRange {
                token: bad,
                vocab: v,
            });
        }
        let mut probs = t.clone();
        let mut loss = 0.0;
        let off = smoothing / v as f64;
        for (row, &y) in probs.data_mut().chunks_mut(v).zip(targets) {
            let lse = math::log_sum_exp(row);
            let mut l = 0.0;
            let mut sum_logp = 0.0;
            for (j, p) in row.iter_mut().enumerate() {
                let logp = *p - lse;
                sum_logp += logp;
                if j == y {
                    l -= (1.0 - smoothing) * logp;
                }
                *p = math::exp(logp);
            }
            l -= off * sum_logp;
            loss += l;
        }
        Ok(self.unary(
            logits,
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                smoothing,
                probs,
            },
        ))
    }

    /// `x[..., index]` keeping the last axis with extent one.
    pub fn select_last(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().unwrap_or(&0);
        if index >= n {
            return Err(Error::shape("select_last", format!("index {index} of {n}")));
        }
        let data: Vec<f64> = t.data().chunks(n).map(|r| r[index]).collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let v = Tensor::new(&shape, data)?;
        Ok(self.unary(x, v, Op::SelectLast(x.0, index)))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |j: usize| &self.nodes[j].value;
        let wants = |j: usize| self.nodes[j].needs_grad;
        let send = |j: usize, t: Tensor, grads: &mut [Option<Tensor>]| {
            if wants(j) {
                accumulate(&mut grads[j], t);
            }
        };
        let elementwise = |x: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            let mut out = g.clone();
            for (o, &a) in out.data_mut().iter_mut().zip(x.data()) {
                *o = f(*o, a);
            }
            out
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, reduce_to_shape(g, val(*a).shape()), grads);
                send(*b, reduce_to_shape(g, val(*b).shape()), grads);
            }
            Op::Sub(a, b) => {
                send(*a, reduce_to_shape(g, val(*a).shape()), grads);
                send(*b, reduce_to_shape(g, val(*b).shape()).map(|x| -x), grads);
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let (s, d) = broadcast_binary(g, val(*b), |x, y| x * y)?;
                    send(*a, reduce_to_shape(&Tensor::new(&s, d)?, val(*a).shape()), grads);
                }
                if wants(*b) {
                    let (s, d) = broadcast_binary(g, val(*a), |x, y| x * y)?;
                    send(*b, reduce_to_shape(&Tensor::new(&s, d)?, val(*b).shape()), grads);
                }
            }
            Op::Div(a, b) => {
                if wants(*a) {
                    let (s, d) = broadcast_binary(g, val(*b), |x, y| x / y)?;
                    send(*a, reduce_to_shape(&Tensor::new(&s, d)?, val(*a).shape()), grads);
                }
                if wants(*b) {
                    // d(a/b)/db = -y / b
                    let gy = g.zip_with(y, |x, q| -x * q)?;
                    let (s, d) = broadcast_binary(&gy, val(*b), |x, q| x / q)?;
                    send(*b, reduce_to_shape(&Tensor::new(&s, d)?, val(*b).shape()), grads);
                }
            }
            Op::Scale(x, c) => send(*x, g.map(|v| v * c), grads),
            Op::AddScalar(x) => send(*x, g.clone(), grads),
            Op::Exp(x) => send(*x, elementwise(y, &|gv, yv| gv * yv), grads),
            Op::Ln(x) => send(*x, elementwise(val(*x), &|gv, xv| gv / xv), grads),
            Op::Sqrt(x) => send(*x, elementwise(y, &|gv, yv| 0.5 * gv / yv), grads),
            Op::Tanh(x) => send(*x, elementwise(y, &|gv, yv| gv * (1.0 - yv * yv)), grads),
            Op::Sigmoid(x) => send(*x, elementwise(y, &|gv, yv| gv * yv * (1.0 - yv)), grads),
            Op::Gelu(x) => send(
                *x,
                elementwise(val(*x), &|gv, xv| {
                    gv * (std_normal_cdf(xv) + xv * std_normal_pdf(xv))
                }),
                grads,
            ),
            Op::Relu(x) => send(
                *x,
                elementwise(val(*x), &|gv, xv| if xv > 0.0 { gv } else { 0.0 }),
                grads,
            ),
            Op::Square(x) => send(*x, elementwise(val(*x), &|gv, xv| 2.0 * gv * xv), grads),
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                send(
                    *x,
                    elementwise(val(*x), &|gv, xv| if xv >= lo && xv <= hi { gv } else { 0.0 }),
                    grads,
                )
            }
            Op::NanToNum(x) => send(
                *x,
                elementwise(val(*x), &|gv, xv| if xv.is_finite() { gv } else { 0.0 }),
                grads,
            ),
            Op::Sum(x) => send(*x, Tensor::full(val(*x).shape(), g.item()), grads),
            Op::SumAxis(x) => {
                let shape = val(*x).shape().to_vec();
                let (s, d) = broadcast_binary(&Tensor::zeros(&shape), g, |_, b| b)?;
                send(*x, Tensor::new(&s, d)?, grads)
            }
            Op::Softmax(x) => {
                let n = *y.shape().last().unwrap_or(&1);
                let mut out = g.clone();
                for (go, yr) in out.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: f64 = go.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (o, &p) in go.iter_mut().zip(yr) {
                        *o = p * (*o - dot);
                    }
                }
                send(*x, out, grads)
            }
            Op::CausalMask(x) => {
                let n = *y.shape().last().unwrap();
                let mut out = g.clone();
                for m in out.data_mut().chunks_mut(n * n) {
                    for r in 0..n {
                        for c in r + 1..n {
                            m[r * n + c] = 0.0;
                        }
                    }
                }
                send(*x, out, grads)
            }
            Op::Matmul(a, b, plan) => {
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let (av, bv) = (val(*a).data(), val(*b).data());
                let gd = g.data();
                if wants(*a) {
                    let mut ga = vec![0.0; av.len()];
                    for bi in 0..plan.batch {
                        let bo = if plan.shared_rhs { 0 } else { bi * k * n };
                        // dA = dC * B^T
                        gemm(
                            m,
                            n,
                            k,
                            &gd[bi * m * n..(bi + 1) * m * n],
                            false,
                            &bv[bo..bo + k * n],
                            true,
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            false,
                        );
                    }
                    send(*a, Tensor::new(val(*a).shape(), ga)?, grads);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; bv.len()];
                    for bi in 0..plan.batch {
                        let bo = if plan.shared_rhs { 0 } else { bi * k * n };
                        // dB = A^T * dC
                        gemm(
                            k,
                            m,
                            n,
                            &av[bi * m * k..(bi + 1) * m * k],
                            true,
                            &gd[bi * m * n..(bi + 1) * m * n],
                            false,
                            &mut gb[bo..bo + k * n],
                            plan.shared_rhs,
                        );
                    }
                    send(*b, Tensor::new(val(*b).shape(), gb)?, grads);
                }
            }
            Op::Permute(x, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                send(*x, g.permute(&inv)?, grads)
            }
            Op::Reshape(x) => send(*x, g.clone().reshape(val(*x).shape())?, grads),
            Op::Contract(a, b, spec) => {
                let hints = |t: &Tensor, letters: &[u8]| -> Vec<(u8, usize)> {
                    letters.iter().copied().zip(t.shape().iter().copied()).collect()
                };
                if wants(*a) {
                    let s = spec.grad_spec(true);
                    let ga = s.apply_with(g, val(*b), &hints(val(*a), &spec.lhs))?;
                    send(*a, ga, grads);
                }
                if wants(*b) {
                    let s = spec.grad_spec(false);
                    let gb = s.apply_with(g, val(*a), &hints(val(*b), &spec.rhs))?;
                    send(*b, gb, grads);
                }
            }
            Op::Embedding(table, ids) => {
                let t = val(*table);
                let d = t.dim(1);
                let mut gt = Tensor::zeros(t.shape());
                for (row, &id) in g.data().chunks(d).zip(ids) {
                    for (o, &v) in gt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(row) {
                        *o += v;
                    }
                }
                send(*table, gt, grads)
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = xhat.shape().last().copied().unwrap_or(1);
                let gv = val(*gamma).data();
                if wants(*x) {
                    let mut gx = Vec::with_capacity(g.len());
                    for ((gr, xr), &r) in g.data().chunks(d).zip(xhat.data().chunks(d)).zip(rstd) {
                        let dxh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let m1 = dxh.iter().sum::<f64>() / d as f64;
                        let m2 = dxh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        gx.extend(dxh.iter().zip(xr).map(|(&a, &h)| r * (a - m1 - h * m2)));
                    }
                    send(*x, Tensor::new(xhat.shape(), gx)?, grads);
                }
                if wants(*gamma) || wants(*beta) {
                    let mut gg = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    for (gr, xr) in g.data().chunks(d).zip(xhat.data().chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j];
                            gb[j] += gr[j];
                        }
                    }
                    send(*gamma, Tensor::new(&[d], gg)?, grads);
                    send(*beta, Tensor::new(&[d], gb)?, grads);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                let v = probs.dim(1);
                let gs = g.item();
                let off = smoothing / v as f64;
                let mut gl = probs.clone();
                for (row, &t) in gl.data_mut().chunks_mut(v).zip(targets) {
                    for (j, p) in row.iter_mut().enumerate() {
                        let q = off + if j == t { 1.0 - smoothing } else { 0.0 };
                        *p = gs * (*p - q);
                    }
                }
                send(*logits, gl, grads)
            }
            Op::SelectLast(x, index) => {
                let shape = val(*x).shape();
                let n = *shape.last().unwrap();
                let mut gx = Tensor::zeros(shape);
                for (row, &v) in gx.data_mut().chunks_mut(n).zip(g.data()) {
                    row[*index] = v;
                }
                send(*x, gx, grads)
            }
        }
        Ok(())
    }
}

/// Central finite-difference gradient of a scalar function of one tensor.
/// Test support for the gradient checks; kept public so harnesses can use it.
pub fn numeric_gradient(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + h;
        let fp = f(&xp);
        xp.data_mut()[i] = orig - h;
        let fm = f(&xp);
        xp.data_mut()[i] = orig;
        g.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Largest scaled discrepancy `|a - n| / max(|a|, |n|, floor)` between an
/// analytic and a numeric gradient.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| math::abs(a - n) / f64::max(f64::max(math::abs(a), math::abs(n)), floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pid(i: usize) -> ParamId {
        ParamId::from_index(i)
    }

    #[test]
    fn square_at_three_has_gradient_six() {
        let mut t = Tape::new();
        let x = t.param(pid(0), Tensor::scalar(3.0));
        let y = t.square(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.param(pid(0)).unwrap().item(), 6.0);
    }

    #[test]
    fn two_class_cross_entropy_gradient() {
        let mut t = Tape::new();
        let z = t.param(pid(0), Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap());
        let l = t.cross_entropy_sum(z, &[0], 0.0).unwrap();
        assert!((t.value(l).item() - core::f64::consts::LN_2).abs() < 1e-15);
        let g = t.backward(l).unwrap();
        assert_eq!(g.param(pid(0)).unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut t = Tape::new();
        let x = t.param(pid(0), Tensor::ones(&[2]));
        let y = t.exp(x);
        assert!(matches!(t.backward(y), Err(Error::NonScalarLoss(_))));
        let d = t.detach(x);
        let s = t.sum(d);
        assert!(matches!(t.backward(s), Err(Error::DetachedLoss)));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.param(pid(0), Tensor::scalar(2.0));
        let d = t.detach(x);
        let y = t.mul(x, d).unwrap();
        let g = t.backward(y).unwrap();
        // d/dx (x * stop(x)) = stop(x)
        assert_eq!(g.param(pid(0)).unwrap().item(), 2.0);
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        let mut t = Tape::new();
        let a = t.param(pid(0), Tensor::scalar(1.5));
        let b = t.param(pid(0), Tensor::scalar(1.5));
        let y = t.mul(a, b).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.param(pid(0)).unwrap().item(), 3.0);
    }

    #[test]
    fn masked_softmax_first_row_is_one_hot() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn(&[3, 3], |i| (i[0] + 2 * i[1]) as f64));
        let m = t.causal_mask(x).unwrap();
        let p = t.softmax(m);
        assert_eq!(&t.value(p).data()[..3], &[1.0, 0.0, 0.0]);
    }
}
