//! Dense row-major `f64` tensors of rank at most four, plus the plain
//! (non-recorded) kernels the tape builds on.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::shape("Tensor::new", format!("rank {} > {MAX_RANK}", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.len() <= MAX_RANK, "rank > {MAX_RANK}");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for v in t.data.iter_mut() {
            *v = f(&idx);
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        t
    }

    /// Row-major matrix from nested rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return Err(Error::shape("Tensor::from_rows", "ragged rows"));
        }
        Self::new(&[r, c], rows.iter().flat_map(|x| x.iter().copied()).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                debug_assert!(i < n);
                acc * n + i
            })
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.len() > MAX_RANK {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let (shape, data) = broadcast_binary(self, other, f)?;
        Ok(Self { shape, data })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Unbiased (n-1) standard deviation over all entries, matching the
    /// default of the reference tensor library.
    pub fn std_unbiased(&self) -> f64 {
        let n = self.data.len();
        if n < 2 {
            return f64::NAN;
        }
        let m = self.mean();
        let ss: f64 = self.data.iter().map(|&x| (x - m) * (x - m)).sum();
        math::sqrt(ss / (n - 1) as f64)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| f64::max(m, math::abs(x)))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn nan_to_num(&self, nan: f64, posinf: f64, neginf: f64) -> Self {
        self.map(|x| math::nan_to_num(x, nan, posinf, neginf))
    }

    /// Axis permutation, materialized.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let r = self.rank();
        if axes.len() != r || {
            let mut seen = [false; MAX_RANK];
            axes.iter().any(|&a| a >= r || core::mem::replace(&mut seen[a], true))
        } {
            return Err(Error::shape("permute", format!("axes {axes:?} for rank {r}")));
        }
        let new_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides = strides(&self.shape);
        let perm_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let (s4, p4) = pad4(&new_shape, &perm_strides);
        for i0 in 0..s4[0] {
            for i1 in 0..s4[1] {
                for i2 in 0..s4[2] {
                    let base = i0 * p4[0] + i1 * p4[1] + i2 * p4[2];
                    for i3 in 0..s4[3] {
                        out.push(self.data[base + i3 * p4[3]]);
                    }
                }
            }
        }
        Ok(Self {
            shape: new_shape,
            data: out,
        })
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(&axes)
    }

    /// Matrix product with batch support; see [`matmul_shapes`].
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let plan = matmul_shapes(self.shape(), other.shape())?;
        let mut out = vec![0.0; plan.out_shape.iter().product()];
        plan.run(&self.data, &other.data, &mut out);
        Tensor::new(&plan.out_shape, out)
    }
}

/// Row-major strides.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Left-pad shape and strides to rank four.
pub(crate) fn pad4(shape: &[usize], st: &[usize]) -> ([usize; 4], [usize; 4]) {
    let mut s4 = [1; 4];
    let mut t4 = [0; 4];
    let off = 4 - shape.len();
    s4[off..].copy_from_slice(shape);
    t4[off..].copy_from_slice(st);
    (s4, t4)
}

/// Numpy broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside broadcast shape `out` (zero on broadcast axes).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                st[i - off]
            }
        })
        .collect()
}

pub(crate) fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok((a.shape.clone(), data));
    }
    let out = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| {
        Error::shape("broadcast", format!("{:?} vs {:?}", a.shape, b.shape))
    })?;
    let n: usize = out.iter().product();
    let mut data = Vec::with_capacity(n);
    if b.data.len() == 1 {
        let y = b.data[0];
        data.extend(a.data.iter().map(|&x| f(x, y)));
        return Ok((out, data));
    }
    if a.data.len() == 1 {
        let x = a.data[0];
        data.extend(b.data.iter().map(|&y| f(x, y)));
        return Ok((out, data));
    }
    let (s4, sa) = pad4(&out, &broadcast_strides(&a.shape, &out));
    let (_, sb) = pad4(&out, &broadcast_strides(&b.shape, &out));
    for i0 in 0..s4[0] {
        for i1 in 0..s4[1] {
            for i2 in 0..s4[2] {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..s4[3] {
                    data.push(f(a.data[ba + i3 * sa[3]], b.data[bb + i3 * sb[3]]));
                }
            }
        }
    }
    Ok((out, data))
}

/// Sum `grad` (shaped like the broadcast output) back down to `target` shape.
pub(crate) fn reduce_to_shape(grad: &Tensor, target: &[usize]) -> Tensor {
    if grad.shape == target {
        return grad.clone();
    }
    let mut acc = vec![0.0; target.iter().product()];
    if acc.len() == 1 {
        acc[0] = grad.sum();
        return Tensor {
            shape: target.to_vec(),
            data: acc,
        };
    }
    let out = &grad.shape;
    let (s4, st) = pad4(out, &broadcast_strides(target, out));
    let mut k = 0;
    for i0 in 0..s4[0] {
        for i1 in 0..s4[1] {
            for i2 in 0..s4[2] {
                let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                for i3 in 0..s4[3] {
                    acc[base + i3 * st[3]] += grad.data[k];
                    k += 1;
                }
            }
        }
    }
    Tensor {
        shape: target.to_vec(),
        data: acc,
    }
}

/// How a (possibly batched) matrix product maps onto GEMM calls.
#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    pub out_shape: Vec<usize>,
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// Right operand is a single matrix shared by every batch.
    pub shared_rhs: bool,
}

/// Supported forms: `[.., m, k] x [k, n]` (shared right operand, flattened
/// into one GEMM) and `[.., m, k] x [.., k, n]` with identical batch axes.
pub(crate) fn matmul_shapes(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", format!("{a:?} x {b:?}: rank < 2")));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", format!("{a:?} x {b:?}: inner {k} != {k2}")));
    }
    let batch_a = &a[..a.len() - 2];
    let mut out_shape = batch_a.to_vec();
    out_shape.push(m);
    out_shape.push(n);
    if b.len() == 2 {
        let batch: usize = batch_a.iter().product();
        return Ok(MatmulPlan {
            out_shape,
            batch: 1,
            m: m * batch,
            k,
            n,
            shared_rhs: true,
        });
    }
    if batch_a != &b[..b.len() - 2] {
        return Err(Error::shape("matmul", format!("{a:?} x {b:?}: batch axes differ")));
    }
    Ok(MatmulPlan {
        out_shape,
        batch: batch_a.iter().product(),
        m,
        k,
        n,
        shared_rhs: false,
    })
}

impl MatmulPlan {
    pub(crate) fn run(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for bi in 0..self.batch {
            let ao = bi * m * k;
            let bo = if self.shared_rhs { 0 } else { bi * k * n };
            let co = bi * m * n;
            gemm(
                m,
                k,
                n,
                &a[ao..ao + m * k],
                false,
                &b[bo..bo + k * n],
                false,
                &mut out[co..co + m * n],
                false,
            );
        }
    }
}

/// `c (+)= op(a) * op(b)` with `op(a)` of logical shape `[m, k]` and `op(b)`
/// of `[k, n]`. With `a_t`, `a` is stored `[k, m]`; with `b_t`, `b` is stored
/// `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays within
    // the three slices, and `c` does not alias `a` or `b` (exclusive borrow).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Softmax over the last axis with the row maximum subtracted first.
/// Rows that differ by a constant produce identical output whenever the
/// shift itself is exact in floating point.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let n = *x.shape.last().unwrap_or(&1);
    let mut out = x.clone();
    if n == 0 {
        return out;
    }
    for row in out.data.chunks_mut(n) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - m);
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Parsed einsum-style contraction between two operands, e.g. `"btr,tk->rk"`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Contraction {
    pub(crate) lhs: Vec<u8>,
    pub(crate) rhs: Vec<u8>,
    pub(crate) out: Vec<u8>,
}

impl Contraction {
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = |reason: &str| Error::Contraction {
            spec: String::from(spec),
            reason: String::from(reason),
        };
        let (inputs, out) = spec.split_once("->").ok_or_else(|| bad("missing `->`"))?;
        let (lhs, rhs) = inputs.split_once(',').ok_or_else(|| bad("expected two operands"))?;
        let check = |s: &str| -> Result<Vec<u8>> {
            let v: Vec<u8> = s.trim().bytes().collect();
            if v.len() > MAX_RANK || v.iter().any(|c| !c.is_ascii_lowercase()) {
                return Err(bad("operands use up to four lowercase index letters"));
            }
            for (i, c) in v.iter().enumerate() {
                if v[..i].contains(c) {
                    return Err(bad("repeated index within an operand"));
                }
            }
            Ok(v)
        };
        let c = Self {
            lhs: check(lhs)?,
            rhs: check(rhs)?,
            out: check(out)?,
        };
        if c.out.iter().any(|x| !c.lhs.contains(x) && !c.rhs.contains(x)) {
            return Err(bad("output index absent from both operands"));
        }
        Ok(c)
    }

    /// The contraction that maps the output gradient back onto one operand.
    pub(crate) fn grad_spec(&self, wrt_lhs: bool) -> Contraction {
        if wrt_lhs {
            Contraction {
                lhs: self.out.clone(),
                rhs: self.rhs.clone(),
                out: self.lhs.clone(),
            }
        } else {
            Contraction {
                lhs: self.out.clone(),
                rhs: self.lhs.clone(),
                out: self.rhs.clone(),
            }
        }
    }

    pub(crate) fn spec_string(&self) -> String {
        let s = |v: &[u8]| String::from_utf8_lossy(v).into_owned();
        format!("{},{}->{}", s(&self.lhs), s(&self.rhs), s(&self.out))
    }

    /// Index-summed product. `out_extents` supplies extents for output
    /// letters that appear in neither operand's sizes (only used internally
    /// by gradient specs, where every letter is known).
    pub fn apply(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply_with(a, b, &[])
    }

    pub(crate) fn apply_with(
        &self,
        a: &Tensor,
        b: &Tensor,
        hints: &[(u8, usize)],
    ) -> Result<Tensor> {
        let err = |reason: String| Error::Contraction {
            spec: self.spec_string(),
            reason,
        };
        if a.rank() != self.lhs.len() || b.rank() != self.rhs.len() {
            return Err(err(format!(
                "operand ranks {:?}/{:?} do not match",
                a.shape(),
                b.shape()
            )));
        }
        let mut letters: Vec<u8> = Vec::new();
        let mut extents: Vec<usize> = Vec::new();
        let mut note = |c: u8, n: usize| -> Result<()> {
            if let Some(i) = letters.iter().position(|&x| x == c) {
                if extents[i] != n {
                    return Err(err(format!(
                        "index `{}` has extents {} and {n}",
                        c as char, extents[i]
                    )));
                }
            } else {
                letters.push(c);
                extents.push(n);
            }
            Ok(())
        };
        for (c, &n) in self.lhs.iter().zip(a.shape()) {
            note(*c, n)?;
        }
        for (c, &n) in self.rhs.iter().zip(b.shape()) {
            note(*c, n)?;
        }
        for &(c, n) in hints {
            if self.out.contains(&c) {
                note(c, n)?;
            }
        }
        let out_shape: Vec<usize> = self
            .out
            .iter()
            .map(|c| {
                letters
                    .iter()
                    .position(|x| x == c)
                    .map(|i| extents[i])
                    .ok_or_else(|| err(format!("no extent for `{}`", *c as char)))
            })
            .collect::<Result<_>>()?;
        let stride_of = |spec: &[u8], shape: &[usize]| -> Vec<usize> {
            let st = strides(shape);
            letters
                .iter()
                .map(|c| spec.iter().position(|x| x == c).map_or(0, |i| st[i]))
                .collect()
        };
        let sa = stride_of(&self.lhs, a.shape());
        let sb = stride_of(&self.rhs, b.shape());
        let so = stride_of(&self.out, &out_shape);
        let mut out = Tensor::zeros(&out_shape);
        let total: usize = extents.iter().product();
        if total == 0 {
            return Ok(out);
        }
        let nl = letters.len();
        let mut idx = vec![0usize; nl];
        let (mut ia, mut ib, mut io) = (0usize, 0usize, 0usize);
        for _ in 0..total {
            out.data[io] += a.data[ia] * b.data[ib];
            for ax in (0..nl).rev() {
                idx[ax] += 1;
                ia += sa[ax];
                ib += sb[ax];
                io += so[ax];
                if idx[ax] < extents[ax] {
                    break;
                }
                ia -= sa[ax] * extents[ax];
                ib -= sb[ax] * extents[ax];
                io -= so[ax] * extents[ax];
                idx[ax] = 0;
            }
        }
        Ok(out)
    }
}

/// Einsum-style contraction of two tensors, e.g. `contract(&mu, &phi, "btr,tk->rk")`.
pub fn contract(a: &Tensor, b: &Tensor, spec: &str) -> Result<Tensor> {
    Contraction::parse(spec)?.apply(a, b)
}
