//! Tape-based reverse-mode differentiation.
//!
//! Forward evaluation is eager: every op computes its value immediately and,
//! when at least one input requires a gradient, records itself on the tape.
//! [`Tape::backward`] walks the records once in reverse creation order (a
//! valid reverse topological order, since inputs always precede outputs).

use std::sync::Arc;

use crate::error::shape_err;
use crate::gemm::gemm;
use crate::{Array, Real, Result, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row ranges owned by each weight group of a grouped linear layer.
///
/// Group `g` transforms rows `start..start + len` of the input with its own
/// weight matrix. Rows not covered by any group produce zeros.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Segments {
    ranges: Vec<(usize, usize)>,
}

impl Segments {
    pub fn new(ranges: Vec<(usize, usize)>) -> Self {
        Self { ranges }
    }

    /// Group `g` owns rows `g * rows_per_group .. (g + 1) * rows_per_group`.
    pub fn uniform(groups: usize, rows_per_group: usize) -> Self {
        Self { ranges: (0..groups).map(|g| (g * rows_per_group, rows_per_group)).collect() }
    }

    /// Contiguous groups laid out back to back with the given row counts.
    pub fn from_counts(counts: &[usize]) -> Self {
        let mut start = 0;
        let ranges = counts
            .iter()
            .map(|&c| {
                let r = (start, c);
                start += c;
                r
            })
            .collect();
        Self { ranges }
    }

    pub fn groups(&self) -> usize {
        self.ranges.len()
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }

    pub fn total_rows(&self) -> usize {
        self.ranges.iter().map(|r| r.1).sum()
    }
}

/// `max(exp(-d2 * inv_two_sigma_sq) - eps, 0)`.
///
/// Shared by the tape op and by sample culling so both agree bit for bit on
/// which weights are strictly positive.
#[inline]
pub fn trunc_gauss<T: Real>(d2: T, inv_two_sigma_sq: T, eps: T) -> T {
    let w = (-(d2 * inv_two_sigma_sq)).exp() - eps;
    if w > T::zero() {
        w
    } else {
        T::zero()
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    Exp(Var),
    Sin(Var),
    Cos(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    MaxScalar(Var, T),
    Clamp(Var, T, T),
    Square(Var),
    Sum(Var),
    SumRows(Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    GroupedLinear { x: Var, w: Var, b: Option<Var>, segments: Arc<Segments> },
    GatherRows { x: Var, index: Arc<Vec<usize>> },
    ScatterAddRows { x: Var, index: Arc<Vec<usize>> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    MulRows(Var, Var),
    DivRows(Var, Var),
    Reshape(Var),
    Transpose(Var),
    Fourier { x: Var, octaves: usize },
    AffineRows { x: Var, mats: Arc<Vec<T>> },
    RowSqDist(Var, Var),
    TruncGauss { x: Var, inv_two_sigma_sq: T, eps: T },
    Composite { color: Var, density: Var, deltas: Arc<Vec<T>>, background: [T; 3] },
}

struct Node<T> {
    value: Arc<Array<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of the leaves that required them, indexed by [`Var`].
pub struct VarGrads<T> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Real> VarGrads<T> {
    pub fn get(&self, v: Var) -> Option<&Array<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check2(op: &'static str, a: &[usize]) -> Result<(usize, usize)> {
    if a.len() != 2 {
        return Err(shape_err(op, format!("expected rank 2, got {a:?}")));
    }
    Ok((a[0], a[1]))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, consumed: false }
    }

    /// A tape that never records ops; values are still computed eagerly.
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false, consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Array<T>, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&mut self, value: Arc<Array<T>>, requires_grad: bool) -> Var {
        self.consumed = false;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: requires_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Array<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|&v| self.rg(v));
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Array::new(va.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(name, out, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, c), |x| x * c)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), T::exp)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary("sin", a, Op::Sin(a), T::sin)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary("cos", a, Op::Cos(a), T::cos)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, Op::Tanh(a), T::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, Op::Softplus(a), softplus)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.max_scalar(a, T::zero())
    }

    /// `max(a, c)` elementwise; the gradient is zero where the max clamps,
    /// including at equality.
    pub fn max_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("max_scalar", a, Op::MaxScalar(a, c), |x| if x > c { x } else { c })
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        self.unary("clamp", a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, Op::Square(a), |x| x * x)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Array::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1);
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Sums each leading-dimension row: `[R, ...] -> [R]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let rows = v.rows();
        let data = (0..rows).map(|r| v.row(r).iter().copied().sum()).collect();
        let out = Array::new(vec![rows], data)?;
        self.push("sum_rows", out, Op::SumRows(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check2("matmul", self.shape(a))?;
        let (k2, n) = check2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let out = Array::new(vec![m, n], out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `x @ w + b` for `x: [R, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, inp) = check2("linear", self.shape(x))?;
        let (inp2, outw) = check2("linear", self.shape(w))?;
        if inp != inp2 {
            return Err(shape_err("linear", format!("input width {inp} vs weight {inp2}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [outw] {
                return Err(shape_err("linear", format!("bias {:?} for width {outw}", self.shape(b))));
            }
        }
        let mut out = vec![T::zero(); rows * outw];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in out.chunks_exact_mut(outw) {
                r.copy_from_slice(bv);
            }
        }
        gemm(rows, inp, outw, self.value(x).data(), false, self.value(w).data(), false, &mut out, b.is_some());
        let out = Array::new(vec![rows, outw], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", out, Op::Linear { x, w, b }, &inputs)
    }

    /// Per-group linear map: rows of segment `g` use `w[g]: [in, out]` and `b[g]`.
    pub fn grouped_linear(&mut self, x: Var, w: Var, b: Option<Var>, segments: Arc<Segments>) -> Result<Var> {
        let (rows, inp) = check2("grouped_linear", self.shape(x))?;
        let ws = self.shape(w);
        if ws.len() != 3 || ws[1] != inp || ws[0] != segments.groups() {
            return Err(shape_err(
                "grouped_linear",
                format!("weight {ws:?} for input width {inp} and {} groups", segments.groups()),
            ));
        }
        let (groups, outw) = (ws[0], ws[2]);
        if let Some(b) = b {
            if self.shape(b) != [groups, outw] {
                return Err(shape_err("grouped_linear", format!("bias {:?}", self.shape(b))));
            }
        }
        for &(s, l) in segments.ranges() {
            if s + l > rows {
                return Err(TensorError::Index { op: "grouped_linear", index: s + l, rows });
            }
        }
        let mut out = vec![T::zero(); rows * outw];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        for (g, &(s, l)) in segments.ranges().iter().enumerate() {
            if l == 0 {
                continue;
            }
            let dst = &mut out[s * outw..(s + l) * outw];
            if let Some(bv) = bv {
                let bg = &bv[g * outw..(g + 1) * outw];
                for r in dst.chunks_exact_mut(outw) {
                    r.copy_from_slice(bg);
                }
            }
            gemm(
                l,
                inp,
                outw,
                &xv[s * inp..(s + l) * inp],
                false,
                &wv[g * inp * outw..(g + 1) * inp * outw],
                false,
                dst,
                bv.is_some(),
            );
        }
        let out = Array::new(vec![rows, outw], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("grouped_linear", out, Op::GroupedLinear { x, w, b, segments }, &inputs)
    }

    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let v = self.value(x);
        let (rows, w) = (v.rows(), v.row_len());
        let mut data = Vec::with_capacity(index.len() * w);
        for &i in index.iter() {
            if i >= rows {
                return Err(TensorError::Index { op: "gather_rows", index: i, rows });
            }
            data.extend_from_slice(v.row(i));
        }
        let mut shape = v.shape().to_vec();
        if shape.is_empty() {
            return Err(shape_err("gather_rows", "scalar input"));
        }
        shape[0] = index.len();
        let out = Array::new(shape, data)?;
        self.push("gather_rows", out, Op::GatherRows { x, index }, &[x])
    }

    /// Adds row `r` of `x` into output row `index[r]`; output has `rows` rows.
    pub fn scatter_add_rows(&mut self, x: Var, index: Arc<Vec<usize>>, rows: usize) -> Result<Var> {
        let v = self.value(x);
        if v.rank() == 0 || v.rows() != index.len() {
            return Err(shape_err("scatter_add_rows", format!("{:?} with {} indices", v.shape(), index.len())));
        }
        let w = v.row_len();
        let mut data = vec![T::zero(); rows * w];
        for (r, &i) in index.iter().enumerate() {
            if i >= rows {
                return Err(TensorError::Index { op: "scatter_add_rows", index: i, rows });
            }
            for (d, &s) in data[i * w..(i + 1) * w].iter_mut().zip(v.row(r)) {
                *d += s;
            }
        }
        let mut shape = v.shape().to_vec();
        shape[0] = rows;
        let out = Array::new(shape, data)?;
        self.push("scatter_add_rows", out, Op::ScatterAddRows { x, index }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no inputs"));
        }
        let (rows, _) = check2("concat_cols", self.shape(parts[0]))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = check2("concat_cols", self.shape(p))?;
            if r != rows {
                return Err(shape_err("concat_cols", format!("row counts {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Array::new(vec![rows, total], data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = check2("slice_cols", self.shape(x))?;
        if start + len > cols {
            return Err(shape_err("slice_cols", format!("{start}..{} of {cols}", start + len)));
        }
        let v = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let out = Array::new(vec![rows, len], data)?;
        self.push("slice_cols", out, Op::SliceCols { x, start }, &[x])
    }

    fn row_scalars(&self, op: &'static str, x: Var, s: Var) -> Result<()> {
        let (xv, sv) = (self.value(x), self.value(s));
        if xv.rank() == 0 || sv.len() != xv.rows() || sv.rows() != xv.rows() {
            return Err(shape_err(op, format!("{:?} by {:?}", xv.shape(), sv.shape())));
        }
        Ok(())
    }

    /// Scales row `r` of `x` by `s[r]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        self.row_scalars("mul_rows", x, s)?;
        let (xv, sv) = (self.value(x), self.value(s));
        let w = xv.row_len();
        let mut data = xv.data().to_vec();
        for (r, &k) in sv.data().iter().enumerate() {
            data[r * w..(r + 1) * w].iter_mut().for_each(|v| *v *= k);
        }
        let out = Array::new(xv.shape().to_vec(), data)?;
        self.push("mul_rows", out, Op::MulRows(x, s), &[x, s])
    }

    /// Divides row `r` of `x` by `s[r]`; rows with `s[r] == 0` become zero.
    pub fn div_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        self.row_scalars("div_rows", x, s)?;
        let (xv, sv) = (self.value(x), self.value(s));
        let w = xv.row_len();
        let mut data = xv.data().to_vec();
        for (r, &k) in sv.data().iter().enumerate() {
            let row = &mut data[r * w..(r + 1) * w];
            if k == T::zero() {
                row.iter_mut().for_each(|v| *v = T::zero());
            } else {
                row.iter_mut().for_each(|v| *v = *v / k);
            }
        }
        let out = Array::new(xv.shape().to_vec(), data)?;
        self.push("div_rows", out, Op::DivRows(x, s), &[x, s])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = (*self.nodes[x.0].value).clone().reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Matrix transpose `[m, n] -> [n, m]`.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = check2("transpose", self.shape(x))?;
        let out = Array::new(vec![n, m], transposed(self.value(x).data(), m, n))?;
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    /// Sinusoidal encoding `[R, d] -> [R, d (1 + 2m)]` laid out as
    /// `(x, sin x, cos x, sin 2x, cos 2x, ..., sin 2^(m-1) x, cos 2^(m-1) x)`.
    pub fn fourier(&mut self, x: Var, octaves: usize) -> Result<Var> {
        let (rows, d) = check2("fourier", self.shape(x))?;
        let width = d * (1 + 2 * octaves);
        let mut data = vec![T::zero(); rows * width];
        let xv = self.value(x).data();
        for r in 0..rows {
            encode_row(&xv[r * d..(r + 1) * d], octaves, &mut data[r * width..(r + 1) * width]);
        }
        let out = Array::new(vec![rows, width], data)?;
        self.push("fourier", out, Op::Fourier { x, octaves }, &[x])
    }

    /// Applies a per-row affine map to 3-vectors. `mats` holds one row-major
    /// 3x4 matrix `[A | t]` per row of `x`.
    pub fn affine_rows(&mut self, x: Var, mats: Arc<Vec<T>>) -> Result<Var> {
        let (rows, d) = check2("affine_rows", self.shape(x))?;
        if d != 3 || mats.len() != rows * 12 {
            return Err(shape_err("affine_rows", format!("[{rows},{d}] with {} matrix values", mats.len())));
        }
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); rows * 3];
        for r in 0..rows {
            let m = &mats[r * 12..r * 12 + 12];
            let p = &xv[r * 3..r * 3 + 3];
            for i in 0..3 {
                data[r * 3 + i] = m[i * 4] * p[0] + m[i * 4 + 1] * p[1] + m[i * 4 + 2] * p[2] + m[i * 4 + 3];
            }
        }
        let out = Array::new(vec![rows, 3], data)?;
        self.push("affine_rows", out, Op::AffineRows { x, mats }, &[x])
    }

    /// Squared Euclidean distance between matching rows: `[R, C] x [R, C] -> [R]`.
    pub fn row_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_sq_dist", a, b)?;
        let (rows, c) = check2("row_sq_dist", self.shape(a))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = (0..rows).map(|r| sq_dist(&av[r * c..(r + 1) * c], &bv[r * c..(r + 1) * c])).collect();
        let out = Array::new(vec![rows], data)?;
        self.push("row_sq_dist", out, Op::RowSqDist(a, b), &[a, b])
    }

    /// Truncated Gaussian weight of squared distances, see [`trunc_gauss`].
    pub fn trunc_gauss(&mut self, d2: Var, sigma: T, eps: T) -> Result<Var> {
        let k = T::one() / (T::lit(2.0) * sigma * sigma);
        self.unary("trunc_gauss", d2, Op::TruncGauss { x: d2, inv_two_sigma_sq: k, eps }, |x| trunc_gauss(x, k, eps))
    }

    /// Emission-absorption quadrature along rays.
    ///
    /// `color: [R, S, 3]`, `density: [R, S]`, `deltas`: `R * S` interval
    /// lengths. Returns `[R, 4]` holding composited rgb and accumulated alpha;
    /// the background shows through with weight `1 - alpha`.
    pub fn composite(&mut self, color: Var, density: Var, deltas: Arc<Vec<T>>, background: [T; 3]) -> Result<Var> {
        let cs = self.shape(color).to_vec();
        let ds = self.shape(density).to_vec();
        if cs.len() != 3 || cs[2] != 3 || ds != cs[..2] || deltas.len() != cs[0] * cs[1] {
            return Err(shape_err("composite", format!("color {cs:?} density {ds:?} deltas {}", deltas.len())));
        }
        let (rays, samples) = (cs[0], cs[1]);
        let (cv, dv) = (self.value(color).data(), self.value(density).data());
        let mut data = vec![T::zero(); rays * 4];
        for r in 0..rays {
            let mut trans = T::one();
            let mut acc = [T::zero(); 4];
            for s in 0..samples {
                let i = r * samples + s;
                let survive = (-(dv[i] * deltas[i])).exp();
                let w = trans * (T::one() - survive);
                for c in 0..3 {
                    acc[c] += w * cv[i * 3 + c];
                }
                acc[3] += w;
                trans *= survive;
            }
            for c in 0..3 {
                data[r * 4 + c] = acc[c] + (T::one() - acc[3]) * background[c];
            }
            data[r * 4 + 3] = acc[3];
        }
        let out = Array::new(vec![rays, 4], data)?;
        self.push("composite", out, Op::Composite { color, density, deltas, background }, &[color, density])
    }

    /// Reverse pass from a scalar `loss`. Returns gradients of every leaf
    /// that requires one and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<VarGrads<T>> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array<T>>> = (0..n).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Array<T>>> = (0..n).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Array::full(lv.shape().to_vec(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                leaf_grads[i] = Some(g);
            } else {
                self.backward_node(i, g, &mut grads)?;
            }
        }
        self.nodes.clear();
        self.consumed = true;
        Ok(VarGrads { grads: leaf_grads })
    }

    fn acc(&self, grads: &mut [Option<Array<T>>], v: Var, g: Array<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(x) => x.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn val(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    fn backward_node(&self, i: usize, g: Array<T>, grads: &mut [Option<Array<T>>]) -> Result<()> {
        let out = &self.nodes[i].value;
        let gd = g.data();
        let elementwise = |x: &Array<T>, f: &dyn Fn(T, T, T) -> T| -> Array<T> {
            let data = gd.iter().zip(x.data()).zip(out.data()).map(|((&g, &x), &y)| f(g, x, y)).collect();
            Array::new(x.shape().to_vec(), data).expect("shape preserved")
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*b) {
                    self.acc(grads, *b, g.clone());
                }
                self.acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.rg(*b) {
                    self.acc(grads, *b, g.map(|x| -x));
                }
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.val(*b);
                    self.acc(grads, *a, elementwise(bv, &|g, b, _| g * b));
                }
                if self.rg(*b) {
                    let av = self.val(*a);
                    self.acc(grads, *b, elementwise(av, &|g, a, _| g * a));
                }
            }
            Op::AddScalar(a) => self.acc(grads, *a, g),
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(grads, *a, g.map(|x| x * c));
            }
            Op::Exp(a) => self.acc(grads, *a, elementwise(self.val(*a), &|g, _, y| g * y)),
            Op::Sin(a) => self.acc(grads, *a, elementwise(self.val(*a), &|g, x, _| g * x.cos())),
            Op::Cos(a) => self.acc(grads, *a, elementwise(self.val(*a), &|g, x, _| -g * x.sin())),
            Op::Tanh(a) => self.acc(grads, *a, elementwise(self.val(*a), &|g, _, y| g * (T::one() - y * y))),
            Op::Sigmoid(a) => self.acc(grads, *a, elementwise(self.val(*a), &|g, _, y| g * y * (T::one() - y))),
            Op::Softplus(a) => self.acc(grads, *a, elementwise(self.val(*a), &|g, x, _| g * sigmoid(x))),
            Op::MaxScalar(a, c) => {
                let c = *c;
                self.acc(grads, *a, elementwise(self.val(*a), &|g, x, _| if x > c { g } else { T::zero() }))
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.acc(
                    grads,
                    *a,
                    elementwise(self.val(*a), &|g, x, _| if x > lo && x < hi { g } else { T::zero() }),
                )
            }
            Op::Square(a) => self.acc(grads, *a, elementwise(self.val(*a), &|g, x, _| T::lit(2.0) * g * x)),
            Op::Sum(a) => {
                let s = gd[0];
                self.acc(grads, *a, Array::full(self.val(*a).shape().to_vec(), s));
            }
            Op::SumRows(a) => {
                let av = self.val(*a);
                let w = av.row_len();
                let mut data = vec![T::zero(); av.len()];
                for (r, &gr) in gd.iter().enumerate() {
                    data[r * w..(r + 1) * w].iter_mut().for_each(|v| *v = gr);
                }
                self.acc(grads, *a, Array::new(av.shape().to_vec(), data)?);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, gd, false, bv.data(), true, &mut ga, false);
                    self.acc(grads, *a, Array::new(vec![m, k], ga)?);
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, m, n, av.data(), true, gd, false, &mut gb, false);
                    self.acc(grads, *b, Array::new(vec![k, n], gb)?);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (rows, inp) = (xv.shape()[0], xv.shape()[1]);
                let outw = wv.shape()[1];
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); rows * inp];
                    gemm(rows, outw, inp, gd, false, wv.data(), true, &mut gx, false);
                    self.acc(grads, *x, Array::new(vec![rows, inp], gx)?);
                }
                if self.rg(*w) {
                    let mut gw = vec![T::zero(); inp * outw];
                    gemm(inp, rows, outw, xv.data(), true, gd, false, &mut gw, false);
                    self.acc(grads, *w, Array::new(vec![inp, outw], gw)?);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut gb = vec![T::zero(); outw];
                        for r in gd.chunks_exact(outw) {
                            for (a, &v) in gb.iter_mut().zip(r) {
                                *a += v;
                            }
                        }
                        self.acc(grads, *b, Array::new(vec![outw], gb)?);
                    }
                }
            }
            Op::GroupedLinear { x, w, b, segments } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (rows, inp) = (xv.shape()[0], xv.shape()[1]);
                let (groups, outw) = (wv.shape()[0], wv.shape()[2]);
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); rows * inp];
                    for (gi, &(s, l)) in segments.ranges().iter().enumerate() {
                        if l == 0 {
                            continue;
                        }
                        gemm(
                            l,
                            outw,
                            inp,
                            &gd[s * outw..(s + l) * outw],
                            false,
                            &wv.data()[gi * inp * outw..(gi + 1) * inp * outw],
                            true,
                            &mut gx[s * inp..(s + l) * inp],
                            true,
                        );
                    }
                    self.acc(grads, *x, Array::new(vec![rows, inp], gx)?);
                }
                if self.rg(*w) {
                    let mut gw = vec![T::zero(); groups * inp * outw];
                    for (gi, &(s, l)) in segments.ranges().iter().enumerate() {
                        if l == 0 {
                            continue;
                        }
                        gemm(
                            inp,
                            l,
                            outw,
                            &xv.data()[s * inp..(s + l) * inp],
                            true,
                            &gd[s * outw..(s + l) * outw],
                            false,
                            &mut gw[gi * inp * outw..(gi + 1) * inp * outw],
                            true,
                        );
                    }
                    self.acc(grads, *w, Array::new(vec![groups, inp, outw], gw)?);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut gb = vec![T::zero(); groups * outw];
                        for (gi, &(s, l)) in segments.ranges().iter().enumerate() {
                            let dst = &mut gb[gi * outw..(gi + 1) * outw];
                            for r in gd[s * outw..(s + l) * outw].chunks_exact(outw) {
                                for (a, &v) in dst.iter_mut().zip(r) {
                                    *a += v;
                                }
                            }
                        }
                        self.acc(grads, *b, Array::new(vec![groups, outw], gb)?);
                    }
                }
            }
            Op::GatherRows { x, index } => {
                let xv = self.val(*x);
                let w = xv.row_len();
                let mut gx = vec![T::zero(); xv.len()];
                for (o, &src) in index.iter().enumerate() {
                    for (d, &v) in gx[src * w..(src + 1) * w].iter_mut().zip(&gd[o * w..(o + 1) * w]) {
                        *d += v;
                    }
                }
                self.acc(grads, *x, Array::new(xv.shape().to_vec(), gx)?);
            }
            Op::ScatterAddRows { x, index } => {
                let xv = self.val(*x);
                let w = xv.row_len();
                let mut gx = Vec::with_capacity(xv.len());
                for &dst in index.iter() {
                    gx.extend_from_slice(&gd[dst * w..(dst + 1) * w]);
                }
                self.acc(grads, *x, Array::new(xv.shape().to_vec(), gx)?);
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let rows = out.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let c = self.val(p).shape()[1];
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gp.extend_from_slice(&gd[r * total + offset..r * total + offset + c]);
                        }
                        self.acc(grads, p, Array::new(vec![rows, c], gp)?);
                    }
                    offset += c;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.val(*x);
                let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
                let len = out.shape()[1];
                let mut gx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                self.acc(grads, *x, Array::new(vec![rows, cols], gx)?);
            }
            Op::MulRows(x, s) => {
                let (xv, sv) = (self.val(*x), self.val(*s));
                let w = xv.row_len();
                if self.rg(*x) {
                    let mut gx = gd.to_vec();
                    for (r, &k) in sv.data().iter().enumerate() {
                        gx[r * w..(r + 1) * w].iter_mut().for_each(|v| *v *= k);
                    }
                    self.acc(grads, *x, Array::new(xv.shape().to_vec(), gx)?);
                }
                if self.rg(*s) {
                    let gs = (0..sv.len())
                        .map(|r| gd[r * w..(r + 1) * w].iter().zip(xv.row(r)).map(|(&a, &b)| a * b).sum())
                        .collect();
                    self.acc(grads, *s, Array::new(sv.shape().to_vec(), gs)?);
                }
            }
            Op::DivRows(x, s) => {
                let (xv, sv) = (self.val(*x), self.val(*s));
                let w = xv.row_len();
                if self.rg(*x) {
                    let mut gx = gd.to_vec();
                    for (r, &k) in sv.data().iter().enumerate() {
                        let row = &mut gx[r * w..(r + 1) * w];
                        if k == T::zero() {
                            row.iter_mut().for_each(|v| *v = T::zero());
                        } else {
                            row.iter_mut().for_each(|v| *v = *v / k);
                        }
                    }
                    self.acc(grads, *x, Array::new(xv.shape().to_vec(), gx)?);
                }
                if self.rg(*s) {
                    let gs = (0..sv.len())
                        .map(|r| {
                            let k = sv.data()[r];
                            if k == T::zero() {
                                return T::zero();
                            }
                            let dot: T = gd[r * w..(r + 1) * w].iter().zip(out.row(r)).map(|(&a, &b)| a * b).sum();
                            -dot / k
                        })
                        .collect();
                    self.acc(grads, *s, Array::new(sv.shape().to_vec(), gs)?);
                }
            }
            Op::Transpose(x) => {
                let (n, m) = (g.shape()[0], g.shape()[1]);
                self.acc(grads, *x, Array::new(vec![m, n], transposed(gd, n, m))?);
            }
            Op::Reshape(x) => {
                let shape = self.val(*x).shape().to_vec();
                self.acc(grads, *x, g.reshape(shape)?);
            }
            Op::Fourier { x, octaves } => {
                let xv = self.val(*x);
                let (rows, d) = (xv.shape()[0], xv.shape()[1]);
                let width = d * (1 + 2 * octaves);
                let mut gx = vec![T::zero(); rows * d];
                for r in 0..rows {
                    let go = &gd[r * width..(r + 1) * width];
                    for j in 0..d {
                        let x = xv.data()[r * d + j];
                        let mut acc = go[j];
                        let mut freq = T::one();
                        for k in 0..*octaves {
                            let base = d + 2 * k * d;
                            let fx = freq * x;
                            acc += freq * (go[base + j] * fx.cos() - go[base + d + j] * fx.sin());
                            freq = freq + freq;
                        }
                        gx[r * d + j] = acc;
                    }
                }
                self.acc(grads, *x, Array::new(vec![rows, d], gx)?);
            }
            Op::AffineRows { x, mats } => {
                let rows = out.shape()[0];
                let mut gx = vec![T::zero(); rows * 3];
                for r in 0..rows {
                    let m = &mats[r * 12..r * 12 + 12];
                    let gr = &gd[r * 3..r * 3 + 3];
                    for j in 0..3 {
                        gx[r * 3 + j] = m[j] * gr[0] + m[4 + j] * gr[1] + m[8 + j] * gr[2];
                    }
                }
                self.acc(grads, *x, Array::new(vec![rows, 3], gx)?);
            }
            Op::RowSqDist(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let c = av.shape()[1];
                let mut ga = vec![T::zero(); av.len()];
                for (r, &gr) in gd.iter().enumerate() {
                    for j in 0..c {
                        let k = r * c + j;
                        ga[k] = T::lit(2.0) * gr * (av.data()[k] - bv.data()[k]);
                    }
                }
                if self.rg(*b) {
                    let gb = ga.iter().map(|&x| -x).collect();
                    self.acc(grads, *b, Array::new(bv.shape().to_vec(), gb)?);
                }
                self.acc(grads, *a, Array::new(av.shape().to_vec(), ga)?);
            }
            Op::TruncGauss { x, inv_two_sigma_sq, eps } => {
                let (k, eps) = (*inv_two_sigma_sq, *eps);
                self.acc(
                    grads,
                    *x,
                    elementwise(self.val(*x), &|g, _, y| if y > T::zero() { -g * k * (y + eps) } else { T::zero() }),
                );
            }
            Op::Composite { color, density, deltas, background } => {
                let (cv, dv) = (self.val(*color), self.val(*density));
                let (rays, samples) = (dv.shape()[0], dv.shape()[1]);
                let mut gc = vec![T::zero(); cv.len()];
                let mut gdens = vec![T::zero(); dv.len()];
                let mut weights = vec![T::zero(); samples];
                let mut after = vec![T::zero(); samples];
                for r in 0..rays {
                    let grgb = [gd[r * 4], gd[r * 4 + 1], gd[r * 4 + 2]];
                    // Background enters as sum_k w_k (c_k - bg) + bg; alpha as sum_k w_k.
                    let galpha = gd[r * 4 + 3];
                    let mut trans = T::one();
                    for s in 0..samples {
                        let i = r * samples + s;
                        let survive = (-(dv.data()[i] * deltas[i])).exp();
                        weights[s] = trans * (T::one() - survive);
                        trans *= survive;
                        after[s] = trans;
                    }
                    let mut suffix = T::zero();
                    for s in (0..samples).rev() {
                        let i = r * samples + s;
                        let mut u = galpha;
                        for c in 0..3 {
                            u += grgb[c] * (cv.data()[i * 3 + c] - background[c]);
                            gc[i * 3 + c] = weights[s] * grgb[c];
                        }
                        gdens[i] = deltas[i] * (after[s] * u - suffix);
                        suffix += weights[s] * u;
                    }
                }
                if self.rg(*color) {
                    self.acc(grads, *color, Array::new(cv.shape().to_vec(), gc)?);
                }
                self.acc(grads, *density, Array::new(dv.shape().to_vec(), gdens)?);
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Squared distance with the same evaluation order as [`Tape::row_sq_dist`].
fn transposed<T: Real>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for r in 0..m {
        for c in 0..n {
            out[c * m + r] = x[r * n + c];
        }
    }
    out
}

pub fn row_sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    sq_dist(a, b)
}

pub(crate) fn encode_row<T: Real>(x: &[T], octaves: usize, out: &mut [T]) {
    let d = x.len();
    out[..d].copy_from_slice(x);
    let mut freq = T::one();
    for k in 0..octaves {
        let base = d + 2 * k * d;
        for j in 0..d {
            let fx = freq * x[j];
            out[base + j] = fx.sin();
            out[base + d + j] = fx.cos();
        }
        freq = freq + freq;
    }
}

/// Sinusoidal encoding of one vector, same layout as [`Tape::fourier`].
pub fn fourier_encode<T: Real>(x: &[T], octaves: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len() * (1 + 2 * octaves)];
    encode_row(x, octaves, &mut out);
    out
}
