//! Dense row-major tensors and the primitive differentiable operations the
//! network is composed from.
//!
//! Every reduction walks its summation axis left to right in a fixed order,
//! so results are bit-reproducible for identical inputs. Operations that can
//! produce new values check the result for NaN/Inf and report them as
//! [`Error::NonFinite`] instead of propagating silently.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default finite-difference step for [`grad_check`].
pub const GRAD_CHECK_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor shape must be non-empty with positive extents, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; len]).expect("valid shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn vector(data: Vec<T>) -> Self {
        let len = data.len();
        Tensor::new(vec![len], data).expect("non-empty vector")
    }

    /// Rank-2 tensor from equal-length rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::shape("from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Leading extent of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing extent of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank(), "index rank");
        let mut flat = 0;
        for (&i, &e) in index.iter().zip(&self.shape) {
            assert!(i < e, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * e + i;
        }
        self.data[flat]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Tensor::new(shape.to_vec(), self.data)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "transpose needs rank 2, got {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.to_f64_lossy()).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, factor: T) {
        for v in &mut self.data {
            *v = *v * factor;
        }
    }

    pub fn fill(&mut self, value: T) {
        for v in &mut self.data {
            *v = value;
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        elementwise(ElementwiseOp::Add, &[self, other])
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        elementwise(ElementwiseOp::Sub, &[self, other])
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        elementwise(ElementwiseOp::Mul, &[self, other])
    }

    pub fn scale(&self, factor: T) -> Result<Self> {
        elementwise(ElementwiseOp::Scale(factor), &[self])
    }

    pub fn sigmoid(&self) -> Result<Self> {
        elementwise(ElementwiseOp::Sigmoid, &[self])
    }

    pub fn relu(&self) -> Result<Self> {
        elementwise(ElementwiseOp::Relu, &[self])
    }
}

fn expect_rank2<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::InvalidArgument(format!(
            "{op} needs rank-2 operands, got {:?}",
            t.shape
        )));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// `out[i, j] = Σ_k a[i·si + k·sk] · b[k·n + j]`, with `b` row-major `[kk×n]`.
///
/// Output tiles of `MR×NR` are held in registers across a block of `KC`
/// terms and written back between blocks. Every element is still accumulated
/// from zero in ascending `k` order, so results are bit-identical to the
/// textbook triple loop.
#[inline(always)]
fn gemm_kernel<T: Scalar>(a: &[T], si: usize, sk: usize, b: &[T], m: usize, kk: usize, n: usize) -> Vec<T> {
    const MR: usize = 4;
    const NR: usize = 8;
    const KC: usize = 256;
    let mut out = vec![T::zero(); m * n];
    let (m_full, n_full) = (m - m % MR, n - n % NR);
    let mut pack = vec![T::zero(); KC.min(kk) * m_full];
    for k0 in (0..kk).step_by(KC) {
        let kc = KC.min(kk - k0);
        let b_block = &b[k0 * n..(k0 + kc) * n];
        // Panel `i0 / MR` holds `a[i0..i0 + MR, k0..k0 + kc]` k-major; the
        // copy walks whichever of `a`'s axes is contiguous.
        let slot = |i: usize, k: usize| (i / MR) * kc * MR + k * MR + i % MR;
        if si == 1 {
            for k in 0..kc {
                for i in 0..m_full {
                    pack[slot(i, k)] = a[i + (k0 + k) * sk];
                }
            }
        } else {
            for i in 0..m_full {
                for k in 0..kc {
                    pack[slot(i, k)] = a[i * si + (k0 + k) * sk];
                }
            }
        }
        for (i0, panel) in (0..m_full).step_by(MR).zip(pack.chunks_exact(kc * MR)) {
            for j0 in (0..n_full).step_by(NR) {
                let mut acc = [[T::zero(); NR]; MR];
                for (r, acc_row) in acc.iter_mut().enumerate() {
                    acc_row.copy_from_slice(&out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
                }
                for (p, b_row) in panel.chunks_exact(MR).zip(b_block[j0..].chunks(n)) {
                    let p: &[T; MR] = p.try_into().unwrap();
                    let b_tile: &[T; NR] = b_row[..NR].try_into().unwrap();
                    for r in 0..MR {
                        for c in 0..NR {
                            acc[r][c] = acc[r][c] + p[r] * b_tile[c];
                        }
                    }
                }
                for (r, acc_row) in acc.iter().enumerate() {
                    out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(acc_row);
                }
            }
        }
    }
    let edge = |out: &mut [T], rows: std::ops::Range<usize>, cols: std::ops::Range<usize>| {
        for i in rows {
            for j in cols.clone() {
                let mut acc = T::zero();
                for k in 0..kk {
                    acc = acc + a[i * si + k * sk] * b[k * n + j];
                }
                out[i * n + j] = acc;
            }
        }
    };
    edge(&mut out, 0..m_full, n_full..n);
    edge(&mut out, m_full..m, 0..n);
    out
}

fn gemm<T: Scalar>(a: &[T], si: usize, sk: usize, b: &[T], m: usize, kk: usize, n: usize) -> Vec<T> {
    #[cfg(target_arch = "x86_64")]
    {
        #[target_feature(enable = "avx2")]
        fn wide<T: Scalar>(a: &[T], si: usize, sk: usize, b: &[T], m: usize, kk: usize, n: usize) -> Vec<T> {
            gemm_kernel(a, si, sk, b, m, kk, n)
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the required CPU feature was detected above.
            return unsafe { wide(a, si, sk, b, m, kk, n) };
        }
    }
    gemm_kernel(a, si, sk, b, m, kk, n)
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = expect_rank2("matmul", a)?;
    let (k2, n) = expect_rank2("matmul", b)?;
    if k != k2 {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let out = Tensor::new(vec![m, n], gemm(&a.data, k, 1, &b.data, m, k, n))?;
    out.ensure_finite("matmul")?;
    Ok(out)
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = expect_rank2("matmul_nt", a)?;
    let (_, k2) = expect_rank2("matmul_nt", b)?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", &a.shape, &b.shape));
    }
    matmul(a, &b.transpose()?)
}

/// `a[m×k] · w[n×k]ᵀ + bias`, with `bias: [n]` added to every row.
pub fn affine_nt<T: Scalar>(a: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (m, k) = expect_rank2("affine_nt", a)?;
    let (n, k2) = expect_rank2("affine_nt", w)?;
    if k != k2 || bias.is_some_and(|b| b.len() != n) {
        return Err(Error::shape("affine_nt", &a.shape, &w.shape));
    }
    let wt = w.transpose()?;
    let mut out = gemm(&a.data, k, 1, &wt.data, m, k, n);
    if let Some(bias) = bias {
        for row in out.chunks_exact_mut(n) {
            for (o, &b) in row.iter_mut().zip(&bias.data) {
                *o = *o + b;
            }
        }
    }
    let out = Tensor::new(vec![m, n], out)?;
    out.ensure_finite("affine_nt")?;
    Ok(out)
}

/// `a[r×m]ᵀ · b[r×n]`, summing over the shared leading axis in row order.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, m) = expect_rank2("matmul_tn", a)?;
    let (r2, n) = expect_rank2("matmul_tn", b)?;
    if r != r2 {
        return Err(Error::shape("matmul_tn", &a.shape, &b.shape));
    }
    let out = Tensor::new(vec![m, n], gemm(&a.data, 1, m, &b.data, m, r, n))?;
    out.ensure_finite("matmul_tn")?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp<T> {
    Add,
    Sub,
    Mul,
    Scale(T),
    Sigmoid,
    Relu,
}

impl<T> ElementwiseOp<T> {
    fn arity(&self) -> usize {
        match self {
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul => 2,
            _ => 1,
        }
    }
}

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    // Split by sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn relu_scalar<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

pub fn elementwise<T: Scalar>(op: ElementwiseOp<T>, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if inputs.len() != op.arity() {
        return Err(Error::InvalidArgument(format!(
            "{op:?} takes {} operand(s), got {}",
            op.arity(),
            inputs.len()
        )));
    }
    let x = inputs[0];
    let out = if let [_, y] = inputs {
        if x.shape != y.shape {
            return Err(Error::shape("elementwise", &x.shape, &y.shape));
        }
        let f: fn(T, T) -> T = match op {
            ElementwiseOp::Add => |a, b| a + b,
            ElementwiseOp::Sub => |a, b| a - b,
            _ => |a, b| a * b,
        };
        Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&y.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    } else {
        match op {
            ElementwiseOp::Scale(c) => x.map(|v| v * c),
            ElementwiseOp::Sigmoid => x.map(sigmoid_scalar),
            _ => x.map(relu_scalar),
        }
    };
    out.ensure_finite("elementwise")?;
    Ok(out)
}

/// Gradient of sigmoid given its forward output: `up · s(1−s)`.
pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let mut grad = upstream.clone();
    sigmoid_backward_in_place(output, &mut grad)?;
    Ok(grad)
}

pub fn sigmoid_backward_in_place<T: Scalar>(output: &Tensor<T>, grad: &mut Tensor<T>) -> Result<()> {
    if output.shape != grad.shape {
        return Err(Error::shape("sigmoid_backward", &output.shape, &grad.shape));
    }
    for (g, &s) in grad.data.iter_mut().zip(&output.data) {
        *g = *g * s * (T::one() - s);
    }
    Ok(())
}

/// Gradient of ReLU given its forward input; zero at and below the kink.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let mut grad = upstream.clone();
    relu_backward_in_place(input, &mut grad)?;
    Ok(grad)
}

pub fn relu_backward_in_place<T: Scalar>(input: &Tensor<T>, grad: &mut Tensor<T>) -> Result<()> {
    if input.shape != grad.shape {
        return Err(Error::shape("relu_backward", &input.shape, &grad.shape));
    }
    for (g, &x) in grad.data.iter_mut().zip(&input.data) {
        if !(x > T::zero()) {
            *g = T::zero();
        }
    }
    Ok(())
}

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduce_sum_impl<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<(Tensor<T>, usize)> {
    if axis >= x.rank() {
        return Err(Error::InvalidArgument(format!(
            "axis {axis} out of range for shape {:?}",
            x.shape
        )));
    }
    let (outer, extent, inner) = axis_split(&x.shape, axis);
    if extent == 0 {
        return Err(Error::EmptyAxis {
            axis,
            shape: x.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let acc = &mut out[o * inner..(o + 1) * inner];
        for e in 0..extent {
            let base = (o * extent + e) * inner;
            for (a, &v) in acc.iter_mut().zip(&x.data[base..base + inner]) {
                *a = *a + v;
            }
        }
    }
    let mut shape: Vec<usize> = x.shape.clone();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Ok((Tensor::new(shape, out)?, extent))
}

/// Sum along `axis`, dropping it. Reducing a rank-1 tensor yields shape `[1]`.
pub fn reduce_sum<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    reduce_sum_impl(x, axis).map(|(t, _)| t)
}

/// Arithmetic mean along `axis`, dropping it.
pub fn reduce_mean<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (mut sum, extent) = reduce_sum_impl(x, axis)?;
    let inv = T::one() / T::from_usize_lossy(extent);
    sum.scale_in_place(inv);
    Ok(sum)
}

/// Spreads `upstream` (shape of the reduced tensor) uniformly back over `axis`.
pub fn reduce_mean_backward<T: Scalar>(
    upstream: &Tensor<T>,
    input_shape: &[usize],
    axis: usize,
) -> Result<Tensor<T>> {
    let (outer, extent, inner) = axis_split(input_shape, axis);
    if upstream.len() != outer * inner {
        return Err(Error::shape("reduce_mean_backward", &upstream.shape, input_shape));
    }
    let inv = T::one() / T::from_usize_lossy(extent);
    let mut out = vec![T::zero(); outer * extent * inner];
    for o in 0..outer {
        let up = &upstream.data[o * inner..(o + 1) * inner];
        for e in 0..extent {
            let base = (o * extent + e) * inner;
            for (d, &g) in out[base..base + inner].iter_mut().zip(up) {
                *d = g * inv;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), out)
}

/// Compares an analytic gradient against central finite differences.
///
/// `f` returns the scalar value and its analytic gradient at the given point.
/// The result is the largest per-coordinate
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<T, F>(mut f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<(T, Tensor<T>)>,
{
    let (value, analytic) = f(x)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("grad_check base value".into()));
    }
    if analytic.shape() != x.shape() {
        return Err(Error::shape("grad_check", x.shape(), analytic.shape()));
    }
    analytic.ensure_finite("grad_check analytic gradient")?;

    let two = T::lit(2.0);
    let mut probe = x.clone();
    let mut worst = T::zero();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let (plus, _) = f(&probe)?;
        probe.data[i] = orig - eps;
        let (minus, _) = f(&probe)?;
        probe.data[i] = orig;
        let numeric = (plus - minus) / (two * eps);
        if !numeric.is_finite() {
            return Err(Error::NonFinite(format!("grad_check coordinate {i}")));
        }
        let a = analytic.data[i];
        let denom = T::one().max(a.abs()).max(numeric.abs());
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
