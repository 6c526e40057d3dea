//! Dense row-major tensors and the forward kernels used by the tape.
//!
//! Values are `f64` in memory. Tensors are cheap to clone (the buffer is
//! shared) and are treated as immutable once built; `data_mut` copies on
//! write if the buffer is shared.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<f64> = self.data.iter().take(8).copied().collect();
        write!(f, "Tensor{:?} {:?}", self.shape, head)?;
        if self.data.len() > 8 {
            write!(f, "..")?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape {
                op: "tensor",
                detail: format!("zero extent in {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                detail: format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(f).collect())
    }

    /// Standard-normal entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.sample(StandardNormal))
    }

    /// Entries uniform in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(-bound..bound))
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.rank());
        let mut flat = 0;
        for (&i, &e) in index.iter().zip(&self.shape) {
            assert!(i < e, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * e + i;
        }
        self.data[flat]
    }

    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[numel / last, last]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(op, self, other)?;
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// `c (+)= op(a) · op(b)` for row-major buffers; `op` optionally transposes.
/// `a` is `[m×k]` after its op, `b` is `[k×n]` after its op.
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
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly the index ranges implied by the
    // dimensions and strides checked above.
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

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, false, &b.data, false, &mut out, false);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `x · wᵀ (+ bias)` over the last axis; `w` is `[out, in]`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if w.rank() != 2 || x.rank() == 0 || x.last_dim() != w.shape[1] {
        return Err(Error::ShapeMismatch {
            op: "linear",
            lhs: x.shape.clone(),
            rhs: w.shape.clone(),
        });
    }
    let (rows, fan_in, fan_out) = (x.rows(), w.shape[1], w.shape[0]);
    let mut out = vec![0.0; rows * fan_out];
    if let Some(b) = bias {
        if b.shape != [fan_out] {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                lhs: w.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        for row in out.chunks_exact_mut(fan_out) {
            row.copy_from_slice(&b.data);
        }
    }
    gemm(
        rows,
        fan_in,
        fan_out,
        &x.data,
        false,
        &w.data,
        true,
        &mut out,
        bias.is_some(),
    );
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = fan_out;
    Ok(Tensor::from_parts(shape, out))
}

/// Elementwise sum; `b` may have a shape equal to a suffix of `a`'s shape,
/// in which case it is broadcast over the leading axes.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape == b.shape {
        return a.zip_map(b, "add", |x, y| x + y);
    }
    if !is_suffix(&b.shape, &a.shape) {
        return Err(Error::ShapeMismatch {
            op: "add",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let inner = b.numel();
    let mut out = a.to_vec();
    for chunk in out.chunks_exact_mut(inner) {
        for (o, &v) in chunk.iter_mut().zip(b.data.iter()) {
            *o += v;
        }
    }
    Ok(Tensor::from_parts(a.shape.clone(), out))
}

pub(crate) fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "hadamard", |x, y| x * y)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn tanh_act(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Standard normal CDF.
pub(crate) fn normal_cdf(v: f64) -> f64 {
    0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

pub(crate) fn normal_pdf(v: f64) -> f64 {
    (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x·Φ(x)`.
pub(crate) fn gelu_scalar(v: f64) -> f64 {
    v * normal_cdf(v)
}

/// Per-row statistics for layer norm: (normalized values, 1/σ per row).
pub(crate) fn layer_norm_parts(x: &Tensor, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let c = x.last_dim();
    let mut xhat = vec![0.0; x.numel()];
    let mut rstd = Vec::with_capacity(x.rows());
    for (row, out) in x.data.chunks_exact(c).zip(xhat.chunks_exact_mut(c)) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let r = 1.0 / (var + eps).sqrt();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    (xhat, rstd)
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    check_norm_params(x, gamma, beta)?;
    let (mut xhat, _) = layer_norm_parts(x, eps);
    apply_affine(&mut xhat, gamma, beta);
    Ok(Tensor::from_parts(x.shape.clone(), xhat))
}

pub(crate) fn check_norm_params(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    let c = x.last_dim();
    for p in [gamma, beta] {
        if p.shape != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
    }
    Ok(())
}

pub(crate) fn apply_affine(xhat: &mut [f64], gamma: &Tensor, beta: &Tensor) {
    let c = gamma.numel();
    for row in xhat.chunks_exact_mut(c) {
        for ((v, g), b) in row.iter_mut().zip(gamma.data.iter()).zip(beta.data.iter()) {
            *v = *v * g + b;
        }
    }
}

pub fn concat_last(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ok = a.rank() == b.rank() && a.rank() > 0 && a.shape[..a.rank() - 1] == b.shape[..b.rank() - 1];
    if !ok {
        return Err(Error::ShapeMismatch {
            op: "concat_last",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (ca, cb) = (a.last_dim(), b.last_dim());
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for (ra, rb) in a.data.chunks_exact(ca).zip(b.data.chunks_exact(cb)) {
        out.extend_from_slice(ra);
        out.extend_from_slice(rb);
    }
    let mut shape = a.shape.clone();
    *shape.last_mut().unwrap() = ca + cb;
    Ok(Tensor::from_parts(shape, out))
}

/// Columns `start..start + len` of the last axis.
pub fn slice_last(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let c = x.last_dim();
    if x.rank() == 0 || len == 0 || start + len > c {
        return Err(Error::InvalidShape {
            op: "slice_last",
            detail: format!("range {start}..{} of last axis in {:?}", start + len, x.shape),
        });
    }
    let mut out = Vec::with_capacity(x.rows() * len);
    for row in x.data.chunks_exact(c) {
        out.extend_from_slice(&row[start..start + len]);
    }
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = len;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn check_axes(op: &'static str, rank: usize, axes: &[usize]) -> Result<()> {
    let mut seen = vec![false; rank];
    let valid = axes.len() == rank && axes.iter().all(|&a| a < rank && !std::mem::replace(&mut seen[a], true));
    if !valid {
        return Err(Error::InvalidShape {
            op,
            detail: format!("{axes:?} is not a permutation of 0..{rank}"),
        });
    }
    Ok(())
}

/// Output axis `i` is input axis `axes[i]`.
pub fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    check_axes("permute", x.rank(), axes)?;
    if axes.iter().enumerate().all(|(i, &a)| i == a) {
        return Ok(x.clone());
    }
    let in_strides = row_major_strides(&x.shape);
    let shape: Vec<usize> = axes.iter().map(|&a| x.shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(x.numel());
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    // the innermost axis is copied in a tight loop
    let (inner_len, inner_stride) = (shape[rank - 1], strides[rank - 1]);
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&x.data[offset..offset + inner_len]);
        } else {
            out.extend((0..inner_len).map(|j| x.data[offset + j * inner_stride]));
        }
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return Ok(Tensor::from_parts(shape, out));
            }
            axis -= 1;
            index[axis] += 1;
            offset += strides[axis];
            if index[axis] < shape[axis] {
                break;
            }
            offset -= strides[axis] * shape[axis];
            index[axis] = 0;
        }
    }
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Drops `axis`, keeping entry `index` along it.
pub fn select(x: &Tensor, axis: usize, index: usize) -> Result<Tensor> {
    if axis >= x.rank() || index >= x.shape[axis] {
        return Err(Error::InvalidShape {
            op: "select",
            detail: format!("index {index} on axis {axis} of {:?}", x.shape),
        });
    }
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let extent = x.shape[axis];
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        let start = (o * extent + index) * inner;
        out.extend_from_slice(&x.data[start..start + inner]);
    }
    let mut shape = x.shape.clone();
    shape.remove(axis);
    Ok(Tensor::from_parts(shape, out))
}

/// Stacks equally shaped tensors along a new `axis`.
pub fn stack(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::InvalidShape {
        op: "stack",
        detail: "no inputs".into(),
    })?;
    if axis > first.rank() {
        return Err(Error::InvalidShape {
            op: "stack",
            detail: format!("axis {axis} for rank {}", first.rank()),
        });
    }
    for p in parts {
        same_shape("stack", first, p)?;
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis..].iter().product();
    let mut out = Vec::with_capacity(outer * inner * parts.len());
    for o in 0..outer {
        for p in parts {
            out.extend_from_slice(&p.data[o * inner..(o + 1) * inner]);
        }
    }
    let mut shape = first.shape.clone();
    shape.insert(axis, parts.len());
    Ok(Tensor::from_parts(shape, out))
}

/// Mean over one axis, which is removed.
pub fn mean_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::InvalidShape {
            op: "mean_axis",
            detail: format!("axis {axis} of {:?}", x.shape),
        });
    }
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let extent = x.shape[axis];
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for e in 0..extent {
            let start = (o * extent + e) * inner;
            for (d, &v) in dst.iter_mut().zip(&x.data[start..start + inner]) {
                *d += v;
            }
        }
        for d in dst.iter_mut() {
            *d /= extent as f64;
        }
    }
    let mut shape = x.shape.clone();
    shape.remove(axis);
    Ok(Tensor::from_parts(shape, out))
}

/// Pairwise summation; exact for equal terms when the count is a power of two.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => {
            let (lo, hi) = values.split_at(n.next_power_of_two() / 2);
            pairwise_sum(lo) + pairwise_sum(hi)
        }
    }
}

/// Mean as `v₀ + Σ(vᵢ − v₀)/n`; exact whenever all values are equal.
pub fn shifted_mean(values: &[f64]) -> f64 {
    let Some(&first) = values.first() else {
        return f64::NAN;
    };
    let dev: Vec<f64> = values.iter().map(|v| v - first).collect();
    first + pairwise_sum(&dev) / values.len() as f64
}

pub fn sum_all(x: &Tensor) -> f64 {
    pairwise_sum(&x.data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
        assert_eq!(Tensor::scalar(2.5).rank(), 0);
    }

    #[test]
    fn matmul_hand_cases() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[1.0, 1.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Tensor::randn(&[3, 4], &mut rng);
        assert_eq!(matmul(&Tensor::eye(3), &m).unwrap(), m);
        assert_eq!(matmul(&m, &Tensor::eye(4)).unwrap(), m);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[5, 7], &mut rng);
        let b = Tensor::randn(&[7, 3], &mut rng);
        let got = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..7 {
                    s += a.at(&[i, k]) * b.at(&[k, j]);
                }
                assert!((got.at(&[i, j]) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn linear_matches_matmul_with_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 3, 4], &mut rng);
        let w = Tensor::randn(&[5, 4], &mut rng);
        let b = Tensor::randn(&[5], &mut rng);
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.shape(), &[2, 3, 5]);
        let wt = permute(&w, &[1, 0]).unwrap();
        let flat = matmul(&x.reshape(&[6, 4]).unwrap(), &wt).unwrap();
        let expect = add(&flat, &b).unwrap();
        assert!(y.reshape(&[6, 5]).unwrap().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn elementwise_basics() {
        assert_eq!(sigmoid(&Tensor::scalar(0.0)).item(), 0.5);
        assert_eq!(tanh_act(&Tensor::scalar(0.0)).item(), 0.0);
        let h = hadamard(&t(&[2], &[2.0, 3.0]), &t(&[2], &[4.0, 5.0])).unwrap();
        assert_eq!(h.data(), &[8.0, 15.0]);
        assert!(hadamard(&Tensor::zeros(&[2]), &Tensor::zeros(&[3])).is_err());
        assert!(sigmoid(&Tensor::scalar(-800.0)).item() >= 0.0);
        assert!(sigmoid(&Tensor::scalar(800.0)).item() <= 1.0);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(&Tensor::scalar(0.0)).item(), 0.0);
        assert!((gelu(&Tensor::scalar(10.0)).item() - 10.0).abs() < 1e-6);
        // Φ(1) by composite Simpson on the density over [-12, 1]
        let n = 200_000;
        let (a, b) = (-12.0f64, 1.0f64);
        let h = (b - a) / n as f64;
        let mut s = normal_pdf(a) + normal_pdf(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * normal_pdf(a + i as f64 * h);
        }
        let phi1 = s * h / 3.0;
        assert!((gelu(&Tensor::scalar(1.0)).item() - phi1).abs() < 1e-7);
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::ones(&[4]);
        let zeros = Tensor::zeros(&[4]);
        let y = layer_norm(&Tensor::full(&[3, 4], 2.5), &ones, &zeros, 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let y = layer_norm(&t(&[2], &[1.0, 3.0]), &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);

        assert!(layer_norm(&Tensor::zeros(&[2, 3]), &ones, &zeros, 1e-6).is_err());
    }

    #[test]
    fn layer_norm_row_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = 16;
        let x = Tensor::randn(&[10, c], &mut rng);
        let y = layer_norm(&x, &Tensor::ones(&[c]), &Tensor::zeros(&[c]), 1e-6).unwrap();
        for row in y.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn layout_ops_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 3, 4, 5], &mut rng);
        let axes = [2, 0, 3, 1];
        let p = permute(&x, &axes).unwrap();
        assert_eq!(p.shape(), &[4, 2, 5, 3]);
        assert_eq!(p.at(&[1, 0, 4, 2]), x.at(&[0, 2, 1, 4]));
        assert_eq!(permute(&p, &inverse_axes(&axes)).unwrap(), x);
        assert!(permute(&x, &[0, 0, 1, 2]).is_err());

        let r = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(r.reshape(&[6]).unwrap().reshape(&[2, 3]).unwrap(), r);
        assert!(r.reshape(&[4]).is_err());

        let a = Tensor::randn(&[3, 2, 8], &mut rng);
        let b = Tensor::randn(&[3, 2, 8], &mut rng);
        let c = concat_last(&a, &b).unwrap();
        assert_eq!(c.shape(), &[3, 2, 16]);
        assert_eq!(slice_last(&c, 0, 8).unwrap(), a);
        assert_eq!(slice_last(&c, 8, 8).unwrap(), b);
        assert!(concat_last(&a, &Tensor::zeros(&[3, 3, 8])).is_err());
    }

    #[test]
    fn select_stack_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(&[2, 3, 4], &mut rng);
        let parts: Vec<Tensor> = (0..3).map(|i| select(&x, 1, i).unwrap()).collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        assert_eq!(stack(&refs, 1).unwrap(), x);
        let m = mean_axis(&x, 1).unwrap();
        assert_eq!(m.shape(), &[2, 4]);
        let expect = (x.at(&[1, 0, 2]) + x.at(&[1, 1, 2]) + x.at(&[1, 2, 2])) / 3.0;
        assert!((m.at(&[1, 2]) - expect).abs() < 1e-15);
    }

    #[test]
    fn broadcast_add() {
        let a = Tensor::zeros(&[2, 2, 3]);
        let b = t(&[3], &[1.0, 2.0, 3.0]);
        let y = add(&a, &b).unwrap();
        assert_eq!(&y.data()[3..6], &[1.0, 2.0, 3.0]);
        assert!(add(&a, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn shifted_mean_equal_terms() {
        let x = 5.0f64.ln();
        for n in [1usize, 3, 5, 7, 200] {
            assert_eq!(shifted_mean(&vec![x; n]), x);
        }
        assert!((shifted_mean(&[1.0, 2.0, 4.0]) - 7.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn pairwise_sum_equal_terms() {
        let x = 0.1f64.ln();
        for n in [1usize, 2, 4, 8, 16, 64] {
            assert_eq!(pairwise_sum(&vec![x; n]) / n as f64, x);
        }
    }
}
