//! Dense row-major tensors.
//!
//! A [`Tensor`] is an immutable value: a shape plus a shared flat buffer.
//! Cloning is cheap (the buffer is reference counted), which lets the
//! autodiff graph hold parameter values without copying them.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type. Implemented for `f32` (training) and `f64`
/// (gradient checking).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Raw strided GEMM: `c = beta * c + a * b`.
    ///
    /// # Safety
    /// Strides and dimensions must describe memory inside the given pointers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Strided matrix view used by [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, F> {
    pub data: &'a [F],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, F> MatRef<'a, F> {
    /// Row-major `rows × cols` matrix stored contiguously.
    pub fn dense(data: &'a [F], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            self.offset
        } else {
            self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
        }
    }
}

/// `out[rows × cols] (+)= a · b` where `out` is row-major with row stride `out_rs`.
pub(crate) fn gemm<F: Real>(
    a: MatRef<'_, F>,
    b: MatRef<'_, F>,
    out: &mut [F],
    out_offset: usize,
    out_rs: usize,
    accumulate: bool,
) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                let start = out_offset + i * out_rs;
                out[start..start + n].fill(F::zero());
            }
        }
        return;
    }
    assert!(a.last_index() < a.data.len());
    assert!(b.last_index() < b.data.len());
    assert!(out_offset + (m - 1) * out_rs + n <= out.len());
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: bounds of all three operands were checked above.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            out.as_mut_ptr().add(out_offset),
            out_rs as isize,
            1,
        );
    }
}

/// Dense tensor with a row-major flat buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
}

impl<F: Debug> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() {
            return Err(Error::param("tensor shape must have at least one axis"));
        }
        if numel != data.len() {
            return Err(Error::param(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Internal constructor for buffers whose length is known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: F) -> Self {
        Self::from_parts(vec![1, 1], vec![value])
    }

    /// Builds a 2-D tensor from a function of (row, col).
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_parts(vec![rows, cols], data)
    }

    /// Builds a 2-D tensor from nested rows. All rows must have equal length.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::param("ragged rows"));
        }
        Ok(Self::from_parts(
            vec![rows.len(), cols],
            rows.iter().flatten().copied().collect(),
        ))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Mutable access to the buffer; copies it if shared.
    pub fn data_mut(&mut self) -> &mut [F] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<F> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::param(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Converts element type, e.g. `f64 -> f32`.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .map(|v| G::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<F>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
            .fold(0.0, f64::max)
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        if self.rank() != 2 || other.rank() != 2 || self.cols() != other.rows() {
            return Err(Error::param(format!(
                "matmul shape mismatch {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (m, n) = (self.rows(), other.cols());
        let mut out = vec![F::zero(); m * n];
        gemm(
            MatRef::dense(self.data(), m, self.cols()),
            MatRef::dense(other.data(), other.rows(), n),
            &mut out,
            0,
            n,
            false,
        );
        Ok(Self::from_parts(vec![m, n], out))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<F>> {
        if axis >= self.rank() {
            return Err(Error::param(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = self.data.as_ref().clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| out[idx(j)])
                    .fold(F::neg_infinity(), F::max);
                let mut total = F::zero();
                for j in 0..len {
                    let e = (out[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[idx(j)] = out[idx(j)] / total;
                }
            }
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    /// Indices and values of the `k` largest entries of a 1-D tensor (or a
    /// tensor with a single non-unit axis), descending; ties go to the lowest
    /// index.
    pub fn top_k(&self, k: usize) -> Result<(Vec<usize>, Vec<F>)> {
        if self.shape.iter().filter(|&&d| d != 1).count() > 1 {
            return Err(Error::param(format!(
                "top_k expects a vector, got shape {:?}",
                self.shape
            )));
        }
        top_k(self.data(), k)
    }
}

/// Top-k selection over a slice: descending by value, ties broken by lowest
/// index.
pub fn top_k<F: Real>(values: &[F], k: usize) -> Result<(Vec<usize>, Vec<F>)> {
    if k == 0 || k > values.len() {
        return Err(Error::param(format!(
            "top_k needs 1 <= k <= {}, got k = {k}",
            values.len()
        )));
    }
    let mut picked: Vec<usize> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, &v) in values.iter().enumerate() {
            if picked.contains(&i) {
                continue;
            }
            // Strict comparison keeps the earliest index on ties.
            match best {
                Some(b) if !(v > values[b]) => {}
                _ => best = Some(i),
            }
        }
        picked.push(best.expect("k <= len"));
    }
    let vals = picked.iter().map(|&i| values[i]).collect();
    Ok((picked, vals))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn shape_must_match_buffer() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::new(vec![0, 3], vec![]).is_ok());
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let t = Tensor::new(vec![3], vec![0.0f64; 3]).unwrap();
        let s = t.softmax(0).unwrap();
        assert!(close(s.data(), &[1.0 / 3.0; 3], 1e-12));
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let t = Tensor::new(vec![2], vec![1000.0f64, 0.0]).unwrap();
        let s = t.softmax(0).unwrap();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_matches_exponentiate_normalize() {
        let logits = [4f64.ln(), 2f64.ln(), 0.0, 0.0];
        let t = Tensor::new(vec![4], logits.to_vec()).unwrap();
        let s = t.softmax(0).unwrap();
        assert!(close(s.data(), &[0.5, 0.25, 0.125, 0.125], 1e-12));
    }

    #[test]
    fn softmax_along_inner_axis() {
        let t = Tensor::new(vec![2, 2], vec![0.0f64, 0.0, 1.0, 1.0]).unwrap();
        let by_col = t.softmax(0).unwrap();
        let e = 1f64.exp();
        let lo = 1.0 / (1.0 + e);
        assert!(close(by_col.data(), &[lo, lo, 1.0 - lo, 1.0 - lo], 1e-12));
        assert!(matches!(t.softmax(2), Err(Error::Parameter(_))));
    }

    #[test]
    fn top_k_examples() {
        let (i, v) = top_k(&[3.0f64, 1.0, 2.0], 2).unwrap();
        assert_eq!(i, vec![0, 2]);
        assert_eq!(v, vec![3.0, 2.0]);

        let (i, _) = top_k(&[0.1f64, 0.4, 0.25, 0.25], 2).unwrap();
        assert_eq!(i, vec![1, 2]);

        let (i, v) = top_k(&[5.0f64], 1).unwrap();
        assert_eq!((i, v), (vec![0], vec![5.0]));
    }

    #[test]
    fn top_k_rejects_bad_k() {
        assert!(top_k(&[1.0f64, 2.0], 0).is_err());
        assert!(top_k(&[1.0f64, 2.0], 3).is_err());
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_fn(3, 3, |i, j| if i == j { 1.0f64 } else { 0.0 });
        let a = Tensor::from_fn(3, 2, |i, j| (i * 2 + j) as f64 - 1.5);
        assert_eq!(eye.matmul(&a).unwrap(), a);
        assert!(a.matmul(&a).is_err());
    }
}
