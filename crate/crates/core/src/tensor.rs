//! Dense row-major tensors over `f32` or `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type. `f32` is the training default, `f64` is
/// used for gradient verification.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// `c = alpha * a·b + beta * c` with explicit strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n`
    /// regions; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `c (+)= op(a) · op(b)` for row-major buffers, where `op` optionally
/// transposes. `op(a)` is `m×k`, `op(b)` is `k×n`, `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths checked above; `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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
        )
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        Self::new(shape, data).expect("data length matches shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Rows and columns when viewed as a matrix over the last axis.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = self.shape.last().copied().unwrap_or(1);
        let rows = if cols == 0 { 0 } else { self.data.len() / cols };
        (rows, cols)
    }

    pub fn row(&self, r: usize) -> &[T] {
        let (_, c) = self.rows_cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    /// Matrix product batched over equal leading dimensions. A rank-2 `b`
    /// is broadcast across the batch of `a`.
    pub fn matmul(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let mismatch = || Error::Shape(format!("matmul {:?} x {:?}", self.shape, b.shape));
        if self.shape.len() < 2 || b.shape.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (self.shape[self.shape.len() - 2], self.shape[self.shape.len() - 1]);
        let (k2, n) = (b.shape[b.shape.len() - 2], b.shape[b.shape.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let lead = &self.shape[..self.shape.len() - 2];
        let b_lead = &b.shape[..b.shape.len() - 2];
        if !b_lead.is_empty() && b_lead != lead {
            return Err(mismatch());
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let bi = if b_lead.is_empty() { 0 } else { i };
            gemm(
                m,
                k,
                n,
                &self.data[i * m * k..(i + 1) * m * k],
                false,
                &b.data[bi * k * n..(bi + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        Ok(Tensor { shape, data: out })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} on {:?}", self.shape)));
        }
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| out[at(j)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (out[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }
}

/// Softmax of one row in place, restricted to `allowed` columns; the rest
/// receive exactly zero.
pub(crate) fn softmax_row<T: Scalar>(row: &mut [T], allowed: Option<&[bool]>) {
    let ok = |j: usize| allowed.is_none_or(|a| a[j]);
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| ok(*j))
        .map(|(_, &v)| v)
        .fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut sum = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if ok(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = T::zero();
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn matmul_identity_zero_and_naive() {
        let a = Tensor::from_vec(&[5, 4], pseudo(20, 1));
        assert_eq!(a.matmul(&Tensor::eye(4)).unwrap(), a);
        assert!(a.matmul(&Tensor::zeros(&[4, 3])).unwrap().data().iter().all(|&v| v == 0.0));
        let b = Tensor::from_vec(&[4, 3], pseudo(12, 2));
        let c = a.matmul(&b).unwrap();
        for (x, y) in c.data().iter().zip(naive(&a, &b)) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_batches_and_reports_shapes() {
        let a = Tensor::from_vec(&[2, 3, 4], pseudo(24, 3));
        let b = Tensor::from_vec(&[2, 4, 2], pseudo(16, 4));
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        let a1 = Tensor::from_vec(&[3, 4], a.data()[12..].to_vec());
        let b1 = Tensor::from_vec(&[4, 2], b.data()[8..].to_vec());
        assert_eq!(&c.data()[6..], a1.matmul(&b1).unwrap().data());

        let err = Tensor::<f64>::zeros(&[2, 3]).matmul(&Tensor::zeros(&[4, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_values() {
        let t = Tensor::<f64>::zeros(&[4]).softmax(0).unwrap();
        assert!(t.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let t = Tensor::from_vec(&[3], vec![2f64.ln(), 0.0, 0.0]).softmax(0).unwrap();
        assert!((t.data()[0] - 0.5).abs() < 1e-12 && (t.data()[1] - 0.25).abs() < 1e-12);

        let x = pseudo(6, 5).iter().map(|v| v * 5.0).collect::<Vec<_>>();
        let t = Tensor::from_vec(&[6], x.iter().map(|&v| v as f32).collect()).softmax(0).unwrap();
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        for (p, v) in t.data().iter().zip(&x) {
            assert!((*p as f64 - v.exp() / z).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_along_inner_axis() {
        let t = Tensor::from_vec(&[2, 3], pseudo(6, 8)).softmax(0).unwrap();
        for col in 0..3 {
            let s = t.data()[col] + t.data()[3 + col];
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_row_softmax() {
        let mut row = vec![1.0f64, 5.0, 2.0];
        softmax_row(&mut row, Some(&[true, false, true]));
        assert_eq!(row[1], 0.0);
        assert!((row[0] + row[2] - 1.0).abs() < 1e-12);
    }
}
