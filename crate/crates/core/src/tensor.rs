//! Dense NHWC tensors and the scalar types they can hold.
//!
//! Tensors are plain values: a shape plus a contiguous row-major buffer with
//! the last dimension innermost. Image tensors use `(batch, height, width,
//! channels)` ordering so per-channel projections act on contiguous memory.
//! The element type is a type parameter, so mixing single and double
//! precision in one expression is rejected at compile time.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use crate::error::{dim_err, Result};

/// Runtime tag for the element type, used by serialized formats.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type usable in tensors and on the tape.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a · b + beta * c` for strided row/column layouts.
    ///
    /// `a` is `m x k`, `b` is `k x n` and `c` is `m x n`; strides are in
    /// elements. Callers guarantee the slices cover every addressed element.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).unwrap_or(f64::NAN)
    }
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

impl Float for f32 {
    const DTYPE: DType = DType::F32;

    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        assert!(a.len() >= span(m, k, rsa, csa));
        assert!(b.len() >= span(k, n, rsb, csb));
        assert!(c.len() >= span(m, n, rsc, csc));
        // SAFETY: strides are non-negative and the asserts above bound every
        // address the kernel touches inside the three slices.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Float for f64 {
    const DTYPE: DType = DType::F64;

    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        assert!(a.len() >= span(m, k, rsa, csa));
        assert!(b.len() >= span(k, n, rsb, csb));
        assert!(c.len() >= span(m, n, rsc, csc));
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Row-major matrix view used by [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    /// Treat the stored `rows x cols` matrix as its transpose.
    pub trans: bool,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            trans: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            trans: !self.trans,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize, isize, isize) {
        let (r, c) = (self.rows as isize, self.cols as isize);
        if self.trans {
            (self.cols, self.rows, 1, c)
        } else {
            let _ = r;
            (self.rows, self.cols, c, 1)
        }
    }
}

/// `out (m x n, row-major) = a · b (+ out if accumulate)`.
pub(crate) fn gemm<T: Float>(a: Mat<'_, T>, b: Mat<'_, T>, out: &mut [T], accumulate: bool) {
    let (m, k, rsa, csa) = a.logical();
    let (k2, n, rsb, csb) = b.logical();
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert_eq!(out.len(), m * n, "gemm output size mismatch");
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    T::gemm_raw(
        m,
        k,
        n,
        T::one(),
        a.data,
        rsa,
        csa,
        b.data,
        rsb,
        csb,
        beta,
        out,
        n as isize,
        1,
    );
}

/// Dense tensor: a shape and a contiguous row-major buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err!(
                "shape {:?} needs {} elements, buffer has {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        check_shape(shape).expect("valid shape");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        check_shape(shape).expect("valid shape");
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the innermost (channel) dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(dim_err!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(N, H, W, C)` of a rank-4 tensor.
    pub fn nhwc(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, h, w, c] => Ok((n, h, w, c)),
            _ => Err(dim_err!("expected NHWC tensor, got shape {:?}", self.shape)),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(dim_err!(
                "shape mismatch {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.data.len()).expect("len fits")
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Add `other` into `self` elementwise.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err!(
                "shape mismatch {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Convert to another element type.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Select batch entries (first axis) in the given order.
    pub fn select_batch(&self, indices: &[usize]) -> Result<Self> {
        let n = self.shape[0];
        let stride = self.data.len() / n;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= n {
                return Err(dim_err!("batch index {} out of range {}", i, n));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(&shape, data)
    }

    /// Concatenate along the first axis.
    pub fn stack_batch(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err!("cannot stack zero tensors"))?;
        let mut shape = first.shape.clone();
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(dim_err!(
                    "stack shape mismatch {:?} vs {:?}",
                    p.shape,
                    first.shape
                ));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        shape[0] = n;
        Tensor::new(&shape, data)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(dim_err!("tensor rank must be at least 1"));
    }
    if shape.contains(&0) {
        return Err(dim_err!("all dimensions must be >= 1, got {:?}", shape));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(&[], vec![]).is_err());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn gemm_matches_naive_including_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let mut out = vec![0.0; 8];
        gemm(Mat::new(&a, 2, 3), Mat::new(&b, 3, 4), &mut out, false);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert!((out[i * 4 + j] - want).abs() < 1e-12);
            }
        }
        // a^T (3x2) stored as 2x3; result a^T · a is 3x3.
        let mut out2 = vec![1.0; 9];
        gemm(Mat::new(&a, 2, 3).t(), Mat::new(&a, 2, 3), &mut out2, true);
        for i in 0..3 {
            for j in 0..3 {
                let want: f64 = 1.0 + (0..2).map(|k| a[k * 3 + i] * a[k * 3 + j]).sum::<f64>();
                assert!((out2[i * 3 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn select_and_stack_batch() {
        let t = Tensor::<f32>::from_fn(&[3, 2], |i| i as f32);
        let s = t.select_batch(&[2, 0]).unwrap();
        assert_eq!(s.data(), &[4.0, 5.0, 0.0, 1.0]);
        let st = Tensor::stack_batch(&[s, t.select_batch(&[1]).unwrap()]).unwrap();
        assert_eq!(st.shape(), &[3, 2]);
        assert_eq!(st.data(), &[4.0, 5.0, 0.0, 1.0, 2.0, 3.0]);
    }
}
