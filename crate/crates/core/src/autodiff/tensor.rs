//! Dense row-major tensors and the forward kernels used by the tape.

use std::fmt;

use crate::scalar::Scalar;

use super::TensorError;

/// A dense tensor: shape plus row-major buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if numel(&shape) != data.len() {
            return Err(TensorError::BadBuffer { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::zero(); numel(shape)] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape.to_vec(), data.iter().map(|&x| crate::scalar::cast(x)).collect())
    }

    /// Builds an `rows x cols` matrix from row slices of equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::BadBuffer { shape: vec![rows.len(), cols], len: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { shape: vec![rows.len(), cols], data })
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

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        let cols = self.shape[1];
        self.data[i * cols + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        if numel(shape) != self.data.len() {
            return Err(TensorError::BadBuffer { shape: shape.to_vec(), len: self.data.len() });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub(crate) fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    pub fn norm_sq(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
}

pub(crate) fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = a.dims2().expect("checked by caller");
    let (_, n) = b.dims2().expect("checked by caller");
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(
        m,
        k,
        n,
        T::one(),
        &a.data,
        k as isize,
        1,
        &b.data,
        n as isize,
        1,
        T::zero(),
        &mut out.data,
        n as isize,
        1,
    );
    out
}

/// `g * b^T` accumulated into `acc` (shape of `a` in `a * b`).
pub(crate) fn matmul_grad_lhs<T: Scalar>(g: &Tensor<T>, b: &Tensor<T>, acc: &mut Tensor<T>) {
    let (m, n) = g.dims2().expect("rank 2");
    let (k, _) = b.dims2().expect("rank 2");
    T::gemm(
        m,
        n,
        k,
        T::one(),
        &g.data,
        n as isize,
        1,
        &b.data,
        1,
        n as isize,
        T::one(),
        &mut acc.data,
        k as isize,
        1,
    );
}

/// `a^T * g` accumulated into `acc` (shape of `b` in `a * b`).
pub(crate) fn matmul_grad_rhs<T: Scalar>(a: &Tensor<T>, g: &Tensor<T>, acc: &mut Tensor<T>) {
    let (m, k) = a.dims2().expect("rank 2");
    let (_, n) = g.dims2().expect("rank 2");
    T::gemm(
        k,
        m,
        n,
        T::one(),
        &a.data,
        1,
        k as isize,
        &g.data,
        n as isize,
        1,
        T::one(),
        &mut acc.data,
        n as isize,
        1,
    );
}

pub(crate) fn reduce_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split(&x.shape, axis);
    let mut shape = x.shape.clone();
    shape.remove(axis);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for a in 0..len {
            let base = (o * len + a) * inner;
            for i in 0..inner {
                out[o * inner + i] += x.data[base + i];
            }
        }
    }
    Tensor { shape, data: out }
}

/// Inverse of [`reduce_axis`]: repeats `g` along a re-inserted axis.
pub(crate) fn expand_axis<T: Scalar>(g: &Tensor<T>, shape: &[usize], axis: usize, scale: T) -> Tensor<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        for a in 0..len {
            let base = (o * len + a) * inner;
            for i in 0..inner {
                out[base + i] = g.data[o * inner + i] * scale;
            }
        }
    }
    Tensor { shape: shape.to_vec(), data: out }
}

pub(crate) fn softmax_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split(&x.shape, axis);
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let mut max = T::neg_infinity();
            for a in 0..len {
                max = max.max(x.data[idx(a)]);
            }
            let mut total = T::zero();
            for a in 0..len {
                let e = (x.data[idx(a)] - max).exp();
                out[idx(a)] = e;
                total += e;
            }
            for a in 0..len {
                out[idx(a)] /= total;
            }
        }
    }
    Tensor { shape: x.shape.clone(), data: out }
}

pub(crate) fn softmax_axis_grad<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split(&y.shape, axis);
    let mut out = vec![T::zero(); y.data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let mut dot = T::zero();
            for a in 0..len {
                dot += y.data[idx(a)] * g.data[idx(a)];
            }
            for a in 0..len {
                out[idx(a)] = y.data[idx(a)] * (g.data[idx(a)] - dot);
            }
        }
    }
    Tensor { shape: y.shape.clone(), data: out }
}

pub(crate) fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
    let mut shape = parts[0].shape.clone();
    shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
    let outer = numel(&shape[..axis]);
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for p in parts {
            let chunk = numel(&p.shape[axis..]);
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor { shape, data }
}

pub(crate) fn slice_axis<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let (outer, full, inner) = axis_split(&x.shape, axis);
    let mut shape = x.shape.clone();
    shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        data.extend_from_slice(&x.data[base..base + len * inner]);
    }
    Tensor { shape, data }
}

/// Adds `g` (the slice gradient) into the matching window of `acc`.
pub(crate) fn unslice_add<T: Scalar>(acc: &mut Tensor<T>, g: &Tensor<T>, axis: usize, start: usize) {
    let (outer, full, inner) = axis_split(&acc.shape, axis);
    let len = g.shape[axis];
    for o in 0..outer {
        let base = (o * full + start) * inner;
        let src = o * len * inner;
        for k in 0..len * inner {
            acc.data[base + k] += g.data[src + k];
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// Plain matrix product without recording, for callers outside a tape.
    pub fn matmul(&self, other: &Self) -> Result<Self, TensorError> {
        match (self.dims2(), other.dims2()) {
            (Some((_, k)), Some((k2, _))) if k == k2 => Ok(matmul(self, other)),
            _ => Err(TensorError::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffer_length_checked() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn concat_and_slice_invert() {
        let a = Tensor::<f64>::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2, 1], &[5., 6.]).unwrap();
        let c = concat(&[&a, &b], 1);
        assert_eq!(c.data(), &[1., 2., 5., 3., 4., 6.]);
        assert_eq!(slice_axis(&c, 1, 0, 2), a);
        assert_eq!(slice_axis(&c, 1, 2, 1), b);
    }

    #[test]
    fn reduce_rows_and_cols() {
        let x = Tensor::<f64>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(reduce_axis(&x, 0).data(), &[5., 7., 9.]);
        assert_eq!(reduce_axis(&x, 1).data(), &[6., 15.]);
    }
}
