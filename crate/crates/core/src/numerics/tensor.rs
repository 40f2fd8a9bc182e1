use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

use super::NumericsError;

/// Floating-point element type. Training runs in `f32`; gradient verification in `f64`.
pub trait Scalar: Float + Sum + Debug + Display + Default + Send + Sync + 'static {
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor with an optional gradient slot.
///
/// Rank 0 (scalar), 1 (vector) and 2 (matrix) are the only ranks the model needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, NumericsError> {
        if shape.contains(&0) {
            return Err(NumericsError::Shape(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, NumericsError> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self, NumericsError> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(NumericsError::Shape(format!(
                    "row {i} has {} values, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
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

    /// Number of rows when viewed as a matrix; vectors are a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<(), NumericsError> {
        if grad.len() != self.data.len() {
            return Err(NumericsError::Shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, NumericsError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(NumericsError::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::lit(v.as_f64())).collect()),
        }
    }

    /// Plain (untaped) matrix product.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(NumericsError::Shape(format!(
                "matmul of {:?} by {:?}",
                self.shape, other.shape
            )));
        }
        let (n, k, m) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); n * m];
        matmul_into(&self.data, &other.data, &mut out, n, k, m);
        Tensor::matrix(n, m, out)
    }

    pub fn transpose(&self) -> Tensor<T> {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
            grad: None,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }
}

/// `out += a (n×k) · b (k×m)`, row-major, i-k-j loop order.
pub(crate) fn matmul_into<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    n: usize,
    k: usize,
    m: usize,
) {
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out += aᵀ · b` where a is (k×n) and b is (k×m); result (n×m).
pub(crate) fn matmul_at_b<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    k: usize,
    n: usize,
    m: usize,
) {
    for p in 0..k {
        let a_row = &a[p * n..(p + 1) * n];
        let b_row = &b[p * m..(p + 1) * m];
        for (i, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` where a is (n×k) and b is (m×k); result (n×m).
pub(crate) fn matmul_a_bt<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    n: usize,
    k: usize,
    m: usize,
) {
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (x, y) in a_row.iter().zip(b_row) {
                acc = acc + *x * *y;
            }
            out[i * m + j] = out[i * m + j] + acc;
        }
    }
}
