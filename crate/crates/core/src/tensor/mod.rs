//! Dense row-major tensors and the contraction/decomposition primitives the
//! layer family is built from.
//!
//! Mode indices in the public API are 1-based (`mode_n_vector_product(t, v, 1)`
//! contracts the first index), matching the usual tensor-algebra notation.

mod contract;
mod ops;
mod svd;

pub use contract::contract;
pub use ops::{cp_materialize, khatri_rao, matmul, mode_n_vector_product, tr_materialize};
pub(crate) use ops::small_matmul;
pub use svd::{numerical_rank, singular_values, svd, truncate, Svd, DEFAULT_RANK_TOL};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Order-d array with explicit shape, stored row-major (last index fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    strides: Vec<usize>,
    data: Vec<T>,
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * shape[k + 1];
    }
    strides
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::shape("tensor order must be at least 1"));
    }
    if let Some(k) = shape.iter().position(|&e| e == 0) {
        return Err(Error::shape(format!("extent of mode {} is zero in {shape:?}", k + 1)));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), strides: row_major_strides(shape), data })
    }

    /// All-zero tensor. Panics on an empty shape or a zero extent.
    pub fn zeros(shape: &[usize]) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), strides: row_major_strides(shape), data: vec![T::zero(); n] }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    /// Builds a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let mut t = Self::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for flat in 0..t.data.len() {
            t.data[flat] = f(&idx);
            increment(&mut idx, shape);
        }
        t
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Self::from_vec(&[n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::from_vec(&[rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn order(&self) -> usize {
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

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: T) {
        let k = self.flat_index(idx);
        self.data[k] = value;
    }

    /// Same data viewed with a new shape of equal size.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            strides: self.strides.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        self.cast()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), strides: self.strides.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.order(), 2, "rows() requires a matrix");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.order(), 2, "cols() requires a matrix");
        self.shape[1]
    }

    /// Row `i` of a matrix (or the `i`-th leading slice of any tensor).
    pub fn row(&self, i: usize) -> &[T] {
        let w = self.strides[0];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let w = self.strides[0];
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        Tensor::from_fn(&[c, r], |ix| self.data[ix[1] * c + ix[0]])
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x.to_f64() * x.to_f64()).sum::<f64>().sqrt()
    }
}

impl Tensor<f64> {
    /// Relative L2 distance `||self − other|| / max(||other||, tiny)`.
    pub fn rel_l2_error(&self, other: &Tensor<f64>) -> f64 {
        assert_eq!(self.shape, other.shape, "rel_l2_error shape mismatch");
        let diff: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        diff / other.frobenius_norm().max(f64::MIN_POSITIVE)
    }

    pub fn max_abs_diff(&self, other: &Tensor<f64>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Advances a row-major multi-index; wraps to all zeros after the last element.
pub(crate) fn increment(idx: &mut [usize], shape: &[usize]) {
    for k in (0..shape.len()).rev() {
        idx[k] += 1;
        if idx[k] < shape[k] {
            return;
        }
        idx[k] = 0;
    }
}

/// CP factor matrix: one row per rank component, one column per mode index.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorMatrix<T = f64>(pub(crate) Tensor<T>);

impl<T: Scalar> FactorMatrix<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        if t.order() != 2 {
            return Err(Error::shape(format!("factor matrix must be order 2, got shape {:?}", t.shape())));
        }
        Ok(FactorMatrix(t))
    }

    pub fn zeros(rank: usize, dim: usize) -> Self {
        FactorMatrix(Tensor::zeros(&[rank, dim]))
    }

    pub fn rank(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn at(&self, r: usize, i: usize) -> T {
        self.0.data()[r * self.dim() + i]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<T> {
        &mut self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }
}

/// Tensor-ring core of shape `(rank_in, dim, rank_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrCore<T = f64>(pub(crate) Tensor<T>);

impl<T: Scalar> TrCore<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        if t.order() != 3 {
            return Err(Error::shape(format!("tensor-ring core must be order 3, got shape {:?}", t.shape())));
        }
        Ok(TrCore(t))
    }

    pub fn zeros(rank_in: usize, dim: usize, rank_out: usize) -> Self {
        TrCore(Tensor::zeros(&[rank_in, dim, rank_out]))
    }

    pub fn rank_in(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn rank_out(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn at(&self, r: usize, i: usize, s: usize) -> T {
        let (d, ro) = (self.dim(), self.rank_out());
        self.0.data()[(r * d + i) * ro + s]
    }

    /// Lateral slice `core[:, i, :]` as a dense `rank_in × rank_out` matrix in f64.
    pub fn lateral_slice(&self, i: usize) -> Vec<f64> {
        let (ri, ro) = (self.rank_in(), self.rank_out());
        let mut out = Vec::with_capacity(ri * ro);
        for r in 0..ri {
            for s in 0..ro {
                out.push(self.at(r, i, s).to_f64());
            }
        }
        out
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<T> {
        &mut self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }
}

/// Checks the ring-closure invariant of a core chain.
pub fn check_ring<T: Scalar>(cores: &[TrCore<T>]) -> Result<()> {
    if cores.is_empty() {
        return Err(Error::RingClosure("empty core list".into()));
    }
    for k in 0..cores.len() {
        let next = (k + 1) % cores.len();
        if cores[k].rank_out() != cores[next].rank_in() {
            return Err(Error::RingClosure(format!(
                "core {} has rank_out {} but core {} has rank_in {}",
                k + 1,
                cores[k].rank_out(),
                next + 1,
                cores[next].rank_in()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f64>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::from_vec(&[], vec![]).is_err());
        assert!(Tensor::<f64>::from_vec(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn row_major_layout() {
        let t = Tensor::from_fn(&[2, 3, 4], |ix| (ix[0] * 100 + ix[1] * 10 + ix[2]) as f64);
        assert_eq!(t.strides(), &[12, 4, 1]);
        assert_eq!(t.get(&[1, 2, 3]), 123.0);
        assert_eq!(t.data()[t.flat_index(&[1, 0, 2])], 102.0);
    }

    #[test]
    fn ring_closure_detected() {
        let good = vec![TrCore::<f64>::zeros(2, 3, 4), TrCore::zeros(4, 2, 2)];
        assert!(check_ring(&good).is_ok());
        let bad = vec![TrCore::<f64>::zeros(2, 3, 4), TrCore::zeros(4, 2, 3)];
        assert!(matches!(check_ring(&bad), Err(Error::RingClosure(_))));
    }

    #[test]
    fn cast_rounds_to_f32() {
        let t = Tensor::vector(vec![0.1f64]).unwrap();
        let s: Tensor<f32> = t.cast();
        assert_eq!(s.data()[0], 0.1f32);
    }
}
