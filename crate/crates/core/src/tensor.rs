//! Dense row-major tensors.
//!
//! Images use batch x channels x height x width order. There is no broadcasting: two-tensor
//! operations require equal shapes, and the only mixed form is tensor-with-scalar.

use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(contract(format!("shape {shape:?} needs {expected} elements, got {}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..len).map(&mut f).collect() }
    }

    /// Builds a tensor from `f64` values, converting each to `S`.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| S::from_f64_lossy(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    /// Interprets the tensor as batch x channels x height x width.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(contract(format!("expected a 4-d tensor, got shape {:?}", self.shape))),
        }
    }

    /// Row-major offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(contract(format!("index {index:?} has wrong rank for shape {:?}", self.shape)));
        }
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return Err(contract(format!("index {index:?} out of bounds for {:?}", self.shape)));
            }
            off = off * d + i;
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<S> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: S) -> Result<()> {
        let off = self.offset(index)?;
        self.data[off] = value;
        Ok(())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { left: self.shape.clone(), right: other.shape.clone() });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn add_scalar(&self, s: S) -> Self {
        self.map(|a| a + s)
    }

    pub fn scale(&self, s: S) -> Self {
        self.map(|a| a * s)
    }

    pub fn abs(&self) -> Self {
        self.map(|a| a.abs())
    }

    pub fn clamp(&self, lo: S, hi: S) -> Result<Self> {
        if lo > hi {
            return Err(contract(format!("clamp bounds inverted: {lo} > {hi}")));
        }
        Ok(self.map(|a| a.max(lo).min(hi)))
    }

    /// In-place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: S, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    fn non_empty(&self, what: &str) -> Result<()> {
        if self.data.is_empty() {
            return Err(contract(format!("{what} of an empty tensor")));
        }
        Ok(())
    }

    pub fn sum(&self) -> Result<S> {
        self.non_empty("sum")?;
        Ok(self.data.iter().copied().sum())
    }

    pub fn mean(&self) -> Result<S> {
        let n = S::from_usize(self.len()).expect("length fits the scalar type");
        Ok(self.sum()? / n)
    }

    pub fn max(&self) -> Result<S> {
        self.non_empty("max")?;
        Ok(self.data.iter().copied().fold(S::neg_infinity(), S::max))
    }

    pub fn min(&self) -> Result<S> {
        self.non_empty("min")?;
        Ok(self.data.iter().copied().fold(S::infinity(), S::min))
    }

    pub fn dot(&self, other: &Self) -> Result<S> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of sample `i` along the leading axis, keeping a leading axis of size 1.
    pub fn batch_item(&self, i: usize) -> Result<Self> {
        let n = *self.shape.first().ok_or_else(|| contract("batch_item of a scalar tensor"))?;
        if i >= n {
            return Err(contract(format!("batch index {i} out of range for {n} samples")));
        }
        let stride = self.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Self { shape, data: self.data[i * stride..(i + 1) * stride].to_vec() })
    }

    /// Concatenates tensors along the leading axis. All trailing dimensions must agree.
    pub fn concat(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| contract("concat of no tensors"))?;
        if first.shape.is_empty() {
            return Err(contract("concat of scalar tensors"));
        }
        let mut shape = first.shape.clone();
        shape[0] = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.len() != first.shape.len() || p.shape[1..] != first.shape[1..] {
                return Err(Error::ShapeMismatch { left: first.shape.clone(), right: p.shape.clone() });
            }
            shape[0] += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Self { shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[v.len()], v).unwrap()
    }

    #[test]
    fn mask_multiplication() {
        assert_eq!(t(&[1., 2., 3.]).mul(&t(&[0., 1., 0.])).unwrap(), t(&[0., 2., 0.]));
    }

    #[test]
    fn self_subtraction_is_zero() {
        let x = t(&[1.5, -2.0, 7.25]);
        assert_eq!(x.sub(&x).unwrap(), Tensor::zeros(&[3]));
    }

    #[test]
    fn clamp_to_unit_range() {
        assert_eq!(t(&[-2., 0.5, 3.]).clamp(-1., 1.).unwrap(), t(&[-1., 0.5, 1.]));
    }

    #[test]
    fn abs_and_scale() {
        assert_eq!(t(&[-2., 3.]).abs().scale(0.5), t(&[1., 1.5]));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let err = t(&[1., 2.]).add(&t(&[1., 2., 3.])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn reductions() {
        assert_eq!(Tensor::<f64>::ones(&[4, 4]).sum().unwrap(), 16.0);
        assert_eq!(t(&[2., 4.]).mean().unwrap(), 3.0);
        assert_eq!(t(&[2., 9., 4.]).max().unwrap(), 9.0);
        let v = t(&[3., 4.]);
        assert_eq!(v.mul(&v).unwrap().sum().unwrap(), 25.0);
    }

    #[test]
    fn empty_reduction_is_an_error() {
        let e = Tensor::<f32>::zeros(&[0]);
        assert!(matches!(e.sum(), Err(Error::Contract(_))));
        assert!(matches!(e.mean(), Err(Error::Contract(_))));
        assert!(matches!(e.max(), Err(Error::Contract(_))));
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn row_major_round_trip() {
        let (n, c, h, w) = (2, 3, 4, 5);
        let mut x = Tensor::<f64>::zeros(&[n, c, h, w]);
        for a in 0..n {
            for b in 0..c {
                for y in 0..h {
                    for z in 0..w {
                        let off = ((a * c + b) * h + y) * w + z;
                        assert_eq!(x.offset(&[a, b, y, z]).unwrap(), off);
                        x.set(&[a, b, y, z], off as f64).unwrap();
                    }
                }
            }
        }
        for (i, v) in x.data().iter().enumerate() {
            assert_eq!(*v, i as f64);
        }
        assert!(x.get(&[2, 0, 0, 0]).is_err());
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let a = t(&[1., -2.]);
        let b = t(&[3., 4.]);
        let (a0, b0) = (a.clone(), b.clone());
        let _ = a.add(&b).unwrap();
        let _ = a.abs();
        let _ = a.sum().unwrap();
        assert_eq!((a, b), (a0, b0));
    }

    #[test]
    fn batch_item_and_concat() {
        let x = Tensor::<f32>::from_fn(&[3, 1, 2, 2], |i| i as f32);
        let b1 = x.batch_item(1).unwrap();
        assert_eq!(b1.shape(), &[1, 1, 2, 2]);
        assert_eq!(b1.data(), &[4., 5., 6., 7.]);
        let parts: Vec<_> = (0..3).map(|i| x.batch_item(i).unwrap()).collect();
        let refs: Vec<_> = parts.iter().collect();
        assert_eq!(Tensor::concat(&refs).unwrap(), x);
    }
}
