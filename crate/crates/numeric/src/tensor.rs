use std::fmt;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};

/// Row-major dense matrix of `f64`.
///
/// Every tensor is two-dimensional; vectors are `1×n` or `n×1` and scalars
/// are `1×1`. The buffer is shared, so cloning is cheap and tensors can be
/// handed to other threads read-only.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 2],
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: [usize; 2], data: Vec<f64>) -> Result<Self> {
        if shape[0] == 0 || shape[1] == 0 {
            return shape_err("tensor", format!("zero-sized dimension in {shape:?}"));
        }
        if data.len() != shape[0] * shape[1] {
            return shape_err(
                "tensor",
                format!("{} values for shape {:?}", data.len(), shape),
            );
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return shape_err("tensor", "ragged rows");
        }
        Self::new([r, c], rows.concat())
    }

    pub fn from_fn(shape: [usize; 2], mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(shape[0] * shape[1]);
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                data.push(f(i, j));
            }
        }
        Self::new(shape, data)
    }

    pub fn full(shape: [usize; 2], value: f64) -> Result<Self> {
        Self::new(shape, vec![value; shape[0] * shape[1]])
    }

    pub fn zeros(shape: [usize; 2]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: [usize; 2]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: [1, 1],
            data: Arc::new(vec![value]),
        }
    }

    pub fn row(values: Vec<f64>) -> Result<Self> {
        Self::new([1, values.len()], values)
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_fn([n, n], |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    /// The single value of a `1×1` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape != [1, 1] {
            return Err(Error::Contract(format!(
                "item() on non-scalar tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: [usize; 2]) -> Result<Self> {
        if shape[0] * shape[1] != self.len() {
            return shape_err(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            );
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            );
        }
        Ok(Self {
            shape: self.shape,
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    pub fn transpose(&self) -> Self {
        let [r, c] = self.shape;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: [c, r],
            data: Arc::new(out),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let [m, k] = self.shape;
        let [k2, n] = other.shape;
        if k != k2 {
            return shape_err(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            );
        }
        Ok(Self {
            shape: [m, n],
            data: Arc::new(matmul_kernel(&self.data, &other.data, m, k, n)),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of shape and every value.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_of_ones() {
        let a = Tensor::ones([2, 3]).unwrap();
        let b = Tensor::ones([3, 2]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), [2, 2]);
        assert!(c.data().iter().all(|&x| x == 3.0));
    }

    #[test]
    fn rejects_bad_lengths_and_zero_dims() {
        assert!(Tensor::new([2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new([0, 2], vec![]).is_err());
    }

    #[test]
    fn transpose_round_trip() {
        let a = Tensor::from_fn([3, 5], |i, j| (i * 7 + j) as f64).unwrap();
        assert!(a.transpose().transpose().bit_eq(&a));
        assert_eq!(a.transpose().get(4, 2), a.get(2, 4));
    }
}
