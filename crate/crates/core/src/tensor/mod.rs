//! Dense row-major `f64` tensors and the reverse-mode tape that differentiates them.

mod autodiff;
pub(crate) mod kernels;
pub mod ops;

pub use autodiff::{Tape, Var};

use crate::error::{Error, Result};

/// Maximum number of axes a tensor may carry.
pub const MAX_RANK: usize = 4;

/// Dense tensor of 64-bit floats in row-major order.
///
/// Values are immutable once built, except through [`Tensor::data_mut`], which
/// only the optimizer uses to update parameters in place.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expects {numel} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let n = shape.iter().product();
        Ok(Self {
            shape,
            data: vec![value; n],
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a 1-D tensor.
    pub fn vector(values: &[f64]) -> Result<Self> {
        Self::new([values.len()], values.to_vec())
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::InvalidShape {
                    shape: vec![rows.len(), cols],
                    reason: format!("ragged row of length {}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new([rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Self::zeros([n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a 1-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Element at a full multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut off = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of bounds for axis {i} of extent {ext}");
            off = off * ext + ix;
        }
        off
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let out_shape = kernels::permuted_shape(&self.shape, axes)?;
        let mut out = vec![0.0; self.data.len()];
        kernels::permute(&self.data, &self.shape, axes, &mut out);
        Self::new(out_shape, out)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "transpose needs at least two axes".into(),
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Sub-tensor at `index` along axis 0.
    pub fn index_axis0(&self, index: usize) -> Result<Self> {
        let inner: usize = self.shape[1..].iter().product();
        if index >= self.shape[0] {
            return Err(crate::error::contract(format!(
                "index {index} out of range for leading extent {}",
                self.shape[0]
            )));
        }
        let shape = if self.rank() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        };
        Self::new(shape, self.data[index * inner..(index + 1) * inner].to_vec())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| crate::error::contract("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::Shape {
                    op: "stack",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(shape, data)
    }

    /// Rows `idx` of axis 0, gathered in order.
    pub fn gather_axis0(&self, idx: &[usize]) -> Result<Self> {
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(inner * idx.len());
        for &i in idx {
            if i >= self.shape[0] {
                return Err(crate::error::contract(format!("gather index {i} out of range")));
            }
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self::new(shape, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
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

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Index of the largest element (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("rank must be 1..={MAX_RANK}"),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::new([2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new([2, 3], vec![0.0; 5]),
            Err(Error::InvalidShape { .. })
        ));
        assert!(Tensor::new([0], vec![]).is_err());
        assert!(Tensor::new([1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn permute_moves_axes() {
        let t = Tensor::new([2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(p.at(&[c, a, b]), t.at(&[a, b, c]));
                }
            }
        }
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn stack_and_gather() {
        let a = Tensor::vector(&[1.0, 2.0]).unwrap();
        let b = Tensor::vector(&[3.0, 4.0]).unwrap();
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        let g = s.gather_axis0(&[1, 0, 1]).unwrap();
        assert_eq!(g.data(), &[3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.index_axis0(1).unwrap(), b);
    }
}
