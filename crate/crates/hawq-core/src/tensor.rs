//! Dense row-major f64 tensors.
//!
//! All curvature arithmetic runs in f64 so that eigenvalue tests are not
//! confounded by storage precision.

use crate::error::{Error, Result};

/// A dense multidimensional array of f64 in row-major order.
///
/// Rank-0 tensors (`shape == []`) hold a single scalar element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    elems: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking that the element count matches the shape.
    pub fn new(shape: Vec<usize>, elems: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("zero extent in shape {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != elems.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} needs {numel} elements, got {}", elems.len()),
            });
        }
        Ok(Tensor { shape, elems })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            elems: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            elems: vec![v],
        }
    }

    pub fn from_vec(elems: Vec<f64>) -> Self {
        Tensor {
            shape: vec![elems.len()],
            elems,
        }
    }

    /// 2-D constructor used heavily in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        let mut elems = Vec::with_capacity(m * n);
        for r in rows {
            if r.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    detail: "ragged rows".into(),
                });
            }
            elems.extend_from_slice(r);
        }
        Tensor::new(vec![m, n], elems)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.elems.len()
    }

    pub fn elems(&self) -> &[f64] {
        &self.elems
    }

    pub fn elems_mut(&mut self) -> &mut [f64] {
        &mut self.elems
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a rank-0 tensor.
    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.elems[0]
    }

    pub fn is_finite(&self) -> bool {
        self.elems.iter().all(|v| v.is_finite())
    }

    pub(crate) fn into_parts(self) -> (Vec<usize>, Vec<f64>) {
        (self.shape, self.elems)
    }
}

/// Euclidean norm of a flat vector.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dot product with a fixed left-to-right summation order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
