// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major `f32` tensors and the handful of kernels the forward pass
//! needs.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dense row-major tensor of 32-bit reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Argument(alloc::format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Length of the trailing axis.
    pub fn row_len(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as a 2-D matrix over the trailing axis.
    pub fn n_rows(&self) -> usize {
        self.data.len().checked_div(self.row_len()).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let cols = self.row_len();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let cols = self.row_len();
        &mut self.data[i * cols..(i + 1) * cols]
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|x| !x.is_finite())
    }

    /// Transpose of a 2-D tensor.
    pub fn transposed(&self) -> Result<Self> {
        let [rows, cols] = self.shape[..] else {
            return Err(Error::Argument(alloc::format!(
                "transpose needs a 2-D tensor, got shape {:?}",
                self.shape
            )));
        };
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = self.data[r * cols + c];
            }
        }
        Ok(Self {
            shape: vec![cols, rows],
            data: out,
        })
    }
}

/// `x[n×k] · w[k×m] (+ bias[m])`, row-major, accumulated in `f32`.
pub(crate) fn linear(x: &[f32], n: usize, k: usize, w: &[f32], m: usize, bias: Option<&[f32]>) -> Vec<f32> {
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(w.len(), k * m);
    let mut out = vec![0.0f32; n * m];
    for (x_row, out_row) in x.chunks_exact(k).zip(out.chunks_exact_mut(m)) {
        if let Some(b) = bias {
            out_row.copy_from_slice(b);
        }
        for (&xi, w_row) in x_row.iter().zip(w.chunks_exact(m)) {
            if xi == 0.0 {
                continue;
            }
            for (o, &wv) in out_row.iter_mut().zip(w_row) {
                *o += xi * wv;
            }
        }
    }
    out
}

pub(crate) fn l2_norm(v: &[f32]) -> f64 {
    libm::sqrt(v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_matches_hand_computation() {
        // [1 2] · [[1 0 2], [0 1 3]] + [1 1 1] = [2 3 9]
        let out = linear(&[1.0, 2.0], 1, 2, &[1.0, 0.0, 2.0, 0.0, 1.0, 3.0], 3, Some(&[1.0, 1.0, 1.0]));
        assert_eq!(out, vec![2.0, 3.0, 9.0]);
    }

    #[test]
    fn transpose_round_trips() {
        let t = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let tt = t.transposed().unwrap();
        assert_eq!(tt.shape(), &[3, 2]);
        assert_eq!(tt.data(), &[1., 4., 2., 5., 3., 6.]);
        assert_eq!(tt.transposed().unwrap(), t);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
