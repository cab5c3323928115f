//! Orthonormal DCT-II along the temporal (last) axis.
//!
//! Rows are coordinate channels, columns are frames. With an orthonormal
//! basis `B` (rows are cosine atoms) the forward transform is `x · Bᵀ` and the
//! inverse is `x' · B`, so both are plain matmuls on the tape and exactly
//! differentiable.

use std::f64::consts::PI;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct DctBasis {
    size: usize,
    matrix: Tensor,
    transposed: Tensor,
}

impl DctBasis {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::Config("DCT basis size must be positive".into()));
        }
        let n = size as f64;
        let mut data = vec![0.0; size * size];
        for k in 0..size {
            let alpha = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            for t in 0..size {
                data[k * size + t] = alpha * (PI * (2 * t + 1) as f64 * k as f64 / (2.0 * n)).cos();
            }
        }
        let matrix = Tensor::from_parts(vec![size, size], data);
        let transposed = matrix.transpose()?;
        Ok(DctBasis {
            size,
            matrix,
            transposed,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// `T×T`, row `k` is the `k`-th cosine atom.
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    fn check_len(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        match shape.last() {
            Some(&t) if t == self.size => Ok(()),
            _ => Err(Error::dim(
                op,
                format!("temporal axis of {shape:?} does not match basis size {}", self.size),
            )),
        }
    }

    /// Frequency coefficients of each row of `x` (`[P×T]` or `[B×P×T]`).
    pub fn dct(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check_len("dct", tape.value(x).shape())?;
        let bt = tape.constant(self.transposed.clone());
        tape.matmul(x, bt)
    }

    /// Inverse of [`DctBasis::dct`].
    pub fn idct(&self, tape: &mut Tape, coeffs: Var) -> Result<Var> {
        self.check_len("idct", tape.value(coeffs).shape())?;
        let b = tape.constant(self.matrix.clone());
        tape.matmul(coeffs, b)
    }

    /// Off-tape forward transform.
    pub fn dct_values(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let out = self.dct(&mut tape, v)?;
        Ok(tape.value(out).clone())
    }

    /// Off-tape inverse transform.
    pub fn idct_values(&self, coeffs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.constant(coeffs.clone());
        let out = self.idct(&mut tape, v)?;
        Ok(tape.value(out).clone())
    }
}
