//! Small building blocks shared by the model heads.

use rand::Rng;

use crate::corpus::Batch;
use crate::error::Result;
use crate::ndgrad::{ParamStore, Tape, Tensor, Var};

/// Uniform `[-bound, bound]` initialisation.
pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("uniform: valid shape")
}

/// `x · W + b` with `W` stored input-major (`[in, out]`).
pub fn affine(tape: &mut Tape, store: &ParamStore, x: Var, w: &str, b: &str) -> Result<Var> {
    let w = tape.param(store, w)?;
    let b = tape.param(store, b)?;
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

/// `-Σ weights ⊙ log_softmax(logits)`; `weights` has the shape of `logits`
/// and carries the class selection and any normalisation.
pub fn weighted_nll(tape: &mut Tape, logits: Var, weights: Tensor) -> Result<Var> {
    let logp = tape.log_softmax(logits);
    let w = tape.constant(weights);
    let picked = tape.mul(logp, w)?;
    let total = tape.sum(picked);
    Ok(tape.scalar_mul(total, -1.0))
}

/// Time-major view of a batch: flattened row `t * size + b` holds token `t`
/// of instance `b`, so one time step is a contiguous block of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqLayout {
    pub size: usize,
    pub len: usize,
    /// 0/1 per flattened row.
    pub mask: Vec<f64>,
}

impl SeqLayout {
    pub fn of(batch: &Batch) -> Self {
        let (size, len) = (batch.size, batch.max_len);
        let mut mask = vec![0.0; size * len];
        for b in 0..size {
            for t in 0..len {
                mask[t * size + b] = f64::from(batch.mask[batch.cell(b, t)]);
            }
        }
        Self { size, len, mask }
    }

    #[inline]
    pub fn row(&self, t: usize, b: usize) -> usize {
        t * self.size + b
    }

    pub fn rows(&self) -> usize {
        self.size * self.len
    }

    /// Mask as an `[rows, 1]` column.
    pub fn mask_column(&self) -> Tensor {
        Tensor::matrix(self.rows(), 1, self.mask.clone()).expect("mask column")
    }

    /// Mask of time step `t` as a `[size, 1]` column.
    pub fn step_mask(&self, t: usize) -> Tensor {
        Tensor::matrix(self.size, 1, self.mask[t * self.size..(t + 1) * self.size].to_vec()).expect("step mask")
    }

    /// `[size, rows]` matrix summing each instance's rows, with per-instance
    /// weights `w(b, t)`.
    pub fn pooling_matrix(&self, mut w: impl FnMut(usize, usize) -> f64) -> Tensor {
        let rows = self.rows();
        let mut data = vec![0.0; self.size * rows];
        for b in 0..self.size {
            for t in 0..self.len {
                data[b * rows + self.row(t, b)] = w(b, t);
            }
        }
        Tensor::matrix(self.size, rows, data).expect("pooling matrix")
    }

    pub fn lengths(&self) -> Vec<usize> {
        (0..self.size)
            .map(|b| (0..self.len).filter(|&t| self.mask[self.row(t, b)] != 0.0).count())
            .collect()
    }
}
