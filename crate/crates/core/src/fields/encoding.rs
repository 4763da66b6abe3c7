//! Sinusoidal positional encoding of coordinate inputs.

use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use std::f64::consts::PI;

/// Encodes each scalar `x` as `[x, sin(2^k π x), cos(2^k π x)]` for
/// `k = 0..freqs`, identity term first, then sin/cos pairs per frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionalEncoding {
    pub freqs: usize,
}

impl PositionalEncoding {
    pub fn new(freqs: usize) -> Self {
        Self { freqs }
    }

    /// Encoded width of one scalar input.
    pub fn width(&self) -> usize {
        1 + 2 * self.freqs
    }

    pub fn encode_scalar(&self, x: f64, out: &mut [f64]) {
        out[0] = x;
        let mut f = PI;
        for k in 0..self.freqs {
            let (s, c) = (f * x).sin_cos();
            out[1 + 2 * k] = s;
            out[2 + 2 * k] = c;
            f *= 2.0;
        }
    }

    /// d(sum_j grad_j · enc_j)/dx for the encoding of `x`.
    pub fn backward_scalar(&self, x: f64, grad: &[f64]) -> f64 {
        let mut dx = grad[0];
        let mut f = PI;
        for k in 0..self.freqs {
            let (s, c) = (f * x).sin_cos();
            dx += f * (c * grad[1 + 2 * k] - s * grad[2 + 2 * k]);
            f *= 2.0;
        }
        dx
    }
}

/// A per-column encoding plan: column `i` of the raw input is encoded with
/// `encodings[i]` and the results are concatenated left to right.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputEncoder {
    encodings: Vec<PositionalEncoding>,
}

impl InputEncoder {
    pub fn new(encodings: Vec<PositionalEncoding>) -> Self {
        Self { encodings }
    }

    pub fn raw_dim(&self) -> usize {
        self.encodings.len()
    }

    pub fn encoded_dim(&self) -> usize {
        self.encodings.iter().map(PositionalEncoding::width).sum()
    }

    pub fn encode(&self, raw: ArrayView2<'_, f64>) -> Array2<f64> {
        let n = raw.nrows();
        let mut out = Array2::zeros((n, self.encoded_dim()));
        self.encode_into(raw, out.view_mut());
        out
    }

    pub fn encode_into(&self, raw: ArrayView2<'_, f64>, mut out: ArrayViewMut2<'_, f64>) {
        debug_assert_eq!(raw.ncols(), self.raw_dim());
        for (row_in, mut row_out) in raw.outer_iter().zip(out.outer_iter_mut()) {
            let dst = row_out.as_slice_mut().expect("row-major output");
            let mut offset = 0;
            for (col, enc) in self.encodings.iter().enumerate() {
                let w = enc.width();
                enc.encode_scalar(row_in[col], &mut dst[offset..offset + w]);
                offset += w;
            }
        }
    }

    /// Gradient w.r.t. the raw inputs given the gradient w.r.t. the encoding.
    pub fn backward(&self, raw: ArrayView2<'_, f64>, grad_encoded: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros(raw.raw_dim());
        for ((row_in, row_grad), mut row_out) in raw.outer_iter().zip(grad_encoded.outer_iter()).zip(out.outer_iter_mut()) {
            let g = row_grad.as_slice().expect("row-major gradient");
            let mut offset = 0;
            for (col, enc) in self.encodings.iter().enumerate() {
                let w = enc.width();
                row_out[col] = enc.backward_scalar(row_in[col], &g[offset..offset + w]);
                offset += w;
            }
        }
        out
    }
}
