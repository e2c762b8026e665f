//! Row-major matrices and fully connected layers with explicit reverse mode.
//!
//! Every dot product accumulates as `bias + w[0]*x[0] + w[1]*x[1] + ...` in
//! ascending input index. Batched and single-row paths share that order, so
//! their results agree bit for bit.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GmnError, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(GmnError::shape("matrix buffer", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(GmnError::shape("matrix row", cols, row.len()));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn rows_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Scales each row to unit Euclidean norm; zero rows stay zero.
    pub fn l2_normalize_rows(&mut self) {
        self.l2_normalize_rows_with_norms();
    }

    /// Same as `l2_normalize_rows`, returning the original row norms.
    pub fn l2_normalize_rows_with_norms(&mut self) -> Vec<f64> {
        let cols = self.cols;
        let mut norms = Vec::with_capacity(self.rows);
        for row in self.data.chunks_exact_mut(cols.max(1)).take(self.rows) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
            norms.push(norm);
        }
        norms
    }
}

/// Gradient through row normalization: `(g - y (y·g)) / ‖x‖` per row, where
/// `y` is the normalized row. Zero rows pass the gradient through unchanged.
pub fn l2_normalize_backward(normalized: &Matrix, norms: &[f64], grad: &Matrix) -> Matrix {
    let mut out = grad.clone();
    for (i, &norm) in norms.iter().enumerate() {
        if norm <= 0.0 {
            continue;
        }
        let y = normalized.row(i);
        let dot: f64 = y.iter().zip(grad.row(i)).map(|(a, b)| a * b).sum();
        for (o, &yk) in out.row_mut(i).iter_mut().zip(y) {
            *o = (*o - yk * dot) / norm;
        }
    }
    out
}

/// A fully connected layer `y = W x + b` with `W` stored `d_out × d_in` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub d_in: usize,
    pub d_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Dense {
            d_in,
            d_out,
            weights: vec![0.0; d_in * d_out],
            bias: vec![0.0; d_out],
        }
    }

    /// He-normal weights (std = sqrt(gain / d_in)), zero bias.
    pub fn random<R: Rng + ?Sized>(d_in: usize, d_out: usize, gain: f64, rng: &mut R) -> Self {
        let std = (gain / d_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let weights = (0..d_in * d_out).map(|_| normal.sample(rng)).collect();
        Dense {
            d_in,
            d_out,
            weights,
            bias: vec![0.0; d_out],
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    #[inline]
    pub fn forward_row(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.d_in);
        debug_assert_eq!(out.len(), self.d_out);
        for (j, o) in out.iter_mut().enumerate() {
            let w = &self.weights[j * self.d_in..(j + 1) * self.d_in];
            let mut acc = self.bias[j];
            for (wk, xk) in w.iter().zip(x) {
                acc += wk * xk;
            }
            *o = acc;
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols != self.d_in {
            return Err(GmnError::shape("dense input", self.d_in, x.cols));
        }
        let mut out = Matrix::zeros(x.rows, self.d_out);
        for i in 0..x.rows {
            let (src, dst) = (x.row(i), &mut out.data[i * self.d_out..(i + 1) * self.d_out]);
            self.forward_row(src, dst);
        }
        Ok(out)
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(&self, x: &Matrix, d_out: &Matrix, grad: &mut Dense) -> Matrix {
        debug_assert_eq!(x.rows, d_out.rows);
        let mut d_in = Matrix::zeros(x.rows, self.d_in);
        for i in 0..x.rows {
            let xi = x.row(i);
            let gi = d_out.row(i);
            let di = d_in.row_mut(i);
            for (j, &g) in gi.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grad.bias[j] += g;
                let w = &self.weights[j * self.d_in..(j + 1) * self.d_in];
                let gw = &mut grad.weights[j * self.d_in..(j + 1) * self.d_in];
                for k in 0..self.d_in {
                    gw[k] += g * xi[k];
                    di[k] += g * w[k];
                }
            }
        }
        d_in
    }

    /// Weights laid out `d_in × d_out`, for kernels that sweep inputs in the outer loop.
    pub fn transposed_weights(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.weights.len()];
        for j in 0..self.d_out {
            for k in 0..self.d_in {
                t[k * self.d_out + j] = self.weights[j * self.d_in + k];
            }
        }
        t
    }

    pub(crate) fn params(&self) -> [&[f64]; 2] {
        [&self.weights, &self.bias]
    }

    pub(crate) fn params_mut(&mut self) -> [&mut [f64]; 2] {
        [&mut self.weights, &mut self.bias]
    }
}

#[inline]
pub(crate) fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Squared Euclidean distance with four independent accumulators.
#[inline]
pub fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = x.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            let d = x[4 * c + l] - y[4 * c + l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0;
    for k in 4 * chunks..x.len() {
        let d = x[k] - y[k];
        tail += d * d;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = x.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += x[4 * c + l] * y[4 * c + l];
        }
    }
    let mut tail = 0.0;
    for k in 4 * chunks..x.len() {
        tail += x[k] * y[k];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_backward_matches_hand_values() {
        let layer = Dense {
            d_in: 2,
            d_out: 1,
            weights: vec![2.0, -1.0],
            bias: vec![0.5],
        };
        let x = Matrix::from_rows(&[[1.0, 3.0]]).unwrap();
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.data, vec![0.5 + 2.0 - 3.0]);
        let mut g = Dense::zeros(2, 1);
        let dx = layer.backward(&x, &Matrix::from_rows(&[[1.0]]).unwrap(), &mut g);
        assert_eq!(g.weights, vec![1.0, 3.0]);
        assert_eq!(g.bias, vec![1.0]);
        assert_eq!(dx.data, vec![2.0, -1.0]);
    }

    #[test]
    fn squared_distance_matches_naive() {
        let x: Vec<f64> = (0..11).map(|i| i as f64 * 0.3).collect();
        let y: Vec<f64> = (0..11).map(|i| (i as f64).sin()).collect();
        let naive: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!((squared_distance(&x, &y) - naive).abs() < 1e-12);
        let naive_dot: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!((dot(&x, &y) - naive_dot).abs() < 1e-12);
    }

    #[test]
    fn normalize_rows_leaves_zero_rows() {
        let mut m = Matrix::from_rows(&[[3.0, 4.0], [0.0, 0.0]]).unwrap();
        m.l2_normalize_rows();
        assert_eq!(m.data, vec![0.6, 0.8, 0.0, 0.0]);
    }
}
