//! The metric network: pair feature → two logits (index 0 negative, index 1
//! positive), and the softmax similarity built on it.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, GmnError, Result};
use crate::linalg::{relu_in_place, Dense, Matrix};
use crate::pair_space::{pair_feature_into, PairOp};

/// Logit slot of the positive class.
pub const POSITIVE_LOGIT: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricNetParams {
    pub layer1: Dense,
    pub layer2: Dense,
    /// L2-normalize both embeddings before forming the pair feature.
    #[serde(default)]
    pub normalize_inputs: bool,
}

/// `round(d / 4)`, at least 1.
pub fn default_hidden(d: usize) -> usize {
    ((d as f64 / 4.0).round() as usize).max(1)
}

impl MetricNetParams {
    pub fn new<R: Rng + ?Sized>(d: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if d == 0 || hidden == 0 {
            return Err(GmnError::config("mnet_hidden", "dimensions must be positive"));
        }
        Ok(MetricNetParams {
            layer1: Dense::random(d, hidden, 2.0, rng),
            layer2: Dense::random(hidden, 2, 1.0, rng),
            normalize_inputs: false,
        })
    }

    pub fn zeros(d: usize, hidden: usize) -> Self {
        MetricNetParams {
            layer1: Dense::zeros(d, hidden),
            layer2: Dense::zeros(hidden, 2),
            normalize_inputs: false,
        }
    }

    pub fn zeros_like(&self) -> Self {
        MetricNetParams {
            normalize_inputs: self.normalize_inputs,
            ..MetricNetParams::zeros(self.input_dim(), self.hidden())
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer1.d_in
    }

    pub fn hidden(&self) -> usize {
        self.layer1.d_out
    }

    /// `d·h + h + 2·h + 2`
    pub fn param_count(&self) -> usize {
        self.layer1.num_params() + self.layer2.num_params()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer2.d_out != 2 {
            return Err(GmnError::shape("metric net output", 2, self.layer2.d_out));
        }
        if self.layer1.d_out != self.layer2.d_in {
            return Err(GmnError::shape("metric net hidden", self.layer1.d_out, self.layer2.d_in));
        }
        Ok(())
    }

    pub(crate) fn params(&self) -> Vec<&[f64]> {
        self.layer1.params().into_iter().chain(self.layer2.params()).collect()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layer1.params_mut().into_iter().chain(self.layer2.params_mut()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct MetricNetCache {
    dims: (usize, usize),
    input: Matrix,
    pre: Matrix,
    hidden: Matrix,
}

/// Logits for each row of `features`.
pub fn mnet_forward(params: &MetricNetParams, features: &Matrix) -> Result<(Matrix, MetricNetCache)> {
    params.validate()?;
    if features.cols != params.input_dim() {
        return Err(GmnError::shape("metric net input", params.input_dim(), features.cols));
    }
    let pre = params.layer1.forward(features)?;
    let mut hidden = pre.clone();
    relu_in_place(&mut hidden.data);
    let logits = params.layer2.forward(&hidden)?;
    Ok((
        logits,
        MetricNetCache {
            dims: (params.input_dim(), params.hidden()),
            input: features.clone(),
            pre,
            hidden,
        },
    ))
}

pub fn mnet_backward(
    params: &MetricNetParams,
    cache: &MetricNetCache,
    d_logits: &Matrix,
) -> Result<(MetricNetParams, Matrix)> {
    if cache.dims != (params.input_dim(), params.hidden()) {
        return Err(GmnError::State("metric net cache does not match the parameters".into()));
    }
    if d_logits.rows != cache.input.rows || d_logits.cols != 2 {
        return Err(GmnError::State("logit gradient does not match the cached batch".into()));
    }
    let mut grads = params.zeros_like();
    let mut d_hidden = params.layer2.backward(&cache.hidden, d_logits, &mut grads.layer2);
    for (g, z) in d_hidden.data.iter_mut().zip(&cache.pre.data) {
        if *z <= 0.0 {
            *g = 0.0;
        }
    }
    let d_features = params.layer1.backward(&cache.input, &d_hidden, &mut grads.layer1);
    Ok((grads, d_features))
}

/// Positive-class softmax probability of one logit pair.
pub fn similarity(z_neg: f64, z_pos: f64) -> Result<f64> {
    ensure_finite(z_neg, "negative logit")?;
    ensure_finite(z_pos, "positive logit")?;
    Ok(similarity_unchecked(z_neg, z_pos))
}

#[inline]
fn similarity_unchecked(z_neg: f64, z_pos: f64) -> f64 {
    let m = z_neg.max(z_pos);
    let e_neg = (z_neg - m).exp();
    let e_pos = (z_pos - m).exp();
    e_pos / (e_neg + e_pos)
}

const BLOCK: usize = 4;

/// ReLU hidden units `u0..u0 + BLOCK` for `BLOCK` consecutive pair features.
/// Each unit sums bias then `w·f` in input order, as `Dense::forward` does.
#[inline]
fn hidden_block(features: &[f64], d: usize, w1p: &[f64], hp: usize, u0: usize, b1p: &[f64], hidden: &mut [f64]) {
    let mut acc = [[0.0; BLOCK]; BLOCK];
    for row in acc.iter_mut() {
        row.copy_from_slice(&b1p[u0..u0 + BLOCK]);
    }
    for k in 0..d {
        let w: &[f64; BLOCK] = w1p[k * hp + u0..k * hp + u0 + BLOCK].try_into().expect("block");
        for (p, row) in acc.iter_mut().enumerate() {
            let fk = features[p * d + k];
            for q in 0..BLOCK {
                row[q] += w[q] * fk;
            }
        }
    }
    for (p, row) in acc.iter().enumerate() {
        for q in 0..BLOCK {
            hidden[p * hp + u0 + q] = if row[q] < 0.0 { 0.0 } else { row[q] };
        }
    }
}

/// `S[i][j] = similarity(mnet(pair_feature(probe_i, gallery_j)))`, with
/// both rows L2-normalized first when the net asks for it.
///
/// Gallery columns are processed `tile_size` at a time; only one tile of pair
/// features and hidden activations is alive per probe row. Probe rows run on
/// the current rayon pool. The result does not depend on `tile_size` or on the
/// number of threads.
pub fn similarity_matrix(
    params: &MetricNetParams,
    probe: &Matrix,
    gallery: &Matrix,
    op: PairOp,
    tile_size: usize,
) -> Result<Matrix> {
    params.validate()?;
    if tile_size < 1 {
        return Err(GmnError::config("tile_size", "must be at least 1"));
    }
    let d = params.input_dim();
    if probe.cols != d {
        return Err(GmnError::shape("probe embeddings", d, probe.cols));
    }
    if gallery.cols != d {
        return Err(GmnError::shape("gallery embeddings", d, gallery.cols));
    }
    let normalized;
    let (probe, gallery) = if params.normalize_inputs {
        let (mut p, mut g) = (probe.clone(), gallery.clone());
        p.l2_normalize_rows();
        g.l2_normalize_rows();
        normalized = (p, g);
        (&normalized.0, &normalized.1)
    } else {
        (probe, gallery)
    };
    let h = params.hidden();
    // hidden units padded to whole blocks with zero weights
    let hp = h.div_ceil(BLOCK) * BLOCK;
    let w1t = params.layer1.transposed_weights();
    let mut w1p = vec![0.0; d * hp];
    for k in 0..d {
        w1p[k * hp..k * hp + h].copy_from_slice(&w1t[k * h..(k + 1) * h]);
    }
    let mut b1p = vec![0.0; hp];
    b1p[..h].copy_from_slice(&params.layer1.bias);
    let (w_neg, w_pos) = params.layer2.weights.split_at(h);
    let (b_neg, b_pos) = (params.layer2.bias[0], params.layer2.bias[1]);
    let n_g = gallery.rows;

    let mut out = Matrix::zeros(probe.rows, n_g);
    out.data
        .par_chunks_mut(n_g.max(1))
        .enumerate()
        .take(probe.rows)
        .for_each(|(i, row_out)| {
            let x = probe.row(i);
            let tile = tile_size.min(n_g.max(1));
            let tile_padded = tile.div_ceil(BLOCK) * BLOCK;
            let mut features = vec![0.0; tile_padded * d];
            let mut hidden = vec![0.0; tile_padded * hp];
            for j0 in (0..n_g).step_by(tile) {
                let j1 = (j0 + tile).min(n_g);
                let width = j1 - j0;
                for t in 0..width {
                    pair_feature_into(x, gallery.row(j0 + t), op, &mut features[t * d..(t + 1) * d]);
                }
                for t0 in (0..width).step_by(BLOCK) {
                    for u0 in (0..hp).step_by(BLOCK) {
                        hidden_block(&features[t0 * d..(t0 + BLOCK) * d], d, &w1p, hp, u0, &b1p, &mut hidden[t0 * hp..(t0 + BLOCK) * hp]);
                    }
                }
                for t in 0..width {
                    let acc = &hidden[t * hp..t * hp + h];
                    let mut z_neg = b_neg;
                    let mut z_pos = b_pos;
                    for u in 0..h {
                        z_neg += w_neg[u] * acc[u];
                    }
                    for u in 0..h {
                        z_pos += w_pos[u] * acc[u];
                    }
                    row_out[j0 + t] = similarity_unchecked(z_neg, z_pos);
                }
            }
        });
    if out.data.iter().any(|v| !v.is_finite()) {
        return Err(GmnError::Numeric("similarity matrix".into()));
    }
    Ok(out)
}
