//! Training objectives and their analytic gradients.
//!
//! Non-differentiable points (zero norms, hinge corners, mining ties) take the
//! zero subgradient.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, GmnError, Result};
use crate::linalg::Matrix;
use crate::pair_space::PicVariants;

/// Default margin of the batch-hard triplet loss.
pub const DEFAULT_TRIPLET_MARGIN: f64 = 0.3;

/// Mean negative log-softmax of the labelled class, and its gradient.
fn softmax_cross_entropy(logits: &Matrix, labels: &[usize], what: &str) -> Result<(f64, Matrix)> {
    if logits.rows != labels.len() {
        return Err(GmnError::shape(format!("{what} labels"), logits.rows, labels.len()));
    }
    let n = logits.rows;
    let mut grad = Matrix::zeros(n, logits.cols);
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= logits.cols {
            return Err(GmnError::config(
                format!("{what} label"),
                format!("label {label} out of range for {} classes", logits.cols),
            ));
        }
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - m).exp()).sum();
        let log_norm = m + sum.ln();
        total += log_norm - row[label];
        let g = grad.row_mut(i);
        for (c, z) in row.iter().enumerate() {
            g[c] = (z - log_norm).exp() / n as f64;
        }
        g[label] -= 1.0 / n as f64;
    }
    let loss = ensure_finite(total / n as f64, what)?;
    Ok((loss, grad))
}

/// Binary pair loss over `[z_neg, z_pos]` logits; labels are 1 for positive pairs.
pub fn gmn_loss(logits: &Matrix, labels: &[u8]) -> Result<(f64, Matrix)> {
    if logits.cols != 2 {
        return Err(GmnError::shape("gmn logits", 2, logits.cols));
    }
    let labels = labels
        .iter()
        .map(|&l| match l {
            0 | 1 => Ok(l as usize),
            other => Err(GmnError::config("pair label", format!("{other} is not 0 or 1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    softmax_cross_entropy(logits, &labels, "l_gmn")
}

/// Identity classification loss.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    softmax_cross_entropy(logits, labels, "l_cls")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PicLoss {
    pub positive: f64,
    pub negative: f64,
    /// Gradients with the same layout as the input variants.
    pub grads: PicVariants,
}

/// Adds `scale · ∂‖a − b‖/∂(a, b)` into `ga`, `gb` and returns the norm.
fn norm_pair(a: &[f64], b: &[f64], scale: f64, ga: &mut [f64], gb: &mut [f64]) -> f64 {
    let norm = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for k in 0..a.len() {
            let g = scale * (a[k] - b[k]) / norm;
            ga[k] += g;
            gb[k] -= g;
        }
    }
    norm
}

fn spread_loss<const N: usize>(sets: &[[Vec<f64>; N]], coef: f64, dim: usize) -> Result<(f64, Vec<[Vec<f64>; N]>)> {
    let mut grads: Vec<[Vec<f64>; N]> = sets
        .iter()
        .map(|_| std::array::from_fn(|_| vec![0.0; dim]))
        .collect();
    if sets.is_empty() {
        return Ok((0.0, grads));
    }
    let scale = coef / sets.len() as f64;
    let mut total = 0.0;
    for (set, g) in sets.iter().zip(grads.iter_mut()) {
        for v in set {
            if v.len() != dim {
                return Err(GmnError::shape("pic variant", dim, v.len()));
            }
        }
        for i in 0..N {
            for j in i + 1..N {
                let (lo, hi) = g.split_at_mut(j);
                total += norm_pair(&set[i], &set[j], scale, &mut lo[i], &mut hi[0]);
            }
        }
    }
    Ok((total * scale, grads))
}

/// Pair-identity center loss: mean over anchors of the summed distances
/// between same-pair-identity variants, over unordered pairs, weighted 1/3
/// (positive triples) and 1/6 (negative quadruples).
pub fn pic_loss(variants: &PicVariants) -> Result<PicLoss> {
    let dim = variants
        .positive
        .first()
        .map(|t| t[0].len())
        .or_else(|| variants.negative.first().map(|q| q[0].len()))
        .unwrap_or(0);
    let (positive, pos_grads) = spread_loss(&variants.positive, 1.0 / 3.0, dim)?;
    let (negative, neg_grads) = spread_loss(&variants.negative, 1.0 / 6.0, dim)?;
    Ok(PicLoss {
        positive: ensure_finite(positive, "l_pic_pos")?,
        negative: ensure_finite(negative, "l_pic_neg")?,
        grads: PicVariants {
            positive: pos_grads,
            negative: neg_grads,
        },
    })
}

/// Which rows batch-hard mining picked for one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinedTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub positive_distance: f64,
    pub negative_distance: f64,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Farthest positive and nearest negative per anchor; ties go to the lowest row.
pub fn mine_batch_hard(embeddings: &Matrix, identities: &[u32]) -> Result<Vec<MinedTriplet>> {
    let n = embeddings.rows;
    if identities.len() != n {
        return Err(GmnError::shape("triplet labels", n, identities.len()));
    }
    let mut out = Vec::with_capacity(n);
    for a in 0..n {
        let xa = embeddings.row(a);
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for b in 0..n {
            if b == a {
                continue;
            }
            let d = euclidean(xa, embeddings.row(b));
            if identities[b] == identities[a] {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((b, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((b, d));
            }
        }
        match (pos, neg) {
            (Some((p, dp)), Some((q, dn))) => out.push(MinedTriplet {
                anchor: a,
                positive: p,
                negative: q,
                positive_distance: dp,
                negative_distance: dn,
            }),
            _ => {
                return Err(GmnError::Sampling(format!(
                    "anchor {a} (identity {}) lacks a positive or a negative in the batch",
                    identities[a]
                )))
            }
        }
    }
    Ok(out)
}

/// Batch-hard triplet loss with Euclidean distances.
pub fn triplet_loss_batch_hard(embeddings: &Matrix, identities: &[u32], margin: f64) -> Result<(f64, Matrix)> {
    let n = embeddings.rows;
    let mut grad = Matrix::zeros(n, embeddings.cols);
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mined = mine_batch_hard(embeddings, identities)?;
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    for t in &mined {
        let hinge = margin + t.positive_distance - t.negative_distance;
        if hinge <= 0.0 {
            continue;
        }
        total += hinge;
        let xa = embeddings.row(t.anchor).to_vec();
        for (other, dist, sign) in [
            (t.positive, t.positive_distance, 1.0),
            (t.negative, t.negative_distance, -1.0),
        ] {
            if dist <= 0.0 {
                continue;
            }
            let xo = embeddings.row(other).to_vec();
            for k in 0..xa.len() {
                let g = sign * scale * (xa[k] - xo[k]) / dist;
                grad.data[t.anchor * grad.cols + k] += g;
                grad.data[other * grad.cols + k] -= g;
            }
        }
    }
    Ok((ensure_finite(total * scale, "l_tri")?, grad))
}

/// Raw loss values that feed the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_cls: f64,
    pub l_tri: f64,
    pub l_gmn: f64,
    pub l_pic_pos: f64,
    pub l_pic_neg: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_tri: f64,
    pub l_gmn: f64,
    pub l_pic_pos: f64,
    pub l_pic_neg: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn l_pic(&self) -> f64 {
        self.l_pic_pos + self.l_pic_neg
    }
}

/// `l_cls + l_tri + l_gmn + lambda · (l_pic_pos + l_pic_neg)`
pub fn total_loss(c: LossComponents, lambda: f64) -> Result<LossBreakdown> {
    for (name, v) in [
        ("l_cls", c.l_cls),
        ("l_tri", c.l_tri),
        ("l_gmn", c.l_gmn),
        ("l_pic_pos", c.l_pic_pos),
        ("l_pic_neg", c.l_pic_neg),
        ("lambda", lambda),
    ] {
        ensure_finite(v, name)?;
    }
    if lambda < 0.0 {
        return Err(GmnError::config("lambda", "must be non-negative"));
    }
    Ok(LossBreakdown {
        l_cls: c.l_cls,
        l_tri: c.l_tri,
        l_gmn: c.l_gmn,
        l_pic_pos: c.l_pic_pos,
        l_pic_neg: c.l_pic_neg,
        lambda,
        total: c.l_cls + c.l_tri + c.l_gmn + lambda * (c.l_pic_pos + c.l_pic_neg),
    })
}
