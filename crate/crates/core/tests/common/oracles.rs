//! Independent slow reference implementations.

use gmn_core::pair_space::PairOp;

/// One pair-feature component, written out per op.
pub fn pair_component(op: PairOp, x: f64, y: f64) -> f64 {
    match op {
        PairOp::SquaredDiff => {
            let d = x - y;
            d * d
        }
        PairOp::Abs => {
            if x >= y {
                x - y
            } else {
                y - x
            }
        }
        PairOp::Mul => x * y,
        PairOp::Add => x + y,
    }
}

pub fn pair_feature_loop(op: PairOp, x: &[f64], y: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for k in 0..x.len() {
        out.push(pair_component(op, x[k], y[k]));
    }
    out
}

/// Brute-force retrieval metrics.
///
/// The rank of gallery item `j` is one plus the number of kept items that
/// score higher, or score the same and come earlier in the gallery.
pub struct BruteForce {
    pub map: f64,
    pub cmc: Vec<f64>,
    pub valid: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn brute_force_metrics(
    scores: &[Vec<f64>],
    probe_ids: &[u32],
    probe_cams: &[u32],
    gallery_ids: &[u32],
    gallery_cams: &[u32],
    filter: bool,
    ranks: &[usize],
) -> Option<BruteForce> {
    let mut ap_sum = 0.0;
    let mut first_ranks = Vec::new();
    for (i, row) in scores.iter().enumerate() {
        let kept: Vec<usize> = (0..row.len())
            .filter(|&j| !(filter && gallery_ids[j] == probe_ids[i] && gallery_cams[j] == probe_cams[i]))
            .collect();
        let mut match_ranks = Vec::new();
        for &j in &kept {
            if gallery_ids[j] != probe_ids[i] {
                continue;
            }
            let mut rank = 1;
            for &k in &kept {
                if row[k] > row[j] || (row[k] == row[j] && k < j) {
                    rank += 1;
                }
            }
            match_ranks.push(rank);
        }
        if match_ranks.is_empty() {
            continue;
        }
        match_ranks.sort_unstable();
        let mut precision = 0.0;
        for (h, &r) in match_ranks.iter().enumerate() {
            precision += (h + 1) as f64 / r as f64;
        }
        ap_sum += precision / match_ranks.len() as f64;
        first_ranks.push(match_ranks[0]);
    }
    if first_ranks.is_empty() {
        return None;
    }
    let n = first_ranks.len() as f64;
    Some(BruteForce {
        map: ap_sum / n,
        cmc: ranks
            .iter()
            .map(|&r| first_ranks.iter().filter(|&&f| f <= r).count() as f64 / n)
            .collect(),
        valid: first_ranks.len(),
    })
}

/// Sigmoid of `z_pos - z_neg` from the branch that cannot overflow.
pub fn reference_sigmoid(z_neg: f64, z_pos: f64) -> f64 {
    let g = z_pos - z_neg;
    if g >= 0.0 {
        1.0 / (1.0 + (-g).exp())
    } else {
        let e = g.exp();
        e / (1.0 + e)
    }
}
