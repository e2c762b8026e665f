//! Shared fixtures: random small models with frozen batch plans, and a
//! central-difference gradient checker.
#![allow(dead_code)]

pub mod oracles;

use gmn_core::encoder::{dp_masks, DpConfig, DpMode, EncoderParams};
use gmn_core::linalg::Matrix;
use gmn_core::losses::mine_batch_hard;
use gmn_core::metric_net::MetricNetParams;
use gmn_core::model::GmnModel;
use gmn_core::pair_space::{
    pair_feature, plan_pairs, plan_pic_anchors, NegativeScheme, PairOp, PairSamplingScheme, PicPlan,
};
use gmn_core::trainer::{objective, BatchPlan, ObjectiveSettings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
/// Minimum distance from any kink (ReLU, hinge, mining tie, zero norm, abs).
const KINK_CLEARANCE: f64 = 1e-3;

pub struct Case {
    pub model: GmnModel,
    pub batch: BatchPlan,
    pub pair_op: PairOp,
    pub lambda: f64,
    pub dp_on: bool,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// A random model (d_in <= 8, widths <= 8) and a frozen batch of 3 identities x 3 samples.
pub fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_in = rng.random_range(2..=8);
    let layers = rng.random_range(1..=3);
    let mut dims = vec![d_in];
    for _ in 0..layers {
        dims.push(rng.random_range(2..=8));
    }
    let dp_site = rng.random_range(0..layers);
    let num_ids = 3;
    let k = 3;
    let encoder = EncoderParams::new(&dims, dp_site, num_ids, &mut rng).unwrap();
    let d = encoder.embedding_dim();
    let h = rng.random_range(1..=4);
    let mut metric_net = MetricNetParams::new(d, h, &mut rng).unwrap();
    for b in metric_net.layer1.bias.iter_mut().chain(metric_net.layer2.bias.iter_mut()) {
        *b = 0.3 * normal(&mut rng);
    }
    metric_net.normalize_inputs = rng.random_bool(0.5);
    let model = GmnModel {
        encoder,
        metric_net: Some(metric_net),
        class_identities: (0..num_ids as u32).collect(),
    };
    let n = num_ids * k;
    let mut inputs = Matrix::zeros(n, d_in);
    inputs.data.iter_mut().for_each(|v| *v = normal(&mut rng));
    let identities: Vec<u32> = (0..n).map(|i| (i / k) as u32).collect();
    let domains: Vec<u32> = (0..n).map(|i| (i % 2) as u32).collect();
    let dp_on = rng.random_bool(0.5);
    let dp = DpConfig {
        rate: 0.5,
        active: dp_on,
        mode: DpMode::ExactFraction,
        inverted_scaling: true,
    };
    let dp_mask = dp_masks(n, dims[dp_site + 1], &dp, &mut rng);
    let pairs = plan_pairs(
        &identities,
        &domains,
        PairSamplingScheme {
            negatives: NegativeScheme::Random,
            negatives_per_positive: 1,
        },
        &mut rng,
    )
    .unwrap();
    let pic_anchors = plan_pic_anchors(&identities, &mut rng).unwrap();
    let pair_op = PairOp::ALL[rng.random_range(0..4)];
    let lambda = rng.random_range(0.5..2.0);
    Case {
        model,
        batch: BatchPlan {
            inputs,
            classes: identities.iter().map(|&i| i as usize).collect(),
            identities,
            dp_mask,
            pairs,
            pic_anchors,
        },
        pair_op,
        lambda,
        dp_on,
    }
}

fn settings(case: &Case, cls: bool, tri: bool, gmn: bool, pic: bool) -> ObjectiveSettings {
    ObjectiveSettings {
        use_cls: cls,
        use_tri: tri,
        use_gmn: gmn,
        use_pic: pic,
        lambda: case.lambda,
        triplet_margin: 0.3,
        pair_op: case.pair_op,
        detach_pair_gradients: false,
    }
}

/// The five objectives checked: each loss alone, then the weighted total.
pub fn objective_variants(case: &Case) -> Vec<(&'static str, ObjectiveSettings)> {
    vec![
        ("l_cls", settings(case, true, false, false, false)),
        ("l_tri", settings(case, false, true, false, false)),
        ("l_gmn", settings(case, false, false, true, false)),
        ("l_pic", settings(case, false, false, false, true)),
        ("total", settings(case, true, true, true, true)),
    ]
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// True when every non-differentiable point is at least `KINK_CLEARANCE` away.
pub fn kink_free(case: &Case) -> bool {
    let enc = &case.model.encoder;
    let last = enc.layers.len() - 1;
    let mut x = case.batch.inputs.clone();
    for (l, layer) in enc.layers.iter().enumerate() {
        let mut z = layer.forward(&x).unwrap();
        if l < last {
            if z.data.iter().any(|v| v.abs() < KINK_CLEARANCE) {
                return false;
            }
            z.data.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        if l == enc.dp_site {
            if let Some(m) = &case.batch.dp_mask {
                z.data.iter_mut().zip(&m.data).for_each(|(v, s)| *v *= s);
            }
        }
        x = z;
    }
    let emb = x;
    let ids = &case.batch.identities;

    // triplet: unique hardest partners, hinge away from zero, no zero distances
    let mined = mine_batch_hard(&emb, ids).unwrap();
    for t in &mined {
        let a = t.anchor;
        if (0.3 + t.positive_distance - t.negative_distance).abs() < KINK_CLEARANCE {
            return false;
        }
        for b in 0..emb.rows {
            if b == a {
                continue;
            }
            let d = dist(emb.row(a), emb.row(b));
            if d < KINK_CLEARANCE {
                return false;
            }
            let same = ids[a] == ids[b];
            if same && b != t.positive && (d - t.positive_distance).abs() < KINK_CLEARANCE {
                return false;
            }
            if !same && b != t.negative && (d - t.negative_distance).abs() < KINK_CLEARANCE {
                return false;
            }
        }
    }

    // metric net hidden units and abs pair features
    let net = case.model.metric_net.as_ref().unwrap();
    let mut pe = emb.clone();
    if net.normalize_inputs {
        pe.l2_normalize_rows();
    }
    let emb = pe;
    let mut feats = Matrix::zeros(case.batch.pairs.len(), emb.cols);
    for (r, p) in case.batch.pairs.iter().enumerate() {
        let (ea, eb) = (emb.row(p.a), emb.row(p.b));
        if case.pair_op == PairOp::Abs && ea.iter().zip(eb).any(|(u, v)| (u - v).abs() < KINK_CLEARANCE) {
            return false;
        }
        feats.row_mut(r).copy_from_slice(&pair_feature(ea, eb, case.pair_op).unwrap());
    }
    let pre = net.layer1.forward(&feats).unwrap();
    if pre.data.iter().any(|v| v.abs() < KINK_CLEARANCE) {
        return false;
    }

    // PIC norms
    let plan = PicPlan::new(&case.batch.pic_anchors, ids);
    let v = plan.variants(&emb);
    for set in &v.positive {
        for i in 0..3 {
            for j in i + 1..3 {
                if dist(&set[i], &set[j]) < KINK_CLEARANCE {
                    return false;
                }
            }
        }
    }
    for set in &v.negative {
        for i in 0..4 {
            for j in i + 1..4 {
                if dist(&set[i], &set[j]) < KINK_CLEARANCE {
                    return false;
                }
            }
        }
    }
    true
}

/// `|a - n| / max(|a|, |n|, floor)`. The floor scales with the loss value
/// so that round-off in `(L(w + h) - L(w - h)) / 2h` on a vanishing gradient
/// is not counted as an error.
pub fn relative_error(analytic: f64, numeric: f64, loss: f64) -> f64 {
    let floor = 1e-6 * loss.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest relative error over every parameter of the model. The numeric
/// derivative is the Richardson extrapolation of central differences at
/// `FD_STEP` and `FD_STEP / 2`.
pub fn max_gradient_error(case: &Case, s: &ObjectiveSettings) -> f64 {
    let (losses, grads) = objective(&case.model, &case.batch, s).unwrap();
    let analytic = grads.flatten();
    let mut model = case.model.clone();
    let mut worst: f64 = 0.0;
    let mut idx = 0;
    let slices = model.params().iter().map(|p| p.len()).collect::<Vec<_>>();
    for (slice, len) in slices.iter().enumerate() {
        for k in 0..*len {
            let orig = model.params_mut()[slice][k];
            let mut central = |h: f64| {
                model.params_mut()[slice][k] = orig + h;
                let up = objective(&model, &case.batch, s).unwrap().0.total;
                model.params_mut()[slice][k] = orig - h;
                let down = objective(&model, &case.batch, s).unwrap().0.total;
                model.params_mut()[slice][k] = orig;
                (up - down) / (2.0 * h)
            };
            let coarse = central(FD_STEP);
            let fine = central(FD_STEP / 2.0);
            let numeric = (4.0 * fine - coarse) / 3.0;
            worst = worst.max(relative_error(analytic[idx], numeric, losses.total));
            idx += 1;
        }
    }
    worst
}

/// Seeds whose cases are kink-free, in ascending order.
pub fn kink_free_seeds(count: usize) -> Vec<u64> {
    (0..).filter(|&s| kink_free(&random_case(s))).take(count).collect()
}
