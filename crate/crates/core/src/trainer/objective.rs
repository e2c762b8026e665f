//! The full training objective for one batch with frozen randomness.
//!
//! Everything random (DP masks, pair plan, PIC anchors) is an input, so the
//! objective is a deterministic function of the parameters.

use crate::encoder::{encoder_backward, encoder_forward_with_mask};
use crate::error::{GmnError, Result};
use crate::linalg::{l2_normalize_backward, Matrix};
use crate::losses::{cross_entropy, gmn_loss, pic_loss, total_loss, triplet_loss_batch_hard, LossBreakdown, LossComponents};
use crate::metric_net::{mnet_backward, mnet_forward};
use crate::model::{GmnModel, ModelGrads};
use crate::pair_space::{pair_feature_backward, pair_feature_into, PairIndex, PairOp, PicAnchor, PicPlan};

/// Which loss terms take part, and how.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSettings {
    pub use_cls: bool,
    pub use_tri: bool,
    pub use_gmn: bool,
    pub use_pic: bool,
    pub lambda: f64,
    pub triplet_margin: f64,
    pub pair_op: PairOp,
    /// Stop the pair loss from reaching the encoder.
    pub detach_pair_gradients: bool,
}

impl Default for ObjectiveSettings {
    fn default() -> Self {
        ObjectiveSettings {
            use_cls: true,
            use_tri: true,
            use_gmn: true,
            use_pic: true,
            lambda: 1.0,
            triplet_margin: crate::losses::DEFAULT_TRIPLET_MARGIN,
            pair_op: PairOp::SquaredDiff,
            detach_pair_gradients: false,
        }
    }
}

/// One training batch with its frozen random choices.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub inputs: Matrix,
    pub identities: Vec<u32>,
    /// Classifier index of each row.
    pub classes: Vec<usize>,
    pub dp_mask: Option<Matrix>,
    pub pairs: Vec<PairIndex>,
    pub pic_anchors: Vec<PicAnchor>,
}

pub fn objective(model: &GmnModel, batch: &BatchPlan, settings: &ObjectiveSettings) -> Result<(LossBreakdown, ModelGrads)> {
    let out = encoder_forward_with_mask(&model.encoder, &batch.inputs, batch.dp_mask.clone())?;
    let emb = &out.embeddings;
    let mut d_emb = Matrix::zeros(emb.rows, emb.cols);
    let mut grads = model.zero_grads();
    let mut parts = LossComponents::default();

    let d_logits = if settings.use_cls {
        let (loss, g) = cross_entropy(&out.logits, &batch.classes)?;
        parts.l_cls = loss;
        Some(g)
    } else {
        None
    };

    if settings.use_tri {
        let (loss, g) = triplet_loss_batch_hard(emb, &batch.identities, settings.triplet_margin)?;
        parts.l_tri = loss;
        add_into(&mut d_emb, &g);
    }

    // pair-space terms see the normalized embeddings when the metric net normalizes
    let normalized = match &model.metric_net {
        Some(net) if net.normalize_inputs && (settings.use_gmn || settings.use_pic) => {
            let mut m = emb.clone();
            let norms = m.l2_normalize_rows_with_norms();
            Some((m, norms))
        }
        _ => None,
    };
    let pe = normalized.as_ref().map_or(emb, |(m, _)| m);
    let mut d_pe = Matrix::zeros(emb.rows, emb.cols);

    if settings.use_gmn {
        let net = model
            .metric_net
            .as_ref()
            .ok_or_else(|| GmnError::State("pair loss requested but the model has no metric network".into()))?;
        let d = pe.cols;
        let mut features = Matrix::zeros(batch.pairs.len(), d);
        for (r, p) in batch.pairs.iter().enumerate() {
            pair_feature_into(pe.row(p.a), pe.row(p.b), settings.pair_op, features.row_mut(r));
        }
        let labels: Vec<u8> = batch.pairs.iter().map(|p| p.positive as u8).collect();
        let (logits, cache) = mnet_forward(net, &features)?;
        let (loss, d_z) = gmn_loss(&logits, &labels)?;
        parts.l_gmn = loss;
        let (g_net, d_features) = mnet_backward(net, &cache, &d_z)?;
        grads.metric_net = Some(g_net);
        if !settings.detach_pair_gradients {
            let (mut da, mut db) = (vec![0.0; d], vec![0.0; d]);
            for (r, p) in batch.pairs.iter().enumerate() {
                da.iter_mut().for_each(|v| *v = 0.0);
                db.iter_mut().for_each(|v| *v = 0.0);
                pair_feature_backward(pe.row(p.a), pe.row(p.b), settings.pair_op, d_features.row(r), &mut da, &mut db);
                for (t, s) in d_pe.row_mut(p.a).iter_mut().zip(&da) {
                    *t += s;
                }
                for (t, s) in d_pe.row_mut(p.b).iter_mut().zip(&db) {
                    *t += s;
                }
            }
        }
    }

    if settings.use_pic {
        let plan = PicPlan::new(&batch.pic_anchors, &batch.identities);
        let variants = plan.variants(pe);
        let loss = pic_loss(&variants)?;
        parts.l_pic_pos = loss.positive;
        parts.l_pic_neg = loss.negative;
        if settings.lambda != 0.0 {
            let mut g = plan.backward(pe, &loss.grads);
            g.data.iter_mut().for_each(|v| *v *= settings.lambda);
            add_into(&mut d_pe, &g);
        }
    }

    match &normalized {
        Some((m, norms)) => add_into(&mut d_emb, &l2_normalize_backward(m, norms, &d_pe)),
        None => add_into(&mut d_emb, &d_pe),
    }

    let breakdown = total_loss(parts, if settings.use_pic { settings.lambda } else { 0.0 })?;
    let (g_enc, _) = encoder_backward(&model.encoder, &out.cache, &d_emb, d_logits.as_ref())?;
    grads.encoder = g_enc;
    Ok((breakdown, grads))
}

fn add_into(acc: &mut Matrix, g: &Matrix) {
    acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b);
}
