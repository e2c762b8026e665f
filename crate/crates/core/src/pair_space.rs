//! Sample-pair features and the sampling schemes that produce them.
//!
//! Sampling works on labels only and yields index plans; features are
//! materialized from embeddings afterwards. Because a plan does not depend on
//! embedding values, the same plan can be replayed for gradient checks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GmnError, Result};
use crate::linalg::Matrix;

/// How two instance embeddings combine into one pair feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairOp {
    /// `(x - y) ⊙ (x - y)`
    #[default]
    SquaredDiff,
    /// `|x - y|`
    Abs,
    /// `x ⊙ y`
    Mul,
    /// `x + y`
    Add,
}

impl PairOp {
    pub const ALL: [PairOp; 4] = [PairOp::SquaredDiff, PairOp::Abs, PairOp::Mul, PairOp::Add];

    pub fn as_str(self) -> &'static str {
        match self {
            PairOp::SquaredDiff => "squared_diff",
            PairOp::Abs => "abs",
            PairOp::Mul => "mul",
            PairOp::Add => "add",
        }
    }

    #[inline]
    pub fn combine(self, x: f64, y: f64) -> f64 {
        match self {
            PairOp::SquaredDiff => {
                let d = x - y;
                d * d
            }
            PairOp::Abs => (x - y).abs(),
            PairOp::Mul => x * y,
            PairOp::Add => x + y,
        }
    }

    /// Partial derivatives of `combine` with respect to `x` and `y`.
    /// `Abs` uses subgradient 0 at `x == y`.
    #[inline]
    pub fn partials(self, x: f64, y: f64) -> (f64, f64) {
        match self {
            PairOp::SquaredDiff => {
                let d = 2.0 * (x - y);
                (d, -d)
            }
            PairOp::Abs => {
                let s = if x > y {
                    1.0
                } else if x < y {
                    -1.0
                } else {
                    0.0
                };
                (s, -s)
            }
            PairOp::Mul => (y, x),
            PairOp::Add => (1.0, 1.0),
        }
    }
}

impl fmt::Display for PairOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PairOp {
    type Err = GmnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "squared_diff" | "squ" | "sq" => Ok(PairOp::SquaredDiff),
            "abs" => Ok(PairOp::Abs),
            "mul" => Ok(PairOp::Mul),
            "add" => Ok(PairOp::Add),
            other => Err(GmnError::config("pair_op", format!("unknown pair op `{other}`"))),
        }
    }
}

pub fn pair_feature(x: &[f64], y: &[f64], op: PairOp) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(GmnError::shape("pair_feature", x.len(), y.len()));
    }
    let mut out = vec![0.0; x.len()];
    pair_feature_into(x, y, op, &mut out);
    Ok(out)
}

#[inline]
pub fn pair_feature_into(x: &[f64], y: &[f64], op: PairOp, out: &mut [f64]) {
    for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
        *o = op.combine(*a, *b);
    }
}

/// Accumulates the gradients of one pair feature into `dx` and `dy`.
pub fn pair_feature_backward(x: &[f64], y: &[f64], op: PairOp, grad: &[f64], dx: &mut [f64], dy: &mut [f64]) {
    for k in 0..x.len() {
        let (px, py) = op.partials(x[k], y[k]);
        dx[k] += px * grad[k];
        dy[k] += py * grad[k];
    }
}

/// Which partners negative pairs may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeScheme {
    #[default]
    Random,
    InterDomain,
    IntraDomain,
}

impl NegativeScheme {
    pub const ALL: [NegativeScheme; 3] = [
        NegativeScheme::Random,
        NegativeScheme::InterDomain,
        NegativeScheme::IntraDomain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NegativeScheme::Random => "random",
            NegativeScheme::InterDomain => "inter_domain",
            NegativeScheme::IntraDomain => "intra_domain",
        }
    }
}

impl FromStr for NegativeScheme {
    type Err = GmnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(NegativeScheme::Random),
            "inter_domain" | "inter" => Ok(NegativeScheme::InterDomain),
            "intra_domain" | "intra" => Ok(NegativeScheme::IntraDomain),
            other => Err(GmnError::config("pair_scheme", format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSamplingScheme {
    pub negatives: NegativeScheme,
    pub negatives_per_positive: usize,
}

impl Default for PairSamplingScheme {
    fn default() -> Self {
        PairSamplingScheme {
            negatives: NegativeScheme::Random,
            negatives_per_positive: 1,
        }
    }
}

/// A batch of embeddings with the labels pair sampling needs.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub embeddings: Matrix,
    pub identities: Vec<u32>,
    pub domains: Vec<u32>,
    pub sample_ids: Vec<u64>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}

/// Two batch rows and whether they share an identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairIndex {
    pub a: usize,
    pub b: usize,
    pub positive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairFeature {
    pub vector: Vec<f64>,
    /// 1 for a positive pair, 0 for a negative pair.
    pub label: u8,
    pub pair_identity: (u32, u32),
    pub source_ids: (u64, u64),
}

/// All same-identity pairs, then `negatives_per_positive` sampled negatives per positive.
pub fn plan_pairs<R: Rng + ?Sized>(
    identities: &[u32],
    domains: &[u32],
    scheme: PairSamplingScheme,
    rng: &mut R,
) -> Result<Vec<PairIndex>> {
    let n = identities.len();
    if domains.len() != n {
        return Err(GmnError::shape("pair sampling labels", n, domains.len()));
    }
    if scheme.negatives_per_positive < 1 {
        return Err(GmnError::config("negatives_per_positive", "must be at least 1"));
    }
    let distinct_ids = identities.iter().collect::<std::collections::BTreeSet<_>>().len();
    if distinct_ids < 2 {
        return Err(GmnError::Sampling("batch must contain at least two identities".into()));
    }

    let mut plan = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if identities[a] == identities[b] {
                plan.push(PairIndex { a, b, positive: true });
            }
        }
    }

    let admissible = |a: usize, b: usize| -> bool {
        identities[a] != identities[b]
            && match scheme.negatives {
                NegativeScheme::Random => true,
                NegativeScheme::InterDomain => domains[a] != domains[b],
                NegativeScheme::IntraDomain => domains[a] == domains[b],
            }
    };
    let partners: Vec<Vec<usize>> = (0..n)
        .map(|a| (0..n).filter(|&b| admissible(a, b)).collect())
        .collect();
    let anchors: Vec<usize> = (0..n).filter(|&a| !partners[a].is_empty()).collect();
    if anchors.is_empty() {
        return Err(GmnError::Sampling(format!(
            "no admissible negative pair under the {} scheme",
            scheme.negatives.as_str()
        )));
    }

    let num_negatives = plan.len() * scheme.negatives_per_positive;
    for _ in 0..num_negatives {
        let a = anchors[rng.random_range(0..anchors.len())];
        let b = partners[a][rng.random_range(0..partners[a].len())];
        plan.push(PairIndex { a, b, positive: false });
    }
    Ok(plan)
}

pub fn materialize_pairs(batch: &LabeledBatch, plan: &[PairIndex], op: PairOp) -> Vec<PairFeature> {
    plan.iter()
        .map(|p| {
            let mut vector = vec![0.0; batch.embeddings.cols];
            pair_feature_into(batch.embeddings.row(p.a), batch.embeddings.row(p.b), op, &mut vector);
            PairFeature {
                vector,
                label: p.positive as u8,
                pair_identity: (batch.identities[p.a], batch.identities[p.b]),
                source_ids: (batch.sample_ids[p.a], batch.sample_ids[p.b]),
            }
        })
        .collect()
}

pub fn sample_pairs<R: Rng + ?Sized>(
    batch: &LabeledBatch,
    scheme: PairSamplingScheme,
    op: PairOp,
    rng: &mut R,
) -> Result<Vec<PairFeature>> {
    let plan = plan_pairs(&batch.identities, &batch.domains, scheme, rng)?;
    Ok(materialize_pairs(batch, &plan, op))
}

/// Per-identity mean of the batch rows.
pub fn identity_centroids(batch: &LabeledBatch) -> BTreeMap<u32, Vec<f64>> {
    let groups = group_rows(&batch.identities);
    groups
        .into_iter()
        .map(|(id, rows)| (id, mean_rows(&batch.embeddings, &rows)))
        .collect()
}

fn group_rows(identities: &[u32]) -> BTreeMap<u32, Vec<usize>> {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, id) in identities.iter().enumerate() {
        groups.entry(*id).or_default().push(i);
    }
    groups
}

fn mean_rows(m: &Matrix, rows: &[usize]) -> Vec<f64> {
    let mut c = vec![0.0; m.cols];
    for &r in rows {
        for (a, b) in c.iter_mut().zip(m.row(r)) {
            *a += b;
        }
    }
    let n = rows.len() as f64;
    c.iter_mut().for_each(|v| *v /= n);
    c
}

/// One anchor `p`, a same-identity partner `p_pos`, and a different-identity partner `q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PicAnchor {
    pub p: usize,
    pub p_pos: usize,
    pub q: usize,
}

/// Every row whose identity occurs at least twice becomes an anchor.
pub fn plan_pic_anchors<R: Rng + ?Sized>(identities: &[u32], rng: &mut R) -> Result<Vec<PicAnchor>> {
    let groups = group_rows(identities);
    if groups.len() < 2 {
        return Err(GmnError::Sampling("PIC needs at least two identities in the batch".into()));
    }
    if groups.values().all(|rows| rows.len() < 2) {
        return Err(GmnError::Sampling(
            "PIC needs an identity with at least two samples in the batch".into(),
        ));
    }
    let n = identities.len();
    let mut anchors = Vec::new();
    for p in 0..n {
        let same = &groups[&identities[p]];
        if same.len() < 2 {
            continue;
        }
        let pick = rng.random_range(0..same.len() - 1);
        let p_pos = same.iter().copied().filter(|&i| i != p).nth(pick).expect("partner exists");
        let others = n - same.len();
        let pick = rng.random_range(0..others);
        let q = (0..n)
            .filter(|&i| identities[i] != identities[p])
            .nth(pick)
            .expect("negative exists");
        anchors.push(PicAnchor { p, p_pos, q });
    }
    Ok(anchors)
}

/// The positive triples and negative quadruples of squared-difference variants.
#[derive(Debug, Clone, PartialEq)]
pub struct PicVariants {
    pub positive: Vec<[Vec<f64>; 3]>,
    pub negative: Vec<[Vec<f64>; 4]>,
}

/// Endpoints of one variant: a batch row or an identity centroid.
#[derive(Debug, Clone, Copy)]
enum Endpoint {
    Row(usize),
    Centroid(u32),
}

fn positive_endpoints(a: &PicAnchor, ids: &[u32]) -> [(Endpoint, Endpoint); 3] {
    use Endpoint::*;
    let cp = Centroid(ids[a.p]);
    [(Row(a.p), Row(a.p_pos)), (Row(a.p), cp), (cp, Row(a.p_pos))]
}

fn negative_endpoints(a: &PicAnchor, ids: &[u32]) -> [(Endpoint, Endpoint); 4] {
    use Endpoint::*;
    let (cp, cq) = (Centroid(ids[a.p]), Centroid(ids[a.q]));
    [
        (Row(a.p), Row(a.q)),
        (Row(a.p), cq),
        (cp, Row(a.q)),
        (cp, cq),
    ]
}

/// Builds the variant vectors for a fixed anchor plan, with batch-local centroids.
pub struct PicPlan<'a> {
    anchors: &'a [PicAnchor],
    identities: &'a [u32],
    groups: BTreeMap<u32, Vec<usize>>,
}

impl<'a> PicPlan<'a> {
    pub fn new(anchors: &'a [PicAnchor], identities: &'a [u32]) -> Self {
        PicPlan {
            anchors,
            identities,
            groups: group_rows(identities),
        }
    }

    fn centroids(&self, emb: &Matrix) -> BTreeMap<u32, Vec<f64>> {
        self.groups
            .iter()
            .map(|(id, rows)| (*id, mean_rows(emb, rows)))
            .collect()
    }

    pub fn variants(&self, emb: &Matrix) -> PicVariants {
        let centroids = self.centroids(emb);
        let resolve = |e: Endpoint| -> &[f64] {
            match e {
                Endpoint::Row(i) => emb.row(i),
                Endpoint::Centroid(id) => &centroids[&id],
            }
        };
        let build = |(u, v): (Endpoint, Endpoint)| {
            let mut out = vec![0.0; emb.cols];
            pair_feature_into(resolve(u), resolve(v), PairOp::SquaredDiff, &mut out);
            out
        };
        PicVariants {
            positive: self
                .anchors
                .iter()
                .map(|a| positive_endpoints(a, self.identities).map(build))
                .collect(),
            negative: self
                .anchors
                .iter()
                .map(|a| negative_endpoints(a, self.identities).map(build))
                .collect(),
        }
    }

    /// Chains variant gradients back to the embedding rows (centroid gradients
    /// are spread evenly over each identity's rows).
    pub fn backward(&self, emb: &Matrix, grads: &PicVariants) -> Matrix {
        let centroids = self.centroids(emb);
        let mut d_emb = Matrix::zeros(emb.rows, emb.cols);
        let mut d_centroid: BTreeMap<u32, Vec<f64>> =
            self.groups.keys().map(|id| (*id, vec![0.0; emb.cols])).collect();
        let d = emb.cols;
        let resolve = |e: Endpoint| -> &[f64] {
            match e {
                Endpoint::Row(i) => emb.row(i),
                Endpoint::Centroid(id) => &centroids[&id],
            }
        };
        let mut scatter = |(u, v): (Endpoint, Endpoint), g: &[f64]| {
            let (mut du, mut dv) = (vec![0.0; d], vec![0.0; d]);
            pair_feature_backward(resolve(u), resolve(v), PairOp::SquaredDiff, g, &mut du, &mut dv);
            for (e, de) in [(u, du), (v, dv)] {
                let target = match e {
                    Endpoint::Row(i) => d_emb.row_mut(i),
                    Endpoint::Centroid(id) => d_centroid.get_mut(&id).expect("known identity").as_mut_slice(),
                };
                for (t, s) in target.iter_mut().zip(&de) {
                    *t += s;
                }
            }
        };
        for (a, (gp, gn)) in self.anchors.iter().zip(grads.positive.iter().zip(&grads.negative)) {
            for (ends, g) in positive_endpoints(a, self.identities).into_iter().zip(gp) {
                scatter(ends, g);
            }
            for (ends, g) in negative_endpoints(a, self.identities).into_iter().zip(gn) {
                scatter(ends, g);
            }
        }
        for (id, rows) in &self.groups {
            let dc = &d_centroid[id];
            let share = 1.0 / rows.len() as f64;
            for &r in rows {
                for (t, s) in d_emb.row_mut(r).iter_mut().zip(dc) {
                    *t += s * share;
                }
            }
        }
        d_emb
    }
}

/// Samples anchors and returns their variant vectors.
pub fn pic_pair_variants<R: Rng + ?Sized>(batch: &LabeledBatch, rng: &mut R) -> Result<(Vec<PicAnchor>, PicVariants)> {
    let anchors = plan_pic_anchors(&batch.identities, rng)?;
    let variants = PicPlan::new(&anchors, &batch.identities).variants(&batch.embeddings);
    Ok((anchors, variants))
}
