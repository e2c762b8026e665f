//! Retrieval evaluation (mAP, CMC), timing, and the domain-gap diagnostic.
//!
//! AP for one probe is the mean of precision@k over the ranks k of its
//! positives. Gallery entries are ranked by descending similarity with ties
//! kept in gallery order.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, Dataset, Role, SampleRecord, SyntheticSpec};
use crate::error::{GmnError, Result};
use crate::linalg::{dot, squared_distance, Dense, Matrix};
use crate::losses::cross_entropy;
use crate::metric_net::{similarity_matrix, MetricNetParams};
use crate::model::GmnModel;
use crate::pair_space::{pair_feature_into, PairOp};
use crate::rng::stream;
use crate::rng::StreamId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Negative Euclidean distance between embeddings.
    FeatureEuclidean,
    FeatureCosine,
    /// Metric-network positive probability of the pair feature.
    Mnet,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::FeatureEuclidean, Protocol::FeatureCosine, Protocol::Mnet];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::FeatureEuclidean => "feature_euclidean",
            Protocol::FeatureCosine => "feature_cosine",
            Protocol::Mnet => "mnet",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = GmnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "feature_euclidean" | "euclidean" => Ok(Protocol::FeatureEuclidean),
            "feature_cosine" | "cosine" => Ok(Protocol::FeatureCosine),
            "mnet" => Ok(Protocol::Mnet),
            other => Err(GmnError::config("protocol", format!("unknown protocol `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub pair_op: PairOp,
    pub tile_size: usize,
    /// Drop same-identity, same-camera gallery entries from each probe's ranking.
    pub cross_camera_filter: bool,
    pub ranks: Vec<usize>,
    /// L2-normalize embeddings before the feature protocols.
    pub normalize_features: bool,
    /// Run similarity and ranking on one thread.
    pub single_thread: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            protocol: Protocol::FeatureEuclidean,
            pair_op: PairOp::SquaredDiff,
            tile_size: 256,
            cross_camera_filter: true,
            ranks: vec![1, 5, 10],
            normalize_features: false,
            single_thread: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, gallery_size: usize) -> Result<()> {
        if self.tile_size < 1 {
            return Err(GmnError::config("tile_size", "must be at least 1"));
        }
        if self.ranks.is_empty() || self.ranks[0] < 1 {
            return Err(GmnError::config("ranks", "need at least one rank, all >= 1"));
        }
        if self.ranks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GmnError::config("ranks", "must be strictly ascending"));
        }
        if self.ranks[self.ranks.len() - 1] > gallery_size {
            return Err(GmnError::config(
                "ranks",
                format!("largest rank exceeds the gallery size {gallery_size}"),
            ));
        }
        Ok(())
    }

    pub fn with_protocol(&self, protocol: Protocol) -> Self {
        EvalConfig {
            protocol,
            ..self.clone()
        }
    }
}

/// Identity and camera of each row of a similarity matrix side.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RetrievalLabels {
    pub identities: Vec<u32>,
    pub cameras: Vec<u32>,
}

impl RetrievalLabels {
    pub fn from_dataset(ds: &Dataset) -> Self {
        RetrievalLabels {
            identities: ds.records().iter().map(|r| r.identity).collect(),
            cameras: ds.records().iter().map(|r| r.camera).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}

/// mAP and CMC from one similarity matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub map: f64,
    /// `(rank, fraction of valid probes with a positive at or above it)`
    pub cmc: Vec<(usize, f64)>,
    pub num_valid_probes: usize,
    pub num_skipped_probes: usize,
}

impl RankingMetrics {
    pub fn cmc_at(&self, rank: usize) -> Option<f64> {
        self.cmc.iter().find(|(r, _)| *r == rank).map(|(_, v)| *v)
    }
}

/// Ranks a single probe row. Returns `(AP, rank of first positive)` or `None`
/// when no positive survives the filter.
pub fn rank_probe(
    scores: &[f64],
    probe_identity: u32,
    probe_camera: u32,
    gallery: &RetrievalLabels,
    cross_camera_filter: bool,
) -> Option<(f64, usize)> {
    let mut order: Vec<u32> = (0..scores.len() as u32)
        .filter(|&j| {
            let j = j as usize;
            !(cross_camera_filter && gallery.identities[j] == probe_identity && gallery.cameras[j] == probe_camera)
        })
        .collect();
    order.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]));
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first = None;
    for (pos, &j) in order.iter().enumerate() {
        if gallery.identities[j as usize] == probe_identity {
            hits += 1;
            precision_sum += hits as f64 / (pos + 1) as f64;
            first.get_or_insert(pos + 1);
        }
    }
    first.map(|f| (precision_sum / hits as f64, f))
}

/// Metrics for an arbitrary similarity matrix (rows = probes, columns = gallery).
pub fn evaluate_similarity(
    s: &Matrix,
    probe: &RetrievalLabels,
    gallery: &RetrievalLabels,
    cross_camera_filter: bool,
    ranks: &[usize],
) -> Result<RankingMetrics> {
    if s.rows != probe.len() {
        return Err(GmnError::shape("similarity rows", probe.len(), s.rows));
    }
    if s.cols != gallery.len() {
        return Err(GmnError::shape("similarity columns", gallery.len(), s.cols));
    }
    if probe.cameras.len() != probe.len() || gallery.cameras.len() != gallery.len() {
        return Err(GmnError::Eval("camera and identity label counts differ".into()));
    }
    if s.data.iter().any(|v| v.is_nan()) {
        return Err(GmnError::Numeric("similarity matrix".into()));
    }
    let per_probe: Vec<Option<(f64, usize)>> = (0..s.rows)
        .into_par_iter()
        .map(|i| rank_probe(s.row(i), probe.identities[i], probe.cameras[i], gallery, cross_camera_filter))
        .collect();
    let valid: Vec<(f64, usize)> = per_probe.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(GmnError::Eval("no probe has a valid positive in the gallery".into()));
    }
    let n = valid.len() as f64;
    let map = valid.iter().map(|(ap, _)| ap).sum::<f64>() / n;
    let cmc = ranks
        .iter()
        .map(|&r| (r, valid.iter().filter(|(_, f)| *f <= r).count() as f64 / n))
        .collect();
    Ok(RankingMetrics {
        map,
        cmc,
        num_valid_probes: valid.len(),
        num_skipped_probes: per_probe.len() - valid.len(),
    })
}

/// Similarity between every probe and gallery embedding under a feature protocol.
pub fn feature_similarity(probe: &Matrix, gallery: &Matrix, protocol: Protocol) -> Result<Matrix> {
    if probe.cols != gallery.cols {
        return Err(GmnError::shape("embedding dimension", probe.cols, gallery.cols));
    }
    let n_g = gallery.rows;
    let gallery_norms: Vec<f64> = gallery.rows_iter().map(|g| dot(g, g).sqrt()).collect();
    let mut out = Matrix::zeros(probe.rows, n_g);
    out.data
        .par_chunks_mut(n_g.max(1))
        .enumerate()
        .take(probe.rows)
        .try_for_each(|(i, row)| {
            let x = probe.row(i);
            match protocol {
                Protocol::FeatureEuclidean => {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = -squared_distance(x, gallery.row(j)).sqrt();
                    }
                }
                Protocol::FeatureCosine => {
                    let nx = dot(x, x).sqrt();
                    for (j, v) in row.iter_mut().enumerate() {
                        let denom = nx * gallery_norms[j];
                        *v = if denom > 0.0 { dot(x, gallery.row(j)) / denom } else { 0.0 };
                    }
                }
                Protocol::Mnet => {
                    return Err(GmnError::config("protocol", "mnet is not a feature protocol"));
                }
            }
            Ok(())
        })?;
    Ok(out)
}

/// Builds the similarity matrix for `config.protocol` from embeddings.
pub fn build_similarity(
    probe: &Matrix,
    gallery: &Matrix,
    metric_net: Option<&MetricNetParams>,
    config: &EvalConfig,
) -> Result<Matrix> {
    match config.protocol {
        Protocol::Mnet => {
            let net = metric_net.ok_or_else(|| {
                GmnError::config("protocol", "mnet evaluation needs a model with a metric network")
            })?;
            similarity_matrix(net, probe, gallery, config.pair_op, config.tile_size)
        }
        p if config.normalize_features => {
            let (mut a, mut b) = (probe.clone(), gallery.clone());
            a.l2_normalize_rows();
            b.l2_normalize_rows();
            feature_similarity(&a, &b, p)
        }
        p => feature_similarity(probe, gallery, p),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub map: f64,
    pub cmc: Vec<(usize, f64)>,
    pub num_valid_probes: usize,
    pub num_skipped_probes: usize,
    pub wall_seconds_similarity: f64,
    pub wall_seconds_ranking: f64,
}

impl EvalReport {
    pub fn cmc_at(&self, rank: usize) -> Option<f64> {
        self.cmc.iter().find(|(r, _)| *r == rank).map(|(_, v)| *v)
    }

    pub fn csv_header(ranks: &[usize]) -> String {
        let mut h = String::from("protocol,map");
        for r in ranks {
            h.push_str(&format!(",r{r}"));
        }
        h.push_str(",num_valid_probes,num_skipped_probes,wall_seconds_similarity,wall_seconds_ranking");
        h
    }

    pub fn csv_row(&self) -> String {
        let mut row = format!("{},{:?}", self.protocol, self.map);
        for (_, v) in &self.cmc {
            row.push_str(&format!(",{v:?}"));
        }
        row.push_str(&format!(
            ",{},{},{:.6},{:.6}",
            self.num_valid_probes, self.num_skipped_probes, self.wall_seconds_similarity, self.wall_seconds_ranking
        ));
        row
    }
}

/// Writes `<stem>.csv` and `<stem>.json` holding one row per report.
pub fn write_eval_reports(reports: &[EvalReport], dir: &Path, stem: &str) -> Result<()> {
    let ranks: Vec<usize> = reports.first().map(|r| r.cmc.iter().map(|c| c.0).collect()).unwrap_or_default();
    let mut csv = EvalReport::csv_header(&ranks);
    csv.push('\n');
    for r in reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    let csv_path = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv_path, csv).map_err(|e| GmnError::io(&csv_path, e))?;
    let json_path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(reports).expect("reports serialize");
    std::fs::write(&json_path, json).map_err(|e| GmnError::io(&json_path, e))
}

/// Side-by-side text table, one row per report.
pub fn format_eval_table(reports: &[EvalReport]) -> String {
    let ranks: Vec<usize> = reports.first().map(|r| r.cmc.iter().map(|c| c.0).collect()).unwrap_or_default();
    let mut out = format!("{:<18} {:>7}", "protocol", "mAP");
    for r in &ranks {
        out.push_str(&format!(" {:>7}", format!("R{r}")));
    }
    out.push('\n');
    for rep in reports {
        out.push_str(&format!("{:<18} {:>7.2}", rep.protocol.as_str(), 100.0 * rep.map));
        for (_, v) in &rep.cmc {
            out.push_str(&format!(" {:>7.2}", 100.0 * v));
        }
        out.push('\n');
    }
    out
}

fn maybe_single_thread<T: Send>(single: bool, f: impl FnOnce() -> T + Send) -> Result<T> {
    if single {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| GmnError::State(format!("thread pool: {e}")))?;
        Ok(pool.install(f))
    } else {
        Ok(f())
    }
}

/// Evaluates precomputed embeddings.
pub fn evaluate_embeddings(
    probe_emb: &Matrix,
    probe: &RetrievalLabels,
    gallery_emb: &Matrix,
    gallery: &RetrievalLabels,
    metric_net: Option<&MetricNetParams>,
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate(gallery.len())?;
    if probe_emb.rows != probe.len() {
        return Err(GmnError::shape("probe embeddings", probe.len(), probe_emb.rows));
    }
    if gallery_emb.rows != gallery.len() {
        return Err(GmnError::shape("gallery embeddings", gallery.len(), gallery_emb.rows));
    }
    maybe_single_thread(config.single_thread, || {
        let t0 = Instant::now();
        let s = build_similarity(probe_emb, gallery_emb, metric_net, config)?;
        let t1 = Instant::now();
        let m = evaluate_similarity(&s, probe, gallery, config.cross_camera_filter, &config.ranks)?;
        let t2 = Instant::now();
        Ok(EvalReport {
            protocol: config.protocol,
            map: m.map,
            cmc: m.cmc,
            num_valid_probes: m.num_valid_probes,
            num_skipped_probes: m.num_skipped_probes,
            wall_seconds_similarity: (t1 - t0).as_secs_f64(),
            wall_seconds_ranking: (t2 - t1).as_secs_f64(),
        })
    })?
}

/// Embeds both sets with the model (no perturbation) and evaluates.
pub fn evaluate(probe: &Dataset, gallery: &Dataset, model: &GmnModel, config: &EvalConfig) -> Result<EvalReport> {
    let pe = model.embed_dataset(probe)?;
    let ge = model.embed_dataset(gallery)?;
    evaluate_embeddings(
        &pe,
        &RetrievalLabels::from_dataset(probe),
        &ge,
        &RetrievalLabels::from_dataset(gallery),
        model.metric_net.as_ref(),
        config,
    )
}

/// Protocols a model supports: the feature protocol always, mnet when present.
pub fn default_protocols(model: &GmnModel) -> Vec<Protocol> {
    let mut p = vec![Protocol::FeatureEuclidean];
    if model.metric_net.is_some() {
        p.push(Protocol::Mnet);
    }
    p
}

/// Replaces each record's embedding with the model's output.
pub fn embedded_dataset(ds: &Dataset, model: &GmnModel) -> Result<Dataset> {
    let emb = model.embed_dataset(ds)?;
    let records = ds
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| SampleRecord {
            embedding: emb.row(i).to_vec(),
            ..r.clone()
        })
        .collect();
    Dataset::new(records, emb.cols, ds.role())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainGapConfig {
    pub pairs_per_domain: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for DomainGapConfig {
    fn default() -> Self {
        DomainGapConfig {
            pairs_per_domain: 200,
            iterations: 200,
            learning_rate: 0.1,
            holdout_fraction: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainGapReport {
    /// Held-out accuracy on L2-normalized instance features.
    pub instance_space_accuracy: f64,
    /// Held-out accuracy on L2-normalized squared-difference pair features.
    pub pair_space_accuracy: f64,
    pub instance_train_accuracy: f64,
    pub pair_train_accuracy: f64,
    pub chance_level: f64,
    pub num_domains: usize,
}

impl DomainGapReport {
    pub fn csv_header() -> &'static str {
        "num_domains,chance_level,instance_space_accuracy,pair_space_accuracy,instance_train_accuracy,pair_train_accuracy"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?}",
            self.num_domains,
            self.chance_level,
            self.instance_space_accuracy,
            self.pair_space_accuracy,
            self.instance_train_accuracy,
            self.pair_train_accuracy
        )
    }
}

/// Softmax regression by full-batch gradient descent from zero weights.
/// Returns `(train accuracy, held-out accuracy)`.
fn linear_probe(
    features: &Matrix,
    labels: &[usize],
    classes: usize,
    train: &[usize],
    test: &[usize],
    cfg: &DomainGapConfig,
) -> Result<(f64, f64)> {
    let take = |rows: &[usize]| {
        let mut m = Matrix::zeros(rows.len(), features.cols);
        for (r, &i) in rows.iter().enumerate() {
            m.row_mut(r).copy_from_slice(features.row(i));
        }
        (m, rows.iter().map(|&i| labels[i]).collect::<Vec<_>>())
    };
    let (x_train, y_train) = take(train);
    let (x_test, y_test) = take(test);
    let mut layer = Dense::zeros(features.cols, classes);
    for _ in 0..cfg.iterations {
        let logits = layer.forward(&x_train)?;
        let (_, d_logits) = cross_entropy(&logits, &y_train)?;
        let mut grad = Dense::zeros(features.cols, classes);
        layer.backward(&x_train, &d_logits, &mut grad);
        for (w, g) in layer.weights.iter_mut().zip(&grad.weights) {
            *w -= cfg.learning_rate * g;
        }
        for (b, g) in layer.bias.iter_mut().zip(&grad.bias) {
            *b -= cfg.learning_rate * g;
        }
    }
    let accuracy = |x: &Matrix, y: &[usize]| -> Result<f64> {
        let logits = layer.forward(x)?;
        let correct = logits
            .rows_iter()
            .zip(y)
            .filter(|(row, &label)| argmax(row) == label)
            .count();
        Ok(correct as f64 / y.len().max(1) as f64)
    };
    Ok((accuracy(&x_train, &y_train)?, accuracy(&x_test, &y_test)?))
}

/// Index of the largest entry; the lowest index wins ties.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// How well a linear classifier separates domains in instance space versus
/// squared-difference pair space.
///
/// Identities of each domain are split into a training and a held-out part by
/// `holdout_fraction`, so the probe never sees a held-out identity. Each domain
/// contributes `pairs_per_domain` random within-domain pairs `(a, b)` with
/// `a != b`, both from the same part; the instance sample is `x_a`, the pair
/// sample is `(x_a - x_b)²`.
pub fn domain_gap_diagnostic(dataset: &Dataset, cfg: &DomainGapConfig) -> Result<DomainGapReport> {
    let domains = dataset.domains();
    if domains.len() < 2 {
        return Err(GmnError::Eval("domain-gap diagnostic needs at least two domains".into()));
    }
    if cfg.pairs_per_domain < 2 {
        return Err(GmnError::config("pairs_per_domain", "must be at least 2"));
    }
    if !(cfg.holdout_fraction > 0.0 && cfg.holdout_fraction < 1.0) {
        return Err(GmnError::config("holdout_fraction", "must lie in (0, 1)"));
    }
    let mut rng = stream(cfg.seed, StreamId::Pair);
    let d = dataset.d_in();
    let n = domains.len() * cfg.pairs_per_domain;
    let mut inst = Matrix::zeros(n, d);
    let mut pair = Matrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let records = dataset.records();
    let by_identity = dataset.indices_by_identity();
    let n_test_pairs = ((cfg.pairs_per_domain as f64 * cfg.holdout_fraction).round() as usize)
        .clamp(1, cfg.pairs_per_domain - 1);
    let mut row = 0;
    for (class, &domain) in domains.iter().enumerate() {
        let mut ids: Vec<u32> = by_identity
            .iter()
            .filter(|(_, rows)| records[rows[0]].domain == domain)
            .map(|(&id, _)| id)
            .collect();
        ids.sort_unstable();
        if ids.len() < 2 {
            return Err(GmnError::Eval(format!("domain {domain} has fewer than two identities")));
        }
        ids.shuffle(&mut rng);
        let n_test_ids = ((ids.len() as f64 * cfg.holdout_fraction).round() as usize).clamp(1, ids.len() - 1);
        let members = |part: &[u32]| -> Vec<usize> {
            let mut m: Vec<usize> = part.iter().flat_map(|id| by_identity[id].iter().copied()).collect();
            m.sort_unstable();
            m
        };
        let (test_ids, train_ids) = ids.split_at(n_test_ids);
        for (part, count, sink) in [
            (members(test_ids), n_test_pairs, &mut test),
            (members(train_ids), cfg.pairs_per_domain - n_test_pairs, &mut train),
        ] {
            if part.len() < 2 {
                return Err(GmnError::Eval(format!("domain {domain} has too few records to split")));
            }
            for _ in 0..count {
                let a = part[rng.random_range(0..part.len())];
                let mut b = part[rng.random_range(0..part.len() - 1)];
                if b == a {
                    b = part[part.len() - 1];
                }
                inst.row_mut(row).copy_from_slice(&records[a].embedding);
                pair_feature_into(&records[a].embedding, &records[b].embedding, PairOp::SquaredDiff, pair.row_mut(row));
                labels.push(class);
                sink.push(row);
                row += 1;
            }
        }
    }
    inst.l2_normalize_rows();
    pair.l2_normalize_rows();
    train.shuffle(&mut rng);
    let classes = domains.len();
    let (inst_train, inst_test) = linear_probe(&inst, &labels, classes, &train, &test, cfg)?;
    let (pair_train, pair_test) = linear_probe(&pair, &labels, classes, &train, &test, cfg)?;
    Ok(DomainGapReport {
        instance_space_accuracy: inst_test,
        pair_space_accuracy: pair_test,
        instance_train_accuracy: inst_train,
        pair_train_accuracy: pair_train,
        chance_level: 1.0 / classes as f64,
        num_domains: classes,
    })
}

/// Median wall times of one protocol over repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub protocol: Protocol,
    pub num_probe: usize,
    pub num_gallery: usize,
    pub similarity_seconds: f64,
    pub ranking_seconds: f64,
    pub report: EvalReport,
}

impl TimingRow {
    pub fn total_seconds(&self) -> f64 {
        self.similarity_seconds + self.ranking_seconds
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs every protocol `repeats` times on identical embeddings.
pub fn timing_compare(
    probe: &Dataset,
    gallery: &Dataset,
    model: &GmnModel,
    protocols: &[Protocol],
    repeats: usize,
    base: &EvalConfig,
) -> Result<Vec<TimingRow>> {
    let pe = model.embed_dataset(probe)?;
    let ge = model.embed_dataset(gallery)?;
    let pl = RetrievalLabels::from_dataset(probe);
    let gl = RetrievalLabels::from_dataset(gallery);
    let mut rows = Vec::new();
    for &protocol in protocols {
        let cfg = base.with_protocol(protocol);
        let mut sims = Vec::new();
        let mut ranks = Vec::new();
        let mut last = None;
        for _ in 0..repeats.max(1) {
            let rep = evaluate_embeddings(&pe, &pl, &ge, &gl, model.metric_net.as_ref(), &cfg)?;
            sims.push(rep.wall_seconds_similarity);
            ranks.push(rep.wall_seconds_ranking);
            last = Some(rep);
        }
        rows.push(TimingRow {
            protocol,
            num_probe: probe.len(),
            num_gallery: gallery.len(),
            similarity_seconds: median(sims),
            ranking_seconds: median(ranks),
            report: last.expect("at least one repeat"),
        });
    }
    Ok(rows)
}

pub fn format_timing_table(rows: &[TimingRow]) -> String {
    let mut out = format!(
        "{:<18} {:>7} {:>7} {:>14} {:>14} {:>14}\n",
        "protocol", "N_p", "N_g", "similarity_s", "ranking_s", "total_s"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<18} {:>7} {:>7} {:>14.6} {:>14.6} {:>14.6}\n",
            r.protocol.as_str(),
            r.num_probe,
            r.num_gallery,
            r.similarity_seconds,
            r.ranking_seconds,
            r.total_seconds()
        ));
    }
    out
}

/// Least-squares line `y = slope·x + intercept` and its R².
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, intercept, r2)
}

/// Probe and gallery sets for timing: `num_gallery / 8` identities with nine
/// records each; one record per identity is a probe candidate, the other
/// eight go to the gallery.
pub fn bench_datasets(num_probe: usize, num_gallery: usize, d_in: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let ids = num_gallery / 8;
    if ids < num_probe.max(2) || !num_gallery.is_multiple_of(8) {
        return Err(GmnError::config(
            "bench",
            "gallery size must be a multiple of 8 with at least 8 * num_probe entries",
        ));
    }
    let ds = generate_synthetic(&SyntheticSpec {
        num_domains: 1,
        identities_per_domain: ids,
        records_per_identity: 9,
        d_in,
        cameras_per_domain: 3,
        seed,
        ..SyntheticSpec::default()
    })?;
    let mut probe = Vec::new();
    let mut gallery = Vec::new();
    for (i, r) in ds.records().iter().enumerate() {
        if i % 9 == 0 {
            if probe.len() < num_probe {
                probe.push(r.clone());
            }
        } else {
            gallery.push(r.clone());
        }
    }
    Ok((Dataset::new(probe, d_in, Role::Probe)?, Dataset::new(gallery, d_in, Role::Gallery)?))
}

/// One gallery size of a scaling sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub num_gallery: usize,
    pub rows: Vec<TimingRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub points: Vec<ScalingPoint>,
    /// R² of the mnet similarity time against gallery size.
    pub mnet_similarity_r2: f64,
    /// Total mnet time over total feature time at the largest gallery.
    pub mnet_to_feature_total_ratio: f64,
    pub metric_to_encoder_params: f64,
}

/// Times feature and mnet evaluation across gallery sizes.
pub fn scaling_sweep(
    model: &GmnModel,
    num_probe: usize,
    gallery_sizes: &[usize],
    repeats: usize,
    base: &EvalConfig,
    seed: u64,
) -> Result<ScalingReport> {
    if model.metric_net.is_none() {
        return Err(GmnError::config("bench", "scaling sweep needs a metric network"));
    }
    let protocols = [Protocol::FeatureEuclidean, Protocol::Mnet];
    let mut points = Vec::new();
    for &n_g in gallery_sizes {
        let (p, g) = bench_datasets(num_probe, n_g, model.encoder.input_dim(), seed)?;
        points.push(ScalingPoint {
            num_gallery: n_g,
            rows: timing_compare(&p, &g, model, &protocols, repeats, base)?,
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.num_gallery as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.rows[1].similarity_seconds).collect();
    let (_, _, r2) = linear_fit(&xs, &ys);
    let last = points.last().ok_or_else(|| GmnError::config("bench", "no gallery sizes"))?;
    let ratio = last.rows[1].total_seconds() / last.rows[0].total_seconds();
    Ok(ScalingReport {
        points,
        mnet_similarity_r2: r2,
        mnet_to_feature_total_ratio: ratio,
        metric_to_encoder_params: model.summary().metric_to_encoder_ratio(),
    })
}

pub fn format_scaling_report(r: &ScalingReport) -> String {
    let mut out = String::new();
    for p in &r.points {
        out.push_str(&format_timing_table(&p.rows));
    }
    out.push_str(&format!("mnet similarity time vs N_g: R^2 = {:.4}\n", r.mnet_similarity_r2));
    out.push_str(&format!(
        "mnet / feature total time at largest N_g: {:.3}\n",
        r.mnet_to_feature_total_ratio
    ));
    out.push_str(&format!(
        "metric-net params / encoder params: {:.2}%\n",
        100.0 * r.metric_to_encoder_params
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(ids: &[u32], cams: &[u32]) -> RetrievalLabels {
        RetrievalLabels {
            identities: ids.to_vec(),
            cameras: cams.to_vec(),
        }
    }

    #[test]
    fn single_positive_at_rank_two() {
        let s = Matrix::from_rows(&[[0.9, 0.5, 0.1]]).unwrap();
        let m = evaluate_similarity(&s, &labels(&[1], &[0]), &labels(&[2, 1, 3], &[1, 1, 1]), true, &[1, 2, 3]).unwrap();
        assert_eq!(m.map, 0.5);
        assert_eq!(m.cmc_at(1), Some(0.0));
        assert_eq!(m.cmc_at(2), Some(1.0));
    }

    #[test]
    fn ties_follow_gallery_order() {
        let s = Matrix::from_rows(&[[0.5, 0.5]]).unwrap();
        let g = labels(&[2, 1], &[1, 1]);
        let m = evaluate_similarity(&s, &labels(&[1], &[0]), &g, true, &[1]).unwrap();
        assert_eq!(m.map, 0.5);
    }

    #[test]
    fn junk_filter_and_skips() {
        let s = Matrix::from_rows(&[[0.9, 0.1], [0.9, 0.1]]).unwrap();
        // probe 0 matches gallery 0 on the same camera: filtered, positive left is gallery 1
        let p = labels(&[1, 7], &[0, 0]);
        let g = labels(&[1, 1], &[0, 2]);
        let m = evaluate_similarity(&s, &p, &g, true, &[1]).unwrap();
        assert_eq!(m.num_valid_probes, 1);
        assert_eq!(m.num_skipped_probes, 1);
        assert_eq!(m.map, 1.0);
        let unfiltered = evaluate_similarity(&s, &p, &g, false, &[1]).unwrap();
        assert_eq!(unfiltered.map, 1.0);
        let none = evaluate_similarity(&s, &labels(&[8, 9], &[0, 0]), &g, true, &[1]);
        assert!(matches!(none, Err(GmnError::Eval(_))));
    }

    #[test]
    fn feature_protocols() {
        let p = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let g = Matrix::from_rows(&[[4.0, 4.0], [0.0, 2.0]]).unwrap();
        let e = feature_similarity(&p, &g, Protocol::FeatureEuclidean).unwrap();
        assert_eq!(e.data, vec![-5.0, -(5.0f64).sqrt()]);
        let c = feature_similarity(&p, &g, Protocol::FeatureCosine).unwrap();
        assert!((c.data[0] - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(c.data[1], 0.0);
    }

    #[test]
    fn rank_validation() {
        let cfg = EvalConfig::default();
        assert!(cfg.validate(10).is_ok());
        assert!(cfg.validate(9).is_err());
        let bad = EvalConfig {
            ranks: vec![5, 1],
            ..EvalConfig::default()
        };
        assert!(bad.validate(100).is_err());
    }

    #[test]
    fn fit_is_exact_on_a_line() {
        let (s, i, r2) = linear_fit(&[1.0, 2.0, 3.0, 4.0], &[3.0, 5.0, 7.0, 9.0]);
        assert!((s - 2.0).abs() < 1e-12 && (i - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bench_sets_have_requested_sizes() {
        let (p, g) = bench_datasets(10, 160, 4, 0).unwrap();
        assert_eq!(p.len(), 10);
        assert_eq!(g.len(), 160);
        assert!(bench_datasets(100, 160, 4, 0).is_err());
    }

    #[test]
    fn protocol_names_round_trip() {
        for p in Protocol::ALL {
            assert_eq!(p.as_str().parse::<Protocol>().unwrap(), p);
        }
    }
}
