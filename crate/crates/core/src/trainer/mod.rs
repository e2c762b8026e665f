//! Multi-domain PK batching and the epoch loop.
//!
//! DP switches on at `dp_activation_epoch` and stays on unless
//! `dp_end_epoch` is set. Three seeded streams (batch, pair, dropout) advance
//! independently, so ablations that toggle DP or the pair losses still see
//! the same batches.

mod checkpoint;
mod objective;
mod optim;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use objective::{objective, BatchPlan, ObjectiveSettings};
pub use optim::{Optimizer, OptimizerKind};

use crate::data::Dataset;
use crate::encoder::{dp_masks, DpConfig, DpMode, EncoderParams};
use crate::error::{GmnError, Result};
use crate::linalg::Matrix;
use crate::losses::{LossBreakdown, DEFAULT_TRIPLET_MARGIN};
use crate::metric_net::{default_hidden, MetricNetParams};
use crate::model::GmnModel;
use crate::pair_space::{plan_pairs, plan_pic_anchors, NegativeScheme, PairOp, PairSamplingScheme};
use crate::rng::{stream, StreamId};

/// Encoder and metric-net shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output widths of the encoder layers; the last is the embedding size.
    pub encoder_widths: Vec<usize>,
    /// Layer whose output DP perturbs (0-based).
    pub dp_site: usize,
    /// Metric-net hidden width; `round(d / 4)` when unset.
    pub mnet_hidden: Option<usize>,
    /// L2-normalize embeddings before they enter pair space.
    pub normalize_pair_inputs: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_widths: vec![64, 32],
            dp_site: 0,
            mnet_hidden: None,
            normalize_pair_inputs: true,
        }
    }
}

/// Ablation switches: metric network (A), perturbation (B), PIC loss (C).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_mnet: bool,
    pub use_dp: bool,
    pub use_pic: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

impl Ablation {
    pub const BASELINE: Ablation = Ablation {
        use_mnet: false,
        use_dp: false,
        use_pic: false,
    };
    pub const MNET: Ablation = Ablation {
        use_mnet: true,
        use_dp: false,
        use_pic: false,
    };
    pub const MNET_DP: Ablation = Ablation {
        use_mnet: true,
        use_dp: true,
        use_pic: false,
    };
    pub const FULL: Ablation = Ablation {
        use_mnet: true,
        use_dp: true,
        use_pic: true,
    };

    /// The four named presets in ablation order.
    pub fn presets() -> [(&'static str, Ablation); 4] {
        [
            ("baseline", Ablation::BASELINE),
            ("+A", Ablation::MNET),
            ("+A+B", Ablation::MNET_DP),
            ("+A+B+C", Ablation::FULL),
        ]
    }

    pub fn from_preset(name: &str) -> Result<Ablation> {
        Ablation::presets()
            .into_iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name) || (name == "full" && *n == "+A+B+C"))
            .map(|(_, a)| a)
            .ok_or_else(|| GmnError::config("preset", format!("unknown preset `{name}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub dp_activation_epoch: usize,
    /// DP is switched off again from this epoch on, when set.
    pub dp_end_epoch: Option<usize>,
    /// Identities per domain in one batch (P).
    pub identities_per_domain: usize,
    /// Samples per identity in one batch (K).
    pub samples_per_identity: usize,
    pub base_lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub lambda: f64,
    pub dp_rate: f64,
    pub dp_inverted_scaling: bool,
    pub pair_scheme: NegativeScheme,
    pub negatives_per_positive: usize,
    pub pair_op: PairOp,
    pub triplet_margin: f64,
    pub detach_pair_gradients: bool,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 120,
            dp_activation_epoch: 60,
            dp_end_epoch: None,
            identities_per_domain: 16,
            samples_per_identity: 4,
            base_lr: 3.5e-4,
            lr_decay_epochs: vec![40, 90],
            lr_decay_factor: 10.0,
            lambda: 1.0,
            dp_rate: 0.5,
            dp_inverted_scaling: true,
            pair_scheme: NegativeScheme::Random,
            negatives_per_positive: 1,
            pair_op: PairOp::SquaredDiff,
            triplet_margin: DEFAULT_TRIPLET_MARGIN,
            detach_pair_gradients: false,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(GmnError::config("epochs", "must be at least 1"));
        }
        if self.dp_activation_epoch > self.epochs {
            return Err(GmnError::config("dp_activation_epoch", "must not exceed epochs"));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GmnError::config("lr_decay_epochs", "must be strictly increasing"));
        }
        if self.lr_decay_epochs.iter().any(|&e| e >= self.epochs) {
            return Err(GmnError::config("lr_decay_epochs", "must be below epochs"));
        }
        if self.identities_per_domain < 2 {
            return Err(GmnError::config("identities_per_domain", "must be at least 2"));
        }
        if self.samples_per_identity < 2 {
            return Err(GmnError::config("samples_per_identity", "must be at least 2"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(GmnError::config("base_lr", "must be a finite non-negative number"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return Err(GmnError::config("lr_decay_factor", "must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(GmnError::config("lambda", "must be a finite non-negative number"));
        }
        if !(self.triplet_margin >= 0.0 && self.triplet_margin.is_finite()) {
            return Err(GmnError::config("triplet_margin", "must be a finite non-negative number"));
        }
        if self.negatives_per_positive < 1 {
            return Err(GmnError::config("negatives_per_positive", "must be at least 1"));
        }
        self.dp_config(true).validate()
    }

    /// `base_lr / factor^(number of decay epochs <= epoch)`, epochs counted from 1.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.base_lr / self.lr_decay_factor.powi(decays as i32)
    }

    pub fn dp_active_at(&self, epoch: usize, ablation: Ablation) -> bool {
        ablation.use_dp
            && epoch >= self.dp_activation_epoch
            && self.dp_end_epoch.is_none_or(|end| epoch < end)
    }

    pub fn dp_config(&self, active: bool) -> DpConfig {
        DpConfig {
            rate: self.dp_rate,
            active,
            mode: DpMode::ExactFraction,
            inverted_scaling: self.dp_inverted_scaling,
        }
    }

    pub fn pair_sampling(&self) -> PairSamplingScheme {
        PairSamplingScheme {
            negatives: self.pair_scheme,
            negatives_per_positive: self.negatives_per_positive,
        }
    }

    pub fn objective_settings(&self, ablation: Ablation) -> ObjectiveSettings {
        ObjectiveSettings {
            use_cls: true,
            use_tri: true,
            use_gmn: ablation.use_mnet,
            use_pic: ablation.use_pic,
            lambda: self.lambda,
            triplet_margin: self.triplet_margin,
            pair_op: self.pair_op,
            detach_pair_gradients: self.detach_pair_gradients,
        }
    }
}

/// Precomputed per-domain identity groups for PK sampling.
#[derive(Debug, Clone)]
pub struct PkSampler {
    /// domain → [(identity, record indices)] with identities ascending.
    domains: BTreeMap<u32, Vec<(u32, Vec<usize>)>>,
    p: usize,
    k: usize,
}

impl PkSampler {
    pub fn new(dataset: &Dataset, p: usize, k: usize) -> Result<Self> {
        if p == 0 || k == 0 {
            return Err(GmnError::config("pk", "P and K must be positive"));
        }
        let mut grouped: BTreeMap<u32, BTreeMap<u32, Vec<usize>>> = BTreeMap::new();
        for (i, r) in dataset.records().iter().enumerate() {
            grouped.entry(r.domain).or_default().entry(r.identity).or_default().push(i);
        }
        if grouped.is_empty() {
            return Err(GmnError::Sampling("empty training set".into()));
        }
        for (domain, ids) in &grouped {
            if ids.len() < p {
                return Err(GmnError::Sampling(format!(
                    "domain {domain} has {} identities, fewer than P = {p}",
                    ids.len()
                )));
            }
        }
        Ok(PkSampler {
            domains: grouped
                .into_iter()
                .map(|(d, ids)| (d, ids.into_iter().collect()))
                .collect(),
            p,
            k,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.domains.len() * self.p * self.k
    }

    /// Record indices: per domain (ascending), P identities without
    /// replacement, K samples each (with replacement only when an identity
    /// has fewer than K records).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.batch_size());
        for ids in self.domains.values() {
            for pick in index::sample(rng, ids.len(), self.p) {
                let records = &ids[pick].1;
                if records.len() >= self.k {
                    batch.extend(index::sample(rng, records.len(), self.k).into_iter().map(|j| records[j]));
                } else {
                    batch.extend((0..self.k).map(|_| records[rng.random_range(0..records.len())]));
                }
            }
        }
        batch
    }
}

pub fn pk_batch<R: Rng + ?Sized>(dataset: &Dataset, p: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    Ok(PkSampler::new(dataset, p, k)?.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
}

/// Per-epoch log line (includes wall time, which never enters a checkpoint).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub record: EpochRecord,
    pub dp_active: bool,
    pub wall_seconds: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,lr,l_cls,l_tri,l_gmn,l_pic_pos,l_pic_neg,total,wall_seconds";

    pub fn csv_row(&self) -> String {
        let r = &self.record;
        let l = &r.losses;
        format!(
            "{},{:e},{},{},{},{},{},{},{:.6}",
            r.epoch, r.lr, l.l_cls, l.l_tri, l.l_gmn, l.l_pic_pos, l.l_pic_neg, l.total, self.wall_seconds
        )
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub iteration: u64,
    pub model: GmnModel,
    pub optimizer: Optimizer,
    pub batch_rng: ChaCha8Rng,
    pub pair_rng: ChaCha8Rng,
    pub dp_rng: ChaCha8Rng,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    /// Fresh state; parameters come from the init stream in the order encoder,
    /// classifier, metric net, so presets with and without the metric net share
    /// encoder weights.
    pub fn init(model_cfg: &ModelConfig, config: &TrainConfig, ablation: Ablation, train_set: &Dataset) -> Result<Self> {
        if model_cfg.encoder_widths.is_empty() {
            return Err(GmnError::config("encoder_widths", "need at least one layer"));
        }
        let class_identities = train_set.identities();
        let mut init = stream(config.seed, StreamId::Init);
        let mut dims = vec![train_set.d_in()];
        dims.extend(&model_cfg.encoder_widths);
        let encoder = EncoderParams::new(&dims, model_cfg.dp_site, class_identities.len().max(1), &mut init)?;
        let d = encoder.embedding_dim();
        let metric_net = if ablation.use_mnet {
            let h = model_cfg.mnet_hidden.unwrap_or_else(|| default_hidden(d));
            let mut net = MetricNetParams::new(d, h, &mut init)?;
            net.normalize_inputs = model_cfg.normalize_pair_inputs;
            Some(net)
        } else {
            None
        };
        let model = GmnModel {
            encoder,
            metric_net,
            class_identities,
        };
        let optimizer = Optimizer::new(
            config.optimizer,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
            model.param_len(),
        );
        Ok(TrainState {
            epoch: 0,
            iteration: 0,
            model,
            optimizer,
            batch_rng: stream(config.seed, StreamId::Batch),
            pair_rng: stream(config.seed, StreamId::Pair),
            dp_rng: stream(config.seed, StreamId::Dropout),
            history: Vec::new(),
        })
    }
}

/// Runs epochs on a [`TrainState`].
pub struct Trainer<'a> {
    config: &'a TrainConfig,
    ablation: Ablation,
    data: &'a Dataset,
    sampler: PkSampler,
    class_of: BTreeMap<u32, usize>,
    inputs: Matrix,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainConfig, ablation: Ablation, data: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let sampler = PkSampler::new(data, config.identities_per_domain, config.samples_per_identity)?;
        let class_of = data.identities().into_iter().enumerate().map(|(i, id)| (id, i)).collect();
        Ok(Trainer {
            config,
            ablation,
            data,
            sampler,
            class_of,
            inputs: data.embedding_matrix(),
        })
    }

    /// `max(1, floor(records / batch size))`
    pub fn iterations_per_epoch(&self) -> usize {
        (self.data.len() / self.sampler.batch_size()).max(1)
    }

    /// Draws the next batch and its random choices from the state's streams.
    pub fn plan_batch(&self, state: &mut TrainState, dp_active: bool) -> Result<BatchPlan> {
        let rows = self.sampler.sample(&mut state.batch_rng);
        let records = self.data.records();
        let d_in = self.data.d_in();
        let mut inputs = Matrix::zeros(rows.len(), d_in);
        for (r, &i) in rows.iter().enumerate() {
            inputs.row_mut(r).copy_from_slice(self.inputs.row(i));
        }
        let identities: Vec<u32> = rows.iter().map(|&i| records[i].identity).collect();
        let domains: Vec<u32> = rows.iter().map(|&i| records[i].domain).collect();
        let classes = identities
            .iter()
            .map(|id| {
                self.class_of
                    .get(id)
                    .copied()
                    .ok_or_else(|| GmnError::State(format!("identity {id} has no classifier slot")))
            })
            .collect::<Result<Vec<_>>>()?;
        if state.model.encoder.num_classes() != self.class_of.len() {
            return Err(GmnError::State(format!(
                "classifier has {} outputs but the training set has {} identities",
                state.model.encoder.num_classes(),
                self.class_of.len()
            )));
        }
        let enc = &state.model.encoder;
        let channels = enc.layers[enc.dp_site].d_out;
        let dp_mask = dp_masks(rows.len(), channels, &self.config.dp_config(dp_active), &mut state.dp_rng);
        let pairs = if self.ablation.use_mnet {
            plan_pairs(&identities, &domains, self.config.pair_sampling(), &mut state.pair_rng)?
        } else {
            Vec::new()
        };
        let pic_anchors = if self.ablation.use_pic {
            plan_pic_anchors(&identities, &mut state.pair_rng)?
        } else {
            Vec::new()
        };
        Ok(BatchPlan {
            inputs,
            identities,
            classes,
            dp_mask,
            pairs,
            pic_anchors,
        })
    }

    /// Trains one epoch (numbered `state.epoch + 1`).
    pub fn run_epoch(&self, state: &mut TrainState) -> Result<EpochLog> {
        let started = Instant::now();
        let epoch = state.epoch + 1;
        let lr = self.config.lr_at(epoch);
        let dp_active = self.config.dp_active_at(epoch, self.ablation);
        let settings = self.config.objective_settings(self.ablation);
        let n = self.iterations_per_epoch();
        let mut sums = LossBreakdown {
            lambda: if self.ablation.use_pic { self.config.lambda } else { 0.0 },
            ..LossBreakdown::default()
        };
        for iteration in 1..=n {
            let wrap = |source: GmnError| GmnError::Training {
                epoch,
                iteration,
                source: Box::new(source),
            };
            let plan = self.plan_batch(state, dp_active).map_err(wrap)?;
            let (losses, grads) = objective(&state.model, &plan, &settings).map_err(wrap)?;
            if !losses.total.is_finite() {
                return Err(wrap(GmnError::Numeric("total loss".into())));
            }
            state
                .optimizer
                .step(state.model.params_mut(), grads.params(), lr)
                .map_err(wrap)?;
            state.iteration += 1;
            sums.l_cls += losses.l_cls;
            sums.l_tri += losses.l_tri;
            sums.l_gmn += losses.l_gmn;
            sums.l_pic_pos += losses.l_pic_pos;
            sums.l_pic_neg += losses.l_pic_neg;
            sums.total += losses.total;
        }
        let k = n as f64;
        let losses = LossBreakdown {
            l_cls: sums.l_cls / k,
            l_tri: sums.l_tri / k,
            l_gmn: sums.l_gmn / k,
            l_pic_pos: sums.l_pic_pos / k,
            l_pic_neg: sums.l_pic_neg / k,
            lambda: sums.lambda,
            total: sums.total / k,
        };
        let record = EpochRecord { epoch, lr, losses };
        state.epoch = epoch;
        state.history.push(record);
        Ok(EpochLog {
            record,
            dp_active,
            wall_seconds: started.elapsed().as_secs_f64(),
        })
    }

    /// Runs epochs until `state.epoch == last_epoch` (capped at the configured total).
    pub fn run_until(
        &self,
        state: &mut TrainState,
        last_epoch: usize,
        mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
    ) -> Result<Vec<EpochLog>> {
        let last = last_epoch.min(self.config.epochs);
        let mut logs = Vec::new();
        while state.epoch < last {
            let log = self.run_epoch(state)?;
            on_epoch(&log)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Trains from scratch for the configured number of epochs.
pub fn train(model_cfg: &ModelConfig, config: &TrainConfig, ablation: Ablation, train_set: &Dataset) -> Result<(TrainState, Vec<EpochLog>)> {
    let trainer = Trainer::new(config, ablation, train_set)?;
    let mut state = TrainState::init(model_cfg, config, ablation, train_set)?;
    let logs = trainer.run_until(&mut state, config.epochs, |_| Ok(()))?;
    Ok((state, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::rng::RngSnapshot;

    fn small_data() -> Dataset {
        generate_synthetic(&SyntheticSpec {
            num_domains: 2,
            identities_per_domain: 6,
            records_per_identity: 5,
            d_in: 6,
            seed: 1,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn small_config() -> (ModelConfig, TrainConfig) {
        (
            ModelConfig {
                encoder_widths: vec![8, 6],
                dp_site: 0,
                mnet_hidden: Some(3),
                normalize_pair_inputs: true,
            },
            TrainConfig {
                epochs: 4,
                dp_activation_epoch: 3,
                identities_per_domain: 3,
                samples_per_identity: 3,
                base_lr: 1e-2,
                lr_decay_epochs: vec![2],
                seed: 5,
                ..TrainConfig::default()
            },
        )
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(1), 3.5e-4);
        assert_eq!(c.lr_at(39), 3.5e-4);
        assert!((c.lr_at(40) - 3.5e-5).abs() < 1e-20);
        assert!((c.lr_at(90) - 3.5e-6).abs() < 1e-20);
        assert!((c.lr_at(120) - 3.5e-6).abs() < 1e-20);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            dp_activation_epoch: 200,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr_decay_epochs: vec![50, 40],
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(GmnError::Config { ref field, .. }) if field == "lr_decay_epochs"));
        let bad = TrainConfig {
            lr_decay_epochs: vec![120],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn pk_counts() {
        let ds = generate_synthetic(&SyntheticSpec {
            num_domains: 3,
            identities_per_domain: 4,
            records_per_identity: 3,
            d_in: 4,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let mut rng = stream(0, StreamId::Batch);
        let batch = pk_batch(&ds, 2, 2, &mut rng).unwrap();
        assert_eq!(batch.len(), 12);
        for domain in 0..3u32 {
            let rows: Vec<usize> = batch.iter().copied().filter(|&i| ds.records()[i].domain == domain).collect();
            assert_eq!(rows.len(), 4);
            let mut ids: BTreeMap<u32, usize> = BTreeMap::new();
            for i in rows {
                *ids.entry(ds.records()[i].identity).or_default() += 1;
            }
            assert_eq!(ids.len(), 2);
            assert!(ids.values().all(|&c| c == 2));
        }
        assert!(pk_batch(&ds, 5, 2, &mut rng).is_err());
    }

    #[test]
    fn pk_replacement_for_small_identities() {
        let ds = generate_synthetic(&SyntheticSpec {
            num_domains: 1,
            identities_per_domain: 2,
            records_per_identity: 1,
            d_in: 3,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let mut rng = stream(0, StreamId::Batch);
        let batch = pk_batch(&ds, 2, 4, &mut rng).unwrap();
        assert_eq!(batch.len(), 8);
        for id in 0..2u32 {
            let rows: Vec<usize> = batch.iter().copied().filter(|&i| ds.records()[i].identity == id).collect();
            assert_eq!(rows.len(), 4);
            assert!(rows.iter().all(|&r| r == rows[0]));
        }
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let ds = small_data();
        let (m, mut c) = small_config();
        c.epochs = 1;
        c.base_lr = 0.0;
        c.lr_decay_epochs.clear();
        c.dp_activation_epoch = 1;
        let start = TrainState::init(&m, &c, Ablation::FULL, &ds).unwrap();
        let (end, logs) = train(&m, &c, Ablation::FULL, &ds).unwrap();
        assert_eq!(start.model, end.model);
        assert_eq!(logs.len(), 1);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = small_data();
        let (m, c) = small_config();
        let (a, la) = train(&m, &c, Ablation::FULL, &ds).unwrap();
        let (b, lb) = train(&m, &c, Ablation::FULL, &ds).unwrap();
        assert_eq!(a, b);
        let ra: Vec<_> = la.iter().map(|l| l.record).collect();
        let rb: Vec<_> = lb.iter().map(|l| l.record).collect();
        assert_eq!(ra, rb);
    }

    #[test]
    fn dp_stream_untouched_before_activation() {
        let ds = small_data();
        let (m, c) = small_config();
        let trainer = Trainer::new(&c, Ablation::FULL, &ds).unwrap();
        let mut state = TrainState::init(&m, &c, Ablation::FULL, &ds).unwrap();
        let before = RngSnapshot::capture(&state.dp_rng);
        trainer.run_until(&mut state, 2, |log| {
            assert!(!log.dp_active);
            Ok(())
        })
        .unwrap();
        assert_eq!(RngSnapshot::capture(&state.dp_rng), before);
        let log = trainer.run_epoch(&mut state).unwrap();
        assert!(log.dp_active);
        assert_ne!(RngSnapshot::capture(&state.dp_rng), before);
    }

    #[test]
    fn presets_share_batches() {
        let ds = small_data();
        let (m, c) = small_config();
        let mut first = Vec::new();
        for (_, ab) in Ablation::presets() {
            let trainer = Trainer::new(&c, ab, &ds).unwrap();
            let mut state = TrainState::init(&m, &c, ab, &ds).unwrap();
            let plan = trainer.plan_batch(&mut state, false).unwrap();
            first.push(plan.identities.clone());
            assert_eq!(state.model.metric_net.is_some(), ab.use_mnet);
        }
        assert!(first.windows(2).all(|w| w[0] == w[1]));
    }
}
