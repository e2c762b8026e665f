//! Experiment configuration files and the end-to-end flows behind the CLI.
//!
//! Config files are TOML with the sections `[synthetic]`, `[data]`,
//! `[model]`, `[train]`, `[eval]`, `[ablation]` and `[output]`. Any field can
//! be overridden with a `section.field=value` string.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, split_probe_gallery, Dataset, Role, SyntheticSpec};
use crate::encoder::EncoderParams;
use crate::error::{GmnError, Result};
use crate::evaluator::{
    default_protocols, domain_gap_diagnostic, embedded_dataset, evaluate, DomainGapConfig, DomainGapReport,
    EvalConfig, EvalReport, Protocol,
};
use crate::io::{load_embeddings, save_embeddings, EmbeddingFormat};
use crate::metric_net::{default_hidden, MetricNetParams};
use crate::model::GmnModel;
use crate::pair_space::{NegativeScheme, PairOp};
use crate::rng::{stream, StreamId};
use crate::trainer::{
    save_checkpoint, Ablation, Checkpoint, EpochLog, ModelConfig, PkSampler, TrainConfig, TrainState, Trainer,
};

/// Where the records come from and how they are split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Source domains used for training.
    pub train_domains: Vec<u32>,
    /// Held-out domains split into probe and gallery.
    pub test_domains: Vec<u32>,
    pub probe_fraction: f64,
    pub split_seed: u64,
    /// Embedding files; when all three are set they replace the generator.
    pub train_path: Option<PathBuf>,
    pub probe_path: Option<PathBuf>,
    pub gallery_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_domains: vec![0, 1, 2],
            test_domains: vec![3],
            probe_fraction: 0.2,
            split_seed: 0,
            train_path: None,
            probe_path: None,
            gallery_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Text,
    Binary,
}

impl From<&FileFormat> for EmbeddingFormat {
    fn from(f: &FileFormat) -> Self {
        match f {
            FileFormat::Text => EmbeddingFormat::Text,
            FileFormat::Binary => EmbeddingFormat::Binary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub format: FileFormat,
    /// Write a resumable checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/default"),
            format: FileFormat::Text,
            checkpoint_every: 0,
        }
    }
}

/// Optional one-axis sweeps run by the ablation command on top of the full preset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub pair_scheme: Vec<NegativeScheme>,
    pub pair_op: Vec<PairOp>,
    pub lambda: Vec<f64>,
    pub dp_site: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed for training; overrides `train.seed` when set.
    pub seed: Option<u64>,
    pub synthetic: SyntheticSpec,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: Ablation,
    pub sweep: SweepConfig,
    pub diagnose: DomainGapConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    /// The desk-scale preset.
    fn default() -> Self {
        ExperimentConfig {
            seed: None,
            synthetic: SyntheticSpec::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                epochs: 60,
                dp_activation_epoch: 30,
                lr_decay_epochs: vec![20, 45],
                identities_per_domain: 4,
                base_lr: 3.5e-3,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            ablation: Ablation::FULL,
            sweep: SweepConfig::default(),
            diagnose: DomainGapConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn toml_error(e: impl std::fmt::Display) -> GmnError {
    GmnError::config("config", e.to_string())
}

/// Applies `section.field=value` to a TOML table. Values are parsed as TOML
/// and fall back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| GmnError::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| GmnError::config(key, "empty key"))?;
    let mut node = table;
    for p in parts {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| GmnError::config(key, format!("`{p}` is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(toml_error)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads `path` (or the preset when `None`) and applies overrides on top.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| GmnError::io(p, e))?;
                Self::load_str(Some(&text), overrides)
            }
            None => Self::load_str(None, overrides),
        }
    }

    /// Same as [`ExperimentConfig::load`] for config text already in memory.
    pub fn load_str(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match text {
            Some(t) => toml::from_str(t).map_err(toml_error)?,
            None => toml::Table::try_from(ExperimentConfig::default()).map_err(toml_error)?,
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table).try_into().map_err(toml_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.uses_files() {
            return Ok(());
        }
        self.synthetic.validate()?;
        if self.data.train_domains.is_empty() || self.data.test_domains.is_empty() {
            return Err(GmnError::config("data", "need at least one train and one test domain"));
        }
        for &d in self.data.train_domains.iter().chain(&self.data.test_domains) {
            if d as usize >= self.synthetic.num_domains {
                return Err(GmnError::config("data", format!("domain {d} does not exist")));
            }
        }
        if self.data.train_domains.iter().any(|d| self.data.test_domains.contains(d)) {
            return Err(GmnError::config("data", "train and test domains overlap"));
        }
        Ok(())
    }

    pub fn uses_files(&self) -> bool {
        self.data.train_path.is_some() || self.data.probe_path.is_some() || self.data.gallery_path.is_some()
    }

    /// Train config with the master seed applied.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if let Some(s) = self.seed {
            t.seed = s;
        }
        t
    }

    pub fn with_ablation(&self, ablation: Ablation) -> Self {
        ExperimentConfig {
            ablation,
            ..self.clone()
        }
    }
}

/// Training set plus held-out probe and gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    pub train: Dataset,
    pub probe: Dataset,
    pub gallery: Dataset,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    if cfg.uses_files() {
        let get = |p: &Option<PathBuf>, name: &str| {
            p.clone()
                .ok_or_else(|| GmnError::config(format!("data.{name}_path"), "all three paths must be set"))
        };
        let load = |p: PathBuf, role: Role| -> Result<Dataset> {
            Ok(load_embeddings(&p, EmbeddingFormat::from_path(&p))?.with_role(role))
        };
        return Ok(ExperimentData {
            train: load(get(&cfg.data.train_path, "train")?, Role::Train)?,
            probe: load(get(&cfg.data.probe_path, "probe")?, Role::Probe)?,
            gallery: load(get(&cfg.data.gallery_path, "gallery")?, Role::Gallery)?,
        });
    }
    let all = generate_synthetic(&cfg.synthetic)?;
    let train = all.select_domains(&cfg.data.train_domains, Role::Train)?;
    let held_out = all.select_domains(&cfg.data.test_domains, Role::Gallery)?;
    let (probe, gallery) = split_probe_gallery(&held_out, cfg.data.probe_fraction, cfg.data.split_seed)?;
    Ok(ExperimentData { train, probe, gallery })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| GmnError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| GmnError::io(path, e))
}

/// Copies the config file verbatim (or the resolved preset) into `dir`, plus
/// the fully resolved config with overrides applied.
pub fn record_config(cfg: &ExperimentConfig, source: Option<&Path>, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    if let Some(src) = source {
        let dst = dir.join("config.toml");
        let text = fs::read_to_string(src).map_err(|e| GmnError::io(src, e))?;
        write_text(&dst, &text)?;
    }
    write_text(&dir.join("resolved_config.toml"), &cfg.to_toml())
}

/// Writes `train`, `probe` and `gallery` embedding files; returns their paths.
pub fn generate_files(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let data = prepare_data(cfg)?;
    let fmt = EmbeddingFormat::from(&cfg.output.format);
    let ext = match fmt {
        EmbeddingFormat::Text => "csv",
        EmbeddingFormat::Binary => "bin",
    };
    let mut paths = Vec::new();
    for (name, ds) in [("train", &data.train), ("probe", &data.probe), ("gallery", &data.gallery)] {
        let p = dir.join(format!("{name}.{ext}"));
        save_embeddings(ds, &p, fmt)?;
        paths.push(p);
    }
    Ok(paths)
}

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.gmnc";

/// Trains (or resumes) and, when `out_dir` is set, appends to the log and
/// writes checkpoints there. Stops after `stop_after` epochs when given.
pub fn run_training(
    cfg: &ExperimentConfig,
    train_set: &Dataset,
    out_dir: Option<&Path>,
    resume: Option<TrainState>,
    stop_after: Option<usize>,
) -> Result<(TrainState, Vec<EpochLog>)> {
    let tc = cfg.train_config();
    let trainer = Trainer::new(&tc, cfg.ablation, train_set)?;
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::init(&cfg.model, &tc, cfg.ablation, train_set)?,
    };
    let config_text = cfg.to_toml();
    let mut log_file = match out_dir {
        Some(dir) => {
            create_dir(dir)?;
            let path = dir.join(LOG_FILE);
            let fresh = state.epoch == 0 || !path.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| GmnError::io(&path, e))?;
            if fresh {
                writeln!(f, "{}", EpochLog::CSV_HEADER).map_err(|e| GmnError::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };
    let last = stop_after.unwrap_or(tc.epochs).min(tc.epochs);
    let every = cfg.output.checkpoint_every;
    let mut logs = Vec::new();
    while state.epoch < last {
        let log = trainer.run_epoch(&mut state)?;
        log::info!(
            "epoch {} lr {:.2e} total {:.5} (cls {:.4} tri {:.4} gmn {:.4} pic {:.4}){}",
            log.record.epoch,
            log.record.lr,
            log.record.losses.total,
            log.record.losses.l_cls,
            log.record.losses.l_tri,
            log.record.losses.l_gmn,
            log.record.losses.l_pic(),
            if log.dp_active { " dp" } else { "" }
        );
        if let Some((f, path)) = &mut log_file {
            writeln!(f, "{}", log.csv_row()).map_err(|e| GmnError::io(&*path, e))?;
        }
        if let (Some(dir), true) = (out_dir, every > 0 && state.epoch % every == 0) {
            write_state(&state, &config_text, &dir.join(format!("checkpoint_epoch{:04}.gmnc", state.epoch)))?;
        }
        logs.push(log);
    }
    if let Some(dir) = out_dir {
        write_state(&state, &config_text, &dir.join(CHECKPOINT_FILE))?;
    }
    Ok((state, logs))
}

fn write_state(state: &TrainState, config_text: &str, path: &Path) -> Result<()> {
    save_checkpoint(
        &Checkpoint::Train {
            state: state.clone(),
            config_text: config_text.to_string(),
        },
        path,
    )
}

/// Evaluates under each protocol; `None` means every protocol the model supports.
pub fn run_evaluation(
    cfg: &EvalConfig,
    model: &GmnModel,
    probe: &Dataset,
    gallery: &Dataset,
    protocols: Option<&[Protocol]>,
) -> Result<Vec<EvalReport>> {
    let list = match protocols {
        Some(p) => p.to_vec(),
        None => default_protocols(model),
    };
    list.iter()
        .map(|&p| {
            if p == Protocol::Mnet && model.metric_net.is_none() {
                return Err(GmnError::config("protocol", "mnet requested but the checkpoint has no metric network"));
            }
            evaluate(probe, gallery, model, &cfg.with_protocol(p))
        })
        .collect()
}

/// One trained configuration of an ablation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub ablation: Ablation,
    /// Sample ids of the first training batch (identical across rows).
    pub first_batch: Vec<u64>,
    /// Feature protocol for the baseline, mnet otherwise.
    pub primary: EvalReport,
    pub feature: EvalReport,
}

/// First-batch sample ids, drawn the same way the trainer draws them.
pub fn first_batch_ids(cfg: &ExperimentConfig, train_set: &Dataset) -> Result<Vec<u64>> {
    let tc = cfg.train_config();
    let sampler = PkSampler::new(train_set, tc.identities_per_domain, tc.samples_per_identity)?;
    let mut rng = stream(tc.seed, StreamId::Batch);
    Ok(sampler
        .sample(&mut rng)
        .into_iter()
        .map(|i| train_set.records()[i].sample_id)
        .collect())
}

/// Trains one configuration in memory and evaluates it.
pub fn train_and_evaluate(name: &str, cfg: &ExperimentConfig, data: &ExperimentData) -> Result<AblationRow> {
    let (state, _) = run_training(cfg, &data.train, None, None, None)?;
    let model = &state.model;
    let feature = evaluate(&data.probe, &data.gallery, model, &cfg.eval.with_protocol(Protocol::FeatureEuclidean))?;
    let primary = if model.metric_net.is_some() {
        evaluate(&data.probe, &data.gallery, model, &cfg.eval.with_protocol(Protocol::Mnet))?
    } else {
        feature.clone()
    };
    Ok(AblationRow {
        name: name.to_string(),
        ablation: cfg.ablation,
        first_batch: first_batch_ids(cfg, &data.train)?,
        primary,
        feature,
    })
}

/// The four presets followed by any configured sweeps (each on the full preset).
pub fn run_ablation(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<Vec<AblationRow>> {
    let mut runs: Vec<(String, ExperimentConfig)> = Ablation::presets()
        .into_iter()
        .map(|(n, a)| (n.to_string(), cfg.with_ablation(a)))
        .collect();
    let full = cfg.with_ablation(Ablation::FULL);
    for &s in &cfg.sweep.pair_scheme {
        let mut c = full.clone();
        c.train.pair_scheme = s;
        runs.push((format!("pair_scheme={}", s.as_str()), c));
    }
    for &op in &cfg.sweep.pair_op {
        let mut c = full.clone();
        c.train.pair_op = op;
        c.eval.pair_op = op;
        runs.push((format!("pair_op={}", op.as_str()), c));
    }
    for &l in &cfg.sweep.lambda {
        let mut c = full.clone();
        c.train.lambda = l;
        runs.push((format!("lambda={l}"), c));
    }
    for &site in &cfg.sweep.dp_site {
        let mut c = full.clone();
        c.model.dp_site = site;
        runs.push((format!("dp_site={site}"), c));
    }
    runs.iter()
        .map(|(name, c)| {
            log::info!("ablation run {name}");
            train_and_evaluate(name, c, data)
        })
        .collect()
}

pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let ranks: Vec<usize> = rows.first().map(|r| r.primary.cmc.iter().map(|c| c.0).collect()).unwrap_or_default();
    let mut out = format!("{:<24} {:<18} {:>7}", "config", "protocol", "mAP");
    for r in &ranks {
        out.push_str(&format!(" {:>7}", format!("R{r}")));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{:<24} {:<18} {:>7.2}",
            row.name,
            row.primary.protocol.as_str(),
            100.0 * row.primary.map
        ));
        for (_, v) in &row.primary.cmc {
            out.push_str(&format!(" {:>7.2}", 100.0 * v));
        }
        out.push('\n');
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let ranks: Vec<usize> = rows.first().map(|r| r.primary.cmc.iter().map(|c| c.0).collect()).unwrap_or_default();
    let mut out = String::from("config,use_mnet,use_dp,use_pic,protocol,map");
    for r in &ranks {
        out.push_str(&format!(",r{r}"));
    }
    out.push_str(",feature_map,feature_r1\n");
    for row in rows {
        let a = row.ablation;
        out.push_str(&format!(
            "{},{},{},{},{},{:?}",
            row.name, a.use_mnet, a.use_dp, a.use_pic, row.primary.protocol, row.primary.map
        ));
        for (_, v) in &row.primary.cmc {
            out.push_str(&format!(",{v:?}"));
        }
        out.push_str(&format!(
            ",{:?},{:?}\n",
            row.feature.map,
            row.feature.cmc.first().map_or(f64::NAN, |c| c.1)
        ));
    }
    out
}

/// Domain-gap diagnostic over every domain of the configured data, optionally
/// after passing the records through a model's encoder.
pub fn run_diagnostic(cfg: &ExperimentConfig, model: Option<&GmnModel>) -> Result<DomainGapReport> {
    let all = if cfg.uses_files() {
        let d = prepare_data(cfg)?;
        let mut records = d.train.records().to_vec();
        records.extend(d.probe.records().iter().cloned());
        records.extend(d.gallery.records().iter().cloned());
        Dataset::new(records, d.train.d_in(), Role::Train)?
    } else {
        generate_synthetic(&cfg.synthetic)?
    };
    let ds = match model {
        Some(m) => embedded_dataset(&all, m)?,
        None => all,
    };
    domain_gap_diagnostic(&ds, &cfg.diagnose)
}

/// An untrained model with a metric network, for timing runs.
pub fn random_model(model_cfg: &ModelConfig, d_in: usize, seed: u64) -> Result<GmnModel> {
    let mut rng = stream(seed, StreamId::Init);
    let mut dims = vec![d_in];
    dims.extend(&model_cfg.encoder_widths);
    let encoder = EncoderParams::new(&dims, model_cfg.dp_site, 1, &mut rng)?;
    let d = encoder.embedding_dim();
    let h = model_cfg.mnet_hidden.unwrap_or_else(|| default_hidden(d));
    let mut net = MetricNetParams::new(d, h, &mut rng)?;
    net.normalize_inputs = model_cfg.normalize_pair_inputs;
    Ok(GmnModel {
        metric_net: Some(net),
        encoder,
        class_identities: vec![0],
    })
}
