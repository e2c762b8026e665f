//! `gmn` command-line entry point.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gmn_core::evaluator::{
    format_eval_table, format_scaling_report, scaling_sweep, write_eval_reports, DomainGapReport,
};
use gmn_core::experiment::{
    ablation_csv, format_ablation_table, generate_files, prepare_data, random_model, record_config, run_ablation,
    run_diagnostic, run_evaluation, run_training, CHECKPOINT_FILE, LOG_FILE,
};
use gmn_core::trainer::load_checkpoint;
use gmn_core::{Ablation, Checkpoint, ErrorKind, ExperimentConfig, GmnError, Protocol, Result};

#[derive(Parser)]
#[command(name = "gmn", version, about = "Metric-network training and retrieval evaluation on embeddings")]
struct Cli {
    /// Log progress to stderr (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; the desk preset when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set train.epochs=10`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `output.dir`).
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write train, probe and gallery embedding files.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes the log and a checkpoint to the output directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Ablation preset: baseline, +A, +A+B, +A+B+C (or full).
        #[arg(long)]
        preset: Option<String>,
        /// Resume from a training checkpoint. Its stored config is used unless --config is given.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this epoch is complete.
        #[arg(long, value_name = "EPOCH")]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint on the held-out probe and gallery.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// feature_euclidean, feature_cosine or mnet. Repeatable; default: every protocol the model supports.
        #[arg(long)]
        protocol: Vec<Protocol>,
    },
    /// Train and evaluate the four ablation presets plus configured sweeps.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Domain classifier accuracy in instance space versus pair space.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Pass records through this model's encoder first.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time feature and mnet evaluation across gallery sizes.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Use this model instead of a randomly initialised one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        num_probe: usize,
        #[arg(long, value_delimiter = ',', default_value = "1000,2000,4000,8000")]
        gallery_sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
        ErrorKind::Io => 5,
    }
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        Ok(cfg)
    }

    fn prepare(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let cfg = self.load()?;
        let dir = cfg.output.dir.clone();
        record_config(&cfg, self.config.as_deref(), &dir)?;
        Ok((cfg, dir))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| GmnError::io(path, e))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

fn cmd_train(common: &Common, preset: Option<&str>, resume: Option<&Path>, stop_after: Option<usize>) -> Result<()> {
    let (state, stored) = match resume {
        Some(p) => match load_checkpoint(p)? {
            Checkpoint::Train { state, config_text } => (Some(state), Some(config_text)),
            Checkpoint::Model(_) => {
                return Err(GmnError::config("resume", "checkpoint holds a model without training state"));
            }
        },
        None => (None, None),
    };
    let mut cfg = match (&common.config, &stored) {
        (None, Some(text)) => ExperimentConfig::load_str(Some(text), &common.overrides)?,
        _ => common.load()?,
    };
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    if let Some(name) = preset {
        cfg.ablation = Ablation::from_preset(name)?;
    }
    let dir = cfg.output.dir.clone();
    match (&common.config, &stored) {
        (None, Some(text)) => {
            fs::create_dir_all(&dir).map_err(|e| GmnError::io(&dir, e))?;
            write(&dir.join("config.toml"), text)?;
            write(&dir.join("resolved_config.toml"), &cfg.to_toml())?;
        }
        _ => record_config(&cfg, common.config.as_deref(), &dir)?,
    }
    let data = prepare_data(&cfg)?;
    let (state, logs) = run_training(&cfg, &data.train, Some(&dir), state, stop_after)?;
    if let Some(last) = logs.last() {
        let l = last.record.losses;
        println!(
            "epoch {} total {:.5} cls {:.5} tri {:.5} gmn {:.5} pic {:.5}",
            last.record.epoch,
            l.total,
            l.l_cls,
            l.l_tri,
            l.l_gmn,
            l.l_pic()
        );
    }
    println!(
        "trained to epoch {}; log {}, checkpoint {}",
        state.epoch,
        dir.join(LOG_FILE).display(),
        dir.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: &Path, protocols: &[Protocol]) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let (cfg, dir) = common.prepare()?;
    let data = prepare_data(&cfg)?;
    let list = (!protocols.is_empty()).then_some(protocols);
    let reports = run_evaluation(&cfg.eval, ckpt.model(), &data.probe, &data.gallery, list)?;
    write_eval_reports(&reports, &dir, "eval")?;
    print!("{}", format_eval_table(&reports));
    Ok(())
}

fn cmd_ablate(common: &Common) -> Result<()> {
    let (cfg, dir) = common.prepare()?;
    let data = prepare_data(&cfg)?;
    let rows = run_ablation(&cfg, &data)?;
    if rows.windows(2).any(|w| w[0].first_batch != w[1].first_batch) {
        return Err(GmnError::State("ablation runs drew different first batches".into()));
    }
    write(&dir.join("ablation.csv"), &ablation_csv(&rows))?;
    write(&dir.join("ablation.json"), &to_json(&rows))?;
    print!("{}", format_ablation_table(&rows));
    Ok(())
}

fn cmd_diagnose(common: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let ckpt = checkpoint.map(load_checkpoint).transpose()?;
    let (cfg, dir) = common.prepare()?;
    let r = run_diagnostic(&cfg, ckpt.as_ref().map(|c| c.model()))?;
    write(
        &dir.join("domain_gap.csv"),
        &format!("{}\n{}\n", DomainGapReport::csv_header(), r.csv_row()),
    )?;
    write(&dir.join("domain_gap.json"), &to_json(&r))?;
    println!("domains:        {}", r.num_domains);
    println!("chance:         {:.4}", r.chance_level);
    println!("instance space: {:.4} (train {:.4})", r.instance_space_accuracy, r.instance_train_accuracy);
    println!("pair space:     {:.4} (train {:.4})", r.pair_space_accuracy, r.pair_train_accuracy);
    Ok(())
}

fn cmd_bench(
    common: &Common,
    checkpoint: Option<&Path>,
    num_probe: usize,
    gallery_sizes: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<()> {
    let (cfg, dir) = common.prepare()?;
    let model = match checkpoint {
        Some(p) => load_checkpoint(p)?.model().clone(),
        None => random_model(&cfg.model, cfg.synthetic.d_in, seed)?,
    };
    let report = scaling_sweep(&model, num_probe, gallery_sizes, repeats, &cfg.eval, seed)?;
    write(&dir.join("bench.json"), &to_json(&report))?;
    print!("{}", format_scaling_report(&report));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common } => {
            let (cfg, dir) = common.prepare()?;
            for p in generate_files(&cfg, &dir)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Train {
            common,
            preset,
            resume,
            stop_after,
        } => cmd_train(&common, preset.as_deref(), resume.as_deref(), stop_after),
        Command::Eval {
            common,
            checkpoint,
            protocol,
        } => cmd_eval(&common, &checkpoint, &protocol),
        Command::Ablate { common } => cmd_ablate(&common),
        Command::Diagnose { common, checkpoint } => cmd_diagnose(&common, checkpoint.as_deref()),
        Command::Bench {
            common,
            checkpoint,
            num_probe,
            gallery_sizes,
            repeats,
            seed,
        } => cmd_bench(&common, checkpoint.as_deref(), num_probe, &gallery_sizes, repeats, seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
