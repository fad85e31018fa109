//! `ecgclr`: synthetic data, PTB-XL ingestion, pretraining, finetuning,
//! evaluation and augmentation sweeps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ecg_contrast::config::{DatasetSource, ExperimentConfig};
use ecg_contrast::data::{save_dataset, Dataset, LabelFraction};
use ecg_contrast::models::{Component, ModelState, Variant};
use ecg_contrast::sweep::{self, Prepared};
use ecg_contrast::train::{self, MetricsLog};
use ecg_contrast::wfdb;

#[derive(Parser, Debug)]
#[command(name = "ecgclr", version, about = "Contrastive pretraining and linear probing for 12-lead ECG")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Single worker, ordered execution.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the configured synthetic dataset to a dataset file.
    SynthData,
    /// Converts a PTB-XL directory into a dataset file.
    Ingest {
        /// PTB-XL root; defaults to the config's `dataset.ptbxl`.
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Contrastive pretraining of the encoder and projection head.
    Pretrain {
        #[arg(long, value_parser = Variant::parse, default_value = "A")]
        encoder: Variant,
    },
    /// Frozen-encoder finetuning of the classifier.
    Finetune {
        /// Checkpoint written by `pretrain`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = Variant::parse, default_value = "A")]
        encoder: Variant,
        /// 10%, 40% or 100%.
        #[arg(long, value_parser = LabelFraction::parse_percent, default_value = "100%")]
        fraction: LabelFraction,
    },
    /// Scores a model on the test fold.
    Evaluate {
        /// Checkpoint written by `finetune`; a freshly initialized model otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = Variant::parse, default_value = "A")]
        encoder: Variant,
    },
    /// Runs the configured augmentation grids and appends rows to results.csv.
    Sweep,
    /// Prints the best result per augmentation from a sweep directory.
    Summarize {
        /// Sweep output directory; defaults to `--out` or `output_dir`.
        dir: Option<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    cfg.deterministic |= c.deterministic;
    cfg.validate()?;
    Ok(cfg)
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.check_paths()?;
    let ds = sweep::load_source(&cfg.dataset.source()?).context("loading dataset")?;
    Ok(Prepared::new(ds)?)
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn output_file(c: &Common, cfg: &ExperimentConfig, default: &str) -> Result<PathBuf> {
    let path = c.out.clone().unwrap_or_else(|| cfg.output_dir.join(default));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    Ok(path)
}

fn model_for(cfg: &ExperimentConfig, prep: &Prepared, variant: Variant) -> Result<ModelState> {
    let enc = cfg.model.encoder(variant);
    prep.check_shape(enc.in_channels, enc.input_len)?;
    Ok(ModelState::new(&enc, &cfg.model.heads(), cfg.seeds[0])?)
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match cli.command {
        Command::SynthData => {
            let cfg = load_config(c)?;
            let Some(syn) = cfg.dataset.synthetic.clone() else {
                bail!("config has no [dataset.synthetic] section");
            };
            let mut syn = syn;
            if let Some(s) = c.seed {
                syn.seed = s;
            }
            let ds = Dataset::synthetic(&syn)?;
            let path = output_file(c, &cfg, "synthetic.ecgds")?;
            save_dataset(&path, &ds)?;
            println!("wrote {} records to {}", ds.records.len(), path.display());
        }
        Command::Ingest { root, limit } => {
            let cfg = load_config(c)?;
            let (root, limit) = match (root, cfg.dataset.source()) {
                (Some(r), _) => (r, limit),
                (None, Ok(DatasetSource::Ptbxl { root, limit: l })) => (root, limit.or(l)),
                (None, _) => bail!("no PTB-XL root: pass --root or set dataset.ptbxl"),
            };
            let ds = wfdb::load_ptbxl(&root, limit)?;
            let path = output_file(c, &cfg, "ptbxl.ecgds")?;
            save_dataset(&path, &ds)?;
            println!("wrote {} records to {}", ds.records.len(), path.display());
        }
        Command::Pretrain { encoder } => {
            let cfg = load_config(c)?;
            let prep = prepare(&cfg)?;
            let mut model = model_for(&cfg, &prep, encoder)?;
            ensure_dir(&cfg.output_dir)?;
            let mut log = MetricsLog::open(cfg.output_dir.join("pretrain.log"))?;
            let curve = train::pretrain(
                &mut model,
                &prep.pretrain_pool(),
                &cfg.augmentation.spec,
                &cfg.train,
                cfg.seeds[0],
                &mut |r| {
                    log::info!("{r}");
                    log.record(r)
                },
            )?;
            let path = cfg.output_dir.join("pretrained.ckpt");
            model.save(&path, &[Component::Encoder, Component::Projection])?;
            println!(
                "pretrained {} ({}) for {} epochs, final loss {:.6}; checkpoint {}",
                encoder,
                cfg.augmentation.spec,
                curve.len(),
                curve.last().copied().unwrap_or(f64::NAN),
                path.display()
            );
        }
        Command::Finetune {
            checkpoint,
            encoder,
            fraction,
        } => {
            let cfg = load_config(c)?;
            let prep = prepare(&cfg)?;
            let mut model = model_for(&cfg, &prep, encoder)?;
            model
                .load(&checkpoint, &[Component::Encoder])
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            ensure_dir(&cfg.output_dir)?;
            let mut log = MetricsLog::open(cfg.output_dir.join("finetune.log"))?;
            let (sig, lab) = prep.finetune_set(fraction, cfg.seeds[0]);
            let rep = train::finetune(&mut model, &sig, &lab, &cfg.train, cfg.seeds[0], &mut |r| log.record(r))?;
            let path = cfg.output_dir.join("finetuned.ckpt");
            model.save(&path, &[Component::Encoder, Component::Classifier])?;
            println!(
                "finetuned on {} labelled records ({fraction}), train accuracy {:.4}, encoder checksum {:016x}; checkpoint {}",
                sig.len(),
                rep.train_accuracy,
                rep.encoder_checksum,
                path.display()
            );
        }
        Command::Evaluate { checkpoint, encoder } => {
            let cfg = load_config(c)?;
            let prep = prepare(&cfg)?;
            let mut model = model_for(&cfg, &prep, encoder)?;
            if let Some(p) = &checkpoint {
                model
                    .load(p, &[Component::Encoder, Component::Classifier])
                    .with_context(|| format!("loading {}", p.display()))?;
            }
            let (sig, lab) = prep.test_set();
            let e = train::evaluate(&model, &sig, &lab, cfg.train.threshold)?;
            println!("records {}", e.records);
            println!("weighted_accuracy {:.6}", e.weighted_accuracy);
            println!("macro_accuracy {:.6}", e.macro_accuracy);
            for (cls, m) in ecg_contrast::data::Superclass::ALL.iter().zip(&e.per_class) {
                println!("class {cls} support {} accuracy {:.6}", m.support, m.accuracy);
            }
        }
        Command::Sweep => {
            let cfg = load_config(c)?;
            let prep = prepare(&cfg)?;
            let out = sweep::run_sweep(&cfg, &prep)?;
            println!(
                "{}: {} rows added, {} already present, {} failed",
                out.csv.display(),
                out.added,
                out.skipped,
                out.failed
            );
        }
        Command::Summarize { dir } => {
            let dir = match (dir, &c.out) {
                (Some(d), _) => d,
                (None, Some(o)) => o.clone(),
                (None, None) => load_config(c)?.output_dir,
            };
            let (_, table) = sweep::summarize_dir(&dir)?;
            print!("{table}");
            println!("summary written to {}", dir.join(sweep::SUMMARY_FILE).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
