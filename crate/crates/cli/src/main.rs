//! `bdlab`: command-line driver for the backdoor-poisoning defense lab.
//!
//! Exit codes: 0 success, 2 configuration/usage error, 1 runtime failure.

use bdlab_core::metrics::{asr, cacc};
use bdlab_core::poison::{write_manifest, write_samples, CorpusManifest};
use bdlab_core::trainer::{
    self, checkpoint, frequency_csv, prepare_data, probe_model, run_matrix, write_matrix_dir,
    write_run_dir, DefenseProfile, ExperimentConfig,
};
use bdlab_core::Error;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

#[derive(Parser)]
#[command(name = "bdlab", about = "Backdoor poisoning defense laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to a flat key=value experiment config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the clean corpus splits as JSONL files.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for train/val/test JSONL and the manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the poisoned training set and the ASR evaluation set.
    Poison {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for the poisoned splits and manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one experiment and write its run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory; defaults to out_dir/profile-seed from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Probe a trained checkpoint's frequency dynamics.
    Probe {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a trained checkpoint's CACC and ASR.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run a profile x seed grid and report per-profile medians.
    Matrix {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated seed list.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        /// Comma-separated defense profiles.
        #[arg(
            long,
            default_value = "none,lora,muscle_lora_no_ga,ga_only_lora,muscle_lora_full"
        )]
        profiles: String,
        /// Output directory for matrix.csv and matrix.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate a run directory's reports from its summary.json.
    Report {
        /// Run directory containing summary.json.
        #[arg(long)]
        dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = config.load()?;
            let data = prepare_data(&cfg)?;
            std::fs::create_dir_all(&out)?;
            let clean_train: Vec<_> = data
                .train_set
                .iter()
                .filter(|s| !s.poisoned)
                .cloned()
                .collect();
            write_samples(&out.join("train.jsonl"), &clean_train)?;
            write_samples(&out.join("val.jsonl"), &data.validation)?;
            write_samples(&out.join("test.jsonl"), &data.clean_test)?;
            write_manifest(
                &out.join("manifest.json"),
                &CorpusManifest {
                    vocab_size: cfg.vocab_size,
                    num_classes: cfg.num_classes,
                    seed: cfg.seed,
                    attack: None,
                },
            )?;
            println!(
                "wrote {} train / {} val / {} test clean samples to {}",
                clean_train.len(),
                data.validation.len(),
                data.clean_test.len(),
                out.display()
            );
        }
        Command::Poison { config, out } => {
            let cfg = config.load()?;
            let data = prepare_data(&cfg)?;
            std::fs::create_dir_all(&out)?;
            write_samples(&out.join("train_poisoned.jsonl"), &data.train_set)?;
            write_samples(&out.join("asr_eval.jsonl"), &data.asr_set)?;
            write_manifest(
                &out.join("manifest.json"),
                &CorpusManifest {
                    vocab_size: cfg.vocab_size,
                    num_classes: cfg.num_classes,
                    seed: cfg.seed,
                    attack: Some(cfg.attack_spec()),
                },
            )?;
            let n_poisoned = data.train_set.iter().filter(|s| s.poisoned).count();
            println!(
                "wrote {} training samples ({} poisoned) and {} ASR samples to {}",
                data.train_set.len(),
                n_poisoned,
                data.asr_set.len(),
                out.display()
            );
        }
        Command::Train { config, out } => {
            let cfg = config.load()?;
            let dir = out.unwrap_or_else(|| trainer::run_dir(&cfg));
            let mut outcome = trainer::train(&cfg)?;
            write_run_dir(&dir, &mut outcome)?;
            let last = outcome.report.final_eval();
            println!(
                "profile={} seed={} epochs={} cacc={:.4} asr={:.4} -> {}",
                cfg.profile,
                cfg.seed,
                cfg.epochs,
                last.cacc,
                last.asr,
                dir.display()
            );
        }
        Command::Probe {
            config,
            checkpoint: ckpt,
        } => {
            let cfg = config.load()?;
            let model = checkpoint::load(&ckpt)?;
            let (clean, backdoor) = probe_model(&model, &cfg, cfg.epochs)?;
            print!("{}", frequency_csv(&[clean, backdoor]));
        }
        Command::Eval {
            config,
            checkpoint: ckpt,
        } => {
            let cfg = config.load()?;
            let model = checkpoint::load(&ckpt)?;
            let merged = model.merge_adapters()?;
            let data = prepare_data(&cfg)?;
            let c = cacc(&merged, &data.clean_test)?;
            let a = asr(&merged, &data.asr_set, cfg.target_label)?;
            println!("cacc={c} asr={a} n_clean={} n_asr={}", data.clean_test.len(), data.asr_set.len());
        }
        Command::Matrix {
            config,
            seeds,
            profiles,
            out,
        } => {
            let cfg = config.load()?;
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<u64>()
                        .map_err(|_| Error::config(format!("invalid seed {s:?}")))
                })
                .collect::<Result<_, _>>()?;
            let profiles: Vec<DefenseProfile> = profiles
                .split(',')
                .map(|s| DefenseProfile::from_str(s.trim()))
                .collect::<Result<_, _>>()?;
            let report = run_matrix(&cfg, &profiles, &seeds)?;
            write_matrix_dir(&out, &report)?;
            print!("{}", trainer::matrix_csv(&report));
        }
        Command::Report { dir } => {
            trainer::regenerate_reports(&dir)?;
            println!("regenerated reports in {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
