//! Command-line entry point: synthetic data generation, training, latent
//! evaluation, conversion reports, latent export and the gradient-check
//! suite, with a reproducibility manifest per run.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use slpa::conversion::{build_latent_bank, conversion_report, ConversionCondition};
use slpa::data::{generate_synthetic, read_epochs, write_epochs, SynthSpec};
use slpa::error::{Error, Result};
use slpa::evaluation::{run_latent_cv, CvConfig};
use slpa::losses::Variant;
use slpa::training::{load_checkpoint, save_checkpoint, train, TrainConfig};

#[derive(Parser)]
#[command(
    name = "slpa",
    about = "Split-latent permutation autoencoder: train, evaluate and convert epoch-structured time-series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled epoch file.
    Synth {
        /// Structured-text config file (synth section).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Generator seed (overrides the config file).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model variant on an epoch file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input epoch file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Variant name (CSLP-AE, SLP-AE, C-AE, AE, CL, CE, CE(t), SQP-AE,
        /// CSQP-AE, SQLP-AE, CSQLP-AE); overrides the config file.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        /// Pairs (or quadruplets) per batch.
        #[arg(long)]
        k_pairs: Option<usize>,
    },
    /// Cross-validated latent classification metrics for a checkpoint.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Converted-ERP evaluation under donor-sampling conditions.
    Convert {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated conditions (ss-st, ds-st, ss-dt, ds-dt); all
        /// four by default.
        #[arg(long)]
        conditions: Option<String>,
        /// Donor draws per target cell.
        #[arg(long, default_value_t = 2000)]
        n_samples: usize,
        /// Readout channel.
        #[arg(long, default_value_t = 0)]
        channel: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Encode a dataset and export its split latents as delimited text.
    ExportLatents {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite and print the worst error.
    Gradcheck {
        /// Number of random tiny model configurations.
        #[arg(long, default_value_t = 3)]
        configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// All tunables of a run in one structured-text file; command-line flags
/// override file values.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    synth: SynthSpec,
    train: TrainConfig,
    cv: CvConfig,
}

fn load_config(path: &Option<PathBuf>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("bad config file: {e}")))
        }
    }
}

#[derive(Serialize)]
struct ManifestFile {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: Option<String>,
    seed: u64,
    inputs: Vec<ManifestFile>,
    outputs: Vec<ManifestFile>,
    timestamp: String,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    config: &Option<PathBuf>,
    seed: u64,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<()> {
    let hash_all = |paths: &[&Path]| -> Result<Vec<ManifestFile>> {
        paths
            .iter()
            .map(|p| {
                Ok(ManifestFile {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect()
    };
    let manifest = RunManifest {
        command: command.to_string(),
        config: config.as_ref().map(|p| p.display().to_string()),
        seed,
        inputs: hash_all(inputs)?,
        outputs: hash_all(outputs)?,
        timestamp: chrono::Utc::now().to_rfc3339(),
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization failed: {e}")))?;
    std::fs::write(out_dir.join("manifest.json"), text)?;
    Ok(())
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { config, out, seed } => {
            let cfg = load_config(&config)?;
            let seed = seed.unwrap_or(cfg.train.seed);
            ensure_dir(&out)?;
            let dataset = generate_synthetic(&cfg.synth, seed)?;
            let data_path = out.join("epochs.epz");
            write_epochs(&dataset, &data_path)?;
            write_manifest(&out, "synth", &config, seed, &[], &[&data_path])?;
            println!(
                "wrote {} epochs ({} subjects x {} tasks) to {}",
                dataset.len(),
                cfg.synth.n_subjects,
                cfg.synth.n_tasks,
                data_path.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            variant,
            steps,
            k_pairs,
        } => {
            let cfg = load_config(&config)?;
            let mut train_cfg = cfg.train;
            if let Some(s) = seed {
                train_cfg.seed = s;
            }
            if let Some(v) = &variant {
                train_cfg.loss.variant = Variant::from_name(v)?;
            }
            if let Some(s) = steps {
                train_cfg.steps = s;
            }
            if let Some(k) = k_pairs {
                train_cfg.k_pairs = k;
            }
            ensure_dir(&out)?;
            if train_cfg.out_dir.is_none() {
                train_cfg.out_dir = Some(out.clone());
            }
            let dataset = read_epochs(&data)?;
            let (model, history) = train(&train_cfg, &dataset)?;
            let ckpt_path = out.join("model.slpa");
            save_checkpoint(&model, &ckpt_path)?;
            let history_path = out.join("history.csv");
            history.write_csv(&history_path)?;
            write_manifest(
                &out,
                &format!("train --variant {}", train_cfg.loss.variant.name()),
                &config,
                train_cfg.seed,
                &[&data],
                &[&ckpt_path, &history_path],
            )?;
            let last = history.records.last().expect("steps > 0");
            println!(
                "trained {} for {} steps, final total loss {:.6}",
                train_cfg.loss.variant.name(),
                train_cfg.steps,
                last.total
            );
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            data,
            out,
            seed,
        } => {
            let cfg = load_config(&config)?;
            let mut cv = cfg.cv;
            if let Some(s) = seed {
                cv.seed = s;
            }
            ensure_dir(&out)?;
            let model = load_checkpoint(&checkpoint)?;
            let dataset = read_epochs(&data)?;
            let bank = build_latent_bank(&model, &dataset)?;
            let report = run_latent_cv(&bank, &cv)?;
            let metrics_path = out.join("metrics.csv");
            report.write_csv(&metrics_path)?;
            write_manifest(&out, "eval", &config, cv.seed, &[&checkpoint, &data], &[&metrics_path])?;
            for (name, summary) in report.rows() {
                println!("{name}: {:.4} +- {:.4}", summary.mean, summary.stderr);
            }
            Ok(())
        }
        Command::Convert {
            checkpoint,
            data,
            out,
            conditions,
            n_samples,
            channel,
            seed,
        } => {
            ensure_dir(&out)?;
            let model = load_checkpoint(&checkpoint)?;
            let dataset = read_epochs(&data)?;
            let conditions = match &conditions {
                None => ConversionCondition::ALL.to_vec(),
                Some(list) => list
                    .split(',')
                    .map(|t| ConversionCondition::from_name(t.trim()))
                    .collect::<Result<Vec<_>>>()?,
            };
            let bank = build_latent_bank(&model, &dataset)?;
            use rand_chacha::rand_core::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let report =
                conversion_report(&model, &bank, &dataset, channel, &conditions, n_samples, &mut rng)?;
            let report_path = out.join("conversion.csv");
            report.write_csv(&report_path)?;
            write_manifest(&out, "convert", &None, seed, &[&checkpoint, &data], &[&report_path])?;
            for r in &report.results {
                println!("{}: mean mse {:.6e}", r.condition.name(), r.mean_mse);
            }
            Ok(())
        }
        Command::ExportLatents {
            checkpoint,
            data,
            out,
        } => {
            ensure_dir(&out)?;
            let model = load_checkpoint(&checkpoint)?;
            let dataset = read_epochs(&data)?;
            let bank = build_latent_bank(&model, &dataset)?;
            let path = out.join("latents.csv");
            use std::io::Write;
            let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
            writeln!(f, "epoch,subject,task,split,values")?;
            for i in 0..bank.len() {
                for (split, z) in [
                    ("subject", &bank.latents[i].z_subject),
                    ("task", &bank.latents[i].z_task),
                ] {
                    let values: Vec<String> =
                        z.data().iter().map(|v| format!("{v}")).collect();
                    writeln!(
                        f,
                        "{i},{},{},{split},{}",
                        bank.subject_ids[i],
                        bank.task_ids[i],
                        values.join(";")
                    )?;
                }
            }
            f.flush()?;
            drop(f);
            write_manifest(&out, "export-latents", &None, 0, &[&checkpoint, &data], &[&path])?;
            println!("exported {} latent rows to {}", 2 * bank.len(), path.display());
            Ok(())
        }
        Command::Gradcheck { configs, seed } => {
            let worst_primitive = slpa::gradcheck::primitive_suite(seed)?;
            let worst_composite = slpa::gradcheck::composite_suite(configs, seed)?;
            let worst = worst_primitive.max(worst_composite);
            println!("max_rel_error {worst:.6e} (primitives {worst_primitive:.3e}, composite losses {worst_composite:.3e})");
            Ok(())
        }
    }
}

fn main() {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
