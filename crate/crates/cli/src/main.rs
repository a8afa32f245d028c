use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cainet::aux_targets::AuxTargets;
use cainet::config::TrainConfig;
use cainet::dataset::{self, DatasetManifest, Split, SynthOptions};
use cainet::gradsuite::GradSuite;
use cainet::train;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cainet", version, about = "RGB-thermal segmentation: train, evaluate, infer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides, each `--key=value`
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

impl ConfigArgs {
    /// Loads `--config`, else `fallback` if it exists, else defaults; then applies overrides.
    fn load(&self, fallback: Option<&Path>) -> Result<TrainConfig> {
        let path = self.config.clone().or_else(|| fallback.filter(|p| p.is_file()).map(Path::to_path_buf));
        let mut cfg = match &path {
            Some(p) => TrainConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => TrainConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one training stage, or all of them in order
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Per-class and mean metrics of a checkpoint on a split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Predict one corpus sample and write label and colour images
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample id in the corpus under data_root
        #[arg(long)]
        sample: String,
        #[arg(long, default_value = "predictions")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference checks of every module; non-zero exit on failure
    Gradcheck {
        /// Seeded instances per module
        #[arg(long, default_value_t = 5)]
        instances: usize,
    },
    /// Export binary, boundary and attention targets as PNGs
    Auxmaps {
        #[arg(long)]
        data_root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to one sample id
        #[arg(long)]
        sample: Option<String>,
        #[arg(long, default_value_t = 5)]
        dilation: usize,
        #[arg(long, default_value_t = 2.0)]
        sigma: f64,
    },
    /// Generate a synthetic paired RGB-thermal corpus
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 48)]
        train: usize,
        #[arg(long, default_value_t = 16)]
        val: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        /// Darken RGB to 5% intensity
        #[arg(long)]
        dark: bool,
    },
}

fn run_dir_config(checkpoint: &Path) -> Option<PathBuf> {
    checkpoint.parent().map(|d| d.join("run.cfg"))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { cfg } => {
            let cfg = cfg.load(None)?;
            let report = train::staged_train(&cfg, &mut |line| eprintln!("{line}"))?;
            for s in &report.stages {
                println!(
                    "stage={} steps={} best_val_miou={:.4} best_step={} early_stop={} checkpoint={}",
                    s.stage.as_str(),
                    s.steps,
                    s.best_miou,
                    s.best_step,
                    s.stopped_early,
                    s.checkpoint.display()
                );
            }
        }
        Command::Eval { checkpoint, split, cfg } => {
            let cfg = cfg.load(run_dir_config(&checkpoint).as_deref())?;
            let r = train::evaluate(&cfg, &checkpoint, split)?;
            print!("{}", r.table);
        }
        Command::Infer {
            checkpoint,
            sample,
            out,
            cfg,
        } => {
            let cfg = cfg.load(run_dir_config(&checkpoint).as_deref())?;
            let manifest = DatasetManifest::load(&cfg.data_root)?;
            let (model, store) = train::load_model(&cfg, &checkpoint, manifest.num_classes)?;
            let s = dataset::load_sample(&cfg.data_root, &manifest, &sample)?;
            let pred = train::infer(&cfg, &model, &store, &s)?;
            let (labels, color) = train::write_prediction(&pred, &manifest.palette(), &out, &sample)?;
            println!("{}\n{}", labels.display(), color.display());
        }
        Command::Gradcheck { instances } => {
            if instances == 0 {
                bail!("--instances must be at least 1");
            }
            let mut suite = GradSuite::default();
            suite.instances = instances;
            let reports = suite.run()?;
            for r in &reports {
                println!("{r}");
            }
            return Ok(reports.iter().all(|r| r.passed()));
        }
        Command::Auxmaps {
            data_root,
            out,
            sample,
            dilation,
            sigma,
        } => {
            let manifest = DatasetManifest::load(&data_root)?;
            let cfg = cainet::aux_targets::AuxConfig { dilation, sigma };
            let ids: Vec<String> = match sample {
                Some(id) => vec![id],
                None => [Split::Train, Split::Val, Split::Test]
                    .iter()
                    .flat_map(|&s| manifest.split(s).to_vec())
                    .collect(),
            };
            std::fs::create_dir_all(&out)?;
            for id in &ids {
                let s = dataset::load_sample(&data_root, &manifest, id)?;
                let aux = AuxTargets::from_labels(&s.labels, &cfg)?;
                dataset::save_gray_png(&aux.binary.map(|v| v * 255), &out.join(format!("{id}_binary.png")))?;
                dataset::save_gray_png(&aux.boundary.map(|v| v * 255), &out.join(format!("{id}_boundary.png")))?;
                let q = aux.attention_q.map(|v| (v * 255.0).round() as u8);
                dataset::save_gray_png(&q, &out.join(format!("{id}_attention.png")))?;
            }
            println!("wrote aux maps for {} samples to {}", ids.len(), out.display());
        }
        Command::Synth {
            out,
            seed,
            train,
            val,
            size,
            classes,
            dark,
        } => {
            let opts = if dark { SynthOptions::dark() } else { SynthOptions::default() };
            dataset::write_synth_corpus(&out, seed, train, val, (size, size), classes, &opts)?;
            println!("wrote {} samples to {}", train + val, out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
