use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kinmix::dataset;
use kinmix::forecast::{self, ForecastMode};
use kinmix::pipeline::{self, ExperimentConfig, PipelineError, Scale};
use kinmix::trainer::{self, EpochRecord};

/// Stiff ROBER kinetics data, patch-mixer training, and extrapolation evaluation.
#[derive(Parser, Debug)]
#[command(name = "kinmix", version, about, long_about = None)]
struct Cli {
    /// Cap on worker threads (defaults to all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate a scenario and write data.csv plus its metadata
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a model and write best.ckpt, last.ckpt and history.csv
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Input CSV (defaults to <out>/data.csv)
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Context length H
        #[arg(long)]
        context: Option<usize>,
        /// Forecast horizon h
        #[arg(long)]
        horizon: Option<usize>,
        /// Patch length; also used as the patch stride
        #[arg(long)]
        patch: Option<usize>,
    },
    /// Forecast the test region and write reports and plots
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to evaluate (defaults to <out>/best.ckpt)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Input CSV (defaults to <out>/data.csv)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Extrapolation mode; may be repeated (defaults to the config's modes)
        #[arg(long)]
        mode: Vec<ForecastMode>,
    },
    /// Overlay one or more series in a per-channel SVG plot
    Plot {
        /// CSV files to overlay
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "plot.svg")]
        out: PathBuf,
        #[arg(long, default_value = "")]
        title: String,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON experiment config
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named scenario: paper-main, appendix-b1 or appendix-b2
    #[arg(long)]
    preset: Option<String>,
    /// Preset size: paper or desk
    #[arg(long, default_value = "paper")]
    scale: Scale,
    /// Override a config entry, e.g. --set train.learning_rate=5e-4
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self, extra: &[String]) -> Result<ExperimentConfig, PipelineError> {
        let base = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, preset) => {
                let name = preset.as_deref().unwrap_or("paper-main");
                ExperimentConfig::preset(name, self.scale).ok_or_else(|| PipelineError::Config {
                    path: "preset".into(),
                    message: format!("unknown preset `{name}`"),
                })?
            }
        };
        let mut overrides = self.overrides.clone();
        overrides.extend_from_slice(extra);
        if let Some(seed) = self.seed {
            overrides.push(format!("train.seed={seed}"));
        }
        let mut config = base.with_overrides(&overrides)?;
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Generate { config } => {
            let config = config.resolve(&[])?;
            let (series, meta) = pipeline::generate(&config.kinetics)?;
            let csv = pipeline::write_dataset(&config.output_dir, &series, &meta)?;
            pipeline::write_config_echo(&config.output_dir, &config)?;
            println!(
                "wrote {} ({} rows, {} accepted / {} rejected steps)",
                csv.display(),
                series.len(),
                meta.accepted_steps,
                meta.rejected_steps
            );
        }
        Command::Train { config, data, epochs, context, horizon, patch } => {
            let mut extra = Vec::new();
            if let Some(v) = epochs {
                extra.push(format!("train.epochs={v}"));
            }
            if let Some(v) = context {
                extra.push(format!("model.context_len={v}"));
            }
            if let Some(v) = horizon {
                extra.push(format!("model.horizon={v}"));
            }
            if let Some(v) = patch {
                extra.push(format!("model.patch_len={v}"));
                extra.push(format!("model.patch_stride={v}"));
            }
            let config = config.resolve(&extra)?;
            let series = read_series(data.as_deref(), &config)?;
            let mut report = |r: &EpochRecord, best: bool| {
                eprintln!(
                    "epoch {:>4}  train {:.6e}  val {:.6e}{}",
                    r.epoch,
                    r.train_loss,
                    r.val_loss,
                    if best { "  *" } else { "" }
                );
            };
            let outcome = pipeline::train(&series, &config, Some(&mut report))?;
            pipeline::write_training(&config.output_dir, &outcome)?;
            pipeline::write_config_echo(&config.output_dir, &config)?;
            if let Some(last) = outcome.history.last() {
                println!(
                    "final train_loss={:.6e} val_loss={:.6e} best_epoch={}",
                    last.train_loss, last.val_loss, outcome.best.epoch
                );
            }
        }
        Command::Eval { config, checkpoint, data, mode } => {
            let config = config.resolve(&[])?;
            let series = read_series(data.as_deref(), &config)?;
            let ckpt_path = checkpoint.unwrap_or_else(|| config.output_dir.join("best.ckpt"));
            let bytes = std::fs::read(&ckpt_path)?;
            let text = String::from_utf8(bytes.clone())
                .map_err(|_| trainer::TrainError::Format(format!("{}: not UTF-8", ckpt_path.display())))?;
            let ckpt = trainer::checkpoint_from_str(&text)?;
            let digest = pipeline::sha256_hex(&bytes);
            let modes = if mode.is_empty() { config.eval.modes.clone() } else { mode };
            for mode in modes {
                let mut outcome = pipeline::evaluate(&ckpt, &series, &config.data.split, mode)?;
                outcome.report.checkpoint_sha256 = Some(digest.clone());
                pipeline::write_evaluation(&config.output_dir, &outcome, &series, config.eval.plot)?;
                println!("{}: mean={:.4}% std={:.4}%", mode.as_str(), outcome.report.mean_pct, outcome.report.std_pct);
            }
            pipeline::write_config_echo(&config.output_dir, &config)?;
        }
        Command::Plot { inputs, out, title } => {
            let series = inputs.iter().map(|p| dataset::read_csv(p)).collect::<Result<Vec<_>, _>>()?;
            pipeline::check_plot_inputs(&series)?;
            let labels: Vec<String> = inputs
                .iter()
                .map(|p| p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into()))
                .collect();
            let pairs: Vec<(&str, &dataset::TimeSeries)> =
                labels.iter().map(String::as_str).zip(series.iter()).collect();
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            forecast::plot_series(&pairs, &title, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn read_series(path: Option<&Path>, config: &ExperimentConfig) -> Result<dataset::TimeSeries, PipelineError> {
    let path = path.map_or_else(|| config.output_dir.join("data.csv"), Path::to_path_buf);
    Ok(dataset::read_csv(&path)?)
}
