//! `tractscl`: synthetic data, format conversion, augmentation, training,
//! prediction and evaluation from the command line.
//!
//! Exit status is 0 on success, 1 for usage errors and 2 when an input file
//! or configuration cannot be used.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tractscl::pipeline::{
    self, evaluate, format_log, join_labels, load_dataset, predict, prepare_eval_samples,
    prepare_training_samples, read_labels, read_samples, save_dataset, write_labels,
    write_samples, LabelRow, Model, TrainConfig, SAMPLES_FILE,
};
use tractscl::synth::SynthConfig;
use tractscl::tract_io;

#[derive(Parser)]
#[command(name = "tractscl", version, about = "Streamline classification with microstructure-informed contrastive learning")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset directory.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Convert a tractogram between TRK and text; formats follow the extensions.
    Convert {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Balance a dataset directory into fixed-length training samples.
    Augment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a dataset directory or augmented samples.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Validation dataset directory used for model selection. Without it
        /// the training streamlines themselves are used.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Label every streamline of a tractogram that passes the length filter.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Subject name written to the output (default: input file stem).
        #[arg(long)]
        subject: Option<String>,
    },
    /// Compare predicted labels with ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Data(String),
}

impl From<pipeline::PipelineError> for CliError {
    fn from(e: pipeline::PipelineError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<tract_io::TractIoError> for CliError {
    fn from(e: tract_io::TractIoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<tractscl::synth::SynthError> for CliError {
    fn from(e: tractscl::synth::SynthError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn train_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::parse(&read_text(path)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { config, out, seed } => {
            let mut cfg = SynthConfig::parse(&read_text(&config)?)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let subjects = cfg.generate_subjects()?;
            save_dataset(&out, &subjects)?;
            let n: usize = subjects.iter().map(|s| s.tractogram.len()).sum();
            log::info!("wrote {n} streamlines for {} subjects to {}", subjects.len(), out.display());
        }
        Command::Convert { input, out } => {
            let t = tract_io::load(&input)?;
            tract_io::save(&out, &t)?;
        }
        Command::Augment { data, config, out, seed } => {
            let cfg = train_config(&config, seed)?;
            let subjects = load_dataset(&data)?;
            let samples = prepare_training_samples(&subjects, &cfg)?;
            std::fs::create_dir_all(&out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
            write_samples(&out.join(SAMPLES_FILE), &samples)?;
            log::info!("wrote {} samples", samples.len());
        }
        Command::Train { data, config, model, log, val, seed } => {
            let cfg = train_config(&config, seed)?;
            let samples_path = data.join(SAMPLES_FILE);
            let samples = if samples_path.exists() {
                read_samples(&samples_path)?
            } else {
                prepare_training_samples(&load_dataset(&data)?, &cfg)?
            };
            let val_samples = match &val {
                Some(dir) => prepare_eval_samples(&load_dataset(dir)?, &cfg)?,
                None if samples_path.exists() => samples.clone(),
                None => prepare_eval_samples(&load_dataset(&data)?, &cfg)?,
            };
            let outcome = pipeline::train(&samples, &val_samples, &cfg)?;
            outcome.model.save(&model)?;
            std::fs::write(&log, format_log(&outcome.log))
                .map_err(|e| CliError::Data(format!("{}: {e}", log.display())))?;
            if let Some(m) = outcome.best_val {
                println!("selected epoch {}: {m}", outcome.best_epoch);
            }
        }
        Command::Predict { model, input, out, subject } => {
            let model = Model::load(&model)?;
            let t = tract_io::load(&input)?;
            let p = predict(&model, &t)?;
            let name = subject.unwrap_or_else(|| {
                input
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            });
            let rows: Vec<LabelRow> = p
                .indices
                .iter()
                .zip(&p.labels)
                .zip(&p.scores)
                .map(|((&index, &label), score)| LabelRow {
                    subject: name.clone(),
                    index,
                    label,
                    score: Some(score[1]),
                })
                .collect();
            write_labels(&out, &rows)?;
        }
        Command::Evaluate { pred, truth } => {
            let (p, t) = join_labels(&read_labels(&pred)?, &read_labels(&truth)?)?;
            println!("{}", evaluate(&p, &t)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
