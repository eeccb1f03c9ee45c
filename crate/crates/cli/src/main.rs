//! `m2ci` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numeric failure (non-finite loss or gradient).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use m2ci::checkpoint::CheckpointHeader;
use m2ci::config::{Precision, RunConfig};
use m2ci::corpus::{corpus_hash, generate_corpus, Corpus, Split};
use m2ci::experiment::{model_for_corpus, run_ablation, run_training};
use m2ci::fusion::{GraphOptions, InteractionGraph};
use m2ci::metrics::{score_sample, EvalReport, Metric, TemplateTranscriber};
use m2ci::synthesis::{Ablations, DubbingSample, Predictions};
use m2ci::train::Trainer;
use m2ci::{Error, Scalar};

#[derive(Parser)]
#[command(name = "m2ci", version, about = "Context-aware expressive dubbing: data, training, evaluation and ablations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic triple corpus.
    GenData(GenData),
    /// Train a model on a corpus.
    Train(Train),
    /// Score a checkpoint on a corpus split.
    Eval(Eval),
    /// Train the full model and ablations on paired seeds and compare them.
    Ablate(Ablate),
    /// Print the interaction graph for a sentence length.
    Graph(GraphCmd),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus root.
    #[arg(long, env = "M2CI_DATA_DIR")]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    common: Common,
    /// Output directory; defaults to the corpus root.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of triples.
    #[arg(long)]
    triples: Option<usize>,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    /// Comma-separated ablation flags applied together.
    #[arg(long)]
    ablate: Option<String>,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    common: Common,
    #[arg(long, required_unless_present = "self_targets")]
    checkpoint: Option<PathBuf>,
    /// train, valid or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Comma-separated metrics.
    #[arg(long, default_value = "gpe,ffe,wer,pitch_mse,energy_mse,mel_l1")]
    metrics: String,
    /// Score the targets against themselves instead of a model.
    #[arg(long)]
    self_targets: bool,
    /// Directory for report.txt and report.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Ablate {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    /// Variants separated by commas; `+` combines flags, e.g. `pre+fol,int-ima`.
    #[arg(long, default_value = "")]
    ablate: String,
    /// Number of paired seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// Caps the test samples scored.
    #[arg(long)]
    max_test: Option<usize>,
}

#[derive(Args)]
struct GraphCmd {
    /// Phoneme steps in the current sentence.
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    no_current_intra: bool,
    #[arg(long)]
    no_interaction: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NonFinite(_) => 4,
        _ => 3,
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::MissingFile(p) => Error::Config(format!("config file {} not found", p.display())),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.corpus.seed = seed;
    }
    if let Some(data) = &common.data {
        cfg.train.data_dir = Some(data.clone());
    }
    Ok(cfg)
}

fn data_dir(cfg: &RunConfig) -> Result<PathBuf, Error> {
    cfg.data_dir().ok_or_else(|| Error::Config("no corpus root: pass --data, set train.data_dir or M2CI_DATA_DIR".into()))
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.to_path_buf(), source: e })?;
    }
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn gen_data(args: &GenData) -> Result<(), Error> {
    let mut cfg = load_config(&args.common)?;
    if let Some(n) = args.triples {
        cfg.corpus.num_triples = n;
        cfg.corpus.validate()?;
    }
    let out = match &args.out {
        Some(p) => p.clone(),
        None => data_dir(&cfg)?,
    };
    let manifest = generate_corpus(&cfg.corpus, &out)?;
    println!("corpus {}", out.display());
    for split in [Split::Train, Split::Valid, Split::Test] {
        println!("{:<6} {}", split.name(), manifest.split(split).count());
    }
    println!("total  {}", manifest.len());
    println!("sha256 {}", corpus_hash(&out)?);
    Ok(())
}

fn train<T: Scalar>(cfg: &RunConfig, args: &Train) -> Result<(), Error> {
    let corpus = Corpus::open(&data_dir(cfg)?)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.train.out_dir.clone());
    let summary = run_training::<T>(cfg, &corpus, &out, args.resume.as_deref())?;
    if let Some(last) = &summary.last {
        println!("step {} loss {:.5} (mel {:.5}, pitch {:.6}, energy {:.6})", last.step, last.loss.total, last.loss.mel, last.loss.pitch, last.loss.energy);
    }
    if let (Some(step), Some(mse)) = (summary.best_step, summary.best_valid_pitch_mse) {
        println!("best step {step}: validation pitch MSE {mse:.6}");
    }
    println!("checkpoint {}", summary.last_checkpoint.display());
    Ok(())
}

fn parse_split(name: &str) -> Result<Split, Error> {
    match name {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!("unknown split {other:?}; valid splits: train, valid, test"))),
    }
}

fn eval_with<T: Scalar>(args: &Eval, corpus: &Corpus, split: Split) -> Result<EvalReport, Error> {
    let samples: Vec<DubbingSample<T>> = corpus.load_split(split)?;
    let transcriber = TemplateTranscriber::new(&corpus.templates()?)?;
    match &args.checkpoint {
        Some(path) if !args.self_targets => {
            let trainer = Trainer::<T>::load(path)?;
            trainer.evaluate(&format!("{} on {}", path.display(), split.name()), &samples, Some(&transcriber))
        }
        _ => {
            let scores = samples
                .iter()
                .map(|s| {
                    let p = Predictions { log_pitch: s.log_pitch.clone(), energy: s.energy.clone(), mel: s.mel.clone() };
                    score_sample(s, &p, Some(&transcriber))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(EvalReport::new(format!("targets on {}", split.name()), scores))
        }
    }
}

fn eval(args: &Eval) -> Result<(), Error> {
    let metrics = Metric::parse_list(&args.metrics)?;
    if metrics.is_empty() {
        return Err(Error::Config("--metrics is empty".into()));
    }
    let split = parse_split(&args.split)?;
    let cfg = load_config(&args.common)?;
    let corpus = Corpus::open(&data_dir(&cfg)?)?;
    let precision = match (&args.checkpoint, args.self_targets) {
        (Some(path), false) => match CheckpointHeader::read(path)?.dtype {
            0 => Precision::F32,
            _ => Precision::F64,
        },
        _ => cfg.train.precision,
    };
    let report = match precision {
        Precision::F32 => eval_with::<f32>(args, &corpus, split)?,
        Precision::F64 => eval_with::<f64>(args, &corpus, split)?,
    };
    let table = report.to_table_with(&metrics);
    print!("{table}");
    if let Some(out) = &args.out {
        write(&out.join("report.txt"), &table)?;
        write(&out.join("report.json"), &report.to_json()?)?;
    }
    Ok(())
}

fn ablate<T: Scalar>(cfg: &RunConfig, args: &Ablate) -> Result<(), Error> {
    let variants = Ablations::parse_variants(&args.ablate)?;
    let corpus = Corpus::open(&data_dir(cfg)?)?;
    let model = model_for_corpus(cfg, &corpus);
    let train: Vec<DubbingSample<T>> = corpus.load_split(Split::Train)?;
    let mut test: Vec<DubbingSample<T>> = corpus.load_split(Split::Test)?;
    if let Some(n) = args.max_test.or(cfg.train.max_eval_samples) {
        test.truncate(n);
    }
    let transcriber = TemplateTranscriber::new(&corpus.templates()?)?;
    let n_seeds = args.seeds.unwrap_or(cfg.train.paired_seeds);
    if n_seeds == 0 {
        return Err(Error::Config("--seeds must be positive".into()));
    }
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| cfg.train.seed + i).collect();
    let steps = args.steps.unwrap_or(cfg.train.steps);
    let table = run_ablation(&model, &cfg.optim, steps, &train, &test, &variants, &seeds, Some(&transcriber))?;
    let text = table.to_table();
    print!("{text}");
    if let Some(out) = &args.out {
        write(&out.join("ablation.txt"), &text)?;
        write(&out.join("ablation.json"), &table.to_json()?)?;
    }
    Ok(())
}

fn graph(args: &GraphCmd) -> Result<(), Error> {
    let opts = GraphOptions { intra_window: args.window, current_text_intra: !args.no_current_intra, interaction: !args.no_interaction };
    print!("{}", InteractionGraph::full(args.steps, &opts)?.to_edge_list());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData(args) => gen_data(&args),
        Command::Train(args) => {
            let mut cfg = load_config(&args.common)?;
            if let Some(steps) = args.steps {
                cfg.train.steps = steps;
            }
            if let Some(list) = &args.ablate {
                cfg.train.ablations = Ablations::parse_list(list)?;
            }
            match cfg.train.precision {
                Precision::F32 => train::<f32>(&cfg, &args),
                Precision::F64 => train::<f64>(&cfg, &args),
            }
        }
        Command::Eval(args) => eval(&args),
        Command::Ablate(args) => {
            let cfg = load_config(&args.common)?;
            match cfg.train.precision {
                Precision::F32 => ablate::<f32>(&cfg, &args),
                Precision::F64 => ablate::<f64>(&cfg, &args),
            }
        }
        Command::Graph(args) => graph(&args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
