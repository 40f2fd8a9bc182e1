//! `mmdg`: generate, rate, train, evaluate and run the shift experiment from
//! one JSON run configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mmdg::consistency::{rate_dataset, EndpointConfig, LlmRater, Rater, RatingCache};
use mmdg::datamodel::{
    generate_synthetic, make_splits, read_dataset, write_dataset, Dataset, SplitSpec, SynthConfig,
};
use mmdg::eval_report::{
    drop_report, render_report, shift_experiment, Format, ModalitySetting, Report, ShiftConfig,
};
use mmdg::trainer::{evaluate, load_state, train, TrainConfig, TrainError, CHECKPOINT_FILE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ShiftOptions {
    test_fraction: f64,
    seeds: Vec<u64>,
}

impl Default for ShiftOptions {
    fn default() -> Self {
        let d = ShiftConfig::default();
        Self {
            test_fraction: d.test_fraction,
            seeds: d.seeds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    /// Dataset directory: written by `gen`, read by everything else.
    dataset: PathBuf,
    /// Every artifact other than the dataset lands here.
    output_dir: PathBuf,
    /// `"all"` or a held-out domain such as `"Co-JPN"`.
    split: String,
    train: TrainConfig,
    synth: SynthConfig,
    endpoint: EndpointConfig,
    shift: ShiftOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            output_dir: PathBuf::from("runs"),
            split: "all".into(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            endpoint: EndpointConfig::default(),
            shift: ShiftOptions::default(),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "mmdg",
    version,
    about = "Multimodal domain-generalization experiments"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Output directory for ratings, checkpoints, metrics and reports.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Seed for generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen,
    /// Fill in audio-visual consistency ratings for every clip with audio.
    Rate {
        /// Use the embedding-similarity fallback instead of the chat endpoint.
        #[arg(long)]
        fallback: bool,
        /// Chat-completion endpoint URL.
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Train one model per selected split.
    Train {
        /// `all` or a held-out domain such as `Co-JPN`.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Continue from the last checkpoint of each split if one exists.
        #[arg(long)]
        resume: bool,
    },
    /// Report top-1 accuracy of trained checkpoints on their test domains.
    Eval {
        /// A checkpoint file, or a directory searched one level deep.
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
    },
    /// Compare in-domain and out-of-domain accuracy for each modality.
    Shift {
        /// Comma-separated training seeds to average over.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

/// Usage and configuration problems exit 1; everything else exits 2.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

trait OrRuntime<T> {
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrRuntime<T> for Result<T, E> {
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .map_err(config_err)?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))
                .map_err(config_err)?
        }
        None => RunConfig::default(),
    };
    if let Some(d) = &common.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(o) = &common.output {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = common.seed {
        cfg.synth.seed = s;
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn require_dir(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(config_err(anyhow!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, Failure> {
    require_dir(&cfg.dataset, "dataset directory")?;
    read_dataset(&cfg.dataset).runtime()
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))
        .runtime()?;
    Ok(cfg.output_dir.clone())
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

fn write_report(dir: &Path, stem: &str, report: &Report) -> Result<(), Failure> {
    for (format, ext) in [(Format::Csv, "csv"), (Format::Markdown, "md")] {
        let path = dir.join(format!("{stem}.{ext}"));
        let text = render_report(report, format).runtime()?;
        fs::write(&path, text)
            .with_context(|| format!("writing {}", path.display()))
            .runtime()?;
        log::info!("wrote {}", path.display());
    }
    Ok(())
}

fn select_splits(ds: &Dataset, which: &str) -> Result<Vec<SplitSpec>, Failure> {
    let all = make_splits(&ds.manifest, &ds.records).runtime()?;
    if which == "all" {
        return Ok(all);
    }
    let names: Vec<String> = all.iter().map(SplitSpec::name).collect();
    let chosen: Vec<SplitSpec> = all.into_iter().filter(|s| s.name() == which).collect();
    if chosen.is_empty() {
        return Err(config_err(anyhow!(
            "unknown split {which}; available: all, {}",
            names.join(", ")
        )));
    }
    Ok(chosen)
}

fn cmd_gen(cfg: &RunConfig) -> Result<(), Failure> {
    cfg.synth.validate().map_err(config_err)?;
    let ds = generate_synthetic(&cfg.synth).runtime()?;
    write_dataset(&ds.manifest, &ds.records, &cfg.dataset).runtime()?;
    println!(
        "wrote {} clips to {} (dataset {})",
        ds.len(),
        cfg.dataset.display(),
        short(&ds.content_hash())
    );
    Ok(())
}

fn cmd_rate(cfg: &RunConfig, fallback: bool, endpoint: Option<String>) -> Result<(), Failure> {
    let mut endpoint_cfg = cfg.endpoint.clone();
    if let Some(url) = endpoint {
        endpoint_cfg.url = url;
    }
    let llm = if fallback {
        None
    } else {
        Some(LlmRater::from_env(endpoint_cfg.clone()).map_err(config_err)?)
    };
    let mut ds = load_dataset(cfg)?;
    let out = output_dir(cfg)?;
    let cache = RatingCache::open(&out.join("ratings.jsonl")).runtime()?;
    let rater = match &llm {
        Some(r) => Rater::Llm(r),
        None => Rater::Fallback,
    };
    let summary = rate_dataset(&mut ds, rater, &cache, endpoint_cfg.max_in_flight).runtime()?;
    write_dataset(&ds.manifest, &ds.records, &cfg.dataset).runtime()?;
    println!(
        "rated {} clips ({} from cache, {} without audio); dataset {}",
        summary.rated,
        summary.from_cache,
        summary.skipped_no_audio,
        short(&ds.content_hash())
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<(), Failure> {
    cfg.train.validate().map_err(config_err)?;
    let ds = load_dataset(cfg)?;
    let splits = select_splits(&ds, &cfg.split)?;
    let out = output_dir(cfg)?;
    let hash = ds.content_hash();
    for split in &splits {
        let dir = out.join("train").join(split.name());
        let run_cfg = TrainConfig {
            checkpoint_dir: Some(dir.clone()),
            ..cfg.train.clone()
        };
        let ck = dir.join(CHECKPOINT_FILE);
        let previous = if resume && ck.exists() {
            let (state, _, saved_split, saved_hash) = load_state(&ck).runtime()?;
            if saved_split != split.name() || saved_hash != hash {
                return Err(Failure::Runtime(anyhow!(
                    "{} belongs to split {saved_split} on dataset {}, not {} on {}",
                    ck.display(),
                    short(&saved_hash),
                    split.name(),
                    short(&hash)
                )));
            }
            Some(state)
        } else {
            None
        };
        let state = train(&ds, split, &run_cfg, previous).map_err(|e| match e {
            TrainError::Config(_) => config_err(e),
            e => Failure::Runtime(e.into()),
        })?;
        let last = state.history.last().expect("at least one epoch");
        println!(
            "{}: {} epochs, final loss {:.4}, checkpoint {}",
            split.name(),
            state.epoch,
            last.total,
            ck.display()
        );
    }
    Ok(())
}

fn checkpoint_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_file() {
            files.push(p.clone());
        } else if p.is_dir() {
            let direct = p.join(CHECKPOINT_FILE);
            if direct.is_file() {
                files.push(direct);
            }
            let mut nested: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))
                .runtime()?
                .filter_map(|e| e.ok().map(|e| e.path().join(CHECKPOINT_FILE)))
                .filter(|c| c.is_file())
                .collect();
            nested.sort();
            files.extend(nested);
        } else {
            return Err(config_err(anyhow!(
                "checkpoint {} does not exist",
                p.display()
            )));
        }
    }
    if files.is_empty() {
        return Err(config_err(anyhow!(
            "no {CHECKPOINT_FILE} found under the given paths"
        )));
    }
    Ok(files)
}

fn cmd_eval(cfg: &RunConfig, checkpoints: &[PathBuf]) -> Result<(), Failure> {
    let files = checkpoint_files(checkpoints)?;
    let ds = load_dataset(cfg)?;
    let hash = ds.content_hash();
    let splits = make_splits(&ds.manifest, &ds.records).runtime()?;
    let mut names = Vec::new();
    let mut accs = Vec::new();
    for f in &files {
        let (state, _, split_name, saved_hash) = load_state(f).runtime()?;
        if saved_hash != hash {
            return Err(Failure::Runtime(anyhow!(
                "{} was trained on dataset {}, but {} is {}",
                f.display(),
                short(&saved_hash),
                cfg.dataset.display(),
                short(&hash)
            )));
        }
        let split = splits
            .iter()
            .find(|s| s.name() == split_name)
            .ok_or_else(|| Failure::Runtime(anyhow!("split {split_name} is not in the dataset")))?;
        let top1 = 100.0
            * evaluate(&state.params, &ds, &split.test_ids)
                .runtime()?
                .top1;
        println!("{split_name}: top-1 {top1:.1}");
        names.push(split_name);
        accs.push(top1);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    println!("Mean: top-1 {mean:.1}");
    let mut report = Report::new(names);
    report.dataset_hash = Some(hash.clone());
    report.push("model", "top-1", accs).runtime()?;
    write_report(
        &output_dir(cfg)?,
        &format!("eval-{}", short(&hash)),
        &report,
    )
}

fn cmd_shift(cfg: &RunConfig, seeds: Option<Vec<u64>>) -> Result<(), Failure> {
    cfg.train.validate().map_err(config_err)?;
    let shift = ShiftConfig {
        train: cfg.train.clone(),
        test_fraction: cfg.shift.test_fraction,
        seeds: seeds.unwrap_or_else(|| cfg.shift.seeds.clone()),
    };
    if shift.seeds.is_empty() {
        return Err(config_err(anyhow!("shift needs at least one seed")));
    }
    let ds = load_dataset(cfg)?;
    let hash = ds.content_hash();
    let analyses = shift_experiment(&ds, &ModalitySetting::standard(), &shift).runtime()?;
    let mut report = drop_report(&analyses);
    report.dataset_hash = Some(hash.clone());
    print!("{}", render_report(&report, Format::Markdown).runtime()?);
    write_report(
        &output_dir(cfg)?,
        &format!("shift-{}", short(&hash)),
        &report,
    )
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Gen => cmd_gen(&cfg),
        Command::Rate { fallback, endpoint } => cmd_rate(&cfg, fallback, endpoint),
        Command::Train {
            split,
            epochs,
            lr,
            lambda,
            resume,
        } => {
            if let Some(s) = split {
                cfg.split = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(l) = lr {
                cfg.train.lr = l;
            }
            if let Some(l) = lambda {
                cfg.train.lambda = l;
            }
            cmd_train(&cfg, resume)
        }
        Command::Eval { checkpoint } => cmd_eval(&cfg, &checkpoint),
        Command::Shift { seeds, epochs } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cmd_shift(&cfg, seeds)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
