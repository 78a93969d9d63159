use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use intersim::pipeline::{self, EvalInputs, RunConfig, RunError, RunResult};

#[derive(Parser, Debug)]
#[command(name = "intersim", version, about = "Intersection traffic simulator: generate, train, roll out, evaluate")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed (overrides the file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root directory.
    #[arg(long, global = true, env = "INTERSIM_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = "INTERSIM_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic train and test episodes.
    Gen(GenArgs),
    /// Train a dynamics model on episode files.
    Train(TrainArgs),
    /// Closed-loop rollout against a reference episode.
    Rollout(RolloutArgs),
    /// Open-loop errors, distribution fidelity and collapse times.
    Eval(EvalArgs),
    /// Train and evaluate the ablation grid.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    test_episodes: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Episode files or directories of `*.jsonl`.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    no_ids: bool,
    #[arg(long)]
    ttc_threshold: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RolloutArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    frames: Option<usize>,
    /// `sample` or `mean`.
    #[arg(long)]
    mode: Option<String>,
    /// Trace path; side files are written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, num_args = 1..)]
    reference: Vec<PathBuf>,
    #[arg(long, num_args = 1..)]
    traces: Vec<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Held-out episodes for open-loop errors; the references are used when omitted.
    #[arg(long, num_args = 1..)]
    test: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long, required = true, num_args = 1..)]
    train: Vec<PathBuf>,
    #[arg(long, required = true, num_args = 1..)]
    test: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    ttc_thresholds: Option<Vec<f64>>,
    #[arg(long)]
    no_ids: bool,
    #[arg(long)]
    uni_cross: bool,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(cli: &Cli) -> RunResult<RunConfig> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if cli.out_dir.is_some() {
        config.out_dir = cli.out_dir.clone();
    }
    if cli.workers.is_some() {
        config.workers = cli.workers;
    }
    Ok(config)
}

fn out_path(config: &RunConfig, explicit: &Option<PathBuf>, default: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| {
        config
            .out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("out"))
            .join(default)
    })
}

fn run(cli: Cli) -> RunResult<()> {
    let mut config = load_config(&cli)?;
    if let Some(w) = config.workers {
        if w == 0 {
            return Err(RunError::Config("workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| RunError::Config(e.to_string()))?;
    }
    match &cli.command {
        Command::Gen(a) => {
            if let Some(n) = a.episodes {
                config.data.episodes = n;
            }
            if let Some(n) = a.test_episodes {
                config.data.test_episodes = n;
            }
            if let Some(f) = a.frames {
                config.world.frames = f;
            }
            let config = config.resolve()?;
            let out = out_path(&config, &a.out, "data");
            pipeline::cmd_gen(&config, &out)?;
            eprintln!("wrote episodes to {}", out.display());
        }
        Command::Train(a) => {
            if let Some(e) = a.epochs {
                config.train.epochs = e;
            }
            if a.no_ids {
                config.train.ids = false;
            }
            if let Some(t) = a.ttc_threshold {
                config.train.interaction.ttc_threshold = t;
            }
            let config = config.resolve()?;
            let out = out_path(&config, &a.out, "train");
            pipeline::cmd_train(&config, &a.data, a.resume.as_deref(), &out)?;
            eprintln!("wrote checkpoint to {}", out.join("checkpoint.json").display());
        }
        Command::Rollout(a) => {
            if let Some(f) = a.frames {
                config.rollout.max_frames = f;
            }
            if let Some(m) = &a.mode {
                config.rollout.mode = pipeline::parse_mode(m)?;
            }
            let config = config.resolve()?;
            let out = out_path(&config, &a.out, "rollout/trace.jsonl");
            let (_, summary) = pipeline::cmd_rollout(&config, &a.checkpoint, &a.reference, &out)?;
            match summary.collapse_reason {
                Some(r) => eprintln!("collapsed after {:.1} s ({})", summary.seconds, r),
                None => eprintln!("no collapse within {:.1} s", summary.seconds),
            }
        }
        Command::Eval(a) => {
            let config = config.resolve()?;
            let out = out_path(&config, &a.out, "eval");
            let inputs = EvalInputs {
                reference: a.reference.clone(),
                traces: a.traces.clone(),
                checkpoint: a.checkpoint.clone(),
                test: a.test.clone(),
            };
            pipeline::cmd_eval(&config, &inputs, &out)?;
            eprintln!("wrote report to {}", out.join("report.json").display());
        }
        Command::Ablate(a) => {
            if let Some(t) = &a.ttc_thresholds {
                config.ablate.ttc_thresholds = t.clone();
            }
            if a.no_ids {
                config.ablate.no_ids = true;
            }
            if a.uni_cross {
                config.ablate.uni_cross = true;
            }
            if let Some(s) = a.seeds {
                config.ablate.seeds = s;
            }
            let config = config.resolve()?;
            let out = out_path(&config, &a.out, "ablate");
            pipeline::cmd_ablate(&config, &a.train, &a.test, &out)?;
            eprintln!("wrote {}", Path::new(&out).join("ablation.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
