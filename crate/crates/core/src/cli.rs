//! Command-line entry point: `train`, `eval`, `delay-sweep`, `search` and
//! `bench`. Exit codes are 0 on success, 2 on a configuration error and 3 on
//! a runtime failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::bench;
use crate::checkpoint::load_checkpoint;
use crate::config::{parse_override, Profile, RunConfig};
use crate::error::{Error, Result};
use crate::experiments;
use crate::nn::{Network, NetworkSpec};
use crate::pipeline;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "ba3c", version, about = "Batch A3C on CPU: training, evaluation, experiments and conv benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// JSON config with flat dotted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `desk` (toy defaults) or `paper` (original hyperparameters).
    #[arg(long)]
    pub profile: Option<String>,
    /// Override one key, e.g. `--set pipeline.n_envs=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Shorthand for `--set output_dir=DIR`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write metrics, checkpoint and config into the output dir.
    Train(ConfigArgs),
    /// Greedy evaluation of a checkpoint; prints {mean, max, games}.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 50)]
        games: usize,
    },
    /// Artificial-delay sweep.
    DelaySweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,5,10,25,50")]
        delays: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Frames per run of the capacity 3 vs 8 throughput check; 0 skips it.
        #[arg(long, default_value_t = 50_000)]
        throughput_frames: u64,
    },
    /// Loguniform random search over learning rate and batch size.
    Search {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Conv and layout-conversion benchmarks.
    Bench {
        /// Only `canonical` is defined.
        #[arg(long, default_value = "canonical")]
        cases: String,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        /// Worker threads for the optimized kernels; defaults to all cores.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        no_convert: bool,
        #[arg(long, default_value = "out/bench")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn error(&self) -> &Error {
        match self {
            Failure::Config(e) | Failure::Runtime(e) => e,
        }
    }
}

fn config_err(e: Error) -> Failure {
    Failure::Config(e)
}

fn runtime_err(e: Error) -> Failure {
    Failure::Runtime(e)
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = BTreeMap::new();
        if let Some(p) = &self.profile {
            p.parse::<Profile>()?;
            overrides.insert("profile".to_string(), Value::String(p.clone()));
        }
        for s in &self.set {
            let (k, v) = parse_override(s)?;
            overrides.insert(k, v);
        }
        if let Some(seed) = self.seed {
            overrides.insert("seed".into(), json!(seed));
        }
        if let Some(out) = &self.out {
            overrides.insert("output_dir".into(), json!(out.to_string_lossy()));
        }
        match &self.config {
            Some(path) => RunConfig::load(path, &overrides),
            None => RunConfig::resolve(&BTreeMap::new(), &overrides),
        }
    }
}

fn write_config(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.output_dir);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.json"), cfg.to_json()?)?;
    Ok(dir)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Output goes to stdout/stderr.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.error());
            f.code()
        }
    }
}

fn dispatch(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Train(args) => train(&args),
        Command::Eval { cfg, checkpoint, games } => eval(&cfg, &checkpoint, games),
        Command::DelaySweep {
            cfg,
            delays,
            seeds,
            throughput_frames,
        } => delay_sweep(&cfg, &delays, seeds, throughput_frames),
        Command::Search { cfg, trials } => search(&cfg, trials),
        Command::Bench {
            cases,
            batch,
            repeats,
            warmup,
            threads,
            no_convert,
            out,
            seed,
        } => run_bench(&cases, batch, repeats, warmup, threads, !no_convert, &out, seed),
    }
}

fn train(args: &ConfigArgs) -> std::result::Result<(), Failure> {
    let cfg = args.resolve().map_err(config_err)?;
    let dir = write_config(&cfg).map_err(runtime_err)?;
    let out = pipeline::run::<f32>(&cfg).map_err(runtime_err)?;
    out.write(&dir).map_err(runtime_err)?;
    let s = &out.summary;
    println!(
        "frames {} train_steps {} final_score {:.3} best_score {:.3} max_staleness {}/{} -> {}",
        s.frames,
        s.train_steps,
        s.final_score,
        s.best_score,
        s.max_staleness,
        s.staleness_bound,
        dir.display()
    );
    Ok(())
}

fn eval(args: &ConfigArgs, checkpoint: &Path, games: usize) -> std::result::Result<(), Failure> {
    if !checkpoint.is_file() {
        return Err(Failure::Config(Error::Config(format!(
            "checkpoint {} does not exist",
            checkpoint.display()
        ))));
    }
    let sibling = |name: &str| checkpoint.parent().map(|d| d.join(name)).filter(|p| p.is_file());
    let mut args = args.clone();
    if args.config.is_none() {
        // evaluate with the config the checkpoint was trained under
        args.config = sibling("config.json");
    }
    let cfg = args.resolve().map_err(config_err)?;
    if games == 0 {
        return Err(Failure::Config(Error::Config("--games must be positive".into())));
    }
    let spec = match sibling("model.arch.json") {
        Some(p) => std::fs::read_to_string(&p)
            .map_err(Error::from)
            .and_then(|s| NetworkSpec::from_json(&s))
            .map_err(config_err)?,
        None => cfg.network_spec().map_err(config_err)?,
    };
    let state = load_checkpoint::<f32>(checkpoint).map_err(config_err)?;
    let net = Network::from_params(spec, state.params).map_err(config_err)?;
    let r = pipeline::evaluate(&net, &cfg.env, games, cfg.seed).map_err(runtime_err)?;
    println!("{}", json!({ "mean": r.mean, "max": r.max, "games": r.games }));
    Ok(())
}

fn delay_sweep(args: &ConfigArgs, delays: &[usize], seeds: usize, throughput_frames: u64) -> std::result::Result<(), Failure> {
    let cfg = args.resolve().map_err(config_err)?;
    if delays.is_empty() || seeds == 0 {
        return Err(Failure::Config(Error::Config("need at least one delay and one seed".into())));
    }
    let dir = write_config(&cfg).map_err(runtime_err)?;
    let rows = experiments::delay_sweep(delays, &cfg, seeds, |r| match &r.error {
        None => eprintln!("delay {} seed {}: best {:.3} final {:.3}", r.delay, r.seed, r.best_score, r.final_score),
        Some(e) => eprintln!("delay {} seed {}: failed: {e}", r.delay, r.seed),
    })
    .map_err(runtime_err)?;
    let throughput = if throughput_frames > 0 {
        Some(experiments::queue_throughput_check(&cfg, throughput_frames).map_err(runtime_err)?)
    } else {
        None
    };
    let report = experiments::sweep_report(&cfg, &rows, seeds, throughput);
    experiments::write_sweep(&dir, &rows, &report).map_err(runtime_err)?;
    println!("{}", dir.join("delay_sweep_report.md").display());
    Ok(())
}

fn search(args: &ConfigArgs, trials: usize) -> std::result::Result<(), Failure> {
    let cfg = args.resolve().map_err(config_err)?;
    if trials == 0 {
        return Err(Failure::Config(Error::Config("--trials must be positive".into())));
    }
    let dir = write_config(&cfg).map_err(runtime_err)?;
    let results = experiments::random_search(&experiments::SearchSpace::default(), trials, &cfg, |r| {
        eprintln!(
            "trial {} lr {:.2e} batch {}: mean {:.3}{}",
            r.trial,
            r.lr,
            r.batch_size,
            r.score_mean,
            r.error.as_deref().map(|e| format!(" (failed: {e})")).unwrap_or_default()
        )
    })
    .map_err(runtime_err)?;
    experiments::write_search(&dir, &results).map_err(runtime_err)?;
    println!("{}", dir.join("search.csv").display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_bench(
    cases: &str,
    batch: usize,
    repeats: usize,
    warmup: usize,
    threads: Option<usize>,
    convert: bool,
    out: &Path,
    seed: u64,
) -> std::result::Result<(), Failure> {
    if cases != "canonical" {
        return Err(Failure::Config(Error::Config(format!("unknown case set {cases:?}; only \"canonical\""))));
    }
    if batch == 0 || repeats < 3 || threads == Some(0) {
        return Err(Failure::Config(Error::Config("need --batch >= 1, --repeats >= 3, --threads >= 1".into())));
    }
    let list = bench::canonical_cases(batch, repeats, warmup).map_err(config_err)?;
    let shapes = bench::canonical_shapes(batch).map_err(config_err)?;
    let (rows, n_threads) = bench::with_threads(threads, || -> Result<_> {
        let mut rows = bench::run_bench(&list, seed)?;
        if convert {
            rows.extend(bench::run_convert_bench(&shapes, repeats, warmup, seed)?);
        }
        Ok((rows, rayon::current_num_threads()))
    })
    .and_then(|r| r)
    .map_err(runtime_err)?;
    std::fs::create_dir_all(out).map_err(|e| runtime_err(e.into()))?;
    let csv = bench::to_csv(&rows);
    std::fs::write(out.join("bench.csv"), &csv).map_err(|e| runtime_err(e.into()))?;
    std::fs::write(out.join("bench.md"), bench::to_markdown(&rows, n_threads)).map_err(|e| runtime_err(e.into()))?;
    print!("{csv}");
    Ok(())
}
