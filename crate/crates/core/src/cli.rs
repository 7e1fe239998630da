//! Command-line harness.
//!
//! Exit codes: 0 success, 1 runtime error, 2 configuration error, 3 I/O or
//! file-format error, 4 failed verification, 64 usage error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::align::{
    make_biased_corpus, pretrain_stage, round_metrics, round_stage, run_pipeline, warmup_metrics, warmup_stage,
};
use crate::config::{PairSource, RunConfig};
use crate::error::{Error, Result};
use crate::eval::theory::verify_all;
use crate::eval::{score_metrics, MetricsRow};
use crate::perturb::PerturbOp;
use crate::policy::{write_atomic, PolicyParams};
use crate::reward::GAMMA_GRID;
use crate::rundir::RunDir;
use crate::world::generate_world;

pub const EXIT_USAGE: i32 = 64;
/// Environment variable naming the root under which run directories are
/// created (`<root>/seed-<seed>`); defaults to `runs`.
pub const RUN_ROOT_ENV: &str = "IRIS_RUN_ROOT";

#[derive(Debug, Parser)]
#[command(name = "iris", version, about = "Implicit-reward self-alignment laboratory")]
pub struct Cli {
    /// Config file, or `default` for the built-in configuration.
    #[arg(long, global = true, default_value = "default")]
    pub config: String,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `section.key=value` override; repeatable, applied in order.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Run directory; defaults to `$IRIS_RUN_ROOT/seed-<seed>`.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a run directory: config snapshot, world and corpora.
    GenWorld,
    /// Train the biased base policy of an existing run.
    Pretrain,
    /// Warm up the base policy on grounded captions (round 0).
    Sft,
    /// Run one preference round; needs the previous rounds' checkpoints.
    Round {
        #[arg(long)]
        round: usize,
    },
    /// Every stage in order.
    RunAll {
        /// Replace the artifacts of an existing run directory.
        #[arg(long)]
        overwrite: bool,
    },
    /// Recompute metrics rows from stored checkpoints and pairs.
    Eval {
        /// Only this round; all stored rounds otherwise.
        #[arg(long)]
        round: Option<usize>,
        /// Fail (exit 4) unless the recomputed rows equal the stored ones.
        #[arg(long)]
        check: bool,
        /// Decode metrics of an arbitrary checkpoint on the run's world.
        #[arg(long, conflicts_with_all = ["round", "check"])]
        checkpoint: Option<PathBuf>,
    },
    /// Gradient-form identity, margin improvement and best-of-K checks.
    VerifyTheory {
        #[arg(long, default_value_t = 0)]
        theory_seed: u64,
    },
    /// Final-round metrics across a hyperparameter grid.
    Sweep {
        kind: SweepKind,
        /// Comma-separated seeds; defaults to the configured seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Also write the table to this CSV file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    /// Rectification strength over the reference grid.
    Gamma,
    /// Visual-preference weight.
    Lambda,
    /// Candidates per context.
    K,
    /// Rejected-image operator.
    Operator,
    /// Fraction of preference data.
    Data,
    /// Loss components.
    Loss,
    /// Warm-up on/off crossed with self-generated/fixed pairs.
    Paradigm,
}

/// Labelled override sets of a sweep.
pub fn sweep_grid(kind: SweepKind) -> Vec<(String, Vec<String>)> {
    let one = |label: String, set: String| (label, vec![set]);
    match kind {
        SweepKind::Gamma => GAMMA_GRID
            .iter()
            .map(|g| one(g.to_string(), format!("reward.gamma={g:?}")))
            .collect(),
        SweepKind::Lambda => [0.0, 0.3, 0.5, 0.7, 1.0, 1.2]
            .iter()
            .map(|l: &f64| one(l.to_string(), format!("loss.lambda={l:?}")))
            .collect(),
        SweepKind::K => [3usize, 5, 10]
            .iter()
            .map(|k| one(k.to_string(), format!("sift.k={k}")))
            .collect(),
        SweepKind::Operator => PerturbOp::ALL
            .iter()
            .map(|op| one(op.name().to_string(), format!("perturb.operator=\"{}\"", op.name())))
            .collect(),
        SweepKind::Data => [1.0 / 5.7, 3.0 / 5.7, 1.0]
            .iter()
            .map(|f: &f64| one(format!("{f:.3}"), format!("train.data_fraction={f:?}")))
            .collect(),
        SweepKind::Loss => vec![
            ("ctp".into(), vec!["loss.lambda=0.0".into(), "loss.anchor=false".into()]),
            ("ctp+anchor".into(), vec!["loss.lambda=0.0".into()]),
            ("ctp+cvp".into(), vec!["loss.anchor=false".into()]),
            ("ctp+cvp+anchor".into(), vec![]),
        ],
        SweepKind::Paradigm => [(true, PairSource::SelfGenerated), (true, PairSource::Fixed), (false, PairSource::SelfGenerated), (false, PairSource::Fixed)]
            .iter()
            .map(|&(warm, src)| {
                let name = match src {
                    PairSource::SelfGenerated => "self_generated",
                    PairSource::Fixed => "fixed",
                };
                (
                    format!("warmup={warm}/{name}"),
                    vec![format!("train.warmup={warm}"), format!("train.pair_source=\"{name}\"")],
                )
            })
            .collect(),
    }
}

pub const SWEEP_HEADER: &str = "sweep,value";

/// Runs a sweep; returns the CSV table (header included).
pub fn run_sweep(base: &RunConfig, kind: SweepKind, seeds: &[u64]) -> Result<String> {
    let mut table = format!("{SWEEP_HEADER},{}\n", MetricsRow::CSV_HEADER);
    let name = format!("{kind:?}").to_lowercase();
    for (label, sets) in sweep_grid(kind) {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.train.seed = seed;
            for s in &sets {
                cfg.set(s)?;
            }
            let run = run_pipeline(&cfg)?;
            let _ = writeln!(table, "{name},{label},{}", run.final_metrics().to_csv());
        }
    }
    Ok(table)
}

/// Builds the configuration from `--config`, `--seed` and `--set` (flags
/// win over the file).
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&cli.config)?;
    for s in &cli.set {
        cfg.set(s)?;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn default_run_dir(seed: u64) -> PathBuf {
    let root = std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(format!("seed-{seed}"))
}

fn run_dir_for(cli: &Cli, seed: u64) -> RunDir {
    RunDir::new(cli.run_dir.clone().unwrap_or_else(|| default_run_dir(seed)))
}

/// Opens an existing run: stage commands use its config snapshot, so
/// config flags other than `--seed` (which locates the run) are rejected.
fn open_run(cli: &Cli) -> Result<(RunDir, RunConfig)> {
    if cli.config != "default" || !cli.set.is_empty() {
        return Err(Error::Config(
            "stage commands read the run's config snapshot; pass --config/--set to gen-world or run-all".into(),
        ));
    }
    let seed = cli.seed.unwrap_or(RunConfig::default().train.seed);
    let run = run_dir_for(cli, seed);
    let cfg = run.load_config()?;
    if cli.seed.is_some_and(|s| s != cfg.train.seed) {
        return Err(Error::Config(format!(
            "run directory {} holds seed {}, not {seed}",
            run.root.display(),
            cfg.train.seed
        )));
    }
    Ok((run, cfg))
}

pub fn stage_gen_world(run: &RunDir, cfg: &RunConfig) -> Result<()> {
    let world = generate_world(cfg.train.seed, &cfg.world)?;
    let biased = make_biased_corpus(&world, cfg)?;
    run.save_config(cfg)?;
    run.save_world(&world)?;
    run.save_corpora(&world, &biased)
}

pub fn stage_pretrain(run: &RunDir, cfg: &RunConfig) -> Result<f64> {
    let world = run.load_world()?;
    let corpus = run.load_biased_corpus()?;
    let (base, nll) = pretrain_stage(&world, &corpus, cfg)?;
    base.save(&run.base_path(), cfg.train.seed)?;
    run.save_history(cfg.train.seed, &nll, &[])?;
    Ok(*nll.last().expect("history holds the initial NLL"))
}

pub fn stage_sft(run: &RunDir, cfg: &RunConfig) -> Result<MetricsRow> {
    let seed = cfg.train.seed;
    let world = run.load_world()?;
    let base = run.load_checkpoint(&run.base_path(), seed)?;
    let (warm, nll) = warmup_stage(&world, &base, cfg)?;
    warm.save(&run.checkpoint_path(0), seed)?;
    let mut history = run.load_history()?;
    history.sft_nll = nll;
    run.save_history(seed, &history.pretrain_nll, &history.sft_nll)?;
    let row = warmup_metrics(&world, &warm, cfg)?;
    run.upsert_metrics(row)?;
    Ok(row)
}

pub fn stage_round(run: &RunDir, cfg: &RunConfig, round: usize) -> Result<MetricsRow> {
    let seed = cfg.train.seed;
    let world = run.load_world()?;
    let base = run.load_checkpoint(&run.base_path(), seed)?;
    let checkpoints = run.load_checkpoints(round, seed)?;
    let (out, row) = round_stage(&world, &base, &checkpoints, round, cfg)?;
    run.save_round(seed, &out)?;
    run.upsert_metrics(row)?;
    Ok(row)
}

/// Artifacts `run-all` owns inside a run directory.
const ARTIFACTS: [&str; 10] = [
    "config.toml",
    "world.json",
    "history.json",
    "metrics.csv",
    "corpus",
    "checkpoints",
    "pairs",
    "stats",
    "steps",
    "sweeps",
];

fn clear_run(run: &RunDir, overwrite: bool) -> Result<()> {
    let root = &run.root;
    let present: Vec<PathBuf> = ARTIFACTS.iter().map(|a| root.join(a)).filter(|p| p.exists()).collect();
    if present.is_empty() {
        return Ok(());
    }
    if !overwrite {
        return Err(Error::Config(format!(
            "{} already holds a run; pass --overwrite to replace it",
            root.display()
        )));
    }
    for p in present {
        let res = if p.is_dir() { std::fs::remove_dir_all(&p) } else { std::fs::remove_file(&p) };
        res.map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn stage_all(run: &RunDir, cfg: &RunConfig, overwrite: bool) -> Result<Vec<MetricsRow>> {
    clear_run(run, overwrite)?;
    stage_gen_world(run, cfg)?;
    stage_pretrain(run, cfg)?;
    let mut rows = vec![stage_sft(run, cfg)?];
    for r in 1..=cfg.train.rounds {
        rows.push(stage_round(run, cfg, r)?);
    }
    Ok(rows)
}

/// Recomputes the metrics row of `round` from stored artifacts.
pub fn recompute_row(run: &RunDir, cfg: &RunConfig, round: usize) -> Result<MetricsRow> {
    let seed = cfg.train.seed;
    let world = run.load_world()?;
    let policy = run.load_checkpoint(&run.checkpoint_path(round), seed)?;
    if round == 0 {
        return warmup_metrics(&world, &policy, cfg);
    }
    let opt_ref = run.load_checkpoint(&run.checkpoint_path(round - 1), seed)?;
    let training = run.load_training_pairs(&world, round)?;
    round_metrics(&world, &policy, &opt_ref, &training, round, cfg)
}

fn eval_command(run: &RunDir, cfg: &RunConfig, round: Option<usize>, check: bool) -> Result<String> {
    let stored = run.read_metrics()?;
    let rounds: Vec<usize> = match round {
        Some(r) => vec![r],
        None => stored.iter().map(|r| r.round).collect(),
    };
    let mut out = format!("{}\n", MetricsRow::CSV_HEADER);
    for r in rounds {
        let row = recompute_row(run, cfg, r)?;
        out.push_str(&row.to_csv());
        out.push('\n');
        if check {
            let want = stored
                .iter()
                .find(|s| s.round == r)
                .ok_or_else(|| Error::Verification(format!("metrics.csv has no row for round {r}")))?;
            if *want != row {
                return Err(Error::Verification(format!(
                    "round {r}: stored {} but recomputed {}",
                    want.to_csv(),
                    row.to_csv()
                )));
            }
        }
    }
    Ok(out)
}

fn configure_threads(cfg: &RunConfig) {
    if cfg.threads > 0 {
        // Fails only if the pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
}

/// Executes a parsed command; returns the text printed on stdout.
pub fn execute(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::GenWorld => {
            let cfg = resolve_config(cli)?;
            let run = run_dir_for(cli, cfg.train.seed);
            clear_run(&run, false)?;
            stage_gen_world(&run, &cfg)?;
            Ok(format!("{}\n", run.root.display()))
        }
        Command::Pretrain => {
            let (run, cfg) = open_run(cli)?;
            configure_threads(&cfg);
            let nll = stage_pretrain(&run, &cfg)?;
            Ok(format!("pretrain nll {nll}\n"))
        }
        Command::Sft => {
            let (run, cfg) = open_run(cli)?;
            configure_threads(&cfg);
            let row = stage_sft(&run, &cfg)?;
            Ok(format!("{}\n{}\n", MetricsRow::CSV_HEADER, row.to_csv()))
        }
        Command::Round { round } => {
            let (run, cfg) = open_run(cli)?;
            configure_threads(&cfg);
            let row = stage_round(&run, &cfg, *round)?;
            Ok(format!("{}\n{}\n", MetricsRow::CSV_HEADER, row.to_csv()))
        }
        Command::RunAll { overwrite } => {
            let cfg = resolve_config(cli)?;
            configure_threads(&cfg);
            let run = run_dir_for(cli, cfg.train.seed);
            let rows = stage_all(&run, &cfg, *overwrite)?;
            let mut out = format!("{}\n", MetricsRow::CSV_HEADER);
            for r in rows {
                out.push_str(&r.to_csv());
                out.push('\n');
            }
            Ok(out)
        }
        Command::Eval {
            round,
            check,
            checkpoint,
        } => {
            let (run, cfg) = open_run(cli)?;
            configure_threads(&cfg);
            match checkpoint {
                Some(path) => {
                    let world = run.load_world()?;
                    let policy = run.load_checkpoint(path, cfg.train.seed)?;
                    let row = score_metrics(&policy, &world, &cfg.eval)?;
                    Ok(format!("{}\n{}\n", MetricsRow::CSV_HEADER, row.to_csv()))
                }
                None => eval_command(&run, &cfg, *round, *check),
            }
        }
        Command::VerifyTheory { theory_seed } => {
            let reports = verify_all(*theory_seed)?;
            let mut out = String::new();
            for r in &reports {
                let _ = writeln!(out, "{}", r.summary());
                for d in &r.details {
                    let _ = writeln!(out, "    {d}");
                }
            }
            if let Some(bad) = reports.iter().find(|r| !r.passed) {
                print!("{out}");
                return Err(Error::Verification(format!("{} failed", bad.name)));
            }
            Ok(out)
        }
        Command::Sweep { kind, seeds, out } => {
            let cfg = resolve_config(cli)?;
            configure_threads(&cfg);
            let seeds = if seeds.is_empty() { vec![cfg.train.seed] } else { seeds.clone() };
            let table = run_sweep(&cfg, *kind, &seeds)?;
            if let Some(path) = out {
                write_atomic(path, table.as_bytes())?;
            }
            Ok(table)
        }
    }
}

/// Parses `args` (program name first), executes, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Loads a checkpoint file without a run directory.
pub fn load_policy(path: &Path) -> Result<PolicyParams> {
    Ok(PolicyParams::load(path)?.0)
}
