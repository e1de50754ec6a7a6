//! `banditroute` command line: generate datasets, run the replay protocol,
//! compare runs and lint dataset files.
//!
//! Exit codes: 0 on success, 2 for usage, config or input errors, 1 for
//! failures while running.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use banditroute::data::generate_synthetic;
use banditroute::harness::compare::{compare_runs, load_run};
use banditroute::{Error, PolicyKind, RunConfig, Simulation, SyntheticSpec};
use clap::{Args, Parser, Subcommand};

/// Default output root when neither `--out` nor `output.dir` is given.
const OUT_ROOT_ENV: &str = "BANDITROUTE_OUT";
const SNAPSHOT_FILE: &str = "config.snapshot";
const COMPARISON_FILE: &str = "comparison.csv";

#[derive(Parser)]
#[command(
    name = "banditroute",
    version,
    about = "Cost-aware LLM routing with a neural UCB bandit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset.
    Gen(GenArgs),
    /// Run the replay protocol for one policy.
    Run(RunArgs),
    /// Join the metrics of several runs.
    Compare(CompareArgs),
    /// Check a dataset file and print its header.
    Validate { path: PathBuf },
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "samples", short = 'n', default_value_t = 2000)]
    samples: usize,
    #[arg(long = "actions", short = 'k', default_value_t = 5)]
    actions: usize,
    #[arg(long = "domains", short = 'd', default_value_t = 8)]
    domains: usize,
    #[arg(long = "embed-dim", short = 'e', default_value_t = 16)]
    embed_dim: usize,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Config file with `key = value` lines.
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set ucb.beta=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    overrides: Vec<(String, String)>,
    /// Shorthand for `--set policy.kind=...`.
    #[arg(long)]
    policy: Option<PolicyKind>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Print a config template with every default and exit.
    #[arg(long, conflicts_with_all = ["config", "overrides", "policy", "out"])]
    template: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Run directories, each holding a metrics.csv. The first is the
    /// reference for reward gaps.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Where to write the long-format CSV.
    #[arg(long, short, default_value = COMPARISON_FILE)]
    out: PathBuf,
}

fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    Ok((k.trim().to_owned(), v.trim().to_owned()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Validate { path } => cmd_validate(&path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Bad config, bad input files and bad arguments are the caller's to fix
/// (2); everything else failed while running (1).
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config { .. } | Error::Parse { .. } | Error::InvalidArgument(_)) => 2,
        _ => 1,
    }
}

fn cmd_gen(args: GenArgs) -> anyhow::Result<()> {
    let spec = SyntheticSpec {
        seed: args.seed,
        num_samples: args.samples,
        num_actions: args.actions,
        num_domains: args.domains,
        embed_dim: args.embed_dim,
    };
    let data = generate_synthetic(&spec)?;
    data.save(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    log::info!("wrote {} samples to {}", data.len(), args.out.display());
    Ok(())
}

fn cmd_run(args: RunArgs) -> anyhow::Result<()> {
    if args.template {
        print!("{}", RunConfig::template());
        return Ok(());
    }
    let mut overrides = args.overrides;
    if let Some(p) = args.policy {
        overrides.push(("policy.kind".into(), p.to_string()));
    }
    let text = match &args.config {
        Some(path) => fs::read_to_string(path).map_err(|e| {
            Error::InvalidArgument(format!("cannot read config {}: {e}", path.display()))
        })?,
        None => String::new(),
    };
    let mut cfg = RunConfig::parse_with_overrides(&text, &overrides)?;
    let out_dir = args
        .out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| default_out_root().join(cfg.spec.policy.as_str()));
    cfg.output_dir = Some(out_dir.clone());

    let data = cfg.data.load()?;
    log::info!(
        "{} on {} samples, {} actions, {} slices",
        cfg.spec.policy,
        data.len(),
        data.num_actions(),
        cfg.spec.protocol.num_slices
    );
    let mut sim = Simulation::new(&data, cfg.spec)?;
    while !sim.is_finished() {
        let m = sim.run_slice()?;
        log::info!(
            "slice {}: avg reward {:.4}, avg cost {:.4}, avg quality {:.4}",
            m.slice_index,
            m.avg_reward,
            m.avg_cost,
            m.avg_quality
        );
    }
    let output = sim.into_output();
    output.write_to(&out_dir)?;
    fs::write(out_dir.join(SNAPSHOT_FILE), cfg.snapshot())?;
    println!("{}", out_dir.display());
    Ok(())
}

fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn cmd_compare(args: CompareArgs) -> anyhow::Result<()> {
    let runs = args
        .runs
        .iter()
        .map(|d| load_run(d))
        .collect::<banditroute::Result<Vec<_>>>()?;
    let cmp = compare_runs(runs)?;
    fs::write(&args.out, cmp.long_csv())
        .with_context(|| format!("writing {}", args.out.display()))?;
    print!("{}", cmp.summary());
    Ok(())
}

fn cmd_validate(path: &Path) -> anyhow::Result<()> {
    let data = banditroute::Dataset::load(path)?;
    let h = data.header();
    println!(
        "{}: ok, {} samples, K={} D={} E={} cmax={}",
        path.display(),
        data.len(),
        h.num_actions,
        h.num_domains,
        h.embed_dim,
        data.cmax()
    );
    Ok(())
}
