use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mycroft_core::data::Budget;
use mycroft_core::protocol::{rank_dos, run_budget_sweep, Protocol, RankingReport, RoundReport, Strategy};
use mycroft_core::report::{emit, write_json, ReportFormat};
use mycroft_core::scenario::{instantiate, GeneratorSpec, ScenarioConfig, Transform};
use mycroft_core::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

mod oracle;

#[derive(Parser)]
#[command(
    name = "mycroft",
    version,
    about = "Budgeted data selection between a model trainer and data owners"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One selection round per configured data owner.
    Run(RunArgs),
    /// Mycroft, random and full-information rounds over a budget grid.
    Sweep(SweepArgs),
    /// Rank the configured data owners against the full-information ordering.
    Rank(RankArgs),
    /// Corrupt, relabel or strip the owners' data before selection.
    Scenario(ScenarioArgs),
    /// Compare OMP with exhaustive search on small random instances.
    Oracle(oracle::OracleArgs),
    /// Write a synthetic scenario's datasets as CSV.
    Gen(GenArgs),
}

#[derive(Args)]
struct Common {
    /// Scenario config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run this seed only, instead of the config's `seeds`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Budget; defaults to the first configured budget.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated ascending budgets; defaults to the configured ones.
    #[arg(long, value_delimiter = ',')]
    budgets: Option<Vec<usize>>,
}

#[derive(Args)]
struct RankArgs {
    #[command(flatten)]
    common: Common,
    /// Budget; defaults to the first configured budget.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Which {
    /// Corrupt the features of a fraction of each owner's samples.
    Corrupt,
    /// Reassign the labels of a fraction of each owner's samples.
    Labels,
    /// Drop every label; gradient strategies fall back to feature similarity.
    Unlabeled,
}

impl Which {
    fn as_str(self) -> &'static str {
        match self {
            Which::Corrupt => "corrupt",
            Which::Labels => "labels",
            Which::Unlabeled => "unlabeled",
        }
    }
}

#[derive(Args)]
struct ScenarioArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    which: Which,
    /// Fraction of samples affected by `corrupt` and `labels`.
    #[arg(long, default_value_t = 0.7)]
    fraction: f64,
    /// Noise magnitude for `corrupt`.
    #[arg(long, default_value_t = 2.0)]
    magnitude: f64,
    /// Budget; defaults to the configured budgets.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Generator {
    Spurious,
    Mixture,
    Graded,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    which: Generator,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match configure_threads().and_then(|()| dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("MYCROFT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("MYCROFT_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Rank(a) => cmd_rank(a),
        Command::Scenario(a) => cmd_scenario(a),
        Command::Oracle(a) => oracle::cmd_oracle(a),
        Command::Gen(a) => cmd_gen(a),
    }
}

/// The loaded config with command-line overrides applied, plus the output directory.
fn load(common: &Common) -> Result<(ScenarioConfig, PathBuf)> {
    if !common.config.exists() {
        return Err(Error::Config(format!(
            "config file {} not found",
            common.config.display()
        )));
    }
    let mut cfg = ScenarioConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set `output_dir`".into()))?;
    std::fs::create_dir_all(&out)?;
    Ok((cfg, out))
}

fn budget(k: Option<usize>, cfg: &ScenarioConfig) -> Result<Budget> {
    Budget::new(k.unwrap_or(cfg.budgets[0]))
}

/// Runs `f` for every configured seed in parallel, keeping seed order.
fn per_seed<T: Send>(cfg: &ScenarioConfig, f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    cfg.seeds.par_iter().map(|&s| f(s)).collect()
}

fn write_reports(reports: &[RoundReport], out: &Path, stem: &str) -> Result<()> {
    emit(reports, ReportFormat::Json, &out.join(format!("{stem}.json")))?;
    emit(reports, ReportFormat::Csv, &out.join(format!("{stem}.csv")))?;
    log::info!("wrote {} reports to {}", reports.len(), out.display());
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let (cfg, out) = load(&a.common)?;
    let k = budget(a.k, &cfg)?;
    let aug = cfg.augment();
    let reports = per_seed(&cfg, |seed| {
        let inst = instantiate(&cfg, seed)?;
        let proto = Protocol::new(&inst.mt, &inst.hard, &aug, seed)?;
        let mut owners: Vec<_> = inst.owners.iter().collect();
        owners.sort_by(|x, y| x.name.cmp(&y.name));
        owners
            .par_iter()
            .map(|o| proto.mycroft_round(o, k))
            .collect::<Result<Vec<_>>>()
    })?;
    write_reports(&reports.concat(), &out, "reports")
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let (mut cfg, out) = load(&a.common)?;
    if let Some(b) = a.budgets {
        cfg.budgets = b;
    }
    if cfg.budgets.is_empty() || cfg.budgets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "budgets must be strictly ascending, got {:?}",
            cfg.budgets
        )));
    }
    let aug = cfg.augment();
    let reports = per_seed(&cfg, |seed| {
        let inst = instantiate(&cfg, seed)?;
        let proto = Protocol::new(&inst.mt, &inst.hard, &aug, seed)?;
        let mut owners: Vec<_> = inst.owners.iter().collect();
        owners.sort_by(|x, y| x.name.cmp(&y.name));
        let cells = owners
            .iter()
            .map(|o| run_budget_sweep(&proto, o, &cfg.budgets))
            .collect::<Result<Vec<_>>>()?;
        Ok(cells.concat())
    })?;
    write_reports(&reports.concat(), &out, "sweep")
}

#[derive(Serialize)]
struct SeedRanking {
    seed: u64,
    #[serde(flatten)]
    ranking: RankingReport,
}

#[derive(Serialize)]
struct RankSummary {
    budget: usize,
    mean_kendall_tau: f64,
    mean_random_kendall_tau: f64,
    seeds: Vec<SeedRanking>,
}

fn cmd_rank(a: RankArgs) -> Result<()> {
    let (cfg, out) = load(&a.common)?;
    if cfg.dos.len() < 2 {
        return Err(Error::Config("ranking needs at least two data owners".into()));
    }
    let k = budget(a.k, &cfg)?;
    let aug = cfg.augment();
    let seeds = per_seed(&cfg, |seed| {
        let inst = instantiate(&cfg, seed)?;
        let proto = Protocol::new(&inst.mt, &inst.hard, &aug, seed)?;
        Ok(SeedRanking {
            seed,
            ranking: rank_dos(&proto, &inst.owners, k)?,
        })
    })?;
    let n = seeds.len() as f64;
    let summary = RankSummary {
        budget: k.get(),
        mean_kendall_tau: seeds.iter().map(|s| s.ranking.kendall_tau).sum::<f64>() / n,
        mean_random_kendall_tau: seeds.iter().map(|s| s.ranking.random_kendall_tau).sum::<f64>() / n,
        seeds,
    };
    let mut rounds: Vec<RoundReport> = Vec::new();
    for s in &summary.seeds {
        let mut scores: Vec<_> = s.ranking.scores.iter().collect();
        scores.sort_by(|x, y| x.do_name.cmp(&y.do_name));
        for sc in scores {
            rounds.extend([sc.mycroft.clone(), sc.random.clone(), sc.full_information.clone()]);
        }
    }
    write_json(&summary, &out.join("ranking.json"))?;
    write_reports(&rounds, &out, "rank")
}

/// The same config with every owner's data altered by `which`.
fn altered(cfg: &ScenarioConfig, which: Which, fraction: f64, magnitude: f64) -> ScenarioConfig {
    let mut alt = cfg.clone();
    for d in &mut alt.dos {
        let t = match which {
            Which::Corrupt => Transform::CorruptFeatures { fraction, magnitude },
            Which::Labels => Transform::PermuteLabels { fraction },
            Which::Unlabeled => {
                if d.strategy.needs_gradients() {
                    log::info!("{}: {} needs labels, using featsim", d.name, d.strategy);
                    d.strategy = Strategy::FeatSim;
                }
                Transform::StripLabels
            }
        };
        d.transforms.push(t);
    }
    alt
}

fn cmd_scenario(a: ScenarioArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.fraction) {
        return Err(Error::Config(format!("--fraction {} outside [0, 1]", a.fraction)));
    }
    if !(a.magnitude.is_finite() && a.magnitude >= 0.0) {
        return Err(Error::Config(format!(
            "--magnitude {} must be non-negative",
            a.magnitude
        )));
    }
    let (mut cfg, out) = load(&a.common)?;
    if let Some(k) = a.k {
        cfg.budgets = vec![k];
    }
    let alt = altered(&cfg, a.which, a.fraction, a.magnitude);
    let aug = cfg.augment();
    let reports = per_seed(&cfg, |seed| {
        let clean = instantiate(&cfg, seed)?;
        let changed = instantiate(&alt, seed)?;
        let proto = Protocol::new(&clean.mt, &clean.hard, &aug, seed)?;
        let mut rows = Vec::new();
        let mut names: Vec<&str> = cfg.dos.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        for &k in &cfg.budgets {
            let k = Budget::new(k)?;
            for name in &names {
                let o = clean.owner(name)?;
                rows.push(proto.mycroft_round(o, k)?);
                rows.push(proto.random_round(o, k, 0)?);
                let mut c = changed.owner(name)?.clone();
                c.name = format!("{name}+{}", a.which.as_str());
                rows.push(proto.mycroft_round(&c, k)?);
                // random sampling needs labels; the unlabeled case keeps the clean baseline
                if a.which != Which::Unlabeled {
                    rows.push(proto.random_round(&c, k, 0)?);
                }
            }
        }
        Ok(rows)
    })?;
    write_reports(&reports.concat(), &out, "scenario")
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let spec = match a.which {
        Generator::Spurious => GeneratorSpec::spurious(),
        Generator::Mixture => GeneratorSpec::mixture(),
        Generator::Graded => GeneratorSpec::graded(),
    };
    let generated = spec.generate(mycroft_core::data::SeededRng::new(a.seed))?;
    let written = generated.write_csv(&a.out)?;
    write_json(&generated.planted, &a.out.join("planted.json"))?;
    log::info!("wrote {} datasets to {}", written.len(), a.out.display());
    Ok(())
}
