//! Command-line surface: seeded runs, single-knob ablations, floor-checking
//! simulations, report aggregation, skill validation, probe filtering, and
//! evidence-log dumps. Machine-parseable output (JSON/CSV) goes to stdout;
//! diagnostics go to stderr. Exit codes: 0 success, 2 configuration errors,
//! 3 backend errors, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use skillbank::backends::scripted::{scripted_oracles, Script};
use skillbank::backends::sim::{
    probe_filter, sample_split, sim_oracles, simulate_run, SimWorld,
};
use skillbank::backends::remote::remote_oracles;
use skillbank::backends::{Oracles, Task, TaskSuite};
use skillbank::config::{apply_ablation, BackendConfig, ConfigError, RunConfig, WorldSource};
use skillbank::engine::{Clock, Engine, EngineError};
use skillbank::evidence::EvidenceStore;
use skillbank::report::{aggregate, load_run_dir, write_curves_csv, write_rounds_jsonl, RunReport};
use skillbank::skill::validate_skill;

#[derive(Parser)]
#[command(name = "skillbank", version, about = "Skill-library lifecycle engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Sim,
    Scripted,
    Remote,
}

#[derive(Args, Clone)]
struct RunCommonArgs {
    /// Path to the run configuration (JSON; `{}` is the default config).
    #[arg(long)]
    config: PathBuf,
    /// Seed override; repeatable. Defaults to the config's seed list.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Backend override.
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Round-count override.
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    /// Per-task worker threads inside each run.
    #[arg(long)]
    parallelism: Option<usize>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Execute seeded runs and write per-round reports, summaries, and the
    /// evidence store.
    Run(RunCommonArgs),
    /// Apply one named single-knob ablation (A1..A8) to the base config and
    /// run it.
    Ablate {
        /// Ablation name: A1..A8.
        name: String,
        #[command(flatten)]
        common: RunCommonArgs,
    },
    /// Multi-seed simulated runs reported against the non-divergence floor.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        #[arg(long)]
        rounds: Option<u32>,
        #[arg(long, default_value = "runs/simulate")]
        out_dir: PathBuf,
    },
    /// Aggregate completed run directories into a summary table and curve CSV.
    Report {
        /// Run directories (each containing summary.json and rounds.jsonl).
        run_dirs: Vec<PathBuf>,
        /// Where to write the curve CSV.
        #[arg(long, default_value = "curves.csv")]
        csv: PathBuf,
    },
    /// Validate one skill YAML file against the schema and budget.
    ValidateSkill {
        file: PathBuf,
        #[arg(long, default_value_t = 1500)]
        budget: usize,
    },
    /// Probe-filter a simulated world down to its hard subset.
    ProbeFilter {
        #[arg(long)]
        config: PathBuf,
        /// Probe seeds, disjoint from experiment seeds.
        #[arg(long, value_delimiter = ',', default_values_t = vec![101u64, 102, 103, 104, 105])]
        probe_seeds: Vec<u64>,
        /// Subset size to sample from the retained pool.
        #[arg(long, default_value_t = 100)]
        sample: usize,
        #[arg(long, default_value_t = 0.6)]
        train_fraction: f64,
        #[arg(long, default_value_t = 9)]
        subset_seed: u64,
        /// Write the filtered world subset here (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump an evidence store as JSON lines in append order.
    DumpLog {
        store: PathBuf,
        #[arg(long, default_value = "jsonl")]
        format: String,
    },
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> CliError {
        CliError { code: 2, message: message.into() }
    }

    fn backend(message: impl Into<String>) -> CliError {
        CliError { code: 3, message: message.into() }
    }

    fn other(message: impl Into<String>) -> CliError {
        CliError { code: 1, message: message.into() }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::config(e.to_string())
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match &e {
            EngineError::Oracle(_) | EngineError::Router(_) | EngineError::Retrieval(_) => {
                CliError::backend(e.to_string())
            }
            EngineError::Config(_) => CliError::config(e.to_string()),
            _ => CliError::other(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(common) => {
            let cfg = resolve_config(&common, None)?;
            run_command(cfg, &common)
        }
        Command::Ablate { name, common } => {
            let cfg = resolve_config(&common, Some(&name))?;
            run_command(cfg, &common)
        }
        Command::Simulate { config, seeds, rounds, out_dir } => {
            simulate_command(&config, &seeds, rounds, &out_dir)
        }
        Command::Report { run_dirs, csv } => report_command(&run_dirs, &csv),
        Command::ValidateSkill { file, budget } => validate_command(&file, budget),
        Command::ProbeFilter { config, probe_seeds, sample, train_fraction, subset_seed, out } => {
            probe_command(&config, &probe_seeds, sample, train_fraction, subset_seed, out.as_deref())
        }
        Command::DumpLog { store, format } => dump_command(&store, &format),
    }
}

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("config {}: {e}", path.display())))?;
    let cfg = RunConfig::from_json(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_config(common: &RunCommonArgs, ablation: Option<&str>) -> Result<RunConfig, CliError> {
    let mut cfg = load_config(&common.config)?;
    if let Some(name) = ablation {
        cfg = apply_ablation(&cfg, name)?;
    }
    if let Some(kind) = common.backend {
        cfg.backend = match (kind, cfg.backend) {
            (BackendKind::Sim, b @ BackendConfig::Sim { .. }) => b,
            (BackendKind::Sim, _) => BackendConfig::Sim { world: WorldSource::default() },
            (BackendKind::Scripted, b @ BackendConfig::Scripted { .. }) => b,
            (BackendKind::Scripted, _) => {
                return Err(CliError::config(
                    "backend scripted requires a script path in the config's backend section",
                ))
            }
            (BackendKind::Remote, b @ BackendConfig::Remote(_)) => b,
            (BackendKind::Remote, _) => {
                return Err(CliError::config(
                    "backend remote requires endpoint settings in the config's backend section",
                ))
            }
        };
    }
    if let Some(rounds) = common.rounds {
        cfg.rounds = rounds;
    }
    if let Some(par) = common.parallelism {
        cfg.parallelism = par.max(1);
    }
    if !common.seeds.is_empty() {
        cfg.seeds = common.seeds.clone();
    }
    Ok(cfg)
}

fn load_sim_world(source: &WorldSource) -> Result<SimWorld, CliError> {
    match source {
        WorldSource::Path(path) => {
            SimWorld::load(path).map_err(|e| CliError::config(e.to_string()))
        }
        WorldSource::Generate(gen) => Ok(SimWorld::generate(gen)),
    }
}

/// Build the oracle set, the task suite, and the clock for a config.
fn build_backend(cfg: &RunConfig) -> Result<(Oracles, TaskSuite, Clock), CliError> {
    match &cfg.backend {
        BackendConfig::Sim { world } => {
            let world = load_sim_world(world)?;
            let suite = world.suite();
            if suite.tasks().is_empty() {
                return Err(CliError::config("simulated world has no tasks"));
            }
            let seed = world.seed;
            Ok((sim_oracles(Arc::new(world), seed), suite, Clock::logical()))
        }
        BackendConfig::Scripted { script } => {
            let script = Script::load(script).map_err(|e| CliError::config(e.to_string()))?;
            if script.tasks.is_empty() {
                return Err(CliError::config("scripted backend has no tasks"));
            }
            let suite = TaskSuite::new(script.tasks.clone());
            Ok((scripted_oracles(&script), suite, Clock::logical()))
        }
        BackendConfig::Remote(remote_cfg) => {
            let Some(suite_path) = &cfg.suite_path else {
                return Err(CliError::config("remote backend requires suite_path"));
            };
            let text = std::fs::read_to_string(suite_path)
                .map_err(|e| CliError::config(format!("suite {}: {e}", suite_path.display())))?;
            let tasks: Vec<Task> = serde_json::from_str(&text)
                .map_err(|e| CliError::config(format!("suite: {e}")))?;
            if tasks.is_empty() {
                return Err(CliError::config("task suite is empty"));
            }
            let oracles =
                remote_oracles(remote_cfg.clone()).map_err(|e| CliError::backend(e.to_string()))?;
            Ok((oracles, TaskSuite::new(tasks), Clock::system()))
        }
    }
}

fn run_one_seed(
    cfg: &RunConfig,
    oracles: &Oracles,
    suite: &TaskSuite,
    clock: &Clock,
    seed: u64,
    out_dir: &Path,
) -> Result<RunReport, CliError> {
    let seed_dir = out_dir.join(format!("seed_{seed}"));
    std::fs::create_dir_all(&seed_dir)
        .map_err(|e| CliError::other(format!("{}: {e}", seed_dir.display())))?;
    let store_path = seed_dir.join("evidence.db");
    if store_path.exists() {
        std::fs::remove_file(&store_path)
            .map_err(|e| CliError::other(format!("{}: {e}", store_path.display())))?;
    }
    let store = EvidenceStore::open_file(&store_path)
        .map_err(|e| CliError::other(e.to_string()))?
        .with_train_only_contribution(cfg.contribution_train_only);
    let mut engine =
        Engine::new(cfg.clone(), suite.clone(), oracles.clone(), seed, store, clock.clone())?;
    let report = engine.run()?;
    for warning in engine.warnings() {
        eprintln!("warning: seed {seed}: {warning}");
    }

    let mut jsonl = Vec::new();
    write_rounds_jsonl(&report, &mut jsonl).map_err(|e| CliError::other(e.to_string()))?;
    std::fs::write(seed_dir.join("rounds.jsonl"), jsonl)
        .map_err(|e| CliError::other(e.to_string()))?;
    std::fs::write(
        seed_dir.join("summary.json"),
        serde_json::to_string_pretty(&report.summary).expect("summary serializes"),
    )
    .map_err(|e| CliError::other(e.to_string()))?;
    Ok(report)
}

fn run_command(cfg: RunConfig, common: &RunCommonArgs) -> Result<(), CliError> {
    if common.print_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let (oracles, suite, clock) = build_backend(&cfg)?;
    std::fs::create_dir_all(&common.out_dir)
        .map_err(|e| CliError::other(format!("{}: {e}", common.out_dir.display())))?;
    std::fs::write(common.out_dir.join("config.json"), cfg.to_json())
        .map_err(|e| CliError::other(e.to_string()))?;

    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        eprintln!("running seed {seed} ({} rounds)", cfg.rounds);
        reports.push(run_one_seed(&cfg, &oracles, &suite, &clock, seed, &common.out_dir)?);
    }
    let agg = aggregate(&reports).map_err(|e| CliError::other(e.to_string()))?;
    std::fs::write(
        common.out_dir.join("aggregate.json"),
        serde_json::to_string_pretty(&agg).expect("aggregate serializes"),
    )
    .map_err(|e| CliError::other(e.to_string()))?;
    println!("{}", serde_json::to_string_pretty(&agg).expect("aggregate serializes"));
    Ok(())
}

fn simulate_command(
    config: &Path,
    seeds: &[u64],
    rounds: Option<u32>,
    out_dir: &Path,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let BackendConfig::Sim { world } = &cfg.backend else {
        return Err(CliError::config("simulate requires a sim backend"));
    };
    let world = load_sim_world(world)?;
    let seeds = if seeds.is_empty() { cfg.seeds.clone() } else { seeds.to_vec() };
    let rounds = rounds.unwrap_or(cfg.rounds);
    let (reports, floor) =
        simulate_run(&world, &cfg, rounds, &seeds).map_err(CliError::from)?;

    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::other(format!("{}: {e}", out_dir.display())))?;
    let mut csv = Vec::new();
    write_curves_csv(&reports, &mut csv).map_err(|e| CliError::other(e.to_string()))?;
    std::fs::write(out_dir.join("curves.csv"), csv).map_err(|e| CliError::other(e.to_string()))?;
    std::fs::write(
        out_dir.join("floor_report.json"),
        serde_json::to_string_pretty(&floor).expect("floor report serializes"),
    )
    .map_err(|e| CliError::other(e.to_string()))?;
    println!("{}", serde_json::to_string_pretty(&floor).expect("floor report serializes"));
    Ok(())
}

fn report_command(run_dirs: &[PathBuf], csv: &Path) -> Result<(), CliError> {
    if run_dirs.is_empty() {
        return Err(CliError::config("report requires at least one run directory"));
    }
    let mut reports = Vec::new();
    for dir in run_dirs {
        reports.push(load_run_dir(dir).map_err(|e| CliError::other(e.to_string()))?);
    }
    let agg = aggregate(&reports).map_err(|e| CliError::other(e.to_string()))?;
    let mut buf = Vec::new();
    write_curves_csv(&reports, &mut buf).map_err(|e| CliError::other(e.to_string()))?;
    std::fs::write(csv, buf).map_err(|e| CliError::other(e.to_string()))?;
    println!("{}", serde_json::to_string_pretty(&agg).expect("aggregate serializes"));
    Ok(())
}

fn validate_command(file: &Path, budget: usize) -> Result<(), CliError> {
    let text = std::fs::read_to_string(file)
        .map_err(|e| CliError::config(format!("{}: {e}", file.display())))?;
    match validate_skill(&text, budget, chrono_now()) {
        Ok(skill) => {
            let out = serde_json::json!({
                "valid": true,
                "id": skill.id,
                "chars": skill.canonical_char_count(),
                "budget": budget,
            });
            println!("{out}");
            Ok(())
        }
        Err(e) => {
            println!("{}", serde_json::json!({ "valid": false, "error": e.to_string() }));
            Err(CliError::other(format!("invalid skill: {e}")))
        }
    }
}

fn chrono_now() -> chrono::DateTime<chrono::Utc> {
    chrono::Utc::now()
}

fn probe_command(
    config: &Path,
    probe_seeds: &[u64],
    sample: usize,
    train_fraction: f64,
    subset_seed: u64,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let BackendConfig::Sim { world } = &cfg.backend else {
        return Err(CliError::config("probe-filter requires a sim backend"));
    };
    if probe_seeds.iter().any(|s| cfg.seeds.contains(s)) {
        return Err(CliError::config("probe seeds must be disjoint from experiment seeds"));
    }
    let world = load_sim_world(world)?;
    let oracles = sim_oracles(Arc::new(world.clone()), world.seed);
    let tasks: Vec<Task> = world.tasks.iter().map(|t| t.task.clone()).collect();
    let retained = probe_filter(&tasks, oracles.solver.as_ref(), oracles.grader.as_ref(), probe_seeds)
        .map_err(|e| CliError::backend(e.to_string()))?;
    let suite = sample_split(&retained, sample, train_fraction, subset_seed);

    if let Some(path) = out {
        // keep the ground truth for retained tasks so the subset is runnable
        let subset = SimWorld {
            seed: world.seed,
            effects: world.effects,
            label_noise: world.label_noise,
            tasks: suite
                .tasks()
                .iter()
                .map(|t| {
                    let mut sim_task = world
                        .task(&t.task_id)
                        .expect("subset tasks come from the world")
                        .clone();
                    sim_task.task = t.clone();
                    sim_task
                })
                .collect(),
        };
        subset.save(path).map_err(|e| CliError::other(e.to_string()))?;
    }
    println!(
        "{}",
        serde_json::json!({
            "pool": tasks.len(),
            "retained": retained.len(),
            "sampled": suite.tasks().len(),
            "train": suite.split(skillbank::evidence::Split::Train).count(),
            "eval": suite.split(skillbank::evidence::Split::Eval).count(),
        })
    );
    Ok(())
}

fn dump_command(store: &Path, format: &str) -> Result<(), CliError> {
    if format != "jsonl" {
        return Err(CliError::config(format!("unsupported dump format {format:?}")));
    }
    if !store.exists() {
        return Err(CliError::config(format!("store {} does not exist", store.display())));
    }
    let store = EvidenceStore::open_file(store).map_err(|e| CliError::other(e.to_string()))?;
    let mut stdout = std::io::stdout().lock();
    store.dump_jsonl(&mut stdout).map_err(|e| CliError::other(e.to_string()))?;
    Ok(())
}
