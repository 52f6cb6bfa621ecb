//! `wocar` — train, attack, and inspect worst-case-aware RL agents from
//! the command line.
//!
//! Exit codes: 0 on success, 2 on configuration/usage errors, 3 on
//! numerical aborts (diverged training, broken bounds).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wocar_core::attacks::{evaluate, Actor, AttackKind, AttackSpec};
use wocar_core::bounds::soundness_fuzz;
use wocar_core::env::{ActionSpace, Env};
use wocar_core::harness::{
    env_by_name, export_table, run_experiment, run_sweep, Algo, RunConfig, TableFormat,
};
use wocar_core::mdp::{load_mdp, load_policy};
use wocar_core::net::load_net;
use wocar_core::tabular::{
    attacker_from_worst_q, policy_evaluation, values_under, worst_attack_fixed_point,
    worst_attack_state_value, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use wocar_core::CoreError;

#[derive(Parser)]
#[command(name = "wocar", version, about = "Worst-case-aware robust RL laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write a self-describing run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint's natural (unattacked) performance.
    Eval(EvalArgs),
    /// Evaluate a checkpoint under an observation attack.
    Attack(AttackArgs),
    /// Print exact natural and worst-attack values of a tabular policy.
    Oracle(OracleArgs),
    /// Fuzz the output bounds of a network checkpoint for soundness.
    BoundsCheck(BoundsCheckArgs),
    /// Run one config across a parameter grid and seed set.
    Sweep(SweepArgs),
    /// Export run metrics or sweep aggregates as a delimited table.
    Export(ExportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Algorithm: wocar-dqn, dqn, wocar-ppo, or ppo.
    #[arg(long)]
    algo: String,
    /// Environment name: chain2, gohome5, or pointmass.
    #[arg(long)]
    env: String,
    /// Flat key=value config file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Network checkpoint (`.net` file).
    #[arg(long)]
    ckpt: PathBuf,
    /// Environment name.
    #[arg(long)]
    env: String,
    /// Episodes to roll out.
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    /// Evaluation seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AttackArgs {
    /// Network checkpoint (`.net` file).
    #[arg(long)]
    ckpt: PathBuf,
    /// Environment name.
    #[arg(long)]
    env: String,
    /// Attack kind: none, random, pgd, maxdiff, minbest, tabular-bruteforce.
    #[arg(long)]
    attack: String,
    /// Perturbation budget (defaults to the environment's).
    #[arg(long)]
    eps: Option<f64>,
    /// Episodes to roll out.
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    /// Ascent steps for multi-step attacks.
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Evaluation seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run directory to append the report to (as attacks.jsonl).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    /// MDP + perturbation file.
    #[arg(long)]
    mdp: PathBuf,
    /// Deterministic policy file.
    #[arg(long)]
    policy: PathBuf,
}

#[derive(Args)]
struct BoundsCheckArgs {
    /// Network checkpoint (`.net` file).
    #[arg(long)]
    net: PathBuf,
    /// ℓ∞ perturbation radius.
    #[arg(long)]
    eps: f64,
    /// Perturbed forward passes to sample.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// Fuzzing seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    /// Algorithm for every run.
    #[arg(long)]
    algo: String,
    /// Environment for every run.
    #[arg(long)]
    env: String,
    /// Base config file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config key to sweep (e.g. sched.kappa_target).
    #[arg(long)]
    param: String,
    /// Comma-separated values for the swept key.
    #[arg(long)]
    values: String,
    /// Comma-separated seeds; every value runs once per seed.
    #[arg(long)]
    seeds: String,
    /// Sweep directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    /// Run or sweep directory.
    #[arg(long)]
    dir: PathBuf,
    /// Output format: csv or tsv.
    #[arg(long, default_value = "csv")]
    format: String,
}

fn actor_for_env(env: &Env, ckpt: &PathBuf) -> Result<Actor, CoreError> {
    let (spec, params) = load_net(ckpt)?;
    Ok(match env.action_space() {
        ActionSpace::Discrete(_) => Actor::DiscreteNet { spec, params },
        ActionSpace::Box { low, high } => {
            Actor::ContinuousNet { spec, params, act_low: low, act_high: high }
        }
    })
}

fn base_config(algo: &str, env: &str, seed: u64, out: &std::path::Path) -> Result<RunConfig, CoreError> {
    Ok(RunConfig::new(Algo::parse(algo)?, env, seed, out))
}

fn pretty(value: &impl serde::Serialize) -> Result<String, CoreError> {
    serde_json::to_string_pretty(value)
        .map_err(|e| CoreError::Config(format!("serialization failed: {e}")))
}

fn run(cli: Cli) -> Result<(), CoreError> {
    match cli.command {
        Command::Train(a) => {
            let mut cfg = base_config(&a.algo, &a.env, a.seed, &a.out)?;
            if let Some(path) = &a.config {
                cfg = RunConfig::load(path, cfg)?;
                // Flags beat file defaults for the run identity.
                cfg.algo = Algo::parse(&a.algo)?;
                cfg.env_name = a.env.clone();
                cfg.seed = a.seed;
                cfg.out_dir = a.out.clone();
            }
            let summary = run_experiment(&cfg)?;
            println!("{}", pretty(&summary)?);
            eprintln!("run written to {}", a.out.display());
        }
        Command::Eval(a) => {
            let env = env_by_name(&a.env)?;
            let actor = actor_for_env(&env, &a.ckpt)?;
            let spec = AttackSpec::new(AttackKind::None, 0.0, 1)?;
            let report = evaluate(&actor, &env, &spec, a.episodes, a.seed)?;
            println!("{}", pretty(&report)?);
        }
        Command::Attack(a) => {
            let env = env_by_name(&a.env)?;
            let actor = actor_for_env(&env, &a.ckpt)?;
            let kind = AttackKind::parse(&a.attack)?;
            let spec = AttackSpec::new(kind, a.eps.unwrap_or_else(|| env.default_eps()), a.steps)?;
            let report = evaluate(&actor, &env, &spec, a.episodes, a.seed)?;
            println!("{}", pretty(&report)?);
            if let Some(dir) = &a.out {
                std::fs::create_dir_all(dir)?;
                let line = serde_json::to_string(&report)
                    .map_err(|e| CoreError::Config(format!("serialization failed: {e}")))?;
                use std::io::Write as _;
                let mut f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join("attacks.jsonl"))?;
                writeln!(f, "{line}")?;
                eprintln!("report appended to {}", dir.join("attacks.jsonl").display());
            }
        }
        Command::Oracle(a) => {
            let (mdp, pert) = load_mdp(&a.mdp)?;
            let policy = load_policy(&a.policy)?;
            if policy.n_states() != mdp.n_states {
                return Err(CoreError::Config(format!(
                    "policy covers {} states, MDP has {}",
                    policy.n_states(),
                    mdp.n_states
                )));
            }
            let q_nat = policy_evaluation(&mdp, &policy)?;
            let v_nat = values_under(&q_nat, &policy);
            let q_worst = worst_attack_fixed_point(&mdp, &policy, &pert, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
            let v_worst = worst_attack_state_value(&q_worst, &policy, &pert);
            let attacker = attacker_from_worst_q(&q_worst, &policy, &pert);
            println!("{:>6} {:>24} {:>24} {:>10}", "state", "V_natural", "V_worst", "attacker");
            for s in 0..mdp.n_states {
                println!(
                    "{:>6} {:>24.16e} {:>24.16e} {:>10}",
                    s, v_nat.values[s], v_worst.values[s], attacker.perturb_to[s]
                );
            }
        }
        Command::BoundsCheck(a) => {
            let (spec, params) = load_net(&a.net)?;
            let base_points = a.samples.div_ceil(100).min(a.samples);
            let per_point = a.samples.div_ceil(base_points);
            let report = soundness_fuzz(&spec, &params, a.eps, base_points, per_point, a.seed)?;
            println!(
                "checked {} perturbed passes over {} base points at eps {}: {} violations",
                report.samples, report.base_points, a.eps, report.violations
            );
            if report.violations > 0 {
                return Err(CoreError::Numerical(format!(
                    "{} bound violations detected",
                    report.violations
                )));
            }
        }
        Command::Sweep(a) => {
            let mut base = base_config(&a.algo, &a.env, 0, &a.out)?;
            if let Some(path) = &a.config {
                base = RunConfig::load(path, base)?;
                base.algo = Algo::parse(&a.algo)?;
                base.env_name = a.env.clone();
                base.out_dir = a.out.clone();
            }
            let values: Vec<String> = a.values.split(',').map(|s| s.trim().to_string()).collect();
            let seeds: Vec<u64> = a
                .seeds
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| CoreError::Config(format!("bad seed '{s}' in --seeds")))
                })
                .collect::<Result<_, _>>()?;
            let rows = run_sweep(&base, &a.param, &values, &seeds)?;
            println!("{}", pretty(&rows)?);
            eprintln!("sweep written to {}", a.out.display());
        }
        Command::Export(a) => {
            let format = TableFormat::parse(&a.format)?;
            let path = export_table(&a.dir, format)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
