//! Experiment orchestration: run configuration, training + periodic
//! attacked evaluation, metrics persistence, sweeps, and table export.
//!
//! A run directory is self-describing: it holds a normalized echo of the
//! configuration, the tool version with a content hash, the seed, a
//! `metrics.jsonl` stream (one JSON object per record), periodic network
//! checkpoints, and a final `summary.json` with natural and per-attack
//! returns. Config files are a flat `key = value` text format with section
//! prefixes (`train.`, `net.`, `sched.`, `eval.`) so they can be parsed —
//! and generated — with no machinery beyond string splitting.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{
    vanilla_dqn_train, vanilla_ppo_train, wocar_dqn_train, wocar_ppo_train, DqnConfig, DqnOutput,
    KappaSched, PpoConfig, PpoOutput, Schedules,
};
use crate::attacks::{evaluate, Actor, AttackKind, AttackSpec, EvalReport};
use crate::env::{chain2_env, gohome5_env, pointmass_env, ActionSpace, Env};
use crate::error::CoreError;
use crate::net::{save_net, NetSpec, ParamVector};
use crate::Result;

pub use crate::agents::MetricsRecord;

/// Which training algorithm a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    /// Worst-case-aware DQN.
    WocarDqn,
    /// Vanilla DQN baseline.
    Dqn,
    /// Worst-case-aware PPO.
    WocarPpo,
    /// Vanilla PPO baseline.
    Ppo,
}

impl Algo {
    /// Parses the kebab-case algorithm name.
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "wocar-dqn" => Algo::WocarDqn,
            "dqn" => Algo::Dqn,
            "wocar-ppo" => Algo::WocarPpo,
            "ppo" => Algo::Ppo,
            other => return Err(CoreError::Config(format!("unknown algorithm '{other}'"))),
        })
    }

    /// The kebab-case algorithm name.
    pub fn name(&self) -> &'static str {
        match self {
            Algo::WocarDqn => "wocar-dqn",
            Algo::Dqn => "dqn",
            Algo::WocarPpo => "wocar-ppo",
            Algo::Ppo => "ppo",
        }
    }
}

/// Builds a registered environment by name.
pub fn env_by_name(name: &str) -> Result<Env> {
    Ok(match name {
        "chain2" => chain2_env(),
        "gohome5" => gohome5_env(),
        "pointmass" => pointmass_env(),
        other => {
            return Err(CoreError::Config(format!(
                "unknown environment '{other}' (registered: chain2, gohome5, pointmass)"
            )))
        }
    })
}

/// The tool's version string.
pub fn version_string() -> String {
    format!("wocar {}", env!("CARGO_PKG_VERSION"))
}

/// Content hash of a string, computed over a `blob <len>\0<content>`
/// envelope the way content-addressed stores do.
pub fn content_hash(s: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", s.len()).as_bytes());
    h.update(s.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

const KNOWN_KEYS: &[&str] = &[
    "algo",
    "env",
    "seed",
    "train.total_steps",
    "train.warmup",
    "train.batch_size",
    "train.buffer_capacity",
    "train.lr",
    "train.critic_lr",
    "train.policy_lr",
    "train.value_lr",
    "train.tau",
    "train.explore_start",
    "train.explore_end",
    "train.explore_frac",
    "train.train_every",
    "train.log_every",
    "train.rollout_len",
    "train.epochs",
    "train.minibatch_size",
    "train.clip",
    "train.max_ratio",
    "train.kappa_reg",
    "train.reg_inner_steps",
    "train.adv_input_ball",
    "train.normalize_worst_q",
    "train.box_min_steps",
    "train.box_min_step_size",
    "train.init_log_std",
    "train.exact_eval_on_log",
    "net.hidden",
    "sched.eps_target",
    "sched.kappa_shape",
    "sched.kappa_target",
    "eval.episodes",
    "eval.every",
    "eval.attacks",
    "eval.eps",
    "eval.steps",
];

/// A complete run description: algorithm, environment, seed, output
/// directory, and the flat hyperparameter table.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Training algorithm.
    pub algo: Algo,
    /// Registered environment name.
    pub env_name: String,
    /// Master seed of the run.
    pub seed: u64,
    /// Directory the run writes into.
    pub out_dir: PathBuf,
    /// Flat `section.key` → value overrides from the config file.
    pub entries: BTreeMap<String, String>,
}

impl RunConfig {
    /// A config with no overrides: algorithm and environment defaults.
    pub fn new(algo: Algo, env_name: &str, seed: u64, out_dir: &Path) -> Self {
        RunConfig {
            algo,
            env_name: env_name.to_string(),
            seed,
            out_dir: out_dir.to_path_buf(),
            entries: BTreeMap::new(),
        }
    }

    /// Parses the flat key=value config text. Unknown keys and duplicate
    /// keys are rejected; `#` starts a comment; blank lines are skipped.
    /// `algo`, `env`, and `seed` keys in the file override the provided
    /// defaults.
    pub fn parse(text: &str, origin: &str, mut base: RunConfig) -> Result<RunConfig> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CoreError::Format {
                    path: origin.to_string(),
                    line: i + 1,
                    msg: format!("expected key = value, got '{raw}'"),
                });
            };
            let key = k.trim().to_string();
            let value = v.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(CoreError::Format {
                    path: origin.to_string(),
                    line: i + 1,
                    msg: format!("unknown config key '{key}'"),
                });
            }
            match key.as_str() {
                "algo" => base.algo = Algo::parse(&value)?,
                "env" => base.env_name = value,
                "seed" => {
                    base.seed = value.parse().map_err(|_| CoreError::Format {
                        path: origin.to_string(),
                        line: i + 1,
                        msg: format!("seed must be an unsigned integer, got '{value}'"),
                    })?
                }
                _ => {
                    if base.entries.insert(key.clone(), value).is_some() {
                        return Err(CoreError::Format {
                            path: origin.to_string(),
                            line: i + 1,
                            msg: format!("duplicate config key '{key}'"),
                        });
                    }
                }
            }
        }
        Ok(base)
    }

    /// Loads and parses a config file on top of the given defaults.
    pub fn load(path: &Path, base: RunConfig) -> Result<RunConfig> {
        let text = fs::read_to_string(path)?;
        RunConfig::parse(&text, &path.display().to_string(), base)
    }

    /// Normalized text form: sorted keys, one per line. Parsing it back
    /// reproduces the config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("algo = {}\n", self.algo.name()));
        out.push_str(&format!("env = {}\n", self.env_name));
        out.push_str(&format!("seed = {}\n", self.seed));
        for (k, v) in &self.entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Sets one override, validating the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(CoreError::Config(format!("unknown config key '{key}'")));
        }
        match key {
            "algo" => self.algo = Algo::parse(value)?,
            "env" => self.env_name = value.to_string(),
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| CoreError::Config(format!("seed must be an unsigned integer, got '{value}'")))?
            }
            _ => {
                self.entries.insert(key.to_string(), value.to_string());
            }
        }
        Ok(())
    }

    fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CoreError::Config(format!("{key} must be an unsigned integer, got '{v}'"))),
        }
    }

    fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| CoreError::Config(format!("{key} must be a number, got '{v}'"))),
        }
    }

    fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => match v.as_str() {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(CoreError::Config(format!("{key} must be true or false, got '{v}'"))),
            },
        }
    }

    fn hidden(&self, default: &[usize]) -> Result<Vec<usize>> {
        match self.entries.get("net.hidden") {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim().parse().map_err(|_| {
                        CoreError::Config(format!("net.hidden must be comma-separated widths, got '{v}'"))
                    })
                })
                .collect(),
        }
    }

    fn schedules(&self, total_steps: usize, env: &Env, default_kappa: KappaSched) -> Result<Schedules> {
        let eps_target = self.get_f64("sched.eps_target", env.default_eps())?;
        let default_target = match default_kappa {
            KappaSched::Constant(v) | KappaSched::Linear { target: v } | KappaSched::ThirdExp { target: v } => v,
        };
        let target = self.get_f64("sched.kappa_target", default_target)?;
        let kappa = match self.entries.get("sched.kappa_shape").map(String::as_str) {
            None => match default_kappa {
                KappaSched::Constant(_) => KappaSched::Constant(target),
                KappaSched::Linear { .. } => KappaSched::Linear { target },
                KappaSched::ThirdExp { .. } => KappaSched::ThirdExp { target },
            },
            Some("constant") => KappaSched::Constant(target),
            Some("linear") => KappaSched::Linear { target },
            Some("third-exp") => KappaSched::ThirdExp { target },
            Some(other) => {
                return Err(CoreError::Config(format!(
                    "sched.kappa_shape must be constant, linear, or third-exp, got '{other}'"
                )))
            }
        };
        Schedules::new(total_steps, eps_target, kappa)
    }

    /// Evaluation cadence in environment steps.
    pub fn eval_every(&self, total_steps: usize) -> Result<usize> {
        self.get_usize("eval.every", (total_steps / 10).max(1))
    }

    /// Episodes per attacked evaluation.
    pub fn eval_episodes(&self) -> Result<usize> {
        self.get_usize("eval.episodes", 20)
    }

    /// The attack suite run at every evaluation point.
    pub fn attack_suite(&self, env: &Env) -> Result<Vec<AttackSpec>> {
        let eps = self.get_f64("eval.eps", env.default_eps())?;
        let steps = self.get_usize("eval.steps", 10)?;
        let kinds: Vec<AttackKind> = match self.entries.get("eval.attacks") {
            Some(list) => list.split(',').map(|p| AttackKind::parse(p.trim())).collect::<Result<_>>()?,
            None => {
                if env.is_discrete() {
                    vec![AttackKind::None, AttackKind::Random, AttackKind::Pgd, AttackKind::TabularBruteforce]
                } else {
                    vec![AttackKind::None, AttackKind::Random, AttackKind::Pgd, AttackKind::Maxdiff]
                }
            }
        };
        kinds.into_iter().map(|k| AttackSpec::new(k, eps, steps)).collect()
    }

    /// The DQN hyperparameters this config describes.
    pub fn dqn_config(&self, env: &Env) -> Result<DqnConfig> {
        let d = DqnConfig::default();
        let total_steps = self.get_usize("train.total_steps", d.total_steps)?;
        Ok(DqnConfig {
            total_steps,
            warmup: self.get_usize("train.warmup", d.warmup)?,
            batch_size: self.get_usize("train.batch_size", d.batch_size)?,
            buffer_capacity: self.get_usize("train.buffer_capacity", d.buffer_capacity)?,
            hidden: self.hidden(&d.hidden)?,
            lr: self.get_f64("train.lr", d.lr)?,
            critic_lr: self.get_f64("train.critic_lr", d.critic_lr)?,
            tau: self.get_f64("train.tau", d.tau)?,
            explore_start: self.get_f64("train.explore_start", d.explore_start)?,
            explore_end: self.get_f64("train.explore_end", d.explore_end)?,
            explore_frac: self.get_f64("train.explore_frac", d.explore_frac)?,
            sched: self.schedules(total_steps, env, KappaSched::ThirdExp { target: 0.5 })?,
            kappa_reg: self.get_f64("train.kappa_reg", d.kappa_reg)?,
            reg_inner_steps: self.get_usize("train.reg_inner_steps", d.reg_inner_steps)?,
            adv_input_ball: self.get_bool("train.adv_input_ball", d.adv_input_ball)?,
            train_every: self.get_usize("train.train_every", d.train_every)?,
            log_every: self.get_usize("train.log_every", d.log_every)?,
            checkpoint_every: self.eval_every(total_steps)?,
            exact_eval_on_log: self.get_bool("train.exact_eval_on_log", env.is_discrete())?,
        })
    }

    /// The PPO hyperparameters this config describes.
    pub fn ppo_config(&self, env: &Env) -> Result<PpoConfig> {
        let d = PpoConfig::default();
        let total_steps = self.get_usize("train.total_steps", d.total_steps)?;
        let rollout_len = self.get_usize("train.rollout_len", d.rollout_len)?;
        let every = self.eval_every(total_steps)?;
        Ok(PpoConfig {
            total_steps,
            rollout_len,
            epochs: self.get_usize("train.epochs", d.epochs)?,
            minibatch_size: self.get_usize("train.minibatch_size", d.minibatch_size)?,
            policy_lr: self.get_f64("train.policy_lr", d.policy_lr)?,
            value_lr: self.get_f64("train.value_lr", d.value_lr)?,
            critic_lr: self.get_f64("train.critic_lr", d.critic_lr)?,
            clip: self.get_f64("train.clip", d.clip)?,
            hidden: self.hidden(&d.hidden)?,
            sched: self.schedules(total_steps, env, KappaSched::Linear { target: 0.8 })?,
            kappa_reg: self.get_f64("train.kappa_reg", d.kappa_reg)?,
            reg_inner_steps: self.get_usize("train.reg_inner_steps", d.reg_inner_steps)?,
            normalize_worst_q: self.get_bool("train.normalize_worst_q", d.normalize_worst_q)?,
            adv_input_ball: self.get_bool("train.adv_input_ball", d.adv_input_ball)?,
            box_min_steps: self.get_usize("train.box_min_steps", d.box_min_steps)?,
            box_min_step_size: self.get_f64("train.box_min_step_size", d.box_min_step_size)?,
            init_log_std: self.get_f64("train.init_log_std", d.init_log_std)?,
            max_ratio: self.get_f64("train.max_ratio", d.max_ratio)?,
            // The engine checkpoints by iteration; round the step cadence
            // to whole rollouts.
            checkpoint_every: (every / rollout_len).max(1),
            exact_eval_on_log: self.get_bool("train.exact_eval_on_log", false)?,
        })
    }
}

/// Final results of a run, persisted as `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    /// Algorithm name.
    pub algo: String,
    /// Environment name.
    pub env: String,
    /// Master seed.
    pub seed: u64,
    /// Tool version string.
    pub version: String,
    /// Content hash of the version string.
    pub version_hash: String,
    /// Steps trained.
    pub total_steps: usize,
    /// Wall-clock training + evaluation time, seconds.
    pub wall_time_s: f64,
    /// Mean unattacked discounted return of the final policy.
    pub natural_return: f64,
    /// Final-policy evaluation under every configured attack.
    pub attack_returns: BTreeMap<String, EvalReport>,
    /// Lowest mean return across the attacking (non-natural) evaluations.
    pub worst_eval_return: f64,
}

fn actor_for(env: &Env, spec: &NetSpec, params: &ParamVector) -> Actor {
    match env.action_space() {
        ActionSpace::Discrete(_) => Actor::DiscreteNet { spec: spec.clone(), params: params.clone() },
        ActionSpace::Box { low, high } => Actor::ContinuousNet {
            spec: spec.clone(),
            params: params.clone(),
            act_low: low,
            act_high: high,
        },
    }
}

/// Evaluates an actor under a whole attack suite; returns per-attack
/// reports keyed by attack name.
pub fn evaluate_suite(
    actor: &Actor,
    env: &Env,
    suite: &[AttackSpec],
    episodes: usize,
    seed: u64,
) -> Result<BTreeMap<String, EvalReport>> {
    let mut out = BTreeMap::new();
    for spec in suite {
        let report = evaluate(actor, env, spec, episodes, seed)?;
        out.insert(spec.kind.name().to_string(), report);
    }
    Ok(out)
}

fn worst_mean(reports: &BTreeMap<String, EvalReport>) -> f64 {
    reports
        .values()
        .filter(|r| r.attack.kind != AttackKind::None)
        .map(|r| r.mean)
        .fold(f64::INFINITY, f64::min)
}

/// Writes metrics records as JSON lines, one object per record.
pub fn write_metrics_jsonl(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| CoreError::Config(format!("metrics serialization failed: {e}")))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Reads a `metrics.jsonl` file back into records.
pub fn read_metrics_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord = serde_json::from_str(line).map_err(|e| CoreError::Format {
            path: path.display().to_string(),
            line: i + 1,
            msg: format!("bad metrics record: {e}"),
        })?;
        out.push(rec);
    }
    Ok(out)
}

struct TrainedRun {
    spec: NetSpec,
    final_params: ParamVector,
    metrics: Vec<MetricsRecord>,
    checkpoints: Vec<(usize, ParamVector)>,
    total_steps: usize,
}

fn train_per_config(cfg: &RunConfig, env: &Env) -> Result<TrainedRun> {
    match cfg.algo {
        Algo::WocarDqn | Algo::Dqn => {
            let dcfg = cfg.dqn_config(env)?;
            let out: DqnOutput = if cfg.algo == Algo::WocarDqn {
                wocar_dqn_train(env, &dcfg, cfg.seed)?
            } else {
                vanilla_dqn_train(env, &dcfg, cfg.seed)?
            };
            Ok(TrainedRun {
                spec: out.state.spec.clone(),
                final_params: out.state.acting().clone(),
                metrics: out.metrics,
                checkpoints: out.checkpoints,
                total_steps: out.state.step,
            })
        }
        Algo::WocarPpo | Algo::Ppo => {
            let pcfg = cfg.ppo_config(env)?;
            let out: PpoOutput = if cfg.algo == Algo::WocarPpo {
                wocar_ppo_train(env, &pcfg, cfg.seed)?
            } else {
                vanilla_ppo_train(env, &pcfg, cfg.seed)?
            };
            Ok(TrainedRun {
                spec: out.state.policy_spec.clone(),
                final_params: out.state.policy.clone(),
                metrics: out.metrics,
                checkpoints: out.checkpoints,
                total_steps: out.state.step,
            })
        }
    }
}

/// Trains per the config, periodically evaluates checkpoints under the
/// configured attack suite, and writes a self-describing run directory:
/// `config.txt`, `run.json`, `metrics.jsonl`, `checkpoint_<step>.net`,
/// `final.net`, and `summary.json`. Returns the summary.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunSummary> {
    let started = Instant::now();
    let env = env_by_name(&cfg.env_name)?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.txt"), cfg.to_text())?;
    let version = version_string();
    let identity = serde_json::json!({
        "algo": cfg.algo.name(),
        "env": cfg.env_name,
        "seed": cfg.seed,
        "version": version,
        "version_hash": content_hash(&version),
    });
    fs::write(cfg.out_dir.join("run.json"), format!("{identity:#}\n"))?;

    let trained = train_per_config(cfg, &env)?;
    let suite = cfg.attack_suite(&env)?;
    let episodes = cfg.eval_episodes()?;

    // Merge training metrics and periodic attacked evaluations by step.
    let mut by_step: BTreeMap<u64, BTreeMap<String, f64>> = BTreeMap::new();
    for rec in trained.metrics {
        by_step.entry(rec.step).or_default().extend(rec.values);
    }
    for (step, params) in &trained.checkpoints {
        save_net(&cfg.out_dir.join(format!("checkpoint_{step}.net")), &trained.spec, params)?;
        let actor = actor_for(&env, &trained.spec, params);
        let reports = evaluate_suite(&actor, &env, &suite, episodes, cfg.seed)?;
        let row = by_step.entry(*step as u64).or_default();
        for (name, rep) in &reports {
            if rep.attack.kind == AttackKind::None {
                row.insert("natural_return".into(), rep.mean);
            } else {
                row.insert(format!("return_{name}"), rep.mean);
            }
        }
        let w = worst_mean(&reports);
        if w.is_finite() {
            row.insert("worst_eval_return".into(), w);
        }
    }
    let records: Vec<MetricsRecord> =
        by_step.into_iter().map(|(step, values)| MetricsRecord { step, values }).collect();
    write_metrics_jsonl(&cfg.out_dir.join("metrics.jsonl"), &records)?;

    save_net(&cfg.out_dir.join("final.net"), &trained.spec, &trained.final_params)?;
    let actor = actor_for(&env, &trained.spec, &trained.final_params);
    let final_reports = evaluate_suite(&actor, &env, &suite, episodes, cfg.seed)?;
    let natural = final_reports.get("none").map(|r| r.mean).unwrap_or(f64::NAN);
    let summary = RunSummary {
        algo: cfg.algo.name().to_string(),
        env: cfg.env_name.clone(),
        seed: cfg.seed,
        version: version.clone(),
        version_hash: content_hash(&version),
        total_steps: trained.total_steps,
        wall_time_s: started.elapsed().as_secs_f64(),
        natural_return: natural,
        worst_eval_return: worst_mean(&final_reports),
        attack_returns: final_reports,
    };
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| CoreError::Config(format!("summary serialization failed: {e}")))?;
    fs::write(cfg.out_dir.join("summary.json"), text + "\n")?;
    Ok(summary)
}

/// One aggregated row of a sweep: the swept value and seed-averaged
/// returns of the final policies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    /// The swept parameter's value.
    pub value: String,
    /// Mean natural return across seeds.
    pub natural_mean: f64,
    /// Mean worst-attack return across seeds.
    pub worst_mean: f64,
    /// Run directories aggregated into this row.
    pub runs: Vec<String>,
}

/// Runs the cross product of `values` × `seeds` of the base config,
/// each in its own subdirectory of the base output directory, and writes
/// an aggregated `sweep_summary.json`. Returns the aggregated rows.
pub fn run_sweep(
    base: &RunConfig,
    param: &str,
    values: &[String],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(CoreError::Config("sweep needs at least one value and one seed".into()));
    }
    fs::create_dir_all(&base.out_dir)?;
    let manifest = serde_json::json!({
        "param": param,
        "values": values,
        "seeds": seeds,
        "version": version_string(),
    });
    fs::write(base.out_dir.join("sweep.json"), format!("{manifest:#}\n"))?;
    let slug = param.replace('.', "-");
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let mut naturals = Vec::with_capacity(seeds.len());
        let mut worsts = Vec::with_capacity(seeds.len());
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.set(param, value)?;
            cfg.seed = seed;
            cfg.out_dir = base.out_dir.join(format!("{slug}_{value}_seed{seed}"));
            let summary = run_experiment(&cfg)?;
            naturals.push(summary.natural_return);
            worsts.push(summary.worst_eval_return);
            runs.push(cfg.out_dir.display().to_string());
        }
        rows.push(SweepRow {
            value: value.clone(),
            natural_mean: naturals.iter().sum::<f64>() / naturals.len() as f64,
            worst_mean: worsts.iter().sum::<f64>() / worsts.len() as f64,
            runs,
        });
    }
    let text = serde_json::to_string_pretty(&rows)
        .map_err(|e| CoreError::Config(format!("sweep serialization failed: {e}")))?;
    fs::write(base.out_dir.join("sweep_summary.json"), text + "\n")?;
    Ok(rows)
}

/// Table export format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    /// Comma-separated values.
    Csv,
    /// Tab-separated values.
    Tsv,
}

impl TableFormat {
    /// Parses "csv" or "tsv".
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TableFormat::Csv),
            "tsv" => Ok(TableFormat::Tsv),
            other => Err(CoreError::Config(format!("format must be csv or tsv, got '{other}'"))),
        }
    }

    fn sep(self) -> char {
        match self {
            TableFormat::Csv => ',',
            TableFormat::Tsv => '\t',
        }
    }

    fn extension(self) -> &'static str {
        match self {
            TableFormat::Csv => "csv",
            TableFormat::Tsv => "tsv",
        }
    }
}

/// 17-significant-digit float text; round-trips f64 exactly.
fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Exports a run directory's metrics (or a sweep directory's aggregate
/// table) as a flat delimited file next to the source data. Columns are in
/// stable sorted order and floats carry 17 significant digits, so the
/// export is idempotent and parses back to the exact values.
pub fn export_table(dir: &Path, format: TableFormat) -> Result<PathBuf> {
    let metrics = dir.join("metrics.jsonl");
    let sweep = dir.join("sweep_summary.json");
    let sep = format.sep();
    let out = dir.join(format!("export.{}", format.extension()));
    if metrics.exists() {
        let records = read_metrics_jsonl(&metrics)?;
        if records.is_empty() {
            return Err(CoreError::Format {
                path: metrics.display().to_string(),
                line: 0,
                msg: "metrics file holds no records".into(),
            });
        }
        let mut columns: Vec<String> = Vec::new();
        for r in &records {
            for k in r.values.keys() {
                if !columns.contains(k) {
                    columns.push(k.clone());
                }
            }
        }
        columns.sort();
        let mut text = String::from("step");
        for c in &columns {
            text.push(sep);
            text.push_str(c);
        }
        text.push('\n');
        for r in &records {
            text.push_str(&r.step.to_string());
            for c in &columns {
                text.push(sep);
                if let Some(v) = r.values.get(c) {
                    text.push_str(&fmt_float(*v));
                }
            }
            text.push('\n');
        }
        fs::write(&out, text)?;
        Ok(out)
    } else if sweep.exists() {
        let text = fs::read_to_string(&sweep)?;
        let rows: Vec<SweepRow> = serde_json::from_str(&text).map_err(|e| CoreError::Format {
            path: sweep.display().to_string(),
            line: 0,
            msg: format!("bad sweep summary: {e}"),
        })?;
        let mut text = format!("value{sep}natural_mean{sep}worst_mean\n");
        for r in &rows {
            text.push_str(&format!(
                "{}{sep}{}{sep}{}\n",
                r.value,
                fmt_float(r.natural_mean),
                fmt_float(r.worst_mean)
            ));
        }
        fs::write(&out, text)?;
        Ok(out)
    } else {
        Err(CoreError::Config(format!(
            "'{}' holds neither metrics.jsonl nor sweep_summary.json",
            dir.display()
        )))
    }
}

/// Spearman rank correlation with average ranks on ties. Returns zero when
/// either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "paired samples required");
    assert!(xs.len() >= 2, "need at least two pairs");
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite values"));
        let mut ranks = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx.sqrt() * vy.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_cfg(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::new(Algo::WocarDqn, "chain2", 3, dir);
        for (k, v) in [
            ("train.total_steps", "300"),
            ("train.warmup", "20"),
            ("train.batch_size", "8"),
            ("train.log_every", "100"),
            ("net.hidden", "16"),
            ("eval.episodes", "5"),
            ("eval.every", "150"),
            ("eval.steps", "5"),
        ] {
            cfg.set(k, v).unwrap();
        }
        cfg
    }

    #[test]
    fn config_text_round_trips() {
        let dir = tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let text = cfg.to_text();
        let again =
            RunConfig::parse(&text, "mem", RunConfig::new(Algo::Ppo, "pointmass", 0, dir.path()))
                .unwrap();
        assert_eq!(again.algo, cfg.algo);
        assert_eq!(again.env_name, cfg.env_name);
        assert_eq!(again.seed, cfg.seed);
        assert_eq!(again.entries, cfg.entries);
    }

    #[test]
    fn parser_rejects_unknown_duplicate_and_malformed_keys() {
        let dir = tempdir().unwrap();
        let base = || RunConfig::new(Algo::Dqn, "chain2", 0, dir.path());
        assert!(matches!(
            RunConfig::parse("train.banana = 3\n", "mem", base()),
            Err(CoreError::Format { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::parse("train.lr = 1\ntrain.lr = 2\n", "mem", base()),
            Err(CoreError::Format { line: 2, .. })
        ));
        assert!(matches!(
            RunConfig::parse("no equals sign\n", "mem", base()),
            Err(CoreError::Format { line: 1, .. })
        ));
        // Comments and blanks are fine.
        let ok = RunConfig::parse("# comment\n\ntrain.lr = 0.5 # inline\n", "mem", base()).unwrap();
        assert_eq!(ok.entries["train.lr"], "0.5");
    }

    #[test]
    fn unresolvable_names_error() {
        assert!(env_by_name("atari").is_err());
        assert!(Algo::parse("sarsa").is_err());
        let dir = tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.env_name = "missing".into();
        assert!(run_experiment(&cfg).is_err());
    }

    #[test]
    fn run_directories_are_self_describing_and_deterministic() {
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        let s1 = run_experiment(&tiny_cfg(d1.path())).unwrap();
        let s2 = run_experiment(&tiny_cfg(d2.path())).unwrap();
        for name in ["config.txt", "run.json", "metrics.jsonl", "summary.json", "final.net"] {
            assert!(d1.path().join(name).exists(), "{name} missing");
        }
        assert!(d1.path().join("checkpoint_150.net").exists());
        // Identical configs and seeds give identical metrics streams.
        let m1 = fs::read_to_string(d1.path().join("metrics.jsonl")).unwrap();
        let m2 = fs::read_to_string(d2.path().join("metrics.jsonl")).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(s1.natural_return, s2.natural_return);
        // Attack keys equal the configured suite.
        let keys: Vec<&str> = s1.attack_returns.keys().map(String::as_str).collect();
        assert_eq!(keys, vec!["none", "pgd", "random", "tabular-bruteforce"]);
        // Steps are strictly increasing in the metrics stream.
        let records = read_metrics_jsonl(&d1.path().join("metrics.jsonl")).unwrap();
        assert!(records.windows(2).all(|w| w[0].step < w[1].step));
        assert!(records.iter().any(|r| r.values.contains_key("natural_return")));
        assert!(records.iter().any(|r| r.values.contains_key("worst_eval_return")));
        assert!(s1.wall_time_s > 0.0);
        assert_eq!(s1.version_hash.len(), 64);
    }

    #[test]
    fn export_round_trips_metrics_exactly() {
        let dir = tempdir().unwrap();
        run_experiment(&tiny_cfg(dir.path())).unwrap();
        let out = export_table(dir.path(), TableFormat::Csv).unwrap();
        let text = fs::read_to_string(&out).unwrap();
        let records = read_metrics_jsonl(&dir.path().join("metrics.jsonl")).unwrap();
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(header[0], "step");
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), records.len());
        for (row, rec) in rows.iter().zip(&records) {
            let cells: Vec<&str> = row.split(',').collect();
            assert_eq!(cells[0].parse::<u64>().unwrap(), rec.step);
            for (c, cell) in header.iter().zip(&cells).skip(1) {
                match rec.values.get(*c) {
                    Some(v) => {
                        let parsed: f64 = cell.parse().unwrap();
                        assert_eq!(parsed.to_bits(), v.to_bits(), "column {c}");
                    }
                    None => assert!(cell.is_empty()),
                }
            }
        }
        // Idempotent re-export.
        let out2 = export_table(dir.path(), TableFormat::Csv).unwrap();
        assert_eq!(text, fs::read_to_string(out2).unwrap());
        // Empty directory → explicit error.
        let empty = tempdir().unwrap();
        assert!(export_table(empty.path(), TableFormat::Csv).is_err());
    }

    #[test]
    fn sweep_aggregates_match_per_run_summaries() {
        let dir = tempdir().unwrap();
        let base = tiny_cfg(dir.path());
        let rows = run_sweep(&base, "sched.kappa_target", &["0".into(), "0.5".into()], &[1, 2])
            .unwrap();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            assert_eq!(row.runs.len(), 2);
            let mut nat = 0.0;
            let mut worst = 0.0;
            for run in &row.runs {
                let text = fs::read_to_string(Path::new(run).join("summary.json")).unwrap();
                let s: RunSummary = serde_json::from_str(&text).unwrap();
                nat += s.natural_return;
                worst += s.worst_eval_return;
            }
            assert!((row.natural_mean - nat / 2.0).abs() < 1e-12);
            assert!((row.worst_mean - worst / 2.0).abs() < 1e-12);
        }
        assert!(dir.path().join("sweep_summary.json").exists());
        let out = export_table(dir.path(), TableFormat::Tsv).unwrap();
        let text = fs::read_to_string(out).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("value\tnatural_mean\tworst_mean"));
    }

    #[test]
    fn spearman_agrees_with_hand_values() {
        // Perfect monotone association.
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[5.0, 0.0, -5.0]) + 1.0).abs() < 1e-12);
        // Hand-computed example with a tie: x = [1,2,2,4], y = [1,3,2,4].
        // x-ranks = [1, 2.5, 2.5, 4], y-ranks = [1,3,2,4].
        let r = spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]);
        // cov = 4.5, vx = 4.5, vy = 5 → 4.5/√22.5.
        assert!((r - 4.5 / 22.5_f64.sqrt()).abs() < 1e-12);
        // Constant side → zero by convention.
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), 0.0);
    }

    #[test]
    fn version_hash_is_stable_and_hex() {
        let h = content_hash("example");
        assert_eq!(h, content_hash("example"));
        assert_eq!(h.len(), 64);
        assert!(h.chars().all(|c| c.is_ascii_hexdigit()));
        assert_ne!(h, content_hash("example2"));
    }
}
