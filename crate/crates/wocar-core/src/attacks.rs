//! Test-time observation attacks and the episodic evaluation harness.
//!
//! The threat model: before each action the attacker replaces the agent's
//! observation s with some s̃ ∈ Bε(s). The environment's true state is
//! untouched — only what the agent sees changes. Attacks range from cheap
//! heuristics (random, one-step signed gradient) through multi-step
//! projected ascent to the exact optimal attacker on tabular environments,
//! which realizes the worst-attack value itself.
//!
//! [`evaluate`] rolls out a fixed agent under a chosen attack for a batch of
//! episodes, each driven by its own deterministic RNG stream so reports are
//! reproducible and episodes can run on parallel workers.

use crate::env::{decode_one_hot, one_hot, Action, Env};
use crate::error::CoreError;
use crate::losses::{dist_and_grads, DistKind};
use crate::mdp::{DeterministicPolicy, TabularMDP, TabularPerturbation};
use crate::net::{forward, grad_input, softmax, NetSpec, OutputHead, ParamVector};
use crate::rng::episode_rng;
use crate::tabular::{
    attacker_from_worst_q, brute_force_worst_value_capped, worst_attack_fixed_point, AttackerMap,
    DEFAULT_ENUM_CAP, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use crate::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which attack to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    /// No perturbation; measures natural performance.
    None,
    /// Uniform draw in the budget set.
    Random,
    /// Multi-step projected ascent maximizing the divergence between the
    /// clean and perturbed policy outputs.
    Maxdiff,
    /// One signed-gradient step minimizing the greedy action's probability.
    Minbest,
    /// Multi-step projected ascent on the standard untargeted objective.
    Pgd,
    /// The exact optimal attacker map for a tabular environment.
    TabularBruteforce,
}

impl AttackKind {
    /// Parses the kebab-case attack name.
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => AttackKind::None,
            "random" => AttackKind::Random,
            "maxdiff" => AttackKind::Maxdiff,
            "minbest" => AttackKind::Minbest,
            "pgd" => AttackKind::Pgd,
            "tabular-bruteforce" => AttackKind::TabularBruteforce,
            other => return Err(CoreError::Config(format!("unknown attack kind '{other}'"))),
        })
    }

    /// The kebab-case attack name.
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Random => "random",
            AttackKind::Maxdiff => "maxdiff",
            AttackKind::Minbest => "minbest",
            AttackKind::Pgd => "pgd",
            AttackKind::TabularBruteforce => "tabular-bruteforce",
        }
    }
}

/// Full description of an attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    /// The attack.
    pub kind: AttackKind,
    /// ℓ∞ budget (continuous observations) — tabular attacks use the
    /// environment's admissible sets instead.
    pub eps: f64,
    /// Ascent steps for the multi-step attacks.
    pub steps: usize,
}

impl AttackSpec {
    /// Builds a spec, rejecting negative budgets and zero-step ascent.
    pub fn new(kind: AttackKind, eps: f64, steps: usize) -> Result<Self> {
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(CoreError::Config(format!("attack eps must be ≥ 0, got {eps}")));
        }
        if matches!(kind, AttackKind::Pgd | AttackKind::Maxdiff) && steps == 0 {
            return Err(CoreError::Config("multi-step attacks need steps ≥ 1".into()));
        }
        Ok(AttackSpec { kind, eps, steps })
    }
}

/// A fixed agent under evaluation.
#[derive(Debug, Clone)]
pub enum Actor {
    /// Greedy over a per-action-output network (Q values or logits).
    DiscreteNet {
        /// Network shape.
        spec: NetSpec,
        /// Weights.
        params: ParamVector,
    },
    /// Deterministic mean action of a continuous policy, clamped to the box.
    ContinuousNet {
        /// Network shape.
        spec: NetSpec,
        /// Weights.
        params: ParamVector,
        /// Action box lower bounds.
        act_low: Vec<f64>,
        /// Action box upper bounds.
        act_high: Vec<f64>,
    },
    /// A tabular policy played through one-hot observations.
    Tabular(DeterministicPolicy),
}

/// Index of the largest value, ties to the lowest index.
pub fn greedy_action(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Actor {
    /// The action the agent takes on an observation.
    pub fn act(&self, obs: &[f64]) -> Result<Action> {
        match self {
            Actor::DiscreteNet { spec, params } => {
                let out = forward(spec, params, obs)?;
                Ok(Action::Discrete(greedy_action(&out)))
            }
            Actor::ContinuousNet { spec, params, act_low, act_high } => {
                let mu = forward(spec, params, obs)?;
                let a = mu
                    .iter()
                    .zip(act_low.iter().zip(act_high))
                    .map(|(m, (lo, hi))| m.clamp(*lo, *hi))
                    .collect();
                Ok(Action::Continuous(a))
            }
            Actor::Tabular(policy) => Ok(Action::Discrete(policy.action_of(decode_one_hot(obs)))),
        }
    }

    /// The policy network the gradient attacks differentiate, if any.
    fn net(&self) -> Option<(&NetSpec, &ParamVector)> {
        match self {
            Actor::DiscreteNet { spec, params } => Some((spec, params)),
            Actor::ContinuousNet { spec, params, .. } => Some((spec, params)),
            Actor::Tabular(_) => None,
        }
    }
}

/// The greedy tabular policy a per-action network induces on one-hot
/// observations (ties to the lowest action index).
pub fn greedy_tabular_policy(
    spec: &NetSpec,
    params: &ParamVector,
    n_states: usize,
) -> Result<DeterministicPolicy> {
    let mut actions = Vec::with_capacity(n_states);
    for s in 0..n_states {
        let out = forward(spec, params, &one_hot(s, n_states))?;
        actions.push(greedy_action(&out));
    }
    DeterministicPolicy::new(actions, spec.out_dim())
}

/// Uniform draw in the ℓ∞ ball of radius eps around s.
pub fn attack_random(s: &[f64], eps: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if eps == 0.0 {
        return s.to_vec();
    }
    s.iter().map(|si| si + rng.gen_range(-eps..=eps)).collect()
}

/// Uniform member of the admissible set B(s) of a tabular state.
pub fn random_admissible_state(
    pert: &TabularPerturbation,
    state: usize,
    rng: &mut ChaCha8Rng,
) -> usize {
    let set = pert.set_of(state);
    set[rng.gen_range(0..set.len())]
}

fn project_ball(x: &mut [f64], center: &[f64], eps: f64) {
    for (xi, ci) in x.iter_mut().zip(center) {
        *xi = xi.clamp(ci - eps, ci + eps);
    }
}

/// Shared multi-step projected sign-ascent. `objective_and_grad` returns the
/// attack objective and its gradient in the observation; the best iterate
/// seen (including the clean start) is returned.
fn ascend<F>(s: &[f64], eps: f64, steps: usize, step_size: f64, mut objective_and_grad: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (mut best_v, _) = objective_and_grad(s)?;
    let mut best_x = s.to_vec();
    let mut x = s.to_vec();
    for _ in 0..steps {
        let (_, g) = objective_and_grad(&x)?;
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi += step_size * gi.signum();
        }
        project_ball(&mut x, s, eps);
        let (v, _) = objective_and_grad(&x)?;
        if v > best_v {
            best_v = v;
            best_x = x.clone();
        }
    }
    Ok(best_x)
}

/// Untargeted projected-gradient attack. Discrete victims: maximize the
/// cross-entropy of the perturbed softmax against the clean greedy action.
/// Continuous victims: maximize the squared distance of the perturbed mean
/// action from the clean one. Step size 2·eps/steps, projection each step.
pub fn attack_pgd(
    spec: &NetSpec,
    params: &ParamVector,
    s: &[f64],
    eps: f64,
    steps: usize,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(CoreError::Config("pgd needs steps ≥ 1".into()));
    }
    if eps == 0.0 {
        return Ok(s.to_vec());
    }
    let step_size = 2.0 * eps / steps as f64;
    match spec.output_head {
        OutputHead::GaussianMean => {
            let clean = forward(spec, params, s)?;
            ascend(s, eps, steps, step_size, |x| {
                let out = forward(spec, params, x)?;
                let (v, _, g_out) = dist_and_grads(DistKind::SqL2, &clean, &out);
                let g = grad_input(spec, params, x, &g_out)?;
                Ok((v, g))
            })
        }
        _ => {
            let clean = forward(spec, params, s)?;
            let label = greedy_action(&clean);
            ascend(s, eps, steps, step_size, |x| {
                let out = forward(spec, params, x)?;
                let p = softmax(&out);
                // −log p[label]; gradient in the logits is p − e_label.
                let v = -(p[label].max(1e-300)).ln();
                let mut up = p;
                up[label] -= 1.0;
                let g = grad_input(spec, params, x, &up)?;
                Ok((v, g))
            })
        }
    }
}

/// Maximal-action-difference attack: projected ascent on
/// Dist(π(s), π(s̃)) — KL for softmax victims, squared L2 of means for
/// gaussian ones.
pub fn attack_maxdiff(
    spec: &NetSpec,
    params: &ParamVector,
    s: &[f64],
    eps: f64,
    steps: usize,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(CoreError::Config("maxdiff needs steps ≥ 1".into()));
    }
    if eps == 0.0 {
        return Ok(s.to_vec());
    }
    let dist = match spec.output_head {
        OutputHead::GaussianMean => DistKind::SqL2,
        _ => DistKind::Kl,
    };
    let clean = forward(spec, params, s)?;
    let step_size = 2.0 * eps / steps as f64;
    ascend(s, eps, steps, step_size, |x| {
        let out = forward(spec, params, x)?;
        let (v, _, g_out) = dist_and_grads(dist, &clean, &out);
        let g = grad_input(spec, params, x, &g_out)?;
        Ok((v, g))
    })
}

/// One signed-gradient step lowering the probability of the clean greedy
/// action (discrete victims only).
pub fn attack_minbest(
    spec: &NetSpec,
    params: &ParamVector,
    s: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    if matches!(spec.output_head, OutputHead::GaussianMean) {
        return Err(CoreError::Config("minbest applies to discrete victims only".into()));
    }
    if eps == 0.0 {
        return Ok(s.to_vec());
    }
    let clean = forward(spec, params, s)?;
    let label = greedy_action(&clean);
    let p = softmax(&clean);
    // ∂p_label/∂z_j = p_label·(δ_labelj − p_j).
    let up: Vec<f64> = (0..p.len())
        .map(|j| p[label] * (if j == label { 1.0 - p[j] } else { -p[j] }))
        .collect();
    let g = grad_input(spec, params, s, &up)?;
    let mut x: Vec<f64> = s.iter().zip(&g).map(|(si, gi)| si - eps * gi.signum()).collect();
    project_ball(&mut x, s, eps);
    Ok(x)
}

/// The exact optimal attacker map against a fixed tabular policy: the
/// stationary observation-substitution map minimizing the policy's value.
/// Small instances are enumerated outright; above the enumeration cap the
/// map is read off the worst-attack fixed point, which identifies the same
/// minimizer.
pub fn attack_tabular_bruteforce(
    mdp: &TabularMDP,
    policy: &DeterministicPolicy,
    pert: &TabularPerturbation,
) -> Result<AttackerMap> {
    match brute_force_worst_value_capped(mdp, policy, pert, DEFAULT_ENUM_CAP) {
        Ok((_, map)) => Ok(map),
        Err(CoreError::CapExceeded { .. }) => {
            let q = worst_attack_fixed_point(mdp, policy, pert, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
            Ok(attacker_from_worst_q(&q, policy, pert))
        }
        Err(e) => Err(e),
    }
}

/// Evaluation summary: per-episode discounted returns (sorted ascending)
/// plus their aggregates, and the attack that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// The attack evaluated.
    pub attack: AttackSpec,
    /// Number of episodes.
    pub episodes: usize,
    /// Per-episode discounted returns, sorted ascending.
    pub returns: Vec<f64>,
    /// Mean discounted return.
    pub mean: f64,
    /// Population standard deviation of the discounted returns.
    pub std: f64,
    /// Mean undiscounted (summed) return, for readability.
    pub undiscounted_mean: f64,
}

/// Worker count for parallel evaluation: `WOCAR_THREADS` if set (≥ 1),
/// otherwise the available parallelism capped at 8; never more than jobs.
pub fn worker_count(jobs: usize) -> Result<usize> {
    let setting = std::env::var("WOCAR_THREADS").ok();
    worker_count_from(setting.as_deref(), jobs)
}

fn worker_count_from(setting: Option<&str>, jobs: usize) -> Result<usize> {
    let base = match setting {
        Some(v) => match v.parse::<usize>() {
            Ok(0) | Err(_) => {
                return Err(CoreError::Config(format!(
                    "WOCAR_THREADS must be a positive integer, got '{v}'"
                )))
            }
            Ok(n) => n,
        },
        None => std::thread::available_parallelism().map(|n| n.get().min(8)).unwrap_or(1),
    };
    Ok(base.clamp(1, jobs.max(1)))
}

enum Prepared {
    Identity,
    RandomBall(f64),
    RandomTabular,
    Pgd { eps: f64, steps: usize },
    Maxdiff { eps: f64, steps: usize },
    Minbest { eps: f64 },
    Bruteforce(AttackerMap),
}

fn prepare_attack(actor: &Actor, env: &Env, attack: &AttackSpec) -> Result<Prepared> {
    let needs_net = matches!(attack.kind, AttackKind::Pgd | AttackKind::Maxdiff | AttackKind::Minbest);
    if needs_net && actor.net().is_none() {
        return Err(CoreError::Config(format!(
            "{} attack needs a differentiable victim network",
            attack.kind.name()
        )));
    }
    Ok(match attack.kind {
        AttackKind::None => Prepared::Identity,
        AttackKind::Random => match env {
            Env::Tabular(_) => Prepared::RandomTabular,
            Env::PointMass(_) => Prepared::RandomBall(attack.eps),
        },
        AttackKind::Pgd => Prepared::Pgd { eps: attack.eps, steps: attack.steps },
        AttackKind::Maxdiff => Prepared::Maxdiff { eps: attack.eps, steps: attack.steps },
        AttackKind::Minbest => Prepared::Minbest { eps: attack.eps },
        AttackKind::TabularBruteforce => {
            let (mdp, pert) = env.tabular().ok_or_else(|| {
                CoreError::Config("tabular-bruteforce attack needs a tabular environment".into())
            })?;
            let policy = match actor {
                Actor::Tabular(p) => p.clone(),
                Actor::DiscreteNet { spec, params } => {
                    greedy_tabular_policy(spec, params, mdp.n_states)?
                }
                Actor::ContinuousNet { .. } => {
                    return Err(CoreError::Config(
                        "tabular-bruteforce attack needs a discrete victim".into(),
                    ))
                }
            };
            Prepared::Bruteforce(attack_tabular_bruteforce(mdp, &policy, pert)?)
        }
    })
}

fn perturb(
    prepared: &Prepared,
    actor: &Actor,
    env: &Env,
    obs: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    Ok(match prepared {
        Prepared::Identity => obs.to_vec(),
        Prepared::RandomBall(eps) => attack_random(obs, *eps, rng),
        Prepared::RandomTabular => {
            let (mdp, pert) = env.tabular().expect("prepared for tabular env");
            let state = env.current_tabular_state().expect("tabular env");
            one_hot(random_admissible_state(pert, state, rng), mdp.n_states)
        }
        Prepared::Pgd { eps, steps } => {
            let (spec, params) = actor.net().expect("checked in prepare");
            attack_pgd(spec, params, obs, *eps, *steps)?
        }
        Prepared::Maxdiff { eps, steps } => {
            let (spec, params) = actor.net().expect("checked in prepare");
            attack_maxdiff(spec, params, obs, *eps, *steps)?
        }
        Prepared::Minbest { eps } => {
            let (spec, params) = actor.net().expect("checked in prepare");
            attack_minbest(spec, params, obs, *eps)?
        }
        Prepared::Bruteforce(map) => {
            let (mdp, _) = env.tabular().expect("prepared for tabular env");
            let state = env.current_tabular_state().expect("tabular env");
            one_hot(map.perturb_to[state], mdp.n_states)
        }
    })
}

fn run_episode(
    actor: &Actor,
    env: &mut Env,
    prepared: &Prepared,
    seed: u64,
    episode: u64,
) -> Result<(f64, f64)> {
    let mut rng = episode_rng(seed, episode);
    let mut obs = env.reset(&mut rng);
    let gamma = env.gamma();
    let mut disc = 0.0;
    let mut undisc = 0.0;
    let mut g = 1.0;
    loop {
        let seen = perturb(prepared, actor, env, &obs, &mut rng)?;
        let action = actor.act(&seen)?;
        let out = env.step(&action, &mut rng)?;
        disc += g * out.reward;
        undisc += out.reward;
        g *= gamma;
        obs = out.obs;
        if out.terminated || out.truncated {
            return Ok((disc, undisc));
        }
    }
}

/// Rolls out `episodes` attacked episodes and aggregates their returns.
/// Episode i is driven by a stream derived from (seed, i) alone, so reports
/// are identical regardless of worker count.
pub fn evaluate(
    actor: &Actor,
    env: &Env,
    attack: &AttackSpec,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(CoreError::Config("need at least one evaluation episode".into()));
    }
    let prepared = prepare_attack(actor, env, attack)?;
    let workers = worker_count(episodes)?;
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(episodes);
    if workers <= 1 {
        let mut scratch = env.clone();
        for ep in 0..episodes {
            pairs.push(run_episode(actor, &mut scratch, &prepared, seed, ep as u64)?);
        }
    } else {
        // Contiguous episode ranges per worker; results concatenate in
        // range order, so the outcome matches the sequential path.
        let per = episodes.div_ceil(workers);
        let chunks: Vec<(usize, usize)> = (0..workers)
            .map(|w| (w * per, ((w + 1) * per).min(episodes)))
            .filter(|(lo, hi)| lo < hi)
            .collect();
        let results: Vec<Result<Vec<(f64, f64)>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|&(lo, hi)| {
                    let prepared = &prepared;
                    scope.spawn(move || {
                        let mut scratch = env.clone();
                        let mut out = Vec::with_capacity(hi - lo);
                        for ep in lo..hi {
                            out.push(run_episode(actor, &mut scratch, prepared, seed, ep as u64)?);
                        }
                        Ok(out)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        for r in results {
            pairs.extend(r?);
        }
    }
    let mut returns: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let undiscounted_mean = pairs.iter().map(|p| p.1).sum::<f64>() / episodes as f64;
    returns.sort_by(|a, b| a.partial_cmp(b).expect("finite returns"));
    let mean = returns.iter().sum::<f64>() / episodes as f64;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / episodes as f64;
    Ok(EvalReport {
        attack: attack.clone(),
        episodes,
        returns,
        mean,
        std: var.sqrt(),
        undiscounted_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{chain2_env, gohome5_env};
    use crate::mdp::build_chain2;
    use crate::net::{init_params, Activation, InitScheme};
    use crate::rng::{seeded_stream, stream};
    use crate::tabular::worst_attack_state_value;

    fn small_victim(seed: u64, head: OutputHead) -> (NetSpec, ParamVector) {
        let spec = NetSpec::new(vec![3, 8, 2], Activation::Tanh, head).unwrap();
        let params = init_params(&spec, InitScheme::Xavier, seed);
        (spec, params)
    }

    #[test]
    fn zero_eps_attacks_are_identity() {
        let (spec, params) = small_victim(0, OutputHead::Linear);
        let s = vec![0.3, -0.2, 0.9];
        assert_eq!(attack_pgd(&spec, &params, &s, 0.0, 10).unwrap(), s);
        assert_eq!(attack_maxdiff(&spec, &params, &s, 0.0, 10).unwrap(), s);
        assert_eq!(attack_minbest(&spec, &params, &s, 0.0).unwrap(), s);
        let mut rng = seeded_stream(0, stream::EVAL);
        assert_eq!(attack_random(&s, 0.0, &mut rng), s);
    }

    #[test]
    fn attacks_respect_the_budget() {
        let s = vec![0.1, -0.5, 0.4];
        let eps = 0.25;
        for seed in 0..20 {
            let (spec, params) = small_victim(seed, OutputHead::Linear);
            let mut rng = seeded_stream(seed, stream::EVAL);
            for x in [
                attack_random(&s, eps, &mut rng),
                attack_pgd(&spec, &params, &s, eps, 10).unwrap(),
                attack_maxdiff(&spec, &params, &s, eps, 10).unwrap(),
                attack_minbest(&spec, &params, &s, eps).unwrap(),
            ] {
                for (xi, si) in x.iter().zip(&s) {
                    assert!((xi - si).abs() <= eps + 1e-12, "budget violated: {xi} vs {si}");
                }
            }
        }
    }

    #[test]
    fn random_attack_coordinates_look_uniform() {
        // Kolmogorov–Smirnov against U[−eps, eps], 10⁴ draws.
        let eps = 0.5;
        let mut rng = seeded_stream(7, stream::EVAL);
        let n = 10_000;
        let mut draws: Vec<f64> = (0..n)
            .map(|_| attack_random(&[0.0], eps, &mut rng)[0])
            .collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut d_stat: f64 = 0.0;
        for (i, x) in draws.iter().enumerate() {
            let cdf = ((x + eps) / (2.0 * eps)).clamp(0.0, 1.0);
            let emp_hi = (i + 1) as f64 / n as f64;
            let emp_lo = i as f64 / n as f64;
            d_stat = d_stat.max((cdf - emp_lo).abs()).max((emp_hi - cdf).abs());
        }
        // KS critical value at α=0.001 is 1.949/√n ≈ 0.0195.
        assert!(d_stat < 1.949 / (n as f64).sqrt(), "KS statistic {d_stat}");
    }

    #[test]
    fn pgd_on_a_two_action_linear_victim_is_one_fgsm_step() {
        // Logits z = W s; greedy = action 0. The objective is monotone in
        // (w1 − w0)·s̃, so the optimum is the corner s + eps·sign(w1 − w0).
        let spec = NetSpec::new(vec![3, 2], Activation::Relu, OutputHead::Linear).unwrap();
        let params = ParamVector {
            flat: vec![
                2.0, -1.0, 0.5, // w0
                -1.0, 1.0, 0.25, // w1
                1.0, 0.0, // biases: keep action 0 greedy at s
            ],
        };
        let s = vec![0.2, 0.1, -0.3];
        let eps = 0.15;
        let want: Vec<f64> = s
            .iter()
            .zip([-3.0f64, 2.0, -0.25])
            .map(|(si, d)| si + eps * d.signum())
            .collect();
        let got = attack_pgd(&spec, &params, &s, eps, 10).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn pgd_objective_never_below_clean_value() {
        for seed in 0..100 {
            let (spec, params) = small_victim(seed, OutputHead::Linear);
            let s = vec![0.1 * seed as f64 % 1.0, -0.4, 0.2];
            let clean = forward(&spec, &params, &s).unwrap();
            let label = greedy_action(&clean);
            let adv = attack_pgd(&spec, &params, &s, 0.2, 10).unwrap();
            let p_clean = softmax(&clean)[label];
            let p_adv = softmax(&forward(&spec, &params, &adv).unwrap())[label];
            assert!(
                -(p_adv.ln()) >= -(p_clean.ln()) - 1e-12,
                "seed {seed}: objective decreased"
            );
        }
    }

    #[test]
    fn maxdiff_objective_non_decreasing_in_steps() {
        for seed in 0..20 {
            let (spec, params) = small_victim(seed, OutputHead::SoftmaxLogits);
            let s = vec![0.3, -0.1, 0.25];
            let clean = forward(&spec, &params, &s).unwrap();
            let kl_of = |x: &[f64]| {
                let out = forward(&spec, &params, x).unwrap();
                dist_and_grads(DistKind::Kl, &clean, &out).0
            };
            let mut prev = 0.0;
            for steps in [1, 3, 10] {
                let adv = attack_maxdiff(&spec, &params, &s, 0.3, steps).unwrap();
                let v = kl_of(&adv);
                assert!(v >= prev - 1e-12, "seed {seed}, steps {steps}: {v} < {prev}");
                prev = v;
            }
        }
    }

    #[test]
    fn minbest_lowers_greedy_probability_on_most_victims() {
        let mut lowered = 0;
        let total = 100;
        for seed in 0..total {
            let (spec, params) = small_victim(seed, OutputHead::SoftmaxLogits);
            let s = vec![-0.2, 0.35, 0.05];
            let clean = forward(&spec, &params, &s).unwrap();
            let label = greedy_action(&clean);
            let adv = attack_minbest(&spec, &params, &s, 0.1).unwrap();
            let p_clean = softmax(&clean)[label];
            let p_adv = softmax(&forward(&spec, &params, &adv).unwrap())[label];
            if p_adv <= p_clean + 1e-12 {
                lowered += 1;
            }
        }
        assert!(lowered >= 95, "only {lowered}/{total} cases lowered the greedy probability");
        // Continuous victims are rejected.
        let (spec, params) = small_victim(0, OutputHead::GaussianMean);
        assert!(attack_minbest(&spec, &params, &[0.0, 0.0, 0.0], 0.1).is_err());
    }

    #[test]
    fn bruteforce_attacker_on_chain2_and_identity() {
        let (mdp, pert, policy) = build_chain2();
        let map = attack_tabular_bruteforce(&mdp, &policy, &pert).unwrap();
        assert_eq!(map.perturb_to, vec![1, 1]);
        let identity = TabularPerturbation::identity(mdp.n_states);
        let map = attack_tabular_bruteforce(&mdp, &policy, &identity).unwrap();
        assert_eq!(map.perturb_to, vec![0, 1]);
    }

    #[test]
    fn evaluation_without_attack_is_reproducible() {
        let env = gohome5_env();
        let (mdp, _) = env.tabular().unwrap();
        let (_, policy) = crate::tabular::optimal_values(mdp, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let actor = Actor::Tabular(policy);
        let spec = AttackSpec::new(AttackKind::None, 0.0, 1).unwrap();
        let a = evaluate(&actor, &env, &spec, 16, 42).unwrap();
        let b = evaluate(&actor, &env, &spec, 16, 42).unwrap();
        assert_eq!(a, b);
        // eps=0 attacks reproduce the natural rollout (deterministic
        // attacks consume no randomness).
        let (mdp, _) = env.tabular().unwrap();
        let q = crate::tabular::optimal_values(mdp, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap().0;
        let (nspec, mut nparams) = {
            let spec = NetSpec::new(vec![25, 4], Activation::Relu, OutputHead::Linear).unwrap();
            let params = ParamVector::zeros(&spec);
            (spec, params)
        };
        for a in 0..4 {
            for s in 0..25 {
                nparams.flat[a * 25 + s] = q.values[s][a];
            }
        }
        let net_actor = Actor::DiscreteNet { spec: nspec, params: nparams };
        let none = evaluate(&net_actor, &env, &spec, 8, 1).unwrap();
        let pgd0 = evaluate(
            &net_actor,
            &env,
            &AttackSpec::new(AttackKind::Pgd, 0.0, 10).unwrap(),
            8,
            1,
        )
        .unwrap();
        assert_eq!(none.returns, pgd0.returns);
    }

    #[test]
    fn bruteforce_evaluation_matches_the_exact_worst_value() {
        let env = chain2_env();
        let (mdp, pert) = env.tabular().unwrap();
        let (_, _, policy) = build_chain2();
        let q = worst_attack_fixed_point(mdp, &policy, pert, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let v = worst_attack_state_value(&q, &policy, pert);
        let expected = v.weighted(&mdp.initial_dist);
        let actor = Actor::Tabular(policy);
        let spec = AttackSpec::new(AttackKind::TabularBruteforce, 0.0, 1).unwrap();
        let report = evaluate(&actor, &env, &spec, 400, 9).unwrap();
        // Returns are 0 or ≈2 depending on the start state; the mean must
        // sit within 3σ of the initial-distribution-weighted worst value.
        let sigma_mean = report.std / (report.episodes as f64).sqrt();
        assert!(
            (report.mean - expected).abs() <= 3.0 * sigma_mean + 1e-9,
            "mean {} vs exact {expected} (σ {})",
            report.mean,
            sigma_mean
        );
    }

    #[test]
    fn incompatible_attack_and_actor_combinations_are_rejected() {
        let env = chain2_env();
        let (_, _, policy) = build_chain2();
        let tab_actor = Actor::Tabular(policy);
        // Gradient attacks need a network victim.
        for kind in [AttackKind::Pgd, AttackKind::Maxdiff, AttackKind::Minbest] {
            let spec = AttackSpec::new(kind, 0.1, 5).unwrap();
            assert!(evaluate(&tab_actor, &env, &spec, 2, 0).is_err());
        }
        // Bruteforce needs a tabular environment.
        let cont_env = crate::env::pointmass_env();
        let spec = AttackSpec::new(AttackKind::TabularBruteforce, 0.0, 1).unwrap();
        assert!(evaluate(&tab_actor, &cont_env, &spec, 2, 0).is_err());
        // Bad specs.
        assert!(AttackSpec::new(AttackKind::Pgd, -0.1, 5).is_err());
        assert!(AttackSpec::new(AttackKind::Pgd, 0.1, 0).is_err());
        assert!(AttackKind::parse("gantry").is_err());
        assert_eq!(AttackKind::parse("tabular-bruteforce").unwrap(), AttackKind::TabularBruteforce);
    }

    #[test]
    fn parallel_and_sequential_evaluation_agree() {
        let env = gohome5_env();
        let (mdp, _) = env.tabular().unwrap();
        let (_, policy) = crate::tabular::optimal_values(mdp, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let actor = Actor::Tabular(policy);
        let spec = AttackSpec::new(AttackKind::Random, 0.0, 1).unwrap();
        std::env::set_var("WOCAR_THREADS", "1");
        let seq = evaluate(&actor, &env, &spec, 12, 3).unwrap();
        std::env::set_var("WOCAR_THREADS", "4");
        let par = evaluate(&actor, &env, &spec, 12, 3).unwrap();
        std::env::remove_var("WOCAR_THREADS");
        assert_eq!(seq, par);
        assert!(worker_count_from(Some("zero"), 4).is_err());
        assert!(worker_count_from(Some("0"), 4).is_err());
        assert_eq!(worker_count_from(Some("16"), 4).unwrap(), 4);
    }
}
