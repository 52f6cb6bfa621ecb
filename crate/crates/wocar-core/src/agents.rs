//! Training loops: worst-case-aware DQN and PPO plus their vanilla
//! baselines, sharing replay, schedules, and network machinery.
//!
//! Both worst-case-aware variants run as a flagged mode of a single engine,
//! so the baseline comparison is exact: the vanilla path executes the same
//! code with the extra machinery disabled. Randomness is split into
//! purpose-keyed streams (environment, exploration, initialization, …), so
//! disabling a component never shifts the draws of another — turning every
//! extra loss weight to zero reproduces the baseline run bit for bit rather
//! than approximately.
//!
//! The DQN variant keeps four networks: the vanilla pair (online + soft
//! target), the robust net that actually picks actions, and a worst-attack
//! critic Q̲_φ regressed on pessimistic bootstrapped targets. The robust
//! net's target mixes the vanilla target net with the critic,
//! `y = r + γ·max_a [κ·Q_target + (1−κ)·Q̲_φ]`, where κ = 1 recovers the
//! vanilla target exactly. The PPO variant adds κ_wst·Q̲_φ(s,a) to the
//! clipped-objective advantage and trains the critic on each rollout.

use std::collections::{BTreeMap, VecDeque};

use crate::attacks::greedy_action;
use crate::env::{decode_one_hot, Action, Env};
use crate::error::CoreError;
use crate::losses::{
    critic_regression_discrete, est_loss_continuous, est_loss_discrete, normalize_weights,
    reg_loss, state_importance, state_importance_ppo_discrete, Batch, BoxMin, DiscreteAdvSource,
    DistKind, RegConfig, Transition,
};
use crate::mdp::{DeterministicPolicy, TabularMDP, TabularPerturbation};
use crate::net::{
    adam_step, backward, forward, forward_cached, init_params, init_params_rng, log_softmax,
    softmax, Activation, AdamState, GradVector, InitScheme, NetSpec, OutputHead, ParamVector,
};
use crate::rng::{normal, seeded_stream, stream};
use crate::tabular::{
    adv_action_set_prefix, policy_evaluation, values_under, worst_attack_fixed_point,
    worst_attack_state_value, DEFAULT_MAX_ITER,
};
use crate::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const MAX_GRAD_NORM: f64 = 10.0;
/// Shape constant of the late-training exponential ramp.
const KAPPA_RAMP_RATE: f64 = 5.0;
/// Fixed-point tolerance for the periodic exact evaluations; looser than
/// the oracle default because it runs many times per training run.
const EVAL_TOL: f64 = 1e-8;

/// One timestamped row of training metrics. Scalar names are stable across
/// a run; the map is ordered so serialized records are byte-reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Global environment step the record describes.
    pub step: u64,
    /// Named scalars: losses, returns, schedule values.
    #[serde(flatten)]
    pub values: BTreeMap<String, f64>,
}

/// Uniform-sampling ring buffer of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition<usize>>,
    capacity: usize,
    cursor: usize,
    inserted: u64,
}

impl ReplayBuffer {
    /// Creates an empty buffer holding at most `capacity` transitions.
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(CoreError::Config("replay capacity must be ≥ 1".into()));
        }
        Ok(ReplayBuffer { items: Vec::new(), capacity, cursor: 0, inserted: 0 })
    }

    /// Stores a transition, overwriting the oldest once full.
    pub fn push(&mut self, t: Transition<usize>) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        self.inserted += 1;
    }

    /// Number of stored transitions (≤ capacity).
    pub fn len(&self) -> usize {
        self.items.len()
    }

    /// True when nothing is stored yet.
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total insertions over the buffer's lifetime.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Uniform sample (with replacement) of `n` indices into the buffer.
    pub fn sample_indices(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        assert!(!self.items.is_empty(), "cannot sample from an empty buffer");
        (0..n).map(|_| rng.gen_range(0..self.items.len())).collect()
    }

    /// The transition at a sampled index.
    pub fn get(&self, i: usize) -> &Transition<usize> {
        &self.items[i]
    }
}

/// Shape of the worst-case weight ramp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KappaSched {
    /// Fixed value for the whole run.
    Constant(f64),
    /// Linear 0 → target across training.
    Linear {
        /// Final value, reached at the last step.
        target: f64,
    },
    /// Zero for the first third of training, then a normalized exponential
    /// reaching the target at the last step.
    ThirdExp {
        /// Final value, reached at the last step.
        target: f64,
    },
}

/// Training-time schedules: the perturbation-budget ramp ε_t and the
/// worst-case mixing weight κ_wst(t).
#[derive(Debug, Clone, PartialEq)]
pub struct Schedules {
    /// Total training steps the schedules stretch over.
    pub total_steps: usize,
    /// Final perturbation budget.
    pub eps_target: f64,
    /// Worst-case weight ramp.
    pub kappa: KappaSched,
}

impl Schedules {
    /// Builds schedules, rejecting empty runs and negative targets.
    pub fn new(total_steps: usize, eps_target: f64, kappa: KappaSched) -> Result<Self> {
        if total_steps == 0 {
            return Err(CoreError::Config("schedules need total_steps ≥ 1".into()));
        }
        if !(eps_target >= 0.0) || !eps_target.is_finite() {
            return Err(CoreError::Config(format!("eps target must be ≥ 0, got {eps_target}")));
        }
        let k = match kappa {
            KappaSched::Constant(v) | KappaSched::Linear { target: v } | KappaSched::ThirdExp { target: v } => v,
        };
        if !(k >= 0.0) || !k.is_finite() {
            return Err(CoreError::Config(format!("kappa target must be ≥ 0, got {k}")));
        }
        Ok(Schedules { total_steps, eps_target, kappa })
    }

    /// Perturbation budget at step t: zero for the first 10% of training,
    /// linear up to the target by 60%, flat afterwards.
    pub fn eps_of(&self, t: usize) -> f64 {
        let frac = (t as f64 / self.total_steps as f64).min(1.0);
        if frac <= 0.1 {
            0.0
        } else if frac >= 0.6 {
            self.eps_target
        } else {
            self.eps_target * (frac - 0.1) / 0.5
        }
    }

    /// Worst-case weight at step t.
    pub fn kappa_wst_of(&self, t: usize) -> f64 {
        let frac = (t as f64 / self.total_steps as f64).min(1.0);
        match self.kappa {
            KappaSched::Constant(v) => v,
            KappaSched::Linear { target } => target * frac,
            KappaSched::ThirdExp { target } => {
                let third = 1.0 / 3.0;
                if frac <= third {
                    0.0
                } else {
                    let x = (frac - third) / (1.0 - third);
                    target * ((KAPPA_RAMP_RATE * x).exp() - 1.0) / (KAPPA_RAMP_RATE.exp() - 1.0)
                }
            }
        }
    }
}

fn clip_grad(g: &mut GradVector, max_norm: f64) {
    let n = g.l2_norm();
    if n > max_norm {
        g.scale(max_norm / n);
    }
}

fn clip_flat(g: &mut [f64], max_norm: f64) {
    let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > max_norm {
        let k = max_norm / n;
        for x in g.iter_mut() {
            *x *= k;
        }
    }
}

fn check_finite(name: &str, value: f64, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(CoreError::Numerical(format!("{name} became {value} at step {step}")))
    }
}

/// Exact natural and worst-case values (weighted by the initial
/// distribution) of the greedy policy a per-action network induces.
pub fn exact_tabular_eval(
    spec: &NetSpec,
    params: &ParamVector,
    mdp: &TabularMDP,
    pert: &TabularPerturbation,
) -> Result<(f64, f64)> {
    let policy = crate::attacks::greedy_tabular_policy(spec, params, mdp.n_states)?;
    let q = policy_evaluation(mdp, &policy)?;
    let natural = values_under(&q, &policy).weighted(&mdp.initial_dist);
    let qw = worst_attack_fixed_point(mdp, &policy, pert, EVAL_TOL, DEFAULT_MAX_ITER)?;
    let worst = worst_attack_state_value(&qw, &policy, pert).weighted(&mdp.initial_dist);
    Ok((natural, worst))
}

/// The greedy tabular policy of an agent's acting network.
pub fn extract_tabular_policy(
    spec: &NetSpec,
    params: &ParamVector,
    mdp: &TabularMDP,
) -> Result<DeterministicPolicy> {
    if spec.out_dim() != mdp.n_actions {
        return Err(CoreError::Config(format!(
            "network has {} outputs, MDP has {} actions",
            spec.out_dim(),
            mdp.n_actions
        )));
    }
    crate::attacks::greedy_tabular_policy(spec, params, mdp.n_states)
}

// ---------------------------------------------------------------------------
// DQN
// ---------------------------------------------------------------------------

/// Hyperparameters of the DQN engine (both variants).
#[derive(Debug, Clone)]
pub struct DqnConfig {
    /// Environment steps to train for.
    pub total_steps: usize,
    /// Steps collected before learning starts.
    pub warmup: usize,
    /// Minibatch size per update.
    pub batch_size: usize,
    /// Replay capacity.
    pub buffer_capacity: usize,
    /// Hidden layer widths of every network.
    pub hidden: Vec<usize>,
    /// Adam learning rate for the Q networks.
    pub lr: f64,
    /// Adam learning rate for the worst-attack critic.
    pub critic_lr: f64,
    /// Soft-update coefficient for the target network.
    pub tau: f64,
    /// ε-greedy exploration: starting rate.
    pub explore_start: f64,
    /// ε-greedy exploration: final rate.
    pub explore_end: f64,
    /// Fraction of training over which exploration anneals linearly.
    pub explore_frac: f64,
    /// Perturbation-budget and worst-case-weight ramps.
    pub sched: Schedules,
    /// Smoothness-regularization weight on the robust net's softmax.
    pub kappa_reg: f64,
    /// Inner ascent steps of the regularizer.
    pub reg_inner_steps: usize,
    /// Compute admissible action sets by bound propagation on the one-hot
    /// ball instead of the exact tabular sets.
    pub adv_input_ball: bool,
    /// Gradient step every this many environment steps.
    pub train_every: usize,
    /// Metrics record every this many environment steps.
    pub log_every: usize,
    /// Acting-net snapshot every this many steps (0 = none).
    pub checkpoint_every: usize,
    /// Compute exact tabular natural/worst values at each log point.
    pub exact_eval_on_log: bool,
}

impl Default for DqnConfig {
    fn default() -> Self {
        DqnConfig {
            total_steps: 30_000,
            warmup: 500,
            batch_size: 64,
            buffer_capacity: 10_000,
            hidden: vec![64],
            lr: 1e-3,
            critic_lr: 1e-3,
            tau: 0.005,
            explore_start: 1.0,
            explore_end: 0.05,
            explore_frac: 0.5,
            sched: Schedules {
                total_steps: 30_000,
                eps_target: 1.0,
                kappa: KappaSched::ThirdExp { target: 0.5 },
            },
            kappa_reg: 0.0,
            reg_inner_steps: 10,
            adv_input_ball: false,
            train_every: 1,
            log_every: 1_000,
            checkpoint_every: 0,
            exact_eval_on_log: true,
        }
    }
}

impl DqnConfig {
    fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.batch_size == 0 || self.train_every == 0 || self.log_every == 0 {
            return Err(CoreError::Config("step counts and batch size must be ≥ 1".into()));
        }
        if self.batch_size > self.buffer_capacity {
            return Err(CoreError::Config("batch size exceeds buffer capacity".into()));
        }
        for v in [self.lr, self.critic_lr, self.tau, self.kappa_reg] {
            if !v.is_finite() || v < 0.0 {
                return Err(CoreError::Config(format!("rates must be finite and ≥ 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.explore_start)
            || !(0.0..=1.0).contains(&self.explore_end)
            || !(0.0..=1.0).contains(&self.explore_frac)
        {
            return Err(CoreError::Config("exploration parameters must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Exploration rate at step t: linear from start to end over
    /// `explore_frac` of training, then flat.
    pub fn explore_of(&self, t: usize) -> f64 {
        let anneal = self.explore_frac * self.total_steps as f64;
        if anneal <= 0.0 {
            return self.explore_end;
        }
        let frac = (t as f64 / anneal).min(1.0);
        self.explore_start + (self.explore_end - self.explore_start) * frac
    }
}

/// Final networks of a DQN run. The acting network is `q_r` when present
/// (worst-case-aware run), `q_v` otherwise.
#[derive(Debug, Clone)]
pub struct DqnState {
    /// Shared shape of all four networks.
    pub spec: NetSpec,
    /// Online vanilla Q network.
    pub q_v: ParamVector,
    /// Soft-updated target network.
    pub q_v_target: ParamVector,
    /// Robust (acting) network, worst-case-aware runs only.
    pub q_r: Option<ParamVector>,
    /// Worst-attack critic, worst-case-aware runs only.
    pub critic: Option<ParamVector>,
    /// Steps trained.
    pub step: usize,
}

impl DqnState {
    /// The parameters of the network that picks actions.
    pub fn acting(&self) -> &ParamVector {
        self.q_r.as_ref().unwrap_or(&self.q_v)
    }
}

/// A finished DQN run: final state, metrics stream, and periodic
/// acting-net snapshots (step, params).
#[derive(Debug, Clone)]
pub struct DqnOutput {
    /// Final networks.
    pub state: DqnState,
    /// One record per log interval.
    pub metrics: Vec<MetricsRecord>,
    /// Periodic acting-network snapshots.
    pub checkpoints: Vec<(usize, ParamVector)>,
}

/// Vanilla bootstrapped targets `y = r + γ·max_a Q_target(s', a)`
/// (plain `r` on terminal transitions).
pub fn vanilla_q_targets(
    spec: &NetSpec,
    q_target: &ParamVector,
    batch: &Batch<usize>,
    gamma: f64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(batch.len());
    for tr in &batch.transitions {
        if tr.done {
            out.push(tr.r);
            continue;
        }
        let q = forward(spec, q_target, &tr.s_next)?;
        let m = q.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        out.push(tr.r + gamma * m);
    }
    Ok(out)
}

/// Robust targets `y = r + γ·max_a [κ·Q_target(s',a) + (1−κ)·Q̲_φ(s',a)]`;
/// the max is taken over the mixture, so both terms use the same argmax.
/// κ = 1 reproduces [`vanilla_q_targets`] exactly.
pub fn robust_q_targets(
    spec: &NetSpec,
    q_target: &ParamVector,
    critic: &ParamVector,
    batch: &Batch<usize>,
    kappa: f64,
    gamma: f64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(batch.len());
    for tr in &batch.transitions {
        if tr.done {
            out.push(tr.r);
            continue;
        }
        let qv = forward(spec, q_target, &tr.s_next)?;
        let qw = forward(spec, critic, &tr.s_next)?;
        let mix = |a: usize| kappa * qv[a] + (1.0 - kappa) * qw[a];
        let best = (0..qv.len()).fold(0, |b, a| if mix(a) > mix(b) { a } else { b });
        out.push(tr.r + gamma * mix(best));
    }
    Ok(out)
}

/// Trains the worst-case-aware DQN variant.
pub fn wocar_dqn_train(env: &Env, cfg: &DqnConfig, seed: u64) -> Result<DqnOutput> {
    dqn_train(env, cfg, seed, true)
}

/// Trains the vanilla DQN baseline with the same engine.
pub fn vanilla_dqn_train(env: &Env, cfg: &DqnConfig, seed: u64) -> Result<DqnOutput> {
    dqn_train(env, cfg, seed, false)
}

fn dqn_train(env: &Env, cfg: &DqnConfig, seed: u64, wocar: bool) -> Result<DqnOutput> {
    cfg.validate()?;
    let (mdp, pert) = env
        .tabular()
        .ok_or_else(|| CoreError::Config("DQN requires a discrete (tabular) environment".into()))?;
    let n_actions = mdp.n_actions;
    let n_states = mdp.n_states;
    let mut widths = vec![env.obs_dim()];
    widths.extend_from_slice(&cfg.hidden);
    widths.push(n_actions);
    let spec = NetSpec::new(widths, Activation::Relu, OutputHead::Linear)?;

    let mut q_v = init_params(&spec, InitScheme::He, seed);
    let mut q_v_target = q_v.clone();
    // The robust net starts as a copy of the vanilla net so a κ ≡ 1 run
    // tracks the baseline from the very first update.
    let mut q_r = wocar.then(|| q_v.clone());
    let mut critic = if wocar {
        let mut r = seeded_stream(seed, stream::CRITIC_INIT);
        Some(init_params_rng(&spec, InitScheme::He, &mut r))
    } else {
        None
    };

    let mut adam_v = AdamState::new(spec.n_params());
    let mut adam_r = AdamState::new(spec.n_params());
    let mut adam_c = AdamState::new(spec.n_params());

    let mut env_rng = seeded_stream(seed, stream::ENV);
    let mut explore_rng = seeded_stream(seed, stream::EXPLORE);
    let mut sample_rng = seeded_stream(seed, stream::SAMPLE);
    let mut reg_rng = seeded_stream(seed, stream::REG);

    let mut world = env.clone();
    let mut obs = world.reset(&mut env_rng);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity)?;

    let mut episode_return = 0.0;
    let mut recent_returns: VecDeque<f64> = VecDeque::with_capacity(20);
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let mut last = BTreeMap::new();

    for t in 0..cfg.total_steps {
        let acting = q_r.as_ref().unwrap_or(&q_v);
        let a = if explore_rng.gen::<f64>() < cfg.explore_of(t) {
            explore_rng.gen_range(0..n_actions)
        } else {
            greedy_action(&forward(&spec, acting, &obs)?)
        };
        let out = world.step(&Action::Discrete(a), &mut env_rng)?;
        buffer.push(Transition {
            s: obs.clone(),
            a,
            r: out.reward,
            s_next: out.obs.clone(),
            done: out.terminated,
        });
        episode_return += out.reward;
        if out.terminated || out.truncated {
            if recent_returns.len() == 20 {
                recent_returns.pop_front();
            }
            recent_returns.push_back(episode_return);
            episode_return = 0.0;
            obs = world.reset(&mut env_rng);
        } else {
            obs = out.obs;
        }

        if t >= cfg.warmup && buffer.len() >= cfg.batch_size && (t + 1) % cfg.train_every == 0 {
            let idx = buffer.sample_indices(cfg.batch_size, &mut sample_rng);
            let batch = Batch::new(idx.iter().map(|&i| buffer.get(i).clone()).collect(), None)?;

            // Vanilla TD step.
            let targets = vanilla_q_targets(&spec, &q_v_target, &batch, mdp.gamma)?;
            let (loss_q, mut grad) = critic_regression_discrete(&spec, &q_v, &batch, &targets)?;
            check_finite("vanilla TD loss", loss_q, t)?;
            clip_grad(&mut grad, MAX_GRAD_NORM);
            adam_step(&mut q_v.flat, &grad.flat, &mut adam_v, cfg.lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS);
            for (pt, p) in q_v_target.flat.iter_mut().zip(&q_v.flat) {
                *pt += cfg.tau * (p - *pt);
            }
            last.insert("loss_q".into(), loss_q);

            if wocar {
                let q_r_params = q_r.as_mut().expect("worst-case run");
                let critic_params = critic.as_mut().expect("worst-case run");
                let eps_t = cfg.sched.eps_of(t);
                let kappa = cfg.sched.kappa_wst_of(t);

                // Worst-attack critic step on pessimistic targets.
                let (loss_c, mut grad_c) = if cfg.adv_input_ball {
                    est_loss_discrete(
                        &spec,
                        critic_params,
                        &batch,
                        &DiscreteAdvSource::InputBall {
                            policy_spec: &spec,
                            policy_params: q_r_params,
                            eps: eps_t,
                        },
                        mdp.gamma,
                    )?
                } else {
                    let frac = if cfg.sched.eps_target > 0.0 { eps_t / cfg.sched.eps_target } else { 0.0 };
                    let acting_policy =
                        crate::attacks::greedy_tabular_policy(&spec, q_r_params, n_states)?;
                    let sets: Vec<Vec<usize>> = batch
                        .transitions
                        .iter()
                        .map(|tr| {
                            adv_action_set_prefix(&acting_policy, pert, decode_one_hot(&tr.s_next), frac)
                        })
                        .collect();
                    est_loss_discrete(
                        &spec,
                        critic_params,
                        &batch,
                        &DiscreteAdvSource::ExplicitSets(&sets),
                        mdp.gamma,
                    )?
                };
                check_finite("worst-attack critic loss", loss_c, t)?;
                clip_grad(&mut grad_c, MAX_GRAD_NORM);
                adam_step(
                    &mut critic_params.flat,
                    &grad_c.flat,
                    &mut adam_c,
                    cfg.critic_lr,
                    ADAM_BETA1,
                    ADAM_BETA2,
                    ADAM_EPS,
                );
                last.insert("loss_critic".into(), loss_c);

                // Robust net regression onto the mixed target.
                let targets_r = robust_q_targets(&spec, &q_v_target, critic_params, &batch, kappa, mdp.gamma)?;
                let (loss_r, mut grad_r) =
                    critic_regression_discrete(&spec, q_r_params, &batch, &targets_r)?;
                check_finite("robust TD loss", loss_r, t)?;

                let mut loss_reg = 0.0;
                if cfg.kappa_reg != 0.0 {
                    let states: Vec<Vec<f64>> =
                        batch.transitions.iter().map(|tr| tr.s.clone()).collect();
                    let mut w: Vec<f64> = batch
                        .transitions
                        .iter()
                        .map(|tr| Ok(state_importance(&forward(&spec, &q_v, &tr.s)?)))
                        .collect::<Result<_>>()?;
                    normalize_weights(&mut w);
                    let rc = RegConfig {
                        eps: eps_t,
                        inner_steps: cfg.reg_inner_steps,
                        dist: DistKind::Kl,
                        noise: false,
                    };
                    let (lr_, grad_reg, _) =
                        reg_loss(&spec, q_r_params, &states, &w, &rc, None, Some(&mut reg_rng))?;
                    check_finite("smoothness loss", lr_, t)?;
                    loss_reg = lr_;
                    grad_r.add_scaled(&grad_reg, cfg.kappa_reg);
                }
                clip_grad(&mut grad_r, MAX_GRAD_NORM);
                adam_step(&mut q_r_params.flat, &grad_r.flat, &mut adam_r, cfg.lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS);
                last.insert("loss_robust".into(), loss_r);
                last.insert("loss_reg".into(), loss_reg);

                // Mean critic value of the actions actually taken.
                let mut wc = 0.0;
                for tr in &batch.transitions {
                    wc += forward(&spec, critic_params, &tr.s)?[tr.a];
                }
                last.insert("worst_critic_mean".into(), wc / batch.len() as f64);
            }
        }

        if (t + 1) % cfg.log_every == 0 {
            let mut values = last.clone();
            values.insert("explore_eps".into(), cfg.explore_of(t));
            values.insert("eps".into(), cfg.sched.eps_of(t));
            values.insert("kappa_wst".into(), cfg.sched.kappa_wst_of(t));
            if !recent_returns.is_empty() {
                values.insert(
                    "train_return".into(),
                    recent_returns.iter().sum::<f64>() / recent_returns.len() as f64,
                );
            }
            if cfg.exact_eval_on_log {
                let acting = q_r.as_ref().unwrap_or(&q_v);
                let (nat, worst) = exact_tabular_eval(&spec, acting, mdp, pert)?;
                values.insert("natural_value_exact".into(), nat);
                values.insert("worst_value_exact".into(), worst);
            }
            metrics.push(MetricsRecord { step: (t + 1) as u64, values });
        }
        if cfg.checkpoint_every > 0 && (t + 1) % cfg.checkpoint_every == 0 {
            checkpoints.push((t + 1, q_r.as_ref().unwrap_or(&q_v).clone()));
        }
    }

    Ok(DqnOutput {
        state: DqnState { spec, q_v, q_v_target, q_r, critic, step: cfg.total_steps },
        metrics,
        checkpoints,
    })
}

// ---------------------------------------------------------------------------
// PPO
// ---------------------------------------------------------------------------

/// Hyperparameters of the PPO engine (both variants).
#[derive(Debug, Clone)]
pub struct PpoConfig {
    /// Environment steps to train for.
    pub total_steps: usize,
    /// Steps collected per iteration.
    pub rollout_len: usize,
    /// Optimization epochs over each rollout.
    pub epochs: usize,
    /// Minibatch size within an epoch.
    pub minibatch_size: usize,
    /// Adam learning rate for the policy (and its log-std).
    pub policy_lr: f64,
    /// Adam learning rate for the value network.
    pub value_lr: f64,
    /// Adam learning rate for the worst-attack critic.
    pub critic_lr: f64,
    /// Ratio clip width.
    pub clip: f64,
    /// Hidden layer widths of every network.
    pub hidden: Vec<usize>,
    /// Perturbation-budget and worst-case-weight ramps.
    pub sched: Schedules,
    /// Smoothness-regularization weight.
    pub kappa_reg: f64,
    /// Inner ascent steps of the regularizer.
    pub reg_inner_steps: usize,
    /// Batch-normalize the critic values added to the advantage.
    pub normalize_worst_q: bool,
    /// Discrete critic targets by bound propagation on the one-hot ball
    /// instead of the exact tabular sets.
    pub adv_input_ball: bool,
    /// Descent steps of the continuous inner minimizer.
    pub box_min_steps: usize,
    /// Relative step size of the continuous inner minimizer.
    pub box_min_step_size: f64,
    /// Initial per-coordinate log standard deviation (gaussian policies).
    pub init_log_std: f64,
    /// Abort when any probability ratio exceeds this (divergence guard).
    pub max_ratio: f64,
    /// Policy snapshot every this many iterations (0 = none).
    pub checkpoint_every: usize,
    /// Compute exact tabular natural/worst values each iteration.
    pub exact_eval_on_log: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            total_steps: 60_000,
            rollout_len: 1_024,
            epochs: 4,
            minibatch_size: 64,
            policy_lr: 3e-4,
            value_lr: 1e-3,
            critic_lr: 1e-3,
            clip: 0.2,
            hidden: vec![32, 32],
            sched: Schedules {
                total_steps: 60_000,
                eps_target: 0.1,
                kappa: KappaSched::Linear { target: 0.8 },
            },
            kappa_reg: 0.0,
            reg_inner_steps: 10,
            normalize_worst_q: true,
            adv_input_ball: false,
            box_min_steps: 20,
            box_min_step_size: 0.1,
            init_log_std: -1.6,
            max_ratio: 100.0,
            checkpoint_every: 0,
            exact_eval_on_log: false,
        }
    }
}

impl PpoConfig {
    fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.rollout_len == 0 || self.epochs == 0 || self.minibatch_size == 0 {
            return Err(CoreError::Config("PPO step counts must be ≥ 1".into()));
        }
        for v in [self.policy_lr, self.value_lr, self.critic_lr, self.kappa_reg] {
            if !v.is_finite() || v < 0.0 {
                return Err(CoreError::Config(format!("rates must be finite and ≥ 0, got {v}")));
            }
        }
        if !(self.clip > 0.0) || !(self.max_ratio > 1.0) {
            return Err(CoreError::Config("clip must be > 0 and max_ratio > 1".into()));
        }
        Ok(())
    }
}

/// Final networks of a PPO run.
#[derive(Debug, Clone)]
pub struct PpoState {
    /// Policy network shape (softmax logits or gaussian mean head).
    pub policy_spec: NetSpec,
    /// Policy parameters.
    pub policy: ParamVector,
    /// Learned log standard deviations (empty for discrete policies).
    pub log_std: Vec<f64>,
    /// Value network shape.
    pub value_spec: NetSpec,
    /// Value parameters.
    pub value: ParamVector,
    /// Worst-attack critic shape, worst-case-aware runs only.
    pub critic_spec: Option<NetSpec>,
    /// Worst-attack critic parameters, worst-case-aware runs only.
    pub critic: Option<ParamVector>,
    /// Steps trained.
    pub step: usize,
}

/// A finished PPO run: final state, metrics (one record per iteration), and
/// periodic policy snapshots (step, params).
#[derive(Debug, Clone)]
pub struct PpoOutput {
    /// Final networks.
    pub state: PpoState,
    /// One record per iteration.
    pub metrics: Vec<MetricsRecord>,
    /// Periodic policy snapshots.
    pub checkpoints: Vec<(usize, ParamVector)>,
}

/// Trains the worst-case-aware PPO variant.
pub fn wocar_ppo_train(env: &Env, cfg: &PpoConfig, seed: u64) -> Result<PpoOutput> {
    ppo_train(env, cfg, seed, true)
}

/// Trains the vanilla PPO baseline with the same engine. With all extra
/// loss weights at zero the worst-case-aware variant reproduces this run
/// bit for bit.
pub fn vanilla_ppo_train(env: &Env, cfg: &PpoConfig, seed: u64) -> Result<PpoOutput> {
    ppo_train(env, cfg, seed, false)
}

struct Rollout {
    obs: Vec<Vec<f64>>,
    act_d: Vec<usize>,
    act_c: Vec<Vec<f64>>,
    logp: Vec<f64>,
    reward: Vec<f64>,
    value: Vec<f64>,
    next_obs: Vec<Vec<f64>>,
    terminated: Vec<bool>,
    /// Episode boundary after this step (terminated or truncated).
    boundary: Vec<bool>,
}

fn fisher_yates(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

#[allow(clippy::too_many_lines)]
fn ppo_train(env: &Env, cfg: &PpoConfig, seed: u64, wocar: bool) -> Result<PpoOutput> {
    cfg.validate()?;
    let discrete = env.is_discrete();
    let obs_dim = env.obs_dim();
    let (act_dim, act_low, act_high) = match env.action_space() {
        crate::env::ActionSpace::Discrete(n) => (n, Vec::new(), Vec::new()),
        crate::env::ActionSpace::Box { low, high } => {
            let n = low.len();
            (n, low, high)
        }
    };
    let gamma = env.gamma();

    let mut widths = vec![obs_dim];
    widths.extend_from_slice(&cfg.hidden);
    widths.push(act_dim);
    let policy_spec = NetSpec::new(
        widths,
        Activation::Tanh,
        if discrete { OutputHead::SoftmaxLogits } else { OutputHead::GaussianMean },
    )?;
    let mut vwidths = vec![obs_dim];
    vwidths.extend_from_slice(&cfg.hidden);
    vwidths.push(1);
    let value_spec = NetSpec::new(vwidths, Activation::Tanh, OutputHead::Linear)?;
    let critic_spec = if discrete {
        policy_spec_like(obs_dim, &cfg.hidden, act_dim)?
    } else {
        policy_spec_like(obs_dim + act_dim, &cfg.hidden, 1)?
    };

    let mut init_rng = seeded_stream(seed, stream::INIT);
    let mut policy = init_params_rng(&policy_spec, InitScheme::Xavier, &mut init_rng);
    let mut value = init_params_rng(&value_spec, InitScheme::Xavier, &mut init_rng);
    let mut log_std = if discrete { Vec::new() } else { vec![cfg.init_log_std; act_dim] };
    let mut critic = if wocar {
        let mut r = seeded_stream(seed, stream::CRITIC_INIT);
        Some(init_params_rng(&critic_spec, InitScheme::He, &mut r))
    } else {
        None
    };

    let mut adam_p = AdamState::new(policy_spec.n_params());
    let mut adam_s = AdamState::new(log_std.len());
    let mut adam_v = AdamState::new(value_spec.n_params());
    let mut adam_c = AdamState::new(critic_spec.n_params());

    let mut env_rng = seeded_stream(seed, stream::ENV);
    let mut sample_rng = seeded_stream(seed, stream::SAMPLE);
    let mut reg_rng = seeded_stream(seed, stream::REG);

    let mut world = env.clone();
    let mut obs = world.reset(&mut env_rng);
    let mut episode_return = 0.0;
    let mut recent_returns: VecDeque<f64> = VecDeque::with_capacity(20);

    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let mut global_step = 0usize;
    let mut iter = 0usize;

    while global_step < cfg.total_steps {
        iter += 1;
        let steps = cfg.rollout_len.min(cfg.total_steps - global_step);
        let mut ro = Rollout {
            obs: Vec::with_capacity(steps),
            act_d: Vec::new(),
            act_c: Vec::new(),
            logp: Vec::with_capacity(steps),
            reward: Vec::with_capacity(steps),
            value: Vec::with_capacity(steps),
            next_obs: Vec::with_capacity(steps),
            terminated: Vec::with_capacity(steps),
            boundary: Vec::with_capacity(steps),
        };
        for _ in 0..steps {
            let v = forward(&value_spec, &value, &obs)?[0];
            let out_policy = forward(&policy_spec, &policy, &obs)?;
            let (action, logp) = if discrete {
                let lsm = log_softmax(&out_policy);
                let p = softmax(&out_policy);
                let r: f64 = sample_rng.gen();
                let mut acc = 0.0;
                let mut a = p.len() - 1;
                for (i, &pi) in p.iter().enumerate() {
                    acc += pi;
                    if r < acc {
                        a = i;
                        break;
                    }
                }
                (Action::Discrete(a), lsm[a])
            } else {
                let mut x = Vec::with_capacity(act_dim);
                let mut lp = 0.0;
                for (mu, ls) in out_policy.iter().zip(&log_std) {
                    let sigma = ls.exp();
                    let z = normal(&mut sample_rng);
                    x.push(mu + sigma * z);
                    lp += -0.5 * z * z - ls - 0.5 * (2.0 * std::f64::consts::PI).ln();
                }
                (Action::Continuous(x), lp)
            };
            let step_out = world.step(&action, &mut env_rng)?;
            ro.obs.push(obs.clone());
            match &action {
                Action::Discrete(a) => ro.act_d.push(*a),
                Action::Continuous(x) => ro.act_c.push(x.clone()),
            }
            ro.logp.push(logp);
            ro.reward.push(step_out.reward);
            ro.value.push(v);
            ro.next_obs.push(step_out.obs.clone());
            ro.terminated.push(step_out.terminated);
            ro.boundary.push(step_out.terminated || step_out.truncated);
            episode_return += step_out.reward;
            if step_out.terminated || step_out.truncated {
                if recent_returns.len() == 20 {
                    recent_returns.pop_front();
                }
                recent_returns.push_back(episode_return);
                episode_return = 0.0;
                obs = world.reset(&mut env_rng);
            } else {
                obs = step_out.obs;
            }
        }
        global_step += steps;
        let kappa = cfg.sched.kappa_wst_of(global_step);
        let eps_t = cfg.sched.eps_of(global_step);

        // Rewards-to-go, bootstrapping with the value network at segment
        // cuts (truncation or rollout end) and zero past termination.
        let n = ro.obs.len();
        let mut rtg = vec![0.0; n];
        for t in (0..n).rev() {
            let tail = if ro.terminated[t] {
                0.0
            } else if ro.boundary[t] || t + 1 == n {
                forward(&value_spec, &value, &ro.next_obs[t])?[0]
            } else {
                rtg[t + 1]
            };
            rtg[t] = ro.reward[t] + gamma * tail;
        }
        let mut adv: Vec<f64> = rtg.iter().zip(&ro.value).map(|(r, v)| r - v).collect();
        let mean = adv.iter().sum::<f64>() / n as f64;
        let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        for a in adv.iter_mut() {
            *a = (*a - mean) / (sd + 1e-8);
        }

        // Worst-attack critic update (before the policy uses it).
        let mut loss_critic = 0.0;
        let mut worst_critic_mean = f64::NAN;
        if wocar {
            let critic_params = critic.as_mut().expect("worst-case run");
            for _ in 0..cfg.epochs {
                let (lc, mut gc) = if discrete {
                    let batch = Batch::new(
                        (0..n)
                            .map(|t| Transition {
                                s: ro.obs[t].clone(),
                                a: ro.act_d[t],
                                r: ro.reward[t],
                                s_next: ro.next_obs[t].clone(),
                                done: ro.terminated[t],
                            })
                            .collect(),
                        None,
                    )?;
                    if cfg.adv_input_ball {
                        est_loss_discrete(
                            &critic_spec,
                            critic_params,
                            &batch,
                            &DiscreteAdvSource::InputBall {
                                policy_spec: &policy_spec,
                                policy_params: &policy,
                                eps: eps_t,
                            },
                            gamma,
                        )?
                    } else {
                        let (mdp, pert) = env.tabular().expect("discrete envs are tabular");
                        let frac =
                            if cfg.sched.eps_target > 0.0 { eps_t / cfg.sched.eps_target } else { 0.0 };
                        let acting = crate::attacks::greedy_tabular_policy(
                            &policy_spec,
                            &policy,
                            mdp.n_states,
                        )?;
                        let sets: Vec<Vec<usize>> = batch
                            .transitions
                            .iter()
                            .map(|tr| {
                                adv_action_set_prefix(&acting, pert, decode_one_hot(&tr.s_next), frac)
                            })
                            .collect();
                        est_loss_discrete(
                            &critic_spec,
                            critic_params,
                            &batch,
                            &DiscreteAdvSource::ExplicitSets(&sets),
                            gamma,
                        )?
                    }
                } else {
                    let batch = Batch::new(
                        (0..n)
                            .map(|t| Transition {
                                s: ro.obs[t].clone(),
                                a: ro.act_c[t].clone(),
                                r: ro.reward[t],
                                s_next: ro.next_obs[t].clone(),
                                done: ro.terminated[t],
                            })
                            .collect(),
                        None,
                    )?;
                    est_loss_continuous(
                        &critic_spec,
                        critic_params,
                        &policy_spec,
                        &policy,
                        &batch,
                        eps_t,
                        &act_low,
                        &act_high,
                        BoxMin { steps: cfg.box_min_steps, step_size: cfg.box_min_step_size },
                        gamma,
                    )?
                };
                check_finite("worst-attack critic loss", lc, global_step)?;
                loss_critic = lc;
                clip_grad(&mut gc, MAX_GRAD_NORM);
                adam_step(
                    &mut critic_params.flat,
                    &gc.flat,
                    &mut adam_c,
                    cfg.critic_lr,
                    ADAM_BETA1,
                    ADAM_BETA2,
                    ADAM_EPS,
                );
            }
        }

        // Per-sample critic values entering the policy objective, and the
        // importance weights for the smoothness regularizer. Both touch
        // nothing unless their weights are active, so zero-weight runs stay
        // bit-identical to the baseline.
        let mut adv_used = adv.clone();
        if wocar {
            let critic_params = critic.as_ref().expect("worst-case run");
            let mut qhat = Vec::with_capacity(n);
            for t in 0..n {
                let q = if discrete {
                    forward(&critic_spec, critic_params, &ro.obs[t])?[ro.act_d[t]]
                } else {
                    let mut x = ro.obs[t].clone();
                    x.extend_from_slice(&ro.act_c[t]);
                    forward(&critic_spec, critic_params, &x)?[0]
                };
                qhat.push(q);
            }
            worst_critic_mean = qhat.iter().sum::<f64>() / n as f64;
            if kappa != 0.0 {
                if cfg.normalize_worst_q {
                    let m = worst_critic_mean;
                    let v = qhat.iter().map(|q| (q - m) * (q - m)).sum::<f64>() / n as f64;
                    let sd = v.sqrt() + 1e-8;
                    for q in qhat.iter_mut() {
                        *q = (*q - m) / sd;
                    }
                }
                for (a, q) in adv_used.iter_mut().zip(&qhat) {
                    *a += kappa * q;
                }
            }
        }
        let mut weights = Vec::new();
        if wocar && cfg.kappa_reg != 0.0 {
            let critic_params = critic.as_ref().expect("worst-case run");
            weights = (0..n)
                .map(|t| {
                    if discrete {
                        state_importance_ppo_discrete(ro.value[t], &critic_spec, critic_params, &ro.obs[t])
                    } else {
                        crate::losses::state_importance_ppo_continuous(
                            ro.value[t],
                            &critic_spec,
                            critic_params,
                            &ro.obs[t],
                            &act_low,
                            &act_high,
                            BoxMin { steps: cfg.box_min_steps, step_size: cfg.box_min_step_size },
                        )
                    }
                })
                .collect::<Result<_>>()?;
            normalize_weights(&mut weights);
        }

        // Policy and value epochs.
        let mut loss_pg = 0.0;
        let mut loss_value = 0.0;
        let mut loss_reg = 0.0;
        let mut mean_ratio = 1.0;
        let mut warm: Vec<Option<Vec<f64>>> = vec![None; n];
        for _ in 0..cfg.epochs {
            let order = fisher_yates(n, &mut sample_rng);
            for chunk in order.chunks(cfg.minibatch_size) {
                let m = chunk.len() as f64;
                let mut grad_p = GradVector::zeros(&policy_spec);
                let mut grad_ls = vec![0.0; log_std.len()];
                let mut grad_v = GradVector::zeros(&value_spec);
                let mut pg = 0.0;
                let mut vl = 0.0;
                let mut ratio_acc = 0.0;
                for &t in chunk {
                    let acts = forward_cached(&policy_spec, &policy, &ro.obs[t])?;
                    let (logp_new, up_template) = if discrete {
                        let lsm = log_softmax(acts.output());
                        let p = softmax(acts.output());
                        let a = ro.act_d[t];
                        let mut up = p;
                        up[a] -= 1.0; // d(−logp)/dz; flip sign later
                        (lsm[a], up)
                    } else {
                        let mut lp = 0.0;
                        let mut dmu = Vec::with_capacity(act_dim);
                        for ((mu, ls), x) in acts.output().iter().zip(&log_std).zip(&ro.act_c[t]) {
                            let sigma = ls.exp();
                            let z = (x - mu) / sigma;
                            lp += -0.5 * z * z - ls - 0.5 * (2.0 * std::f64::consts::PI).ln();
                            dmu.push(z / sigma); // dlogp/dμ
                        }
                        (lp, dmu)
                    };
                    let ratio = (logp_new - ro.logp[t]).exp();
                    if !ratio.is_finite() || ratio > cfg.max_ratio {
                        return Err(CoreError::Numerical(format!(
                            "probability ratio {ratio} diverged at step {global_step}"
                        )));
                    }
                    ratio_acc += ratio;
                    let a_used = adv_used[t];
                    let unclipped = ratio * a_used;
                    let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * a_used;
                    pg -= unclipped.min(clipped) / m;
                    // Gradient flows only when the unclipped branch is the
                    // active minimum.
                    let dlogp = if unclipped <= clipped { -unclipped / m } else { 0.0 };
                    if dlogp != 0.0 {
                        if discrete {
                            // up_template is d(−logp)/dlogits = p − e_a.
                            let up: Vec<f64> = up_template.iter().map(|g| -dlogp * g).collect();
                            let (g, _) = backward(&policy_spec, &policy, &acts, &up)?;
                            grad_p.add_scaled(&g, 1.0);
                        } else {
                            let up: Vec<f64> = up_template.iter().map(|g| dlogp * g).collect();
                            let (g, _) = backward(&policy_spec, &policy, &acts, &up)?;
                            grad_p.add_scaled(&g, 1.0);
                            for ((gls, mu), (x, ls)) in grad_ls
                                .iter_mut()
                                .zip(acts.output())
                                .zip(ro.act_c[t].iter().zip(&log_std))
                            {
                                let sigma = ls.exp();
                                let z = (x - mu) / sigma;
                                *gls += dlogp * (z * z - 1.0); // dlogp/dlogσ
                            }
                        }
                    }
                    // Value regression onto rewards-to-go.
                    let vacts = forward_cached(&value_spec, &value, &ro.obs[t])?;
                    let resid = vacts.output()[0] - rtg[t];
                    vl += resid * resid / m;
                    let (gv, _) = backward(&value_spec, &value, &vacts, &[2.0 * resid / m])?;
                    grad_v.add_scaled(&gv, 1.0);
                }
                if wocar && cfg.kappa_reg != 0.0 {
                    let states: Vec<Vec<f64>> = chunk.iter().map(|&t| ro.obs[t].clone()).collect();
                    let w: Vec<f64> = chunk.iter().map(|&t| weights[t]).collect();
                    let starts: Option<Vec<Vec<f64>>> = chunk
                        .iter()
                        .map(|&t| warm[t].clone())
                        .collect::<Option<Vec<_>>>();
                    let rc = RegConfig {
                        eps: eps_t,
                        inner_steps: cfg.reg_inner_steps,
                        dist: if discrete { DistKind::Kl } else { DistKind::SqL2 },
                        noise: false,
                    };
                    let (lr_, greg, maximizers) = reg_loss(
                        &policy_spec,
                        &policy,
                        &states,
                        &w,
                        &rc,
                        starts.as_deref(),
                        Some(&mut reg_rng),
                    )?;
                    check_finite("smoothness loss", lr_, global_step)?;
                    loss_reg = lr_;
                    pg += cfg.kappa_reg * lr_;
                    grad_p.add_scaled(&greg, cfg.kappa_reg);
                    for (&t, maximizer) in chunk.iter().zip(maximizers) {
                        warm[t] = Some(maximizer);
                    }
                }
                check_finite("policy loss", pg, global_step)?;
                check_finite("value loss", vl, global_step)?;
                clip_grad(&mut grad_p, MAX_GRAD_NORM);
                adam_step(&mut policy.flat, &grad_p.flat, &mut adam_p, cfg.policy_lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS);
                if !log_std.is_empty() {
                    clip_flat(&mut grad_ls, MAX_GRAD_NORM);
                    adam_step(&mut log_std, &grad_ls, &mut adam_s, cfg.policy_lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS);
                }
                clip_grad(&mut grad_v, MAX_GRAD_NORM);
                adam_step(&mut value.flat, &grad_v.flat, &mut adam_v, cfg.value_lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS);
                loss_pg = pg;
                loss_value = vl;
                mean_ratio = ratio_acc / m;
            }
        }

        let mut values_map = BTreeMap::new();
        values_map.insert("loss_pg".into(), loss_pg);
        values_map.insert("loss_value".into(), loss_value);
        values_map.insert("mean_ratio".into(), mean_ratio);
        values_map.insert("eps".into(), eps_t);
        values_map.insert("kappa_wst".into(), kappa);
        if wocar {
            values_map.insert("loss_critic".into(), loss_critic);
            values_map.insert("worst_critic_mean".into(), worst_critic_mean);
            if cfg.kappa_reg != 0.0 {
                values_map.insert("loss_reg".into(), loss_reg);
            }
        }
        if !recent_returns.is_empty() {
            values_map.insert(
                "train_return".into(),
                recent_returns.iter().sum::<f64>() / recent_returns.len() as f64,
            );
        }
        if cfg.exact_eval_on_log && discrete {
            let (mdp, pert) = env.tabular().expect("discrete envs are tabular");
            let (nat, worst) = exact_tabular_eval(&policy_spec, &policy, mdp, pert)?;
            values_map.insert("natural_value_exact".into(), nat);
            values_map.insert("worst_value_exact".into(), worst);
        }
        metrics.push(MetricsRecord { step: global_step as u64, values: values_map });
        if cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every == 0 {
            checkpoints.push((global_step, policy.clone()));
        }
    }

    Ok(PpoOutput {
        state: PpoState {
            policy_spec,
            policy,
            log_std,
            value_spec,
            value,
            critic_spec: wocar.then_some(critic_spec),
            critic,
            step: global_step,
        },
        metrics,
        checkpoints,
    })
}

fn policy_spec_like(in_dim: usize, hidden: &[usize], out_dim: usize) -> Result<NetSpec> {
    let mut widths = vec![in_dim];
    widths.extend_from_slice(hidden);
    widths.push(out_dim);
    NetSpec::new(widths, Activation::Relu, OutputHead::Linear)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{chain2_env, gohome5_env, pointmass_env};

    #[test]
    fn replay_ring_overwrites_oldest() {
        let mut b = ReplayBuffer::new(3).unwrap();
        let mk = |k: f64| Transition { s: vec![k], a: 0usize, r: k, s_next: vec![k], done: false };
        for k in 0..5 {
            b.push(mk(k as f64));
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.inserted(), 5);
        let stored: Vec<f64> = (0..3).map(|i| b.get(i).r).collect();
        // Slots 0 and 1 were overwritten by items 3 and 4.
        assert_eq!(stored, vec![3.0, 4.0, 2.0]);
        assert!(ReplayBuffer::new(0).is_err());
    }

    #[test]
    fn replay_sampling_is_uniform() {
        let mut b = ReplayBuffer::new(100).unwrap();
        for k in 0..100 {
            b.push(Transition { s: vec![0.0], a: k % 2, r: k as f64, s_next: vec![0.0], done: false });
        }
        let mut rng = seeded_stream(0, stream::SAMPLE);
        let draws = 100_000;
        let mut counts = vec![0usize; 100];
        for i in b.sample_indices(draws, &mut rng) {
            counts[i] += 1;
        }
        let expected = draws as f64 / 100.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99 degrees of freedom; p > 0.001 means χ² below ≈ 148.2.
        assert!(chi2 < 148.2, "χ² = {chi2}");
    }

    #[test]
    fn schedule_shapes() {
        let s = Schedules::new(1000, 0.2, KappaSched::Linear { target: 0.8 }).unwrap();
        assert_eq!(s.eps_of(0), 0.0);
        assert_eq!(s.eps_of(100), 0.0); // still in the flat head
        assert_eq!(s.eps_of(600), 0.2);
        assert_eq!(s.eps_of(10_000), 0.2);
        let mut prev = -1.0;
        for t in 0..=1000 {
            let e = s.eps_of(t);
            assert!(e >= prev);
            prev = e;
        }
        assert!((s.kappa_wst_of(500) - 0.4).abs() < 1e-12);
        assert_eq!(s.kappa_wst_of(1000), 0.8);

        let d = Schedules::new(900, 1.0, KappaSched::ThirdExp { target: 0.5 }).unwrap();
        assert_eq!(d.kappa_wst_of(0), 0.0);
        assert_eq!(d.kappa_wst_of(300), 0.0); // flat first third
        let mut prev = -1.0;
        for t in 0..=900 {
            let k = d.kappa_wst_of(t);
            assert!(k >= prev, "ramp must be non-decreasing");
            prev = k;
        }
        assert!((d.kappa_wst_of(900) - 0.5).abs() < 1e-12);

        let c = Schedules::new(10, 0.0, KappaSched::Constant(1.0)).unwrap();
        assert_eq!(c.kappa_wst_of(0), 1.0);
        assert_eq!(c.kappa_wst_of(10), 1.0);
        assert!(Schedules::new(0, 0.1, KappaSched::Constant(0.0)).is_err());
        assert!(Schedules::new(10, -0.1, KappaSched::Constant(0.0)).is_err());
    }

    #[test]
    fn exploration_schedule_endpoints() {
        let cfg = DqnConfig { total_steps: 1000, explore_start: 1.0, explore_end: 0.1, explore_frac: 0.5, ..DqnConfig::default() };
        assert_eq!(cfg.explore_of(0), 1.0);
        assert!((cfg.explore_of(250) - 0.55).abs() < 1e-12);
        assert!((cfg.explore_of(500) - 0.1).abs() < 1e-12);
        assert!((cfg.explore_of(999) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn extracting_policies_from_nets() {
        let (mdp, _, _) = crate::mdp::build_chain2();
        // Constant network → constant policy (ties to lowest index).
        let spec = NetSpec::new(vec![2, 2], Activation::Relu, OutputHead::Linear).unwrap();
        let params = ParamVector::zeros(&spec);
        let pol = extract_tabular_policy(&spec, &params, &mdp).unwrap();
        assert_eq!(pol.action_of(0), 0);
        assert_eq!(pol.action_of(1), 0);
        // Table-lookup network reproduces its table.
        let mut params = ParamVector::zeros(&spec);
        // out[a] = W[a][s]: make action 1 best in state 0, action 0 in state 1.
        params.flat[2] = 1.0; // W[1][0]
        params.flat[1] = 1.0; // W[0][1]
        let pol = extract_tabular_policy(&spec, &params, &mdp).unwrap();
        assert_eq!(pol.action_of(0), 1);
        assert_eq!(pol.action_of(1), 0);
        // Wrong action count is rejected.
        let bad = NetSpec::new(vec![2, 3], Activation::Relu, OutputHead::Linear).unwrap();
        assert!(extract_tabular_policy(&bad, &ParamVector::zeros(&bad), &mdp).is_err());
    }

    #[test]
    fn robust_targets_with_kappa_one_equal_vanilla_targets() {
        let spec = NetSpec::new(vec![2, 8, 2], Activation::Relu, OutputHead::Linear).unwrap();
        let q_t = init_params(&spec, InitScheme::He, 3);
        let critic = init_params(&spec, InitScheme::He, 4);
        let batch = Batch::new(
            vec![
                Transition { s: vec![1.0, 0.0], a: 0, r: 0.3, s_next: vec![0.0, 1.0], done: false },
                Transition { s: vec![0.0, 1.0], a: 1, r: -0.2, s_next: vec![1.0, 0.0], done: true },
            ],
            None,
        )
        .unwrap();
        let v = vanilla_q_targets(&spec, &q_t, &batch, 0.9).unwrap();
        let r = robust_q_targets(&spec, &q_t, &critic, &batch, 1.0, 0.9).unwrap();
        for (a, b) in v.iter().zip(&r) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        // κ = 0 uses the critic alone.
        let r0 = robust_q_targets(&spec, &q_t, &critic, &batch, 0.0, 0.9).unwrap();
        let qw = forward(&spec, &critic, &batch.transitions[0].s_next).unwrap();
        let want = 0.3 + 0.9 * qw.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        assert!((r0[0] - want).abs() < 1e-12);
    }

    fn tiny_dqn_cfg(total: usize) -> DqnConfig {
        DqnConfig {
            total_steps: total,
            warmup: 20,
            batch_size: 8,
            buffer_capacity: 256,
            hidden: vec![16],
            log_every: total / 2,
            sched: Schedules {
                total_steps: total,
                eps_target: 1.0,
                kappa: KappaSched::ThirdExp { target: 0.5 },
            },
            exact_eval_on_log: true,
            ..DqnConfig::default()
        }
    }

    #[test]
    fn dqn_runs_are_deterministic_and_reject_continuous_envs() {
        let env = chain2_env();
        let cfg = tiny_dqn_cfg(200);
        let a = wocar_dqn_train(&env, &cfg, 7).unwrap();
        let b = wocar_dqn_train(&env, &cfg, 7).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.state.q_v.flat, b.state.q_v.flat);
        assert_eq!(a.state.q_r.as_ref().unwrap().flat, b.state.q_r.as_ref().unwrap().flat);
        assert!(!a.metrics.is_empty());
        assert!(a.metrics.windows(2).all(|w| w[0].step < w[1].step));
        // Metrics carry the tracked critic mean and the exact evaluations.
        let last = a.metrics.last().unwrap();
        assert!(last.values.contains_key("worst_critic_mean"));
        assert!(last.values.contains_key("worst_value_exact"));
        assert!(vanilla_dqn_train(&pointmass_env(), &cfg, 0).is_err());
    }

    #[test]
    fn dqn_with_smoothness_regularizer_logs_its_loss() {
        let env = chain2_env();
        let cfg = DqnConfig { kappa_reg: 0.1, reg_inner_steps: 3, ..tiny_dqn_cfg(120) };
        let out = wocar_dqn_train(&env, &cfg, 1).unwrap();
        assert!(out.metrics.last().unwrap().values.contains_key("loss_reg"));
    }

    #[test]
    fn vanilla_dqn_has_no_robust_machinery() {
        let env = chain2_env();
        let out = vanilla_dqn_train(&env, &tiny_dqn_cfg(100), 3).unwrap();
        assert!(out.state.q_r.is_none());
        assert!(out.state.critic.is_none());
        assert!(!out.metrics.last().unwrap().values.contains_key("loss_robust"));
    }

    fn tiny_ppo_cfg(total: usize, rollout: usize) -> PpoConfig {
        PpoConfig {
            total_steps: total,
            rollout_len: rollout,
            epochs: 2,
            minibatch_size: 32,
            hidden: vec![16],
            sched: Schedules {
                total_steps: total,
                eps_target: 1.0,
                kappa: KappaSched::Linear { target: 0.8 },
            },
            exact_eval_on_log: false,
            ..PpoConfig::default()
        }
    }

    #[test]
    fn ppo_discrete_runs_and_is_deterministic() {
        let env = gohome5_env();
        let cfg = tiny_ppo_cfg(256, 128);
        let a = wocar_ppo_train(&env, &cfg, 5).unwrap();
        let b = wocar_ppo_train(&env, &cfg, 5).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.state.policy.flat, b.state.policy.flat);
        assert_eq!(a.metrics.len(), 2);
    }

    #[test]
    fn zero_weight_wocar_ppo_is_bit_identical_to_vanilla() {
        let env = gohome5_env();
        let cfg = PpoConfig {
            sched: Schedules {
                total_steps: 256,
                eps_target: 1.0,
                kappa: KappaSched::Constant(0.0),
            },
            kappa_reg: 0.0,
            ..tiny_ppo_cfg(256, 128)
        };
        let w = wocar_ppo_train(&env, &cfg, 11).unwrap();
        let v = vanilla_ppo_train(&env, &cfg, 11).unwrap();
        assert_eq!(w.state.policy.flat, v.state.policy.flat);
        assert_eq!(w.state.value.flat, v.state.value.flat);
        // Natural training curves coincide exactly.
        for (mw, mv) in w.metrics.iter().zip(&v.metrics) {
            assert_eq!(mw.values.get("train_return"), mv.values.get("train_return"));
            assert_eq!(mw.values.get("loss_pg"), mv.values.get("loss_pg"));
        }
    }

    #[test]
    fn ppo_continuous_runs_without_incident() {
        let env = pointmass_env();
        let cfg = PpoConfig { box_min_steps: 5, ..tiny_ppo_cfg(128, 64) };
        let out = wocar_ppo_train(&env, &cfg, 2).unwrap();
        assert_eq!(out.state.log_std.len(), 2);
        assert!(out.metrics.iter().all(|m| m.values["loss_pg"].is_finite()));
    }

    #[test]
    fn exploding_learning_rate_aborts_with_a_numerical_error() {
        let env = chain2_env();
        // A step size this large pushes network outputs past f64 range
        // within two updates, so the finiteness guard must fire.
        let cfg = DqnConfig { lr: 1e200, critic_lr: 1e200, ..tiny_dqn_cfg(400) };
        match wocar_dqn_train(&env, &cfg, 0) {
            Err(CoreError::Numerical(_)) => {}
            other => panic!("expected a numerical abort, got {other:?}"),
        }
    }
}
