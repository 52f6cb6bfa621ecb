//! Episodic environment wrappers used by the training loops and the
//! evaluation harness.
//!
//! Two families share one interface:
//!
//! * [`TabularEnv`] — a finite MDP played step by step, observed as one-hot
//!   vectors. It carries its perturbation model so evaluators can realize
//!   exact worst-case attacks against it.
//! * [`PointMassEnv`] — a small continuous-control task: a point robot on
//!   the unit square steers around a hazard disk to a goal disk. It stands
//!   in for large physics benchmarks at desk scale.
//!
//! Environments are plain `Clone` values so evaluation episodes can fan out
//! across threads, each worker owning a private copy.

use crate::error::CoreError;
use crate::mdp::{step as mdp_step, ContinuousEnvSpec, DynamicsKind, TabularMDP, TabularPerturbation};
use crate::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// What actions an environment accepts.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionSpace {
    /// Finitely many actions, indexed 0..n.
    Discrete(usize),
    /// An axis-aligned box of real vectors.
    Box {
        /// Per-coordinate lower bounds.
        low: Vec<f64>,
        /// Per-coordinate upper bounds.
        high: Vec<f64>,
    },
}

/// An action value, matching the environment's [`ActionSpace`].
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    /// Index into a discrete action set.
    Discrete(usize),
    /// Real vector for a box action space.
    Continuous(Vec<f64>),
}

/// Result of a single environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Observation of the next state.
    pub obs: Vec<f64>,
    /// Immediate reward.
    pub reward: f64,
    /// The episode ended inside the MDP (absorbing state reached).
    pub terminated: bool,
    /// The episode was cut off by the step horizon; the state itself is not
    /// terminal, so value targets may still bootstrap past it.
    pub truncated: bool,
}

/// One-hot encoding of a state index.
pub fn one_hot(state: usize, n_states: usize) -> Vec<f64> {
    assert!(state < n_states, "state {state} out of range {n_states}");
    let mut v = vec![0.0; n_states];
    v[state] = 1.0;
    v
}

/// Index of the (single) hot coordinate; the largest coordinate wins so
/// perturbed one-hot observations still decode.
pub fn decode_one_hot(obs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in obs.iter().enumerate() {
        if x > obs[best] {
            best = i;
        }
    }
    best
}

/// A finite MDP exposed as an episodic environment with one-hot
/// observations, bundled with its admissible-perturbation model.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    /// The dynamics.
    pub mdp: TabularMDP,
    /// Which observations an attacker may substitute at each state.
    pub pert: TabularPerturbation,
    /// Step cap per episode (truncation, not termination).
    pub horizon: usize,
    state: usize,
    t: usize,
}

impl TabularEnv {
    /// Wraps a validated MDP/perturbation pair.
    pub fn new(mdp: TabularMDP, pert: TabularPerturbation, horizon: usize) -> Result<Self> {
        mdp.validate()?;
        pert.validate(mdp.n_states)?;
        if horizon == 0 {
            return Err(CoreError::Config("horizon must be at least 1".into()));
        }
        Ok(TabularEnv { mdp, pert, horizon, state: 0, t: 0 })
    }

    /// Number of states (= observation dimension).
    pub fn n_states(&self) -> usize {
        self.mdp.n_states
    }

    /// The current (true, unperturbed) state index.
    pub fn state(&self) -> usize {
        self.state
    }
}

const PM_ACT: f64 = 0.2;
const PM_GOAL: [f64; 2] = [0.8, 0.0];
const PM_GOAL_RADIUS: f64 = 0.15;
const PM_HAZARD: [f64; 2] = [0.0, 0.15];
const PM_HAZARD_RADIUS: f64 = 0.18;
const PM_STEP_REWARD: f64 = -0.05;
const PM_GOAL_REWARD: f64 = 10.0;
const PM_HAZARD_REWARD: f64 = -10.0;
const PM_START: [f64; 2] = [-0.8, 0.0];
const PM_START_JITTER: f64 = 0.05;
const PM_HORIZON: usize = 64;
const PM_GAMMA: f64 = 0.99;
const PM_EPS: f64 = 0.1;

/// Point robot on [−1,1]²: each step adds the (clamped) action to the
/// position. Reaching the goal disk pays +10 and ends the episode; touching
/// the hazard disk pays −10 and ends it; every other step costs 0.05. The
/// hazard dips slightly below the straight line from start to goal, so the
/// shortest safe route skims its underside — and an adversary nudging
/// observations can steer a skimming policy into it.
#[derive(Debug, Clone)]
pub struct PointMassEnv {
    /// Dimensions, action box, horizon, and observation budget.
    pub spec: ContinuousEnvSpec,
    /// Discount factor.
    pub gamma: f64,
    pos: [f64; 2],
    t: usize,
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Builds the point-mass task with its standard geometry.
pub fn build_pointmass() -> PointMassEnv {
    let spec = ContinuousEnvSpec {
        obs_dim: 2,
        act_dim: 2,
        act_low: vec![-PM_ACT, -PM_ACT],
        act_high: vec![PM_ACT, PM_ACT],
        dynamics: DynamicsKind::PointMass,
        horizon: PM_HORIZON,
        eps: PM_EPS,
    };
    spec.validate().expect("built-in spec is valid");
    PointMassEnv { spec, gamma: PM_GAMMA, pos: PM_START, t: 0 }
}

impl PointMassEnv {
    /// The current (true) position.
    pub fn position(&self) -> [f64; 2] {
        self.pos
    }
}

/// The environment value the trainers and evaluators run against.
#[derive(Debug, Clone)]
pub enum Env {
    /// Finite MDP with one-hot observations.
    Tabular(TabularEnv),
    /// Continuous point-mass task.
    PointMass(PointMassEnv),
}

impl Env {
    /// Observation vector length.
    pub fn obs_dim(&self) -> usize {
        match self {
            Env::Tabular(t) => t.mdp.n_states,
            Env::PointMass(p) => p.spec.obs_dim,
        }
    }

    /// The action space.
    pub fn action_space(&self) -> ActionSpace {
        match self {
            Env::Tabular(t) => ActionSpace::Discrete(t.mdp.n_actions),
            Env::PointMass(p) => ActionSpace::Box {
                low: p.spec.act_low.clone(),
                high: p.spec.act_high.clone(),
            },
        }
    }

    /// True for discrete action spaces.
    pub fn is_discrete(&self) -> bool {
        matches!(self, Env::Tabular(_))
    }

    /// Discount factor.
    pub fn gamma(&self) -> f64 {
        match self {
            Env::Tabular(t) => t.mdp.gamma,
            Env::PointMass(p) => p.gamma,
        }
    }

    /// Step cap per episode.
    pub fn horizon(&self) -> usize {
        match self {
            Env::Tabular(t) => t.horizon,
            Env::PointMass(p) => p.spec.horizon,
        }
    }

    /// Default ℓ∞ observation budget for attacks and training schedules.
    pub fn default_eps(&self) -> f64 {
        match self {
            // One-hot observations: flipping to another admissible one-hot
            // is an ℓ∞ change of 1.
            Env::Tabular(_) => 1.0,
            Env::PointMass(p) => p.spec.eps,
        }
    }

    /// The underlying MDP and perturbation model, when tabular.
    pub fn tabular(&self) -> Option<(&TabularMDP, &TabularPerturbation)> {
        match self {
            Env::Tabular(t) => Some((&t.mdp, &t.pert)),
            Env::PointMass(_) => None,
        }
    }

    /// The true current state index, when tabular.
    pub fn current_tabular_state(&self) -> Option<usize> {
        match self {
            Env::Tabular(t) => Some(t.state),
            Env::PointMass(_) => None,
        }
    }

    /// Starts a new episode and returns the first observation.
    pub fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Env::Tabular(t) => {
                t.state = t.mdp.sample_initial(rng);
                t.t = 0;
                one_hot(t.state, t.mdp.n_states)
            }
            Env::PointMass(p) => {
                p.pos = [
                    PM_START[0] + rng.gen_range(-PM_START_JITTER..=PM_START_JITTER),
                    PM_START[1] + rng.gen_range(-PM_START_JITTER..=PM_START_JITTER),
                ];
                p.t = 0;
                p.pos.to_vec()
            }
        }
    }

    /// Advances one step. Stepping a finished episode keeps the state put
    /// and pays nothing.
    pub fn step(&mut self, action: &Action, rng: &mut ChaCha8Rng) -> Result<StepOutcome> {
        match (self, action) {
            (Env::Tabular(t), Action::Discrete(a)) => {
                if t.mdp.terminal[t.state] {
                    return Ok(StepOutcome {
                        obs: one_hot(t.state, t.mdp.n_states),
                        reward: 0.0,
                        terminated: true,
                        truncated: false,
                    });
                }
                let (next, reward, terminal) = mdp_step(&t.mdp, t.state, *a, rng)?;
                t.state = next;
                t.t += 1;
                Ok(StepOutcome {
                    obs: one_hot(next, t.mdp.n_states),
                    reward,
                    terminated: terminal,
                    truncated: t.t >= t.horizon && !terminal,
                })
            }
            (Env::PointMass(p), Action::Continuous(a)) => {
                if a.len() != p.spec.act_dim {
                    return Err(CoreError::Config(format!(
                        "action has {} coordinates, expected {}",
                        a.len(),
                        p.spec.act_dim
                    )));
                }
                let ax = a[0].clamp(p.spec.act_low[0], p.spec.act_high[0]);
                let ay = a[1].clamp(p.spec.act_low[1], p.spec.act_high[1]);
                p.pos = [(p.pos[0] + ax).clamp(-1.0, 1.0), (p.pos[1] + ay).clamp(-1.0, 1.0)];
                p.t += 1;
                let (reward, terminated) = if dist2(p.pos, PM_GOAL) <= PM_GOAL_RADIUS {
                    (PM_GOAL_REWARD, true)
                } else if dist2(p.pos, PM_HAZARD) <= PM_HAZARD_RADIUS {
                    (PM_HAZARD_REWARD, true)
                } else {
                    (PM_STEP_REWARD, false)
                };
                let _ = rng; // dynamics are deterministic; kept for interface symmetry
                Ok(StepOutcome {
                    obs: p.pos.to_vec(),
                    reward,
                    terminated,
                    truncated: p.t >= p.spec.horizon && !terminated,
                })
            }
            (Env::Tabular(_), Action::Continuous(_)) => {
                Err(CoreError::Config("discrete environment given a continuous action".into()))
            }
            (Env::PointMass(_), Action::Discrete(_)) => {
                Err(CoreError::Config("continuous environment given a discrete action".into()))
            }
        }
    }
}

/// The two-state sanity-check chain as an environment.
pub fn chain2_env() -> Env {
    let (mdp, pert, _) = crate::mdp::build_chain2();
    Env::Tabular(TabularEnv::new(mdp, pert, 32).expect("chain2 is valid"))
}

/// The 5×5 go-home gridworld as an environment.
pub fn gohome5_env() -> Env {
    let (mdp, pert) = crate::mdp::gohome_acceptance_instance();
    Env::Tabular(TabularEnv::new(mdp, pert, 200).expect("go-home instance is valid"))
}

/// The point-mass task as an environment.
pub fn pointmass_env() -> Env {
    Env::PointMass(build_pointmass())
}
