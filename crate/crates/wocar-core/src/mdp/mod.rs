//! Finite MDPs and the tabular observation-perturbation model.
//!
//! A [`TabularMDP`] is the usual ⟨S, A, P, R, γ⟩ tuple with an initial
//! distribution and terminal flags. The threat model lives next to it: a
//! [`TabularPerturbation`] assigns every state s the set B(s) of observations
//! an attacker may show instead of s. B(s) always contains s itself — showing
//! the truth is always admissible — which is what guarantees downstream that
//! the policy's own action is always among the actions an attacker can
//! induce.
//!
//! Terminal states are absorbing self-loops with zero reward, so
//! infinite-horizon value iteration and finite-horizon rollouts agree about
//! what happens after an episode ends.

mod format;
mod gohome;
mod random;

pub use format::{load_mdp, load_policy, save_mdp, save_policy};
pub use gohome::{build_gohome, gohome_acceptance_instance, GOHOME_ACTION_NAMES};
pub use random::{random_mdp, random_perturbation};

use crate::error::CoreError;
use crate::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Tolerance for transition-row and initial-distribution normalization.
pub const PROB_TOL: f64 = 1e-9;

/// A finite Markov decision process.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMDP {
    /// Number of states.
    pub n_states: usize,
    /// Number of actions, available in every state.
    pub n_actions: usize,
    /// `transition[s][a][s']` = P(s' | s, a). Rows sum to 1.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `reward[s][a]` = expected immediate reward R(s, a).
    pub reward: Vec<Vec<f64>>,
    /// Discount factor in [0, 1).
    pub gamma: f64,
    /// Distribution of the initial state.
    pub initial_dist: Vec<f64>,
    /// Terminal flags. Terminal states self-loop with probability 1 and
    /// reward 0.
    pub terminal: Vec<bool>,
}

impl TabularMDP {
    /// Builds and validates an MDP. See [`TabularMDP::validate`] for the
    /// invariants enforced.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        gamma: f64,
        initial_dist: Vec<f64>,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        let mdp = TabularMDP {
            n_states,
            n_actions,
            transition,
            reward,
            gamma,
            initial_dist,
            terminal,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    /// Checks every structural invariant:
    /// shapes, row normalization, non-negativity, γ ∈ [0, 1), a normalized
    /// initial distribution, and absorbing zero-reward terminal states.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CoreError::Config(msg));
        if self.n_states == 0 || self.n_actions == 0 {
            return fail("MDP must have at least one state and one action".into());
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return fail(format!("gamma must be in [0, 1), got {}", self.gamma));
        }
        if self.transition.len() != self.n_states
            || self.reward.len() != self.n_states
            || self.initial_dist.len() != self.n_states
            || self.terminal.len() != self.n_states
        {
            return fail("tensor shapes do not match n_states".into());
        }
        for (s, (rows, rewards)) in self.transition.iter().zip(&self.reward).enumerate() {
            if rows.len() != self.n_actions || rewards.len() != self.n_actions {
                return fail(format!("state {s}: action dimension mismatch"));
            }
            for (a, row) in rows.iter().enumerate() {
                if row.len() != self.n_states {
                    return fail(format!("state {s} action {a}: row length mismatch"));
                }
                let mut sum = 0.0;
                for &p in row {
                    if !(p >= 0.0) || !p.is_finite() {
                        return fail(format!("state {s} action {a}: negative or non-finite probability"));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > PROB_TOL {
                    return fail(format!("state {s} action {a}: row sums to {sum}, expected 1"));
                }
                if !rewards[a].is_finite() {
                    return fail(format!("state {s} action {a}: non-finite reward"));
                }
            }
            if self.terminal[s] {
                for a in 0..self.n_actions {
                    if (self.transition[s][a][s] - 1.0).abs() > PROB_TOL {
                        return fail(format!("terminal state {s} must self-loop (action {a})"));
                    }
                    if self.reward[s][a] != 0.0 {
                        return fail(format!("terminal state {s} must have zero reward (action {a})"));
                    }
                }
            }
        }
        let init_sum: f64 = self.initial_dist.iter().sum();
        if self.initial_dist.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return fail("initial distribution has a negative or non-finite entry".into());
        }
        if (init_sum - 1.0).abs() > PROB_TOL {
            return fail(format!("initial distribution sums to {init_sum}, expected 1"));
        }
        Ok(())
    }

    /// Samples an initial state.
    pub fn sample_initial(&self, rng: &mut ChaCha8Rng) -> usize {
        sample_categorical(&self.initial_dist, rng)
    }

    /// Largest |R(s, a)| — used for convergence-iteration bounds.
    pub fn reward_sup(&self) -> f64 {
        self.reward
            .iter()
            .flatten()
            .fold(0.0_f64, |acc, r| acc.max(r.abs()))
    }
}

/// One environment transition: samples s' ~ P(· | s, a) and reports
/// (next_state, R(s, a), terminal(next_state)).
///
/// Terminal states self-loop with zero reward, so stepping from a terminal
/// state returns (state, 0.0, true) forever.
pub fn step(
    mdp: &TabularMDP,
    state: usize,
    action: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, f64, bool)> {
    if state >= mdp.n_states || action >= mdp.n_actions {
        return Err(CoreError::Config(format!(
            "step out of range: state {state}/{}, action {action}/{}",
            mdp.n_states, mdp.n_actions
        )));
    }
    let next = sample_categorical(&mdp.transition[state][action], rng);
    Ok((next, mdp.reward[state][action], mdp.terminal[next]))
}

fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Numerical slack: the row sums to 1 within PROB_TOL, fall back to the
    // last supported entry.
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .expect("probability row has no support")
}

/// Per-state admissible observation sets B(s).
///
/// The attacker may replace the observation of state s with any member of
/// B(s). Sets are stored nearest-first where a metric exists (the state
/// itself is always entry 0), which lets training schedules grow the
/// admissible set gradually via [`TabularPerturbation::admissible_prefix`].
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPerturbation {
    /// `admissible[s]` = B(s), deduplicated; `admissible[s][0] == s`.
    pub admissible: Vec<Vec<usize>>,
    /// Descriptive budget ε the sets were generated from (e.g. the Chebyshev
    /// radius for gridworlds). Purely informational.
    pub budget_label: f64,
}

impl TabularPerturbation {
    /// Builds and validates a perturbation model.
    pub fn new(admissible: Vec<Vec<usize>>, budget_label: f64) -> Result<Self> {
        let pert = TabularPerturbation {
            admissible,
            budget_label,
        };
        pert.validate(pert.admissible.len())?;
        Ok(pert)
    }

    /// Identity perturbation: B(s) = {s} for every state.
    pub fn identity(n_states: usize) -> Self {
        TabularPerturbation {
            admissible: (0..n_states).map(|s| vec![s]).collect(),
            budget_label: 0.0,
        }
    }

    /// Checks s ∈ B(s) (stored first), in-range indices, and no duplicates.
    pub fn validate(&self, n_states: usize) -> Result<()> {
        if self.admissible.len() != n_states {
            return Err(CoreError::Config(format!(
                "perturbation covers {} states, MDP has {n_states}",
                self.admissible.len()
            )));
        }
        for (s, set) in self.admissible.iter().enumerate() {
            if set.first() != Some(&s) {
                return Err(CoreError::Config(format!(
                    "B({s}) must list the unperturbed state first"
                )));
            }
            let mut seen = vec![false; n_states];
            for &t in set {
                if t >= n_states {
                    return Err(CoreError::Config(format!(
                        "B({s}) references out-of-range state {t}"
                    )));
                }
                if seen[t] {
                    return Err(CoreError::Config(format!("B({s}) lists state {t} twice")));
                }
                seen[t] = true;
            }
        }
        Ok(())
    }

    /// B(s).
    pub fn set_of(&self, s: usize) -> &[usize] {
        &self.admissible[s]
    }

    /// Nested prefix of B(s) covering `frac` of the set (clamped to [0, 1]).
    ///
    /// `frac = 0` yields {s}; `frac = 1` yields all of B(s); the prefix grows
    /// monotonically in between. Because sets are stored nearest-first, this
    /// is the discrete analogue of ramping an ℓ∞ radius, and it is how
    /// training schedules interpolate the tabular threat model.
    pub fn admissible_prefix(&self, s: usize, frac: f64) -> &[usize] {
        let set = &self.admissible[s];
        let f = frac.clamp(0.0, 1.0);
        let count = ((f * set.len() as f64).ceil() as usize).clamp(1, set.len());
        &set[..count]
    }

    /// Π_s |B(s)| as a float (saturating), the attacker-map count.
    pub fn map_count(&self) -> f64 {
        self.admissible
            .iter()
            .fold(1.0_f64, |acc, set| acc * set.len() as f64)
    }
}

/// A deterministic policy: one action per state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeterministicPolicy {
    /// `action_of[s]` = π(s).
    pub action_of: Vec<usize>,
}

impl DeterministicPolicy {
    /// Builds a policy, checking all actions are below `n_actions`.
    pub fn new(action_of: Vec<usize>, n_actions: usize) -> Result<Self> {
        if let Some((s, &a)) = action_of.iter().enumerate().find(|(_, &a)| a >= n_actions) {
            return Err(CoreError::Config(format!(
                "policy action {a} at state {s} exceeds n_actions {n_actions}"
            )));
        }
        Ok(DeterministicPolicy { action_of })
    }

    /// π(s).
    pub fn action_of(&self, s: usize) -> usize {
        self.action_of[s]
    }

    /// Number of states covered.
    pub fn n_states(&self) -> usize {
        self.action_of.len()
    }
}

/// Continuous environment description (desk-scale stand-in for physics
/// benchmarks). Dynamics are built-in by name; see [`crate::env::PointMass`].
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousEnvSpec {
    /// Observation dimensionality.
    pub obs_dim: usize,
    /// Action dimensionality.
    pub act_dim: usize,
    /// Per-coordinate action lower bounds.
    pub act_low: Vec<f64>,
    /// Per-coordinate action upper bounds.
    pub act_high: Vec<f64>,
    /// Which built-in dynamics to use.
    pub dynamics: DynamicsKind,
    /// Episode truncation horizon.
    pub horizon: usize,
    /// Native ℓ∞ observation-perturbation budget of the task.
    pub eps: f64,
}

/// Built-in continuous dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DynamicsKind {
    /// Velocity-controlled point navigating to a goal region past a hazard.
    PointMass,
}

impl ContinuousEnvSpec {
    /// Validates dimension and box invariants.
    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.act_dim == 0 || self.horizon == 0 {
            return Err(CoreError::Config(
                "continuous env needs positive dims and horizon".into(),
            ));
        }
        if self.act_low.len() != self.act_dim || self.act_high.len() != self.act_dim {
            return Err(CoreError::Config("action box dimension mismatch".into()));
        }
        for (lo, hi) in self.act_low.iter().zip(&self.act_high) {
            if !(lo < hi) {
                return Err(CoreError::Config(format!(
                    "action box must satisfy low < high, got [{lo}, {hi}]"
                )));
            }
        }
        if self.eps < 0.0 {
            return Err(CoreError::Config("eps must be non-negative".into()));
        }
        Ok(())
    }
}

/// Two-state chain used throughout the tests: staying in s1 pays 1 per step,
/// s0 pays nothing, γ = 1/2. The policy tries to switch to s1 from s0 and
/// stay once there; the attacker can show s1 while the agent sits in s0,
/// freezing it in the unrewarding state. Small enough that every quantity is
/// hand-checkable.
pub fn build_chain2() -> (TabularMDP, TabularPerturbation, DeterministicPolicy) {
    let n = 2;
    // Action 0 stays, action 1 switches.
    let mut transition = vec![vec![vec![0.0; n]; 2]; n];
    for s in 0..n {
        transition[s][0][s] = 1.0;
        transition[s][1][1 - s] = 1.0;
    }
    let reward = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
    let mdp = TabularMDP::new(
        n,
        2,
        transition,
        reward,
        0.5,
        vec![0.5, 0.5],
        vec![false, false],
    )
    .expect("chain2 is valid");
    let perturb = TabularPerturbation::new(vec![vec![0, 1], vec![1]], 1.0).expect("valid sets");
    let policy = DeterministicPolicy::new(vec![1, 0], 2).expect("valid policy");
    (mdp, perturb, policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded_stream, stream};

    #[test]
    fn chain2_passes_validation() {
        let (mdp, pert, policy) = build_chain2();
        mdp.validate().unwrap();
        pert.validate(mdp.n_states).unwrap();
        assert_eq!(policy.action_of(0), 1);
        assert_eq!(policy.action_of(1), 0);
    }

    #[test]
    fn validator_rejects_bad_rows() {
        let (mut mdp, _, _) = build_chain2();
        mdp.transition[0][0][0] = 0.9;
        assert!(mdp.validate().is_err());
    }

    #[test]
    fn validator_rejects_nonabsorbing_terminal() {
        let (mut mdp, _, _) = build_chain2();
        mdp.terminal[0] = true;
        // State 0 under action 1 moves to state 1, so it cannot be terminal.
        assert!(mdp.validate().is_err());
    }

    #[test]
    fn step_is_deterministic_on_deterministic_rows() {
        let (mdp, _, _) = build_chain2();
        let mut rng = seeded_stream(0, stream::ENV);
        for _ in 0..32 {
            let (next, r, done) = step(&mdp, 0, 1, &mut rng).unwrap();
            assert_eq!(next, 1);
            assert_eq!(r, 0.0);
            assert!(!done);
        }
    }

    #[test]
    fn step_rejects_out_of_range() {
        let (mdp, _, _) = build_chain2();
        let mut rng = seeded_stream(0, stream::ENV);
        assert!(step(&mdp, 2, 0, &mut rng).is_err());
        assert!(step(&mdp, 0, 2, &mut rng).is_err());
    }

    #[test]
    fn step_frequencies_match_row() {
        // 0.3 / 0.7 two-state row, 10^5 samples, 3σ multinomial check.
        let transition = vec![
            vec![vec![0.3, 0.7], vec![1.0, 0.0]],
            vec![vec![0.0, 1.0], vec![0.0, 1.0]],
        ];
        let mdp = TabularMDP::new(
            2,
            2,
            transition,
            vec![vec![0.0; 2]; 2],
            0.9,
            vec![1.0, 0.0],
            vec![false, true],
        )
        .unwrap();
        let mut rng = seeded_stream(42, stream::ENV);
        let n = 100_000;
        let mut count1 = 0usize;
        for _ in 0..n {
            let (next, _, _) = step(&mdp, 0, 0, &mut rng).unwrap();
            count1 += usize::from(next == 1);
        }
        let p = 0.7;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let freq = count1 as f64 / n as f64;
        assert!(
            (freq - p).abs() < 3.0 * sigma,
            "freq {freq} vs p {p} (3σ = {:.5})",
            3.0 * sigma
        );
    }

    #[test]
    fn perturbation_prefix_is_nested_and_anchored() {
        let pert = TabularPerturbation::new(vec![vec![0, 1, 2], vec![1], vec![2, 0]], 1.0).unwrap();
        assert_eq!(pert.admissible_prefix(0, 0.0), &[0]);
        assert_eq!(pert.admissible_prefix(0, 0.5), &[0, 1]);
        assert_eq!(pert.admissible_prefix(0, 1.0), &[0, 1, 2]);
        // frac outside [0,1] clamps.
        assert_eq!(pert.admissible_prefix(0, 7.0), &[0, 1, 2]);
        assert_eq!(pert.admissible_prefix(1, 1.0), &[1]);
    }

    #[test]
    fn perturbation_validation_catches_misuse() {
        assert!(TabularPerturbation::new(vec![vec![1], vec![1]], 0.0).is_err());
        assert!(TabularPerturbation::new(vec![vec![0, 0], vec![1]], 0.0).is_err());
        assert!(TabularPerturbation::new(vec![vec![0, 5], vec![1]], 0.0).is_err());
    }
}
