//! Exact worst-attack values on tabular MDPs.
//!
//! Against an observation attacker confined to B(s), a fixed policy π is
//! worth less than its natural value: at every state the attacker picks the
//! admissible observation whose induced action hurts most. The pessimistic
//! Bellman backup
//!
//! ```text
//! (T̲ q)(s, a) = R(s, a) + γ · Σ_{s'} P(s'|s, a) · min_{a' ∈ A_adv(s')} q(s', a')
//! ```
//!
//! is a γ-contraction in sup-norm, so iterating it from the zero table
//! converges to a unique fixed point Q̲π — the value of (s, a) given that the
//! attacker plays optimally forever after. The worst-attack state value is
//! then V̲π(s) = min over the admissible action set at s.
//!
//! [`brute_force_worst_value`] is an independent check: it enumerates every
//! deterministic attacker map h, evaluates the composite policy s ↦ π(h(s))
//! by exact linear policy evaluation, and takes the pointwise minimum. The
//! attacker's problem is itself an MDP, so one stationary map attains the
//! minimum at every state simultaneously and the two routes must agree.

use crate::error::CoreError;
use crate::mdp::{DeterministicPolicy, TabularMDP, TabularPerturbation};
use crate::Result;

/// Default attacker-enumeration cap for [`brute_force_worst_value`].
pub const DEFAULT_ENUM_CAP: f64 = 1e6;

/// Default sup-norm tolerance for fixed-point iteration.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Default iteration limit for fixed-point iteration.
pub const DEFAULT_MAX_ITER: usize = 100_000;

/// Action-value table indexed `[state][action]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    /// `values[s][a]`.
    pub values: Vec<Vec<f64>>,
}

impl QTable {
    /// All-zero table of the given shape.
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        QTable { values: vec![vec![0.0; n_actions]; n_states] }
    }

    /// Checks shape against an MDP and finiteness of every entry.
    pub fn validate(&self, mdp: &TabularMDP) -> Result<()> {
        if self.values.len() != mdp.n_states
            || self.values.iter().any(|row| row.len() != mdp.n_actions)
        {
            return Err(CoreError::Config("Q table shape does not match MDP".into()));
        }
        if self.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CoreError::Numerical("Q table contains non-finite entries".into()));
        }
        Ok(())
    }

    /// sup-norm distance to another table of the same shape.
    pub fn sup_diff(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .flatten()
            .zip(other.values.iter().flatten())
            .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()))
    }

    /// Greedy policy, ties broken toward the lowest action index.
    pub fn greedy_policy(&self) -> DeterministicPolicy {
        let action_of = self
            .values
            .iter()
            .map(|row| {
                let mut best = 0;
                for (a, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = a;
                    }
                }
                best
            })
            .collect();
        DeterministicPolicy { action_of }
    }
}

/// State-value table.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    /// `values[s]`.
    pub values: Vec<f64>,
}

impl ValueTable {
    /// Expected value under a distribution over states (e.g. the initial
    /// distribution, giving the return of a policy).
    pub fn weighted(&self, dist: &[f64]) -> f64 {
        self.values.iter().zip(dist).map(|(v, p)| v * p).sum()
    }

    /// sup-norm distance.
    pub fn sup_diff(&self, other: &ValueTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()))
    }
}

/// Deterministic attacker: which admissible observation to show per state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackerMap {
    /// `perturb_to[s]` ∈ B(s) is the observation shown when the state is s.
    pub perturb_to: Vec<usize>,
}

impl AttackerMap {
    /// The do-nothing attacker.
    pub fn identity(n_states: usize) -> Self {
        AttackerMap { perturb_to: (0..n_states).collect() }
    }

    /// Checks the membership constraint perturb_to[s] ∈ B(s).
    pub fn validate(&self, perturb: &TabularPerturbation) -> Result<()> {
        if self.perturb_to.len() != perturb.admissible.len() {
            return Err(CoreError::Config("attacker map length mismatch".into()));
        }
        for (s, &t) in self.perturb_to.iter().enumerate() {
            if !perturb.admissible[s].contains(&t) {
                return Err(CoreError::Config(format!(
                    "attacker shows {t} at state {s}, which is outside B({s})"
                )));
            }
        }
        Ok(())
    }
}

/// The set of actions an attacker can induce at state s:
/// { π(s̃) : s̃ ∈ B(s) }, deduplicated, in order of first appearance over
/// B(s). Entry 0 is always π(s) because B(s) lists s first.
pub fn adv_action_set(
    policy: &DeterministicPolicy,
    perturb: &TabularPerturbation,
    s: usize,
) -> Vec<usize> {
    let mut seen = vec![false; policy.n_states().max(1)];
    let mut out = Vec::new();
    for &obs in perturb.set_of(s) {
        let a = policy.action_of(obs);
        if a >= seen.len() {
            seen.resize(a + 1, false);
        }
        if !seen[a] {
            seen[a] = true;
            out.push(a);
        }
    }
    out
}

/// [`adv_action_set`] restricted to the nearest-first prefix of B(s)
/// covering `frac` of the set — the ramped threat model training schedules
/// use while the perturbation budget grows.
pub fn adv_action_set_prefix(
    policy: &DeterministicPolicy,
    perturb: &TabularPerturbation,
    s: usize,
    frac: f64,
) -> Vec<usize> {
    let mut seen = vec![false; policy.n_states().max(1)];
    let mut out = Vec::new();
    for &obs in perturb.admissible_prefix(s, frac) {
        let a = policy.action_of(obs);
        if a >= seen.len() {
            seen.resize(a + 1, false);
        }
        if !seen[a] {
            seen[a] = true;
            out.push(a);
        }
    }
    out
}

/// One application of the pessimistic backup (module docs). Terminal
/// next-states contribute zero continuation, so terminal rows of the output
/// equal their (zero) rewards.
pub fn worst_attack_backup(
    q: &QTable,
    mdp: &TabularMDP,
    policy: &DeterministicPolicy,
    perturb: &TabularPerturbation,
) -> QTable {
    // min over the induced action set per next-state, computed once.
    let worst_next: Vec<f64> = (0..mdp.n_states)
        .map(|s| {
            if mdp.terminal[s] {
                return 0.0;
            }
            adv_action_set(policy, perturb, s)
                .into_iter()
                .map(|a| q.values[s][a])
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let values = (0..mdp.n_states)
        .map(|s| {
            (0..mdp.n_actions)
                .map(|a| {
                    let cont: f64 = mdp.transition[s][a]
                        .iter()
                        .zip(&worst_next)
                        .filter(|&(&p, _)| p > 0.0)
                        .map(|(&p, &w)| p * w)
                        .sum();
                    mdp.reward[s][a] + mdp.gamma * cont
                })
                .collect()
        })
        .collect();
    QTable { values }
}

/// Iterates the pessimistic backup from the zero table until the successive
/// sup-norm difference is at most `tol`. Returns the fixed point Q̲π and the
/// number of backups performed.
pub fn worst_attack_fixed_point_detailed(
    mdp: &TabularMDP,
    policy: &DeterministicPolicy,
    perturb: &TabularPerturbation,
    tol: f64,
    max_iter: usize,
) -> Result<(QTable, usize)> {
    if !(tol > 0.0) {
        return Err(CoreError::Config(format!("tolerance must be positive, got {tol}")));
    }
    let mut q = QTable::zeros(mdp.n_states, mdp.n_actions);
    for iter in 1..=max_iter {
        let next = worst_attack_backup(&q, mdp, policy, perturb);
        let diff = next.sup_diff(&q);
        q = next;
        if diff <= tol {
            return Ok((q, iter));
        }
    }
    Err(CoreError::Numerical(format!(
        "worst-attack fixed point did not reach tol {tol} in {max_iter} iterations"
    )))
}

/// [`worst_attack_fixed_point_detailed`] without the iteration count.
pub fn worst_attack_fixed_point(
    mdp: &TabularMDP,
    policy: &DeterministicPolicy,
    perturb: &TabularPerturbation,
    tol: f64,
    max_iter: usize,
) -> Result<QTable> {
    worst_attack_fixed_point_detailed(mdp, policy, perturb, tol, max_iter).map(|(q, _)| q)
}

/// V̲π(s) = min over the induced action set of Q̲π(s, ·).
pub fn worst_attack_state_value(
    q_worst: &QTable,
    policy: &DeterministicPolicy,
    perturb: &TabularPerturbation,
) -> ValueTable {
    let values = (0..q_worst.values.len())
        .map(|s| {
            adv_action_set(policy, perturb, s)
                .into_iter()
                .map(|a| q_worst.values[s][a])
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    ValueTable { values }
}

/// Greedy attacker extracted from a fixed point: at state s, show the
/// admissible observation whose induced action minimizes Q̲π(s, ·). Ties go
/// to the earliest member of B(s). For the exact fixed point this map
/// realizes V̲π during rollouts.
pub fn attacker_from_worst_q(
    q_worst: &QTable,
    policy: &DeterministicPolicy,
    perturb: &TabularPerturbation,
) -> AttackerMap {
    let perturb_to = (0..q_worst.values.len())
        .map(|s| {
            let mut best = perturb.set_of(s)[0];
            let mut best_v = q_worst.values[s][policy.action_of(best)];
            for &obs in &perturb.set_of(s)[1..] {
                let v = q_worst.values[s][policy.action_of(obs)];
                if v < best_v {
                    best_v = v;
                    best = obs;
                }
            }
            best
        })
        .collect();
    AttackerMap { perturb_to }
}

/// Exact (attack-free) policy evaluation: solves the linear system for Vπ
/// and assembles Qπ(s, a) = R(s, a) + γ·ΣP·Vπ. Used for natural values and
/// state-importance weights.
pub fn policy_evaluation(mdp: &TabularMDP, policy: &DeterministicPolicy) -> Result<QTable> {
    let n = mdp.n_states;
    // (I − γ P_π) v = R_π; strictly diagonally dominant for γ < 1.
    let mut a = vec![vec![0.0; n]; n];
    let mut b = vec![0.0; n];
    for s in 0..n {
        let act = policy.action_of(s);
        for t in 0..n {
            a[s][t] = f64::from(u8::from(s == t)) - mdp.gamma * mdp.transition[s][act][t];
        }
        b[s] = mdp.reward[s][act];
    }
    let v = solve_linear(a, b)?;
    let values = (0..n)
        .map(|s| {
            (0..mdp.n_actions)
                .map(|act| {
                    let cont: f64 = mdp.transition[s][act]
                        .iter()
                        .zip(&v)
                        .map(|(&p, &vv)| p * vv)
                        .sum();
                    mdp.reward[s][act] + mdp.gamma * cont
                })
                .collect()
        })
        .collect();
    Ok(QTable { values })
}

/// Natural state values Vπ(s) = Qπ(s, π(s)).
pub fn values_under(q: &QTable, policy: &DeterministicPolicy) -> ValueTable {
    let values = q
        .values
        .iter()
        .enumerate()
        .map(|(s, row)| row[policy.action_of(s)])
        .collect();
    ValueTable { values }
}

/// Enumerates every deterministic attacker map, exactly evaluates each
/// composite policy s ↦ π(h(s)), and returns the pointwise-minimum value
/// vector together with one map attaining it (first in enumeration order on
/// ties). Uses [`DEFAULT_ENUM_CAP`]; see [`brute_force_worst_value_capped`]
/// to override.
pub fn brute_force_worst_value(
    mdp: &TabularMDP,
    policy: &DeterministicPolicy,
    perturb: &TabularPerturbation,
) -> Result<(ValueTable, AttackerMap)> {
    brute_force_worst_value_capped(mdp, policy, perturb, DEFAULT_ENUM_CAP)
}

/// [`brute_force_worst_value`] with an explicit enumeration cap on
/// Π_s |B(s)|.
pub fn brute_force_worst_value_capped(
    mdp: &TabularMDP,
    policy: &DeterministicPolicy,
    perturb: &TabularPerturbation,
    cap: f64,
) -> Result<(ValueTable, AttackerMap)> {
    let product = perturb.map_count();
    if product > cap {
        return Err(CoreError::CapExceeded { product, cap });
    }
    let n = mdp.n_states;
    let mut digits = vec![0usize; n];
    let mut pointwise_min = vec![f64::INFINITY; n];
    let mut best_sum = f64::INFINITY;
    let mut best_map = AttackerMap::identity(n);
    loop {
        let composite = DeterministicPolicy {
            action_of: (0..n)
                .map(|s| policy.action_of(perturb.admissible[s][digits[s]]))
                .collect(),
        };
        let q = policy_evaluation(mdp, &composite)?;
        let v = values_under(&q, &composite);
        let mut sum = 0.0;
        for (m, &vs) in pointwise_min.iter_mut().zip(&v.values) {
            *m = m.min(vs);
            sum += vs;
        }
        if sum < best_sum {
            best_sum = sum;
            best_map = AttackerMap {
                perturb_to: (0..n).map(|s| perturb.admissible[s][digits[s]]).collect(),
            };
        }
        // Mixed-radix odometer, state 0 fastest.
        let mut carry = true;
        for (d, set) in digits.iter_mut().zip(&perturb.admissible) {
            if !carry {
                break;
            }
            *d += 1;
            if *d < set.len() {
                carry = false;
            } else {
                *d = 0;
            }
        }
        if carry {
            break;
        }
    }
    Ok((ValueTable { values: pointwise_min }, best_map))
}

/// Value iteration to the optimal (attack-free) action values; returns Q*
/// and the greedy optimal policy (ties toward the lowest action index).
pub fn optimal_values(
    mdp: &TabularMDP,
    tol: f64,
    max_iter: usize,
) -> Result<(QTable, DeterministicPolicy)> {
    if !(tol > 0.0) {
        return Err(CoreError::Config(format!("tolerance must be positive, got {tol}")));
    }
    let n = mdp.n_states;
    let mut v = vec![0.0; n];
    for _ in 0..max_iter {
        let next: Vec<f64> = (0..n)
            .map(|s| {
                if mdp.terminal[s] {
                    return 0.0;
                }
                (0..mdp.n_actions)
                    .map(|a| {
                        let cont: f64 = mdp.transition[s][a]
                            .iter()
                            .zip(&v)
                            .map(|(&p, &vv)| p * vv)
                            .sum();
                        mdp.reward[s][a] + mdp.gamma * cont
                    })
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let diff = next
            .iter()
            .zip(&v)
            .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()));
        v = next;
        if diff <= tol {
            let values: Vec<Vec<f64>> = (0..n)
                .map(|s| {
                    (0..mdp.n_actions)
                        .map(|a| {
                            let cont: f64 = mdp.transition[s][a]
                                .iter()
                                .zip(&v)
                                .enumerate()
                                .filter(|&(t, _)| !mdp.terminal[t])
                                .map(|(_, (&p, &vv))| p * vv)
                                .sum();
                            mdp.reward[s][a] + mdp.gamma * cont
                        })
                        .collect()
                })
                .collect();
            let q = QTable { values };
            let policy = q.greedy_policy();
            return Ok((q, policy));
        }
    }
    Err(CoreError::Numerical(format!(
        "value iteration did not reach tol {tol} in {max_iter} iterations"
    )))
}

fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        // Partial pivoting.
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-14 {
            return Err(CoreError::Numerical("singular system in policy evaluation".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}
