//! Seeded random MDP and perturbation generators for property tests.

use super::{TabularMDP, TabularPerturbation};
use crate::error::CoreError;
use crate::rng::{seeded_stream, stream};
use crate::Result;
use rand::Rng;

/// Random MDP: transition rows from normalized positive exponentials
/// (each row is Dirichlet(1, …, 1)-distributed), rewards uniform in [−1, 1],
/// uniform initial distribution, no terminal states. Deterministic given
/// `seed`.
pub fn random_mdp(n_states: usize, n_actions: usize, gamma: f64, seed: u64) -> Result<TabularMDP> {
    if n_states == 0 || n_actions == 0 {
        return Err(CoreError::Config("need at least one state and action".into()));
    }
    let mut rng = seeded_stream(seed, stream::ENV);
    let mut transition = vec![vec![vec![0.0; n_states]; n_actions]; n_states];
    let mut reward = vec![vec![0.0; n_actions]; n_states];
    for s in 0..n_states {
        for a in 0..n_actions {
            let row = &mut transition[s][a];
            let mut sum = 0.0;
            for p in row.iter_mut() {
                // Exponential draw; 1 − U keeps the argument strictly positive.
                *p = -(1.0 - rng.gen::<f64>()).ln();
                sum += *p;
            }
            for p in row.iter_mut() {
                *p /= sum;
            }
            reward[s][a] = rng.gen::<f64>() * 2.0 - 1.0;
        }
    }
    let initial_dist = vec![1.0 / n_states as f64; n_states];
    TabularMDP::new(
        n_states,
        n_actions,
        transition,
        reward,
        gamma,
        initial_dist,
        vec![false; n_states],
    )
}

/// Random perturbation model: each B(s) holds s plus up to `max_set_size − 1`
/// further distinct states (count drawn uniformly). Deterministic given
/// `seed`.
pub fn random_perturbation(
    mdp: &TabularMDP,
    max_set_size: usize,
    seed: u64,
) -> Result<TabularPerturbation> {
    if max_set_size == 0 {
        return Err(CoreError::Config("max_set_size must be at least 1".into()));
    }
    let n = mdp.n_states;
    let mut rng = seeded_stream(seed, stream::ENV);
    let mut admissible = Vec::with_capacity(n);
    for s in 0..n {
        let extra_cap = max_set_size.min(n) - 1;
        let extra = if extra_cap == 0 { 0 } else { rng.gen_range(0..=extra_cap) };
        // Partial Fisher–Yates over the other states.
        let mut others: Vec<usize> = (0..n).filter(|&t| t != s).collect();
        let mut set = vec![s];
        for i in 0..extra {
            let j = rng.gen_range(i..others.len());
            others.swap(i, j);
            set.push(others[i]);
        }
        admissible.push(set);
    }
    // No metric here; label the sets with the size cap they were drawn from.
    TabularPerturbation::new(admissible, max_set_size as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_mdp_is_deterministic_and_valid() {
        let a = random_mdp(5, 3, 0.9, 7).unwrap();
        let b = random_mdp(5, 3, 0.9, 7).unwrap();
        assert_eq!(a, b);
        let c = random_mdp(5, 3, 0.9, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_state_rows_are_all_ones() {
        let mdp = random_mdp(1, 3, 0.5, 0).unwrap();
        for a in 0..3 {
            assert!((mdp.transition[0][a][0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn many_instances_pass_validation() {
        for seed in 0..200 {
            let n_states = 1 + (seed as usize % 8);
            let n_actions = 1 + (seed as usize % 5);
            let mdp = random_mdp(n_states, n_actions, 0.95, seed).unwrap();
            mdp.validate().unwrap();
            let pert = random_perturbation(&mdp, 1 + seed as usize % 4, seed).unwrap();
            pert.validate(mdp.n_states).unwrap();
        }
    }

    #[test]
    fn perturbation_respects_bounds() {
        let mdp = random_mdp(6, 2, 0.9, 3).unwrap();
        let identity = random_perturbation(&mdp, 1, 3).unwrap();
        for (s, set) in identity.admissible.iter().enumerate() {
            assert_eq!(set, &vec![s]);
        }
        let full = random_perturbation(&mdp, 6, 3).unwrap();
        for set in &full.admissible {
            assert!(set.len() <= 6);
        }
        // Determinism.
        assert_eq!(full, random_perturbation(&mdp, 6, 3).unwrap());
    }
}
