//! Gridworld "go home" task: navigate to home, avoid the bomb.
//!
//! A width×height grid with four move actions. Reaching home pays +10 and
//! ends the episode; stepping onto the bomb pays −10 and ends it; every other
//! move costs 0.1. Rock cells are impassable (moves into them bounce back),
//! and moves can slip sideways. The observation attacker may relabel the
//! agent's cell with any non-rock cell within Chebyshev distance `k_perturb`,
//! so policies that hug the bomb can be steered into it while policies that
//! keep a 2-cell margin cannot.

use super::{TabularMDP, TabularPerturbation};
use crate::error::CoreError;
use crate::Result;

/// Display names for the four move actions, indexed by action id.
pub const GOHOME_ACTION_NAMES: [&str; 4] = ["up", "down", "left", "right"];

/// Step reward for any move that does not end the episode.
const STEP_REWARD: f64 = -0.1;
/// Reward for entering the home cell.
const HOME_REWARD: f64 = 10.0;
/// Reward for entering the bomb cell.
const BOMB_REWARD: f64 = -10.0;

// (dx, dy) per action; y grows downward, so "up" is y−1.
const MOVES: [(isize, isize); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];

/// Builds the go-home gridworld.
///
/// Cells are (x, y) with state index `y * width + x`. Actions are
/// 0=up, 1=down, 2=left, 3=right ([`GOHOME_ACTION_NAMES`]). With probability
/// `slip` the move deviates to one of the two lateral directions (equal
/// split); moves off-grid or into rocks leave the agent in place. Home,
/// bomb, and rock cells are absorbing with zero reward. `start` is the
/// initial cell (it must be an ordinary free cell).
///
/// B(s) contains every non-rock cell within Chebyshev distance `k_perturb`
/// of s, ordered nearest-first (ties row-major), with s itself first.
#[allow(clippy::too_many_arguments)]
pub fn build_gohome(
    width: usize,
    height: usize,
    start: (usize, usize),
    home: (usize, usize),
    bomb: (usize, usize),
    rocks: &[(usize, usize)],
    slip: f64,
    k_perturb: usize,
    gamma: f64,
) -> Result<(TabularMDP, TabularPerturbation)> {
    if width <= 1 && height <= 1 {
        return Err(CoreError::Config("grid must have more than one cell".into()));
    }
    if !(0.0..0.5).contains(&slip) {
        return Err(CoreError::Config(format!("slip must be in [0, 0.5), got {slip}")));
    }
    let in_grid = |(x, y): (usize, usize)| x < width && y < height;
    for (name, cell) in [("start", start), ("home", home), ("bomb", bomb)] {
        if !in_grid(cell) {
            return Err(CoreError::Config(format!("{name} cell {cell:?} outside {width}x{height} grid")));
        }
    }
    if home == bomb {
        return Err(CoreError::Config("home and bomb must differ".into()));
    }
    let n = width * height;
    let idx = |(x, y): (usize, usize)| y * width + x;
    let mut is_rock = vec![false; n];
    for &cell in rocks {
        if !in_grid(cell) {
            return Err(CoreError::Config(format!("rock cell {cell:?} outside grid")));
        }
        is_rock[idx(cell)] = true;
    }
    if is_rock[idx(home)] || is_rock[idx(bomb)] {
        return Err(CoreError::Config("home and bomb must not sit on rock cells".into()));
    }
    if start == home || start == bomb || is_rock[idx(start)] {
        return Err(CoreError::Config("start must be an ordinary free cell".into()));
    }

    let home_i = idx(home);
    let bomb_i = idx(bomb);
    let mut terminal = vec![false; n];
    terminal[home_i] = true;
    terminal[bomb_i] = true;
    for s in 0..n {
        if is_rock[s] {
            terminal[s] = true; // unreachable; absorbing keeps the tensors valid
        }
    }

    let mut transition = vec![vec![vec![0.0; n]; 4]; n];
    let mut reward = vec![vec![0.0; 4]; n];
    for y in 0..height {
        for x in 0..width {
            let s = idx((x, y));
            if terminal[s] {
                for a in 0..4 {
                    transition[s][a][s] = 1.0;
                }
                continue;
            }
            for a in 0..4 {
                // Intended direction plus the two laterals.
                let (lat1, lat2) = if a < 2 { (2, 3) } else { (0, 1) };
                for (dir, p) in [(a, 1.0 - slip), (lat1, slip / 2.0), (lat2, slip / 2.0)] {
                    if p == 0.0 {
                        continue;
                    }
                    let (dx, dy) = MOVES[dir];
                    let tx = x as isize + dx;
                    let ty = y as isize + dy;
                    let target = if tx >= 0
                        && ty >= 0
                        && (tx as usize) < width
                        && (ty as usize) < height
                        && !is_rock[idx((tx as usize, ty as usize))]
                    {
                        idx((tx as usize, ty as usize))
                    } else {
                        s // bump: stay in place
                    };
                    transition[s][a][target] += p;
                    reward[s][a] += p * if target == home_i {
                        HOME_REWARD
                    } else if target == bomb_i {
                        BOMB_REWARD
                    } else {
                        STEP_REWARD
                    };
                }
            }
        }
    }

    let mut initial_dist = vec![0.0; n];
    initial_dist[idx(start)] = 1.0;
    let mdp = TabularMDP::new(n, 4, transition, reward, gamma, initial_dist, terminal)?;

    // Chebyshev balls, nearest-first, skipping rocks.
    let k = k_perturb as isize;
    let mut admissible = Vec::with_capacity(n);
    for y in 0..height as isize {
        for x in 0..width as isize {
            let s = idx((x as usize, y as usize));
            if is_rock[s] {
                // Unreachable, but the model still needs a well-formed set.
                admissible.push(vec![s]);
                continue;
            }
            let mut with_dist: Vec<(usize, usize)> = Vec::new();
            for ny in (y - k).max(0)..=(y + k).min(height as isize - 1) {
                for nx in (x - k).max(0)..=(x + k).min(width as isize - 1) {
                    let t = idx((nx as usize, ny as usize));
                    if is_rock[t] {
                        continue;
                    }
                    let d = (nx - x).abs().max((ny - y).abs()) as usize;
                    with_dist.push((d, t));
                }
            }
            with_dist.sort(); // distance first, then row-major index
            admissible.push(with_dist.into_iter().map(|(_, t)| t).collect());
        }
    }
    let perturb = TabularPerturbation::new(admissible, k_perturb as f64)?;
    Ok((mdp, perturb))
}

/// The fixed 5×5 instance used by the robustness experiments: start at the
/// left edge mid-row, home at the right edge mid-row, bomb dead center,
/// no rocks, deterministic moves, attack radius 1, γ = 0.95.
///
/// Every shortest (6-move) route passes within Chebyshev distance 1 of the
/// bomb, where the attacker can relabel cells to steer the agent onto it
/// (worst case ≈ −9.2); a policy that keeps a 2-cell margin can at worst be
/// walked in circles (worst case −0.1/(1−γ) = −2), at a natural cost of
/// roughly 0.9 for the 8-move detour (6.4 vs 7.3 discounted). γ = 0.95
/// keeps those two failure modes distinct: at γ = 0.99 an endless walk
/// costs exactly as much as the bomb and every unsafe policy collapses to
/// the same worst-case value.
pub fn gohome_acceptance_instance() -> (TabularMDP, TabularPerturbation) {
    build_gohome(5, 5, (0, 2), (4, 2), (2, 2), &[], 0.0, 1, 0.95)
        .expect("pinned instance is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acceptance_instance_is_valid_and_shaped() {
        let (mdp, pert) = gohome_acceptance_instance();
        assert_eq!(mdp.n_states, 25);
        assert_eq!(mdp.n_actions, 4);
        mdp.validate().unwrap();
        pert.validate(25).unwrap();
        // Start (0,2) -> index 10; home (4,2) -> 14; bomb (2,2) -> 12.
        assert_eq!(mdp.initial_dist[10], 1.0);
        assert!(mdp.terminal[14] && mdp.terminal[12]);
    }

    #[test]
    fn zero_budget_gives_identity_sets() {
        let (_, pert) = build_gohome(5, 5, (0, 2), (4, 2), (2, 2), &[], 0.0, 0, 0.99).unwrap();
        for (s, set) in pert.admissible.iter().enumerate() {
            assert_eq!(set, &vec![s]);
        }
    }

    #[test]
    fn chebyshev_ball_fills_3x3_center() {
        let (_, pert) = build_gohome(3, 3, (0, 0), (2, 2), (2, 0), &[], 0.0, 1, 0.99).unwrap();
        // Center cell (1,1) -> index 4; radius-1 ball covers the whole grid.
        assert_eq!(pert.admissible[4].len(), 9);
        assert_eq!(pert.admissible[4][0], 4);
        // All 8 neighbours are at distance 1; they follow in row-major order.
        assert_eq!(&pert.admissible[4][1..], &[0, 1, 2, 3, 5, 6, 7, 8]);
    }

    #[test]
    fn rocks_are_impassable_and_excluded_from_observation_sets() {
        // 4×1 corridor with a rock at (1,0), home right, bomb at (2,0).
        let (mdp, pert) =
            build_gohome(4, 1, (0, 0), (3, 0), (2, 0), &[(1, 0)], 0.0, 1, 0.9).unwrap();
        // Moving right from (0,0) bumps into the rock at (1,0): stay put.
        assert_eq!(mdp.transition[0][3][0], 1.0);
        assert_eq!(mdp.reward[0][3], STEP_REWARD);
        // B((0,0)) omits the rock cell.
        assert!(!pert.admissible[0].contains(&1));
        // Rock cell is absorbing so the tensors validate.
        assert!(mdp.terminal[1]);
    }

    #[test]
    fn slip_splits_mass_laterally() {
        let (mdp, _) = build_gohome(5, 5, (0, 2), (4, 2), (2, 2), &[], 0.2, 1, 0.99).unwrap();
        // From (1,1) (index 6) moving right: 0.8 to (2,1)=7, 0.1 up to (1,0)=1,
        // 0.1 down to (1,2)=11.
        assert!((mdp.transition[6][3][7] - 0.8).abs() < 1e-12);
        assert!((mdp.transition[6][3][1] - 0.1).abs() < 1e-12);
        assert!((mdp.transition[6][3][11] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn entering_home_and_bomb_pays_out() {
        let (mdp, _) = gohome_acceptance_instance();
        // (3,2) -> index 13; right enters home (14).
        assert_eq!(mdp.reward[13][3], HOME_REWARD);
        assert_eq!(mdp.transition[13][3][14], 1.0);
        // (2,1) -> index 7; down enters the bomb (12).
        assert_eq!(mdp.reward[7][1], BOMB_REWARD);
        assert_eq!(mdp.transition[7][1][12], 1.0);
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(build_gohome(1, 1, (0, 0), (0, 0), (0, 0), &[], 0.0, 1, 0.9).is_err());
        // home == bomb
        assert!(build_gohome(3, 3, (0, 0), (1, 1), (1, 1), &[], 0.0, 1, 0.9).is_err());
        // home on a rock
        assert!(build_gohome(3, 3, (0, 0), (2, 2), (1, 1), &[(2, 2)], 0.0, 1, 0.9).is_err());
        // slip out of range
        assert!(build_gohome(3, 3, (0, 0), (2, 2), (1, 1), &[], 0.5, 1, 0.9).is_err());
        // start on bomb
        assert!(build_gohome(3, 3, (1, 1), (2, 2), (1, 1), &[], 0.0, 1, 0.9).is_err());
    }

    #[test]
    fn validator_accepts_many_instances() {
        // Sweep slips, radii and rock layouts; every instance must validate.
        let mut count = 0;
        for w in 2..6usize {
            for h in 2..6usize {
                for k in 0..3usize {
                    for &slip in &[0.0, 0.1, 0.3] {
                        let home = (w - 1, h - 1);
                        let bomb = (w - 1, 0);
                        if home == bomb {
                            continue;
                        }
                        let rocks: Vec<(usize, usize)> =
                            if w >= 3 && h >= 3 { vec![(1, 1)] } else { vec![] };
                        if (0, 0) == home || (0, 0) == bomb || rocks.contains(&(0, 0)) {
                            continue;
                        }
                        let (mdp, pert) =
                            build_gohome(w, h, (0, 0), home, bomb, &rocks, slip, k, 0.95).unwrap();
                        mdp.validate().unwrap();
                        pert.validate(mdp.n_states).unwrap();
                        count += 1;
                    }
                }
            }
        }
        assert!(count > 100, "swept {count} instances");
    }
}
