//! Interval bound propagation and admissible-action estimation.
//!
//! Given an ℓ∞ ball of radius eps around an observation, what could the
//! attacker make the policy do? [`ibp_bounds`] pushes the ball through the
//! network with interval arithmetic — affine layers via center/radius with
//! the radius routed through |W|, monotone activations endpointwise — giving
//! sound per-output bounds (never tight, never violated). From those bounds:
//!
//! - [`adv_set_discrete`]: action i is attacker-reachable if its upper bound
//!   beats every other action's lower bound (a strict win everywhere else
//!   cannot be ruled out). The unperturbed greedy action is always included;
//!   showing the true observation is always available to the attacker.
//! - [`adv_box_continuous`]: for gaussian policies the reachable means form
//!   the per-coordinate bound box, clipped to the environment's action box.
//! - [`min_q_over_box`]: projected sign-gradient descent for the inner
//!   minimization of a Q network over such a box.

use crate::error::CoreError;
use crate::net::{forward, grad_input, NetSpec, ParamVector};
use crate::net::Activation;
use crate::Result;

/// Componentwise output bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalBounds {
    /// Per-coordinate lower bounds.
    pub lower: Vec<f64>,
    /// Per-coordinate upper bounds.
    pub upper: Vec<f64>,
}

impl IntervalBounds {
    /// Builds bounds, checking `lower ≤ upper` componentwise.
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(CoreError::Config("bound vectors differ in length".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(CoreError::Config("lower bound exceeds upper bound".into()));
        }
        Ok(IntervalBounds { lower, upper })
    }

    /// True if `point` lies inside the box (inclusive).
    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.lower.len()
            && point
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&p, (&l, &u))| l <= p && p <= u)
    }

    /// True if self is nested inside `outer` (inclusive).
    pub fn nested_in(&self, outer: &IntervalBounds) -> bool {
        self.lower
            .iter()
            .zip(&outer.lower)
            .all(|(inner, out)| out <= inner)
            && self
                .upper
                .iter()
                .zip(&outer.upper)
                .all(|(inner, out)| inner <= out)
    }
}

/// Estimated attacker-reachable actions for a discrete policy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscreteAdvSet {
    /// Ascending action indices; never empty; always contains the greedy
    /// action at the unperturbed input.
    pub actions: Vec<usize>,
}

impl DiscreteAdvSet {
    /// Membership test.
    pub fn contains(&self, action: usize) -> bool {
        self.actions.binary_search(&action).is_ok()
    }
}

/// Estimated attacker-reachable mean-action box for a gaussian policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousAdvBox {
    /// Per-coordinate minimum reachable mean.
    pub low: Vec<f64>,
    /// Per-coordinate maximum reachable mean.
    pub high: Vec<f64>,
}

impl ContinuousAdvBox {
    /// Membership test (inclusive).
    pub fn contains(&self, action: &[f64]) -> bool {
        action.len() == self.low.len()
            && action
                .iter()
                .zip(self.low.iter().zip(&self.high))
                .all(|(&a, (&l, &h))| l <= a && a <= h)
    }

    /// Box midpoint.
    pub fn midpoint(&self) -> Vec<f64> {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(l, h)| 0.5 * (l + h))
            .collect()
    }
}

/// Sound interval propagation of the ball ‖s̃ − center‖∞ ≤ eps through the
/// network: every forward(s̃) lies within the returned bounds. At eps = 0
/// the accumulation order matches [`forward`], so lower = upper = the exact
/// forward pass.
pub fn ibp_bounds(
    spec: &NetSpec,
    params: &ParamVector,
    center: &[f64],
    eps: f64,
) -> Result<IntervalBounds> {
    if !(eps >= 0.0) {
        return Err(CoreError::Config(format!("eps must be non-negative, got {eps}")));
    }
    params.validate(spec)?;
    if center.len() != spec.in_dim() {
        return Err(CoreError::Config(format!(
            "center length {} does not match input width {}",
            center.len(),
            spec.in_dim()
        )));
    }
    let n_layers = spec.n_layers();
    let mut c: Vec<f64> = center.to_vec();
    let mut r: Vec<f64> = vec![eps; center.len()];
    for l in 0..n_layers {
        let (n_in, n_out) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
        let off = spec.layer_offset(l);
        let w = &params.flat[off..off + n_in * n_out];
        let b = &params.flat[off + n_in * n_out..off + (n_in + 1) * n_out];
        let mut nc = vec![0.0; n_out];
        let mut nr = vec![0.0; n_out];
        for o in 0..n_out {
            let row = &w[o * n_in..(o + 1) * n_in];
            // Same order as the forward matvec so eps=0 collapses exactly.
            let mut acc = b[o];
            for (wi, ci) in row.iter().zip(&c) {
                acc += wi * ci;
            }
            nc[o] = acc;
            let mut rad = 0.0;
            for (wi, ri) in row.iter().zip(&r) {
                rad += wi.abs() * ri;
            }
            nr[o] = rad;
        }
        if l + 1 < n_layers {
            // Monotone activation: apply to the interval endpoints, then
            // convert back to center/radius.
            for o in 0..n_out {
                let lo: f64 = nc[o] - nr[o];
                let hi: f64 = nc[o] + nr[o];
                let (alo, ahi) = match spec.activation {
                    Activation::Relu => (lo.max(0.0), hi.max(0.0)),
                    Activation::Tanh => (lo.tanh(), hi.tanh()),
                };
                nc[o] = 0.5 * (alo + ahi);
                nr[o] = 0.5 * (ahi - alo);
            }
        }
        c = nc;
        r = nr;
    }
    let lower = c.iter().zip(&r).map(|(ci, ri)| ci - ri).collect();
    let upper = c.iter().zip(&r).map(|(ci, ri)| ci + ri).collect();
    IntervalBounds::new(lower, upper)
}

/// Greedy action at the raw output (lowest index on ties).
fn argmax_low(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Estimated attacker-reachable action set for a discrete policy or Q head:
/// action i is included iff upper(i) > lower(j) for every j ≠ i (strict; a
/// tie cannot certify a win), plus the unperturbed greedy action, which is
/// reachable by definition because the attacker may leave the observation
/// untouched.
pub fn adv_set_discrete(
    spec: &NetSpec,
    params: &ParamVector,
    s: &[f64],
    eps: f64,
) -> Result<DiscreteAdvSet> {
    let bounds = ibp_bounds(spec, params, s, eps)?;
    let clean = forward(spec, params, s)?;
    let greedy = argmax_low(&clean);
    let n = bounds.lower.len();
    let mut actions = Vec::new();
    for i in 0..n {
        let include = i == greedy
            || (0..n)
                .filter(|&j| j != i)
                .all(|j| bounds.upper[i] > bounds.lower[j]);
        if include {
            actions.push(i);
        }
    }
    Ok(DiscreteAdvSet { actions })
}

/// Estimated attacker-reachable mean-action box for a gaussian policy:
/// per-coordinate IBP bounds on the mean, clipped to the environment action
/// box, then widened (if necessary) to contain the clipped unperturbed mean.
pub fn adv_box_continuous(
    spec: &NetSpec,
    params: &ParamVector,
    s: &[f64],
    eps: f64,
    act_low: &[f64],
    act_high: &[f64],
) -> Result<ContinuousAdvBox> {
    let bounds = ibp_bounds(spec, params, s, eps)?;
    if act_low.len() != bounds.lower.len() || act_high.len() != bounds.lower.len() {
        return Err(CoreError::Config("action box dimension mismatch".into()));
    }
    let mut low = Vec::with_capacity(bounds.lower.len());
    let mut high = Vec::with_capacity(bounds.lower.len());
    for i in 0..bounds.lower.len() {
        let l = bounds.lower[i].clamp(act_low[i], act_high[i]);
        let h = bounds.upper[i].clamp(act_low[i], act_high[i]);
        low.push(l);
        high.push(h);
    }
    Ok(ContinuousAdvBox { low, high })
}

/// Projected sign-gradient descent of a scalar Q network over an action box.
///
/// The Q network takes the concatenation (s, a). Starting from the box
/// midpoint, each step moves every coordinate by
/// `step_size · width · decay^t` (decay 0.85) against the gradient sign,
/// clamping to the box; the best iterate seen (midpoint included) is
/// returned, so the result never exceeds the midpoint value.
pub fn min_q_over_box(
    q_spec: &NetSpec,
    q_params: &ParamVector,
    s: &[f64],
    adv_box: &ContinuousAdvBox,
    steps: usize,
    step_size: f64,
) -> Result<(Vec<f64>, f64)> {
    if steps == 0 {
        return Err(CoreError::Config("need at least one descent step".into()));
    }
    if q_spec.out_dim() != 1 {
        return Err(CoreError::Config("Q network must have scalar output".into()));
    }
    let act_dim = adv_box.low.len();
    if s.len() + act_dim != q_spec.in_dim() {
        return Err(CoreError::Config(format!(
            "Q input width {} does not match obs {} + action {}",
            q_spec.in_dim(),
            s.len(),
            act_dim
        )));
    }
    let eval = |a: &[f64]| -> Result<f64> {
        let mut x = Vec::with_capacity(s.len() + act_dim);
        x.extend_from_slice(s);
        x.extend_from_slice(a);
        Ok(forward(q_spec, q_params, &x)?[0])
    };
    let mut a = adv_box.midpoint();
    let mut best_a = a.clone();
    let mut best_v = eval(&a)?;
    let mut decay = 1.0;
    for _ in 0..steps {
        let mut x = Vec::with_capacity(s.len() + act_dim);
        x.extend_from_slice(s);
        x.extend_from_slice(&a);
        let g = grad_input(q_spec, q_params, &x, &[1.0])?;
        let ga = &g[s.len()..];
        for i in 0..act_dim {
            let width = adv_box.high[i] - adv_box.low[i];
            let step = step_size * width * decay;
            a[i] = (a[i] - step * ga[i].signum()).clamp(adv_box.low[i], adv_box.high[i]);
        }
        decay *= 0.85;
        let v = eval(&a)?;
        if v < best_v {
            best_v = v;
            best_a = a.clone();
        }
    }
    Ok((best_a, best_v))
}

/// Result of a bound-soundness fuzzing run.
#[derive(Debug, Clone, PartialEq)]
pub struct FuzzReport {
    /// Base points checked.
    pub base_points: usize,
    /// Total perturbed forward passes compared against the bounds.
    pub samples: usize,
    /// Outputs outside the certified interval (beyond 1e-9 slack).
    pub violations: usize,
}

/// Fuzzes [`ibp_bounds`] soundness: draws gaussian base points, computes
/// the certified output interval at radius `eps`, then checks that forward
/// passes at uniformly sampled in-ball perturbations stay inside it
/// (with 1e-9 absolute slack for floating-point rounding).
pub fn soundness_fuzz(
    spec: &NetSpec,
    params: &ParamVector,
    eps: f64,
    base_points: usize,
    samples_per_point: usize,
    seed: u64,
) -> Result<FuzzReport> {
    use rand::Rng as _;
    if base_points == 0 || samples_per_point == 0 {
        return Err(CoreError::Config("fuzzing needs at least one point and one sample".into()));
    }
    let dim = spec.layer_widths[0];
    let mut rng = crate::rng::seeded_stream(seed, crate::rng::stream::EVAL);
    let mut violations = 0;
    for _ in 0..base_points {
        let x: Vec<f64> = (0..dim).map(|_| crate::rng::normal(&mut rng)).collect();
        let bounds = ibp_bounds(spec, params, &x, eps)?;
        for _ in 0..samples_per_point {
            let xt: Vec<f64> = x
                .iter()
                .map(|&c| if eps > 0.0 { c + rng.gen_range(-eps..=eps) } else { c })
                .collect();
            let y = forward(spec, params, &xt)?;
            for ((&yo, &lo), &hi) in y.iter().zip(&bounds.lower).zip(&bounds.upper) {
                if yo < lo - 1e-9 || yo > hi + 1e-9 {
                    violations += 1;
                }
            }
        }
    }
    Ok(FuzzReport { base_points, samples: base_points * samples_per_point, violations })
}
