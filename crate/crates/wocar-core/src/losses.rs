//! Worst-case-aware training losses.
//!
//! Three ingredients, shared by the DQN and PPO variants:
//!
//! 1. **Estimation loss** — bootstrapped regression that teaches a critic
//!    Q̲_φ the worst-attack action value: targets
//!    `ȳ = r + γ · min_{â ∈ Â_adv(s')} Q̲_φ(s', â)` (zero continuation on
//!    episode end), with the admissible set Â_adv coming from interval
//!    bounds on the acting policy — or handed in explicitly for tabular
//!    environments. Targets are stop-gradient (semi-gradient TD).
//! 2. **Worst-attack policy loss** — pushes the policy toward actions whose
//!    worst-attack value is high: discrete form
//!    `−(1/N) Σ_t Σ_a π_θ(a|s_t)·Q̲_φ(s_t,a)`, continuous form
//!    `−(1/N) Σ_t Q̲_φ(s_t, μ_θ(s_t))` with the gradient flowing through the
//!    action argument. The critic is frozen in both.
//! 3. **Smoothness regularization** — `(1/N) Σ w(s_t) · max_{s̃∈Bε(s_t)}
//!    Dist(π_θ(s_t), π_θ(s̃))`, where the state-importance weight
//!    w concentrates the penalty on states where action choice matters.
//!    The inner maximization runs projected sign-gradient ascent; the final
//!    s̃ is then frozen and the gradient flows through both policy
//!    evaluations.
//!
//! Every loss returns its exact parameter gradient alongside the value.

use crate::bounds::{adv_box_continuous, adv_set_discrete, min_q_over_box, ContinuousAdvBox};
use crate::error::CoreError;
use crate::net::{
    forward, forward_cached, backward, grad_input, log_softmax, softmax, GradVector, NetSpec,
    ParamVector,
};
use crate::Result;
use rand_chacha::ChaCha8Rng;

/// One environment transition. `A` is `usize` for discrete actions and
/// `Vec<f64>` for continuous ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition<A> {
    /// Observation the action was chosen from.
    pub s: Vec<f64>,
    /// Action taken.
    pub a: A,
    /// Immediate reward.
    pub r: f64,
    /// Next observation.
    pub s_next: Vec<f64>,
    /// True if `s_next` ended the episode (no bootstrapping past it).
    pub done: bool,
}

/// Non-empty list of transitions with optional per-item weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<A> {
    /// The transitions.
    pub transitions: Vec<Transition<A>>,
    /// Optional per-transition weights (length must match when present).
    pub weights: Option<Vec<f64>>,
}

impl<A> Batch<A> {
    /// Builds a batch, rejecting emptiness, ragged observation dimensions,
    /// and mismatched weight lengths.
    pub fn new(transitions: Vec<Transition<A>>, weights: Option<Vec<f64>>) -> Result<Self> {
        if transitions.is_empty() {
            return Err(CoreError::Config("batch must be non-empty".into()));
        }
        let dim = transitions[0].s.len();
        if transitions
            .iter()
            .any(|t| t.s.len() != dim || t.s_next.len() != dim)
        {
            return Err(CoreError::Config("inconsistent observation dimensions in batch".into()));
        }
        if let Some(w) = &weights {
            if w.len() != transitions.len() {
                return Err(CoreError::Config("weight count does not match batch size".into()));
            }
        }
        Ok(Batch { transitions, weights })
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    /// Always false by construction.
    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// The two mixing weights of the combined policy objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight on the worst-attack policy loss.
    pub kappa_wst: f64,
    /// Weight on the smoothness regularization.
    pub kappa_reg: f64,
}

impl LossWeights {
    /// Builds weights, rejecting negative or non-finite values.
    pub fn new(kappa_wst: f64, kappa_reg: f64) -> Result<Self> {
        if !(kappa_wst >= 0.0) || !(kappa_reg >= 0.0) || !kappa_wst.is_finite() || !kappa_reg.is_finite() {
            return Err(CoreError::Config(format!(
                "loss weights must be finite and non-negative, got ({kappa_wst}, {kappa_reg})"
            )));
        }
        Ok(LossWeights { kappa_wst, kappa_reg })
    }
}

/// Inner-minimizer settings for continuous-action critics.
#[derive(Debug, Clone, Copy)]
pub struct BoxMin {
    /// Descent steps for [`min_q_over_box`].
    pub steps: usize,
    /// Relative step size (fraction of box width per coordinate).
    pub step_size: f64,
}

impl Default for BoxMin {
    fn default() -> Self {
        BoxMin { steps: 50, step_size: 0.1 }
    }
}

/// Where the estimated admissible action set at the next state comes from.
pub enum DiscreteAdvSource<'a> {
    /// Interval bounds on a policy network over the ℓ∞ ball of radius eps.
    InputBall {
        /// Acting policy (logits or Q head) whose reachable argmax matters.
        policy_spec: &'a NetSpec,
        /// Its parameters.
        policy_params: &'a ParamVector,
        /// Perturbation radius.
        eps: f64,
    },
    /// Explicit per-transition action sets (tabular environments compute
    /// these exactly); `sets[t]` is the admissible set at `s_next` of
    /// transition t.
    ExplicitSets(&'a [Vec<usize>]),
}

/// Bootstrapped worst-case targets for a discrete-action critic:
/// `ȳ_t = r_t + γ · min_{â ∈ Â_adv(s'_t)} Q̲_φ(s'_t, â)`, or plain `r_t`
/// when the transition ends the episode.
pub fn est_targets_discrete(
    critic_spec: &NetSpec,
    critic_params: &ParamVector,
    batch: &Batch<usize>,
    adv: &DiscreteAdvSource,
    gamma: f64,
) -> Result<Vec<f64>> {
    if let DiscreteAdvSource::ExplicitSets(sets) = adv {
        if sets.len() != batch.len() {
            return Err(CoreError::Config("explicit adv sets must match batch length".into()));
        }
    }
    let mut targets = Vec::with_capacity(batch.len());
    for (t, tr) in batch.transitions.iter().enumerate() {
        if tr.done {
            targets.push(tr.r);
            continue;
        }
        let q_next = forward(critic_spec, critic_params, &tr.s_next)?;
        let min_q = match adv {
            DiscreteAdvSource::InputBall { policy_spec, policy_params, eps } => {
                let set = adv_set_discrete(policy_spec, policy_params, &tr.s_next, *eps)?;
                set.actions
                    .iter()
                    .map(|&a| q_next[a])
                    .fold(f64::INFINITY, f64::min)
            }
            DiscreteAdvSource::ExplicitSets(sets) => {
                if sets[t].is_empty() {
                    return Err(CoreError::Config(format!("empty adv set for transition {t}")));
                }
                sets[t]
                    .iter()
                    .map(|&a| q_next[a])
                    .fold(f64::INFINITY, f64::min)
            }
        };
        targets.push(tr.r + gamma * min_q);
    }
    Ok(targets)
}

/// Bootstrapped worst-case targets for a continuous-action critic: the inner
/// minimum runs over the reachable-mean box of the acting policy at `s'`.
#[allow(clippy::too_many_arguments)]
pub fn est_targets_continuous(
    critic_spec: &NetSpec,
    critic_params: &ParamVector,
    policy_spec: &NetSpec,
    policy_params: &ParamVector,
    batch: &Batch<Vec<f64>>,
    eps: f64,
    act_low: &[f64],
    act_high: &[f64],
    box_min: BoxMin,
    gamma: f64,
) -> Result<Vec<f64>> {
    let mut targets = Vec::with_capacity(batch.len());
    for tr in &batch.transitions {
        if tr.done {
            targets.push(tr.r);
            continue;
        }
        let adv_box =
            adv_box_continuous(policy_spec, policy_params, &tr.s_next, eps, act_low, act_high)?;
        let (_, min_q) = min_q_over_box(
            critic_spec,
            critic_params,
            &tr.s_next,
            &adv_box,
            box_min.steps,
            box_min.step_size,
        )?;
        targets.push(tr.r + gamma * min_q);
    }
    Ok(targets)
}

/// Mean squared regression of `Q̲_φ(s_t, a_t)` onto fixed targets, for a
/// per-action-output critic. Returns the loss and its gradient in φ.
pub fn critic_regression_discrete(
    critic_spec: &NetSpec,
    critic_params: &ParamVector,
    batch: &Batch<usize>,
    targets: &[f64],
) -> Result<(f64, GradVector)> {
    if targets.len() != batch.len() {
        return Err(CoreError::Config("target count does not match batch".into()));
    }
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = GradVector::zeros(critic_spec);
    for (tr, &y) in batch.transitions.iter().zip(targets) {
        let acts = forward_cached(critic_spec, critic_params, &tr.s)?;
        let q_sa = acts.output()[tr.a];
        let resid = q_sa - y;
        loss += resid * resid / n;
        // d/dφ of (q − y)²/N routed through the chosen action's output.
        let mut upstream = vec![0.0; critic_spec.out_dim()];
        upstream[tr.a] = 2.0 * resid / n;
        let (g, _) = backward(critic_spec, critic_params, &acts, &upstream)?;
        grad.add_scaled(&g, 1.0);
    }
    Ok((loss, grad))
}

/// Mean squared regression for a scalar critic over concatenated (s, a).
pub fn critic_regression_continuous(
    critic_spec: &NetSpec,
    critic_params: &ParamVector,
    batch: &Batch<Vec<f64>>,
    targets: &[f64],
) -> Result<(f64, GradVector)> {
    if targets.len() != batch.len() {
        return Err(CoreError::Config("target count does not match batch".into()));
    }
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = GradVector::zeros(critic_spec);
    for (tr, &y) in batch.transitions.iter().zip(targets) {
        let mut x = tr.s.clone();
        x.extend_from_slice(&tr.a);
        let acts = forward_cached(critic_spec, critic_params, &x)?;
        let resid = acts.output()[0] - y;
        loss += resid * resid / n;
        let (g, _) = backward(critic_spec, critic_params, &acts, &[2.0 * resid / n])?;
        grad.add_scaled(&g, 1.0);
    }
    Ok((loss, grad))
}

/// Estimation loss for a discrete critic: targets then regression in one
/// call. The targets are computed with the current φ and then frozen.
pub fn est_loss_discrete(
    critic_spec: &NetSpec,
    critic_params: &ParamVector,
    batch: &Batch<usize>,
    adv: &DiscreteAdvSource,
    gamma: f64,
) -> Result<(f64, GradVector)> {
    let targets = est_targets_discrete(critic_spec, critic_params, batch, adv, gamma)?;
    critic_regression_discrete(critic_spec, critic_params, batch, &targets)
}

/// Estimation loss for a continuous critic; see [`est_loss_discrete`].
#[allow(clippy::too_many_arguments)]
pub fn est_loss_continuous(
    critic_spec: &NetSpec,
    critic_params: &ParamVector,
    policy_spec: &NetSpec,
    policy_params: &ParamVector,
    batch: &Batch<Vec<f64>>,
    eps: f64,
    act_low: &[f64],
    act_high: &[f64],
    box_min: BoxMin,
    gamma: f64,
) -> Result<(f64, GradVector)> {
    let targets = est_targets_continuous(
        critic_spec,
        critic_params,
        policy_spec,
        policy_params,
        batch,
        eps,
        act_low,
        act_high,
        box_min,
        gamma,
    )?;
    critic_regression_continuous(critic_spec, critic_params, batch, &targets)
}

/// Worst-attack policy loss, discrete form:
/// `−(1/N) Σ_t Σ_a π_θ(a|s_t) · Q̲_φ(s_t, a)` with the critic frozen.
/// Returns the loss and its gradient in the policy parameters.
pub fn wst_policy_loss_discrete(
    policy_spec: &NetSpec,
    policy_params: &ParamVector,
    critic_spec: &NetSpec,
    critic_params: &ParamVector,
    states: &[Vec<f64>],
) -> Result<(f64, GradVector)> {
    if states.is_empty() {
        return Err(CoreError::Config("need at least one state".into()));
    }
    if policy_spec.out_dim() != critic_spec.out_dim() {
        return Err(CoreError::Config("policy and critic action counts differ".into()));
    }
    let n = states.len() as f64;
    let mut loss = 0.0;
    let mut grad = GradVector::zeros(policy_spec);
    for s in states {
        let acts = forward_cached(policy_spec, policy_params, s)?;
        let p = softmax(acts.output());
        let q = forward(critic_spec, critic_params, s)?;
        let expect: f64 = p.iter().zip(&q).map(|(pi, qi)| pi * qi).sum();
        loss -= expect / n;
        // d(−Σ p·q)/dz = −(p ⊙ q − p·⟨p,q⟩) through the softmax Jacobian.
        let upstream: Vec<f64> = p
            .iter()
            .zip(&q)
            .map(|(pi, qi)| -(pi * (qi - expect)) / n)
            .collect();
        let (g, _) = backward(policy_spec, policy_params, &acts, &upstream)?;
        grad.add_scaled(&g, 1.0);
    }
    Ok((loss, grad))
}

/// Worst-attack policy loss, continuous form:
/// `−(1/N) Σ_t Q̲_φ(s_t, μ_θ(s_t))`, gradient flowing into θ through the
/// action argument of the frozen critic.
pub fn wst_policy_loss_continuous(
    policy_spec: &NetSpec,
    policy_params: &ParamVector,
    critic_spec: &NetSpec,
    critic_params: &ParamVector,
    states: &[Vec<f64>],
) -> Result<(f64, GradVector)> {
    if states.is_empty() {
        return Err(CoreError::Config("need at least one state".into()));
    }
    let n = states.len() as f64;
    let mut loss = 0.0;
    let mut grad = GradVector::zeros(policy_spec);
    for s in states {
        let acts = forward_cached(policy_spec, policy_params, s)?;
        let mu = acts.output();
        let mut x = s.clone();
        x.extend_from_slice(mu);
        let q = forward(critic_spec, critic_params, &x)?[0];
        loss -= q / n;
        // ∂(−q)/∂μ = −∇_a Q̲, then backpropagated through the policy.
        let gq = grad_input(critic_spec, critic_params, &x, &[1.0])?;
        let upstream: Vec<f64> = gq[s.len()..].iter().map(|&g| -g / n).collect();
        let (g, _) = backward(policy_spec, policy_params, &acts, &upstream)?;
        grad.add_scaled(&g, 1.0);
    }
    Ok((loss, grad))
}

/// State-importance weight of a natural action-value row: max − min.
/// Invariant to shifting all values, linear under positive scaling.
pub fn state_importance(q_natural_per_action: &[f64]) -> f64 {
    let max = q_natural_per_action.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let min = q_natural_per_action.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if q_natural_per_action.is_empty() {
        return 0.0;
    }
    max - min
}

/// PPO-style state importance for discrete actions:
/// `v_s − min_a Q̲_φ(s, a)` over all actions.
pub fn state_importance_ppo_discrete(
    v_s: f64,
    critic_spec: &NetSpec,
    critic_params: &ParamVector,
    s: &[f64],
) -> Result<f64> {
    let q = forward(critic_spec, critic_params, s)?;
    let min = q.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    Ok(v_s - min)
}

/// PPO-style state importance for continuous actions: the critic is
/// minimized over the full environment action box.
pub fn state_importance_ppo_continuous(
    v_s: f64,
    critic_spec: &NetSpec,
    critic_params: &ParamVector,
    s: &[f64],
    act_low: &[f64],
    act_high: &[f64],
    box_min: BoxMin,
) -> Result<f64> {
    let full_box = ContinuousAdvBox { low: act_low.to_vec(), high: act_high.to_vec() };
    let (_, min_q) =
        min_q_over_box(critic_spec, critic_params, s, &full_box, box_min.steps, box_min.step_size)?;
    Ok(v_s - min_q)
}

/// Divides weights by the batch maximum so the largest becomes 1; negative
/// weights floor at zero first, and an all-zero batch stays all-zero.
pub fn normalize_weights(weights: &mut [f64]) {
    let mut max = 0.0_f64;
    for w in weights.iter_mut() {
        if *w < 0.0 {
            *w = 0.0;
        }
        max = max.max(*w);
    }
    if max > 0.0 {
        for w in weights.iter_mut() {
            *w /= max;
        }
    }
}

/// Divergence used by the smoothness regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistKind {
    /// KL(π(s) ‖ π(s̃)) between the softmax distributions of a logits head.
    Kl,
    /// Squared L2 distance between the mean outputs of a gaussian head.
    SqL2,
}

/// Settings for [`reg_loss`].
#[derive(Debug, Clone, Copy)]
pub struct RegConfig {
    /// ℓ∞ radius of the inner search ball.
    pub eps: f64,
    /// Projected-ascent steps for the inner maximization.
    pub inner_steps: usize,
    /// Divergence between the clean and perturbed policy outputs.
    pub dist: DistKind,
    /// Add gaussian noise to each ascent step (Langevin-style exploration).
    pub noise: bool,
}

/// Divergence value plus upstream gradients for both policy outputs.
/// `g_clean` is d(Dist)/d(output at s), `g_pert` is d(Dist)/d(output at s̃).
pub(crate) fn dist_and_grads(dist: DistKind, clean: &[f64], pert: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    match dist {
        DistKind::Kl => {
            let p = softmax(clean);
            let lp = log_softmax(clean);
            let lq = log_softmax(pert);
            let q = softmax(pert);
            let kl: f64 = p.iter().zip(lp.iter().zip(&lq)).map(|(pi, (lpi, lqi))| pi * (lpi - lqi)).sum();
            // Through the softmax Jacobians:
            //   d/dz  = p ⊙ (ln p − ln q) − p·KL
            //   d/dz̃ = q − p
            let g_clean: Vec<f64> = p
                .iter()
                .zip(lp.iter().zip(&lq))
                .map(|(pi, (lpi, lqi))| pi * (lpi - lqi) - pi * kl)
                .collect();
            let g_pert: Vec<f64> = q.iter().zip(&p).map(|(qi, pi)| qi - pi).collect();
            (kl, g_clean, g_pert)
        }
        DistKind::SqL2 => {
            let d: Vec<f64> = clean.iter().zip(pert).map(|(c, s)| c - s).collect();
            let val: f64 = d.iter().map(|x| x * x).sum();
            let g_clean: Vec<f64> = d.iter().map(|x| 2.0 * x).collect();
            let g_pert: Vec<f64> = d.iter().map(|x| -2.0 * x).collect();
            (val, g_clean, g_pert)
        }
    }
}

/// Finds `argmax_{s̃ ∈ Bε(s)} Dist(π(s), π(s̃))` by projected sign-gradient
/// ascent. The divergence has a stationary minimum at s̃ = s, so the ascent
/// starts from the better of the two diagonal ball corners (or the warm
/// start, when given) and keeps the best iterate seen.
fn inner_max_perturbation(
    policy_spec: &NetSpec,
    policy_params: &ParamVector,
    s: &[f64],
    clean: &[f64],
    cfg: &RegConfig,
    warm_start: Option<&[f64]>,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<(Vec<f64>, f64)> {
    let clamp = |x: &mut Vec<f64>| {
        for (xi, si) in x.iter_mut().zip(s) {
            *xi = xi.clamp(si - cfg.eps, si + cfg.eps);
        }
    };
    let eval = |x: &[f64]| -> Result<f64> {
        let out = forward(policy_spec, policy_params, x)?;
        Ok(dist_and_grads(cfg.dist, clean, &out).0)
    };
    if cfg.eps == 0.0 {
        return Ok((s.to_vec(), 0.0));
    }
    // Candidate starts: both diagonal corners, plus the warm start projected
    // into the current ball.
    let mut candidates: Vec<Vec<f64>> = vec![
        s.iter().map(|si| si + cfg.eps).collect(),
        s.iter().map(|si| si - cfg.eps).collect(),
    ];
    if let Some(w) = warm_start {
        let mut w = w.to_vec();
        clamp(&mut w);
        candidates.push(w);
    }
    let mut best_x = s.to_vec();
    let mut best_v = 0.0; // Dist(π(s), π(s)) = 0
    for c in &candidates {
        let v = eval(c)?;
        if v > best_v {
            best_v = v;
            best_x = c.clone();
        }
    }
    let mut x = best_x.clone();
    let step = cfg.eps / 4.0;
    for _ in 0..cfg.inner_steps {
        let out = forward(policy_spec, policy_params, &x)?;
        let (_, _, g_pert) = dist_and_grads(cfg.dist, clean, &out);
        let gx = grad_input(policy_spec, policy_params, &x, &g_pert)?;
        for (xi, gi) in x.iter_mut().zip(&gx) {
            *xi += step * gi.signum();
        }
        if cfg.noise {
            let r = rng
                .as_deref_mut()
                .ok_or_else(|| CoreError::Config("noise-perturbed ascent needs an RNG".into()))?;
            for xi in x.iter_mut() {
                *xi += crate::rng::normal(r) * step * 0.5;
            }
        }
        clamp(&mut x);
        let v = eval(&x)?;
        if v > best_v {
            best_v = v;
            best_x = x.clone();
        }
    }
    Ok((best_x, best_v))
}

/// Smoothness divergence at explicitly given perturbed states:
/// `(1/N) Σ w_t · Dist(π_θ(s_t), π_θ(s̃_t))`, with the exact gradient in θ
/// flowing through both evaluations. This is the differentiable core of
/// [`reg_loss`], split out so the perturbed states can be held fixed.
pub fn reg_loss_at(
    policy_spec: &NetSpec,
    policy_params: &ParamVector,
    states: &[Vec<f64>],
    perturbed: &[Vec<f64>],
    weights: &[f64],
    dist: DistKind,
) -> Result<(f64, GradVector)> {
    if states.is_empty() {
        return Err(CoreError::Config("need at least one state".into()));
    }
    if perturbed.len() != states.len() || weights.len() != states.len() {
        return Err(CoreError::Config("states, perturbed states, and weights must align".into()));
    }
    let n = states.len() as f64;
    let mut loss = 0.0;
    let mut grad = GradVector::zeros(policy_spec);
    for ((s, st), &w) in states.iter().zip(perturbed).zip(weights) {
        if w == 0.0 {
            continue;
        }
        let acts_clean = forward_cached(policy_spec, policy_params, s)?;
        let acts_pert = forward_cached(policy_spec, policy_params, st)?;
        let (val, g_clean, g_pert) = dist_and_grads(dist, acts_clean.output(), acts_pert.output());
        loss += w * val / n;
        let up_clean: Vec<f64> = g_clean.iter().map(|g| w * g / n).collect();
        let up_pert: Vec<f64> = g_pert.iter().map(|g| w * g / n).collect();
        let (gc, _) = backward(policy_spec, policy_params, &acts_clean, &up_clean)?;
        grad.add_scaled(&gc, 1.0);
        let (gp, _) = backward(policy_spec, policy_params, &acts_pert, &up_pert)?;
        grad.add_scaled(&gp, 1.0);
    }
    Ok((loss, grad))
}

/// Importance-weighted smoothness regularization: solves the inner
/// maximization per state, freezes the maximizers, and returns
/// (loss, gradient in θ, the maximizers for warm-starting).
///
/// States with zero weight contribute nothing and are skipped entirely.
#[allow(clippy::too_many_arguments)]
pub fn reg_loss(
    policy_spec: &NetSpec,
    policy_params: &ParamVector,
    states: &[Vec<f64>],
    weights: &[f64],
    cfg: &RegConfig,
    warm_starts: Option<&[Vec<f64>]>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, GradVector, Vec<Vec<f64>>)> {
    if states.is_empty() {
        return Err(CoreError::Config("need at least one state".into()));
    }
    if weights.len() != states.len() {
        return Err(CoreError::Config("weights must match states".into()));
    }
    if let Some(w) = warm_starts {
        if w.len() != states.len() {
            return Err(CoreError::Config("warm starts must match states".into()));
        }
    }
    let mut perturbed = Vec::with_capacity(states.len());
    for (i, s) in states.iter().enumerate() {
        if weights[i] == 0.0 {
            // Unweighted states never influence loss or gradient.
            perturbed.push(s.clone());
            continue;
        }
        let clean = forward(policy_spec, policy_params, s)?;
        let ws = warm_starts.map(|w| w[i].as_slice());
        let (best, _) =
            inner_max_perturbation(policy_spec, policy_params, s, &clean, cfg, ws, &mut rng)?;
        perturbed.push(best);
    }
    let (loss, grad) = reg_loss_at(policy_spec, policy_params, states, &perturbed, weights, cfg.dist)?;
    Ok((loss, grad, perturbed))
}

/// The combined policy objective: `L_rl + κ_wst·L_wst + κ_reg·L_reg`.
/// (The critic trains on the estimation loss alone.)
pub fn combined_policy_loss(l_rl: f64, l_wst: f64, l_reg: f64, weights: &LossWeights) -> f64 {
    l_rl + weights.kappa_wst * l_wst + weights.kappa_reg * l_reg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::build_chain2;
    use crate::net::{init_params, Activation, InitScheme, OutputHead};
    use crate::tabular::{
        adv_action_set, policy_evaluation, worst_attack_fixed_point, DEFAULT_MAX_ITER, DEFAULT_TOL,
    };

    fn onehot(i: usize, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    /// Linear table-lookup critic on one-hot inputs: out[a] = table[s][a].
    fn table_critic(table: &[Vec<f64>]) -> (NetSpec, ParamVector) {
        let n_states = table.len();
        let n_actions = table[0].len();
        let spec = NetSpec::new(vec![n_states, n_actions], Activation::Relu, OutputHead::Linear).unwrap();
        let mut params = ParamVector::zeros(&spec);
        for a in 0..n_actions {
            for s in 0..n_states {
                params.flat[a * n_states + s] = table[s][a];
            }
        }
        (spec, params)
    }

    #[test]
    fn est_loss_vanishes_at_the_tabular_fixed_point() {
        let (mdp, pert, policy) = build_chain2();
        let q = worst_attack_fixed_point(&mdp, &policy, &pert, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let (spec, params) = table_critic(&q.values);
        // Every transition of the chain, with exact rewards and successors.
        let mut transitions = Vec::new();
        let mut sets = Vec::new();
        for s in 0..2usize {
            for a in 0..2usize {
                let s_next = mdp.transition[s][a].iter().position(|&p| p == 1.0).unwrap();
                transitions.push(Transition {
                    s: onehot(s, 2),
                    a,
                    r: mdp.reward[s][a],
                    s_next: onehot(s_next, 2),
                    done: false,
                });
                sets.push(adv_action_set(&policy, &pert, s_next));
            }
        }
        let batch = Batch::new(transitions, None).unwrap();
        let (loss, _) = est_loss_discrete(
            &spec,
            &params,
            &batch,
            &DiscreteAdvSource::ExplicitSets(&sets),
            mdp.gamma,
        )
        .unwrap();
        assert!(loss.abs() < 1e-10, "loss {loss}");
    }

    #[test]
    fn est_loss_gamma_zero_is_reward_regression() {
        let spec = NetSpec::new(vec![2, 2], Activation::Relu, OutputHead::Linear).unwrap();
        let params = ParamVector::zeros(&spec);
        let batch = Batch::new(
            vec![
                Transition { s: onehot(0, 2), a: 0, r: 0.7, s_next: onehot(1, 2), done: false },
                Transition { s: onehot(1, 2), a: 1, r: -0.3, s_next: onehot(0, 2), done: false },
            ],
            None,
        )
        .unwrap();
        let sets = vec![vec![0, 1], vec![0, 1]];
        let (loss, _) = est_loss_discrete(&spec, &params, &batch, &DiscreteAdvSource::ExplicitSets(&sets), 0.0).unwrap();
        // Zero critic vs targets (0.7, −0.3): mean of squares.
        let want = (0.7f64.powi(2) + 0.3f64.powi(2)) / 2.0;
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn single_transition_regression_matches_closed_form_and_fd() {
        let spec = NetSpec::new(vec![2, 4, 2], Activation::Tanh, OutputHead::Linear).unwrap();
        let mut params = init_params(&spec, InitScheme::Xavier, 5);
        let batch = Batch::new(
            vec![Transition { s: vec![0.3, -0.8], a: 1, r: 0.5, s_next: vec![0.0, 0.0], done: true }],
            None,
        )
        .unwrap();
        // done = true, so the target is exactly r.
        let targets = est_targets_discrete(&spec, &params, &batch, &DiscreteAdvSource::ExplicitSets(&[vec![0]]), 0.9).unwrap();
        assert_eq!(targets, vec![0.5]);
        let (loss, grad) = critic_regression_discrete(&spec, &params, &batch, &targets).unwrap();
        let c = forward(&spec, &params, &batch.transitions[0].s).unwrap()[1];
        assert!((loss - (c - 0.5) * (c - 0.5)).abs() < 1e-12);
        // Finite-difference spot check.
        let h = 1e-6;
        for i in (0..spec.n_params()).step_by(5) {
            let orig = params.flat[i];
            params.flat[i] = orig + h;
            let (up, _) = critic_regression_discrete(&spec, &params, &batch, &targets).unwrap();
            params.flat[i] = orig - h;
            let (dn, _) = critic_regression_discrete(&spec, &params, &batch, &targets).unwrap();
            params.flat[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            let denom = fd.abs().max(grad.flat[i].abs()).max(1e-4);
            assert!((fd - grad.flat[i]).abs() / denom < 1e-4, "param {i}: {fd} vs {}", grad.flat[i]);
        }
    }

    #[test]
    fn wst_policy_loss_uniform_two_actions() {
        // Zero-logit policy is uniform; critic returns (0, 1) per state.
        let pspec = NetSpec::new(vec![1, 2], Activation::Relu, OutputHead::SoftmaxLogits).unwrap();
        let pparams = ParamVector::zeros(&pspec);
        let cspec = NetSpec::new(vec![1, 2], Activation::Relu, OutputHead::Linear).unwrap();
        let cparams = ParamVector { flat: vec![0.0, 0.0, 0.0, 1.0] };
        let (loss, _) = wst_policy_loss_discrete(&pspec, &pparams, &cspec, &cparams, &[vec![0.4]]).unwrap();
        assert!((loss - -0.5).abs() < 1e-12);
    }

    #[test]
    fn constant_critic_gives_zero_policy_gradient() {
        let pspec = NetSpec::new(vec![2, 6, 3], Activation::Tanh, OutputHead::SoftmaxLogits).unwrap();
        let pparams = init_params(&pspec, InitScheme::Xavier, 1);
        let cspec = NetSpec::new(vec![2, 3], Activation::Relu, OutputHead::Linear).unwrap();
        // Critic ≡ 2.5 for every action.
        let cparams = ParamVector { flat: vec![0.0; 6].into_iter().chain([2.5, 2.5, 2.5]).collect() };
        let (loss, grad) =
            wst_policy_loss_discrete(&pspec, &pparams, &cspec, &cparams, &[vec![0.1, 0.2], vec![-1.0, 0.5]]).unwrap();
        assert!((loss - -2.5).abs() < 1e-12);
        assert!(grad.flat.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn policy_loss_gradients_match_fd() {
        let h = 1e-6;
        // Discrete form.
        let pspec = NetSpec::new(vec![2, 5, 3], Activation::Tanh, OutputHead::SoftmaxLogits).unwrap();
        let mut pparams = init_params(&pspec, InitScheme::Xavier, 7);
        let cspec = NetSpec::new(vec![2, 6, 3], Activation::Relu, OutputHead::Linear).unwrap();
        let cparams = init_params(&cspec, InitScheme::He, 8);
        let states = vec![vec![0.2, -0.4], vec![1.0, 0.3]];
        let (_, grad) = wst_policy_loss_discrete(&pspec, &pparams, &cspec, &cparams, &states).unwrap();
        for i in (0..pspec.n_params()).step_by(7) {
            let orig = pparams.flat[i];
            pparams.flat[i] = orig + h;
            let (up, _) = wst_policy_loss_discrete(&pspec, &pparams, &cspec, &cparams, &states).unwrap();
            pparams.flat[i] = orig - h;
            let (dn, _) = wst_policy_loss_discrete(&pspec, &pparams, &cspec, &cparams, &states).unwrap();
            pparams.flat[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            let denom = fd.abs().max(grad.flat[i].abs()).max(1e-4);
            assert!((fd - grad.flat[i]).abs() / denom < 1e-4);
        }
        // Continuous form: policy 2->2 mean, critic over (s, a) 4->1.
        let pspec = NetSpec::new(vec![2, 5, 2], Activation::Tanh, OutputHead::GaussianMean).unwrap();
        let mut pparams = init_params(&pspec, InitScheme::Xavier, 9);
        let cspec = NetSpec::new(vec![4, 6, 1], Activation::Tanh, OutputHead::Linear).unwrap();
        let cparams = init_params(&cspec, InitScheme::Xavier, 10);
        let (_, grad) = wst_policy_loss_continuous(&pspec, &pparams, &cspec, &cparams, &states).unwrap();
        for i in (0..pspec.n_params()).step_by(7) {
            let orig = pparams.flat[i];
            pparams.flat[i] = orig + h;
            let (up, _) = wst_policy_loss_continuous(&pspec, &pparams, &cspec, &cparams, &states).unwrap();
            pparams.flat[i] = orig - h;
            let (dn, _) = wst_policy_loss_continuous(&pspec, &pparams, &cspec, &cparams, &states).unwrap();
            pparams.flat[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            let denom = fd.abs().max(grad.flat[i].abs()).max(1e-4);
            assert!((fd - grad.flat[i]).abs() / denom < 1e-4);
        }
    }

    #[test]
    fn state_importance_arithmetic() {
        assert_eq!(state_importance(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(state_importance(&[1.5, 1.5, 1.5]), 0.0);
        // Shift invariance and positive scaling.
        assert_eq!(state_importance(&[13.0, 11.0, 12.0]), 2.0);
        assert_eq!(state_importance(&[6.0, 2.0, 4.0]), 4.0);
    }

    #[test]
    fn chain2_importance_weight_at_the_rewarding_state() {
        let (mdp, _, policy) = build_chain2();
        let q = policy_evaluation(&mdp, &policy).unwrap();
        // Q(s1, stay) = 2, Q(s1, switch) = 1 + 0.5·Vπ(s0) = 1.5.
        assert!((state_importance(&q.values[1]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ppo_importance_forms() {
        let cspec = NetSpec::new(vec![1, 2], Activation::Relu, OutputHead::Linear).unwrap();
        let cparams = ParamVector { flat: vec![0.0, 0.0, 1.0, -1.0] };
        // Critic outputs (1, −1) regardless of s.
        let w = state_importance_ppo_discrete(1.0, &cspec, &cparams, &[0.0]).unwrap();
        assert!((w - 2.0).abs() < 1e-12);
        // Constant critic equal to v_s → 0.
        let cparams = ParamVector { flat: vec![0.0, 0.0, 0.75, 0.75] };
        let w = state_importance_ppo_discrete(0.75, &cspec, &cparams, &[0.0]).unwrap();
        assert!(w.abs() < 1e-12);
    }

    #[test]
    fn weight_normalization_behaviour() {
        let mut w = vec![2.0, 1.0, 0.0];
        normalize_weights(&mut w);
        assert_eq!(w, vec![1.0, 0.5, 0.0]);
        let mut z = vec![0.0, 0.0];
        normalize_weights(&mut z);
        assert_eq!(z, vec![0.0, 0.0]);
        let mut neg = vec![-1.0, 4.0];
        normalize_weights(&mut neg);
        assert_eq!(neg, vec![0.0, 1.0]);
    }

    #[test]
    fn reg_loss_trivial_zeros() {
        let spec = NetSpec::new(vec![2, 4, 3], Activation::Tanh, OutputHead::SoftmaxLogits).unwrap();
        let states = vec![vec![0.1, 0.2], vec![-0.5, 0.4]];
        let weights = vec![1.0, 0.5];
        // Constant (zero) network: divergence 0 everywhere.
        let zero_params = ParamVector::zeros(&spec);
        let cfg = RegConfig { eps: 0.3, inner_steps: 10, dist: DistKind::Kl, noise: false };
        let (loss, grad, _) = reg_loss(&spec, &zero_params, &states, &weights, &cfg, None, None).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.flat.iter().all(|&g| g.abs() < 1e-12));
        // eps = 0: the ball is a point.
        let params = init_params(&spec, InitScheme::Xavier, 3);
        let cfg0 = RegConfig { eps: 0.0, ..cfg };
        let (loss, grad, _) = reg_loss(&spec, &params, &states, &weights, &cfg0, None, None).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.flat.iter().all(|&g| g.abs() < 1e-12));
        // All-zero weights.
        let (loss, grad, _) = reg_loss(&spec, &params, &states, &[0.0, 0.0], &cfg, None, None).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.flat.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn reg_loss_is_positive_when_the_policy_varies() {
        let spec = NetSpec::new(vec![2, 8, 3], Activation::Tanh, OutputHead::SoftmaxLogits).unwrap();
        let params = init_params(&spec, InitScheme::Xavier, 12);
        let states = vec![vec![0.3, -0.2]];
        let cfg = RegConfig { eps: 0.5, inner_steps: 10, dist: DistKind::Kl, noise: false };
        let (loss, _, maximizers) = reg_loss(&spec, &params, &states, &[1.0], &cfg, None, None).unwrap();
        assert!(loss > 0.0, "non-constant policy should have positive divergence, got {loss}");
        // The maximizer stays inside the ball.
        for (m, s) in maximizers[0].iter().zip(&states[0]) {
            assert!((m - s).abs() <= cfg.eps + 1e-12);
        }
    }

    #[test]
    fn reg_loss_at_gradient_matches_fd_both_dists() {
        let h = 1e-6;
        for (dist, head) in [(DistKind::Kl, OutputHead::SoftmaxLogits), (DistKind::SqL2, OutputHead::GaussianMean)] {
            let spec = NetSpec::new(vec![2, 5, 3], Activation::Tanh, head).unwrap();
            let mut params = init_params(&spec, InitScheme::Xavier, 21);
            let states = vec![vec![0.2, 0.1], vec![-0.3, 0.6]];
            let perturbed = vec![vec![0.35, -0.05], vec![-0.18, 0.72]];
            let weights = vec![1.0, 0.4];
            let (_, grad) = reg_loss_at(&spec, &params, &states, &perturbed, &weights, dist).unwrap();
            for i in (0..spec.n_params()).step_by(6) {
                let orig = params.flat[i];
                params.flat[i] = orig + h;
                let (up, _) = reg_loss_at(&spec, &params, &states, &perturbed, &weights, dist).unwrap();
                params.flat[i] = orig - h;
                let (dn, _) = reg_loss_at(&spec, &params, &states, &perturbed, &weights, dist).unwrap();
                params.flat[i] = orig;
                let fd = (up - dn) / (2.0 * h);
                let denom = fd.abs().max(grad.flat[i].abs()).max(1e-4);
                assert!((fd - grad.flat[i]).abs() / denom < 1e-4, "{dist:?} param {i}: {fd} vs {}", grad.flat[i]);
            }
        }
    }

    #[test]
    fn combined_loss_is_the_weighted_sum() {
        let w = LossWeights::new(0.8, 0.1).unwrap();
        assert_eq!(combined_policy_loss(1.0, 2.0, 3.0, &w), 1.0 + 0.8 * 2.0 + 0.1 * 3.0);
        let zero = LossWeights::new(0.0, 0.0).unwrap();
        assert_eq!(combined_policy_loss(1.5, 99.0, -7.0, &zero), 1.5);
        assert!(LossWeights::new(-0.1, 0.0).is_err());
    }

    #[test]
    fn batch_validation() {
        let t = Transition { s: vec![0.0], a: 0usize, r: 0.0, s_next: vec![0.0], done: false };
        assert!(Batch::<usize>::new(vec![], None).is_err());
        assert!(Batch::new(vec![t.clone()], Some(vec![1.0, 2.0])).is_err());
        let bad_dim = Transition { s: vec![0.0, 1.0], ..t.clone() };
        assert!(Batch::new(vec![t, bad_dim], None).is_err());
    }
}
