//! Off-policy evaluation on logged test admissions: the per-step weighted
//! importance sampling estimator, behaviour and baseline policies, and the
//! order-count, information-gain and time-to-treatment metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{InterventionCategory, Lab};
use crate::fqi::{apply_budget_observed, FqiError, PolicySet};
use crate::forecast::ForecastGrid;
use crate::mdp::{
    step_reward, ActionVector, AdmissionSteps, RewardContext, RewardVector, StateVector, Transition,
    N_ACTIONS, N_LABS, N_OBJECTIVES,
};
use crate::scalar::pairwise_sum;
use crate::seeding::stage_seed;
use crate::trees::{fit_classifier, floor_probabilities, Ensemble, Matrix, TreeError, TreeParams};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum OpeError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("empty training set")]
    Empty,
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Policy(#[from] FqiError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Probability of flipping each deterministic per-lab decision.
    pub smoothing: f64,
    pub rho_clip: f64,
    pub p_min: f64,
    pub gamma_wis: f64,
    pub random_trials: usize,
    /// Fixed order probabilities of the random baselines; the empirical
    /// order rate is always added.
    pub random_probabilities: Vec<f64>,
    pub window_hours: f64,
    pub behaviour_trees: TreeParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            smoothing: 0.05,
            rho_clip: 1e3,
            p_min: 1e-3,
            gamma_wis: 1.0,
            random_trials: 10,
            random_probabilities: vec![0.01, 0.5],
            window_hours: 48.0,
            behaviour_trees: TreeParams::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), OpeError> {
        if !(self.smoothing > 0.0 && self.smoothing < 0.5) {
            return Err(OpeError::Argument(format!("smoothing {} not in (0, 0.5)", self.smoothing)));
        }
        if !(self.rho_clip > 0.0) || !(self.p_min > 0.0 && self.p_min * N_ACTIONS as f64 <= 1.0) {
            return Err(OpeError::Argument("rho_clip and p_min must be positive, p_min ≤ 1/16".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma_wis) || !(self.window_hours > 0.0) {
            return Err(OpeError::Argument("gamma_wis in [0, 1] and a positive window required".into()));
        }
        if self.random_probabilities.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(OpeError::Argument("random order probabilities must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

// ── Trajectories ────────────────────────────────────────────────────────

/// One logged admission as decision steps `t = 0..LOS-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<F> {
    pub admission_id: String,
    pub states: Vec<StateVector<F>>,
    pub actions: Vec<ActionVector>,
    /// Logged joint reward of each step.
    pub rewards: Vec<RewardVector<F>>,
    /// Reward of each step had only the lab's own logged decision been made.
    pub lab_rewards: Vec<[RewardVector<F>; N_LABS]>,
    /// Onset times of interventions.
    pub onsets: Vec<(InterventionCategory, f64)>,
}

impl<F: Scalar> Trajectory<F> {
    pub fn from_steps(steps: &AdmissionSteps<F>, onsets: Vec<(InterventionCategory, f64)>, ctx: &RewardContext<F>) -> Self {
        let n = steps.states.len().saturating_sub(1);
        let mut rewards = Vec::with_capacity(n);
        let mut lab_rewards = Vec::with_capacity(n);
        for t in 0..n {
            let (s, s1, a) = (&steps.states[t], &steps.states[t + 1], steps.actions[t]);
            rewards.push(step_reward(s, s1, a, &steps.initiated[t], ctx));
            lab_rewards.push(std::array::from_fn(|l| {
                let lab = Lab::ALL[l];
                let own = if a.orders(lab) { ActionVector::single(lab) } else { ActionVector::ZERO };
                step_reward(s, s1, own, &steps.initiated[t], ctx)
            }));
        }
        Trajectory {
            admission_id: steps.admission_id.clone(),
            states: steps.states[..n].to_vec(),
            actions: steps.actions[..n].to_vec(),
            rewards,
            lab_rewards,
            onsets,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn clinician_orders(&self, lab: Lab) -> Vec<bool> {
        self.actions.iter().map(|a| a.orders(lab)).collect()
    }
}

// ── Policies ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyTag {
    Behaviour,
    MoFqi,
    Random { p: f64 },
}

impl PolicyTag {
    pub fn label(&self) -> String {
        match self {
            PolicyTag::Behaviour => "behaviour".into(),
            PolicyTag::MoFqi => "mo_fqi".into(),
            PolicyTag::Random { p } => format!("random({p})"),
        }
    }
}

/// Joint action probabilities along a trajectory.
pub trait StochasticPolicy<F: Scalar>: Sync {
    fn tag(&self) -> PolicyTag;
    fn trajectory_probs(&self, trajectory: &Trajectory<F>) -> Result<Vec<[F; N_ACTIONS]>, OpeError>;
}

/// Product of independent per-lab order probabilities.
pub fn product_probs<F: Scalar>(p_order: &[F; N_LABS]) -> [F; N_ACTIONS] {
    std::array::from_fn(|a| {
        let a = ActionVector::from_index(a);
        Lab::ALL.iter().fold(F::one(), |acc, &l| {
            let p = p_order[l.index()];
            acc * if a.orders(l) { p } else { F::one() - p }
        })
    })
}

/// Probability that `lab` takes `ordered`, under a joint distribution.
pub fn marginal<F: Scalar>(probs: &[F; N_ACTIONS], lab: Lab, ordered: bool) -> F {
    ActionVector::all()
        .filter(|a| a.orders(lab) == ordered)
        .fold(F::zero(), |acc, a| acc + probs[a.index()])
}

/// Classifier over the 16 joint actions fit on logged state-action pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviourPolicy<F> {
    pub model: Ensemble<F>,
    pub p_min: F,
}

impl<F: Scalar> BehaviourPolicy<F> {
    pub fn probs(&self, state: &StateVector<F>) -> Result<[F; N_ACTIONS], OpeError> {
        let mut p = self.model.predict_proba_raw(&state.0)?;
        floor_probabilities(&mut p, self.p_min);
        let mut out = [F::zero(); N_ACTIONS];
        out.copy_from_slice(&p);
        Ok(out)
    }
}

impl<F: Scalar> StochasticPolicy<F> for BehaviourPolicy<F> {
    fn tag(&self) -> PolicyTag {
        PolicyTag::Behaviour
    }

    fn trajectory_probs(&self, trajectory: &Trajectory<F>) -> Result<Vec<[F; N_ACTIONS]>, OpeError> {
        trajectory.states.iter().map(|s| self.probs(s)).collect()
    }
}

pub fn fit_behaviour_policy<F: Scalar>(
    transitions: &[Transition<F>],
    params: &TreeParams,
    p_min: f64,
) -> Result<BehaviourPolicy<F>, OpeError> {
    if transitions.is_empty() {
        return Err(OpeError::Empty);
    }
    let x = Matrix::from_rows(&transitions.iter().map(|t| t.state.0).collect::<Vec<_>>())?;
    let labels: Vec<usize> = transitions.iter().map(|t| t.action.index()).collect();
    Ok(BehaviourPolicy {
        model: fit_classifier(&x, &labels, N_ACTIONS, params)?,
        p_min: F::of(p_min),
    })
}

/// Each lab ordered independently with probability `p`, at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomPolicy<F> {
    pub p: F,
}

pub fn make_random_policy<F: Scalar>(p: f64) -> Result<RandomPolicy<F>, OpeError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(OpeError::Argument(format!("order probability {p} not in (0, 1)")));
    }
    Ok(RandomPolicy { p: F::of(p) })
}

impl<F: Scalar> StochasticPolicy<F> for RandomPolicy<F> {
    fn tag(&self) -> PolicyTag {
        PolicyTag::Random { p: self.p.as_f64() }
    }

    fn trajectory_probs(&self, trajectory: &Trajectory<F>) -> Result<Vec<[F; N_ACTIONS]>, OpeError> {
        Ok(vec![product_probs(&[self.p; N_LABS]); trajectory.len()])
    }
}

/// Softened per-lab decisions: the decided bit with probability
/// `1 - smoothing`, the other with `smoothing`.
pub fn softened_probs<F: Scalar>(decision: &[bool; N_LABS], smoothing: F) -> [F; N_ACTIONS] {
    product_probs(&decision.map(|d| if d { F::one() - smoothing } else { smoothing }))
}

/// Per-step per-lab decisions of a deterministic policy along a trajectory.
pub trait DecisionRule<F: Scalar>: Sync {
    fn decisions(&self, trajectory: &Trajectory<F>) -> Result<Vec<[bool; N_LABS]>, OpeError>;
}

/// Per-lab policies plus the order budget, with observed orders
/// resetting the budget window.
pub struct BudgetedPolicy<'a, F> {
    pub policy: &'a PolicySet<F>,
}

impl<F: Scalar> BudgetedPolicy<'_, F> {
    /// Raw recommendations and the budget-augmented series, per lab.
    pub fn series(&self, trajectory: &Trajectory<F>) -> Result<[(Vec<bool>, Vec<bool>); N_LABS], OpeError> {
        let rec = self.policy.recommend_all(&trajectory.states)?;
        Ok(std::array::from_fn(|l| {
            let lab = Lab::ALL[l];
            let raw: Vec<bool> = rec.iter().map(|r| r[l]).collect();
            let marks = apply_budget_observed(&raw, &trajectory.clinician_orders(lab), self.policy.budget_hours);
            (raw, marks.iter().map(|m| m.is_order()).collect())
        }))
    }
}

impl<F: Scalar> DecisionRule<F> for BudgetedPolicy<'_, F> {
    fn decisions(&self, trajectory: &Trajectory<F>) -> Result<Vec<[bool; N_LABS]>, OpeError> {
        let series = self.series(trajectory)?;
        Ok((0..trajectory.len()).map(|t| std::array::from_fn(|l| series[l].1[t])).collect())
    }
}

/// Bernoulli(`p`) decisions drawn once per admission from a seeded stream.
pub struct RealizedRandom {
    pub p: f64,
    pub seed: u64,
}

impl<F: Scalar> DecisionRule<F> for RealizedRandom {
    fn decisions(&self, trajectory: &Trajectory<F>) -> Result<Vec<[bool; N_LABS]>, OpeError> {
        let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(self.seed, &trajectory.admission_id));
        Ok((0..trajectory.len())
            .map(|_| std::array::from_fn(|_| rng.gen::<f64>() < self.p))
            .collect())
    }
}

/// A decision rule made stochastic by [`softened_probs`].
pub struct Softened<R> {
    pub rule: R,
    pub smoothing: f64,
    pub tag: PolicyTag,
}

impl<F: Scalar, R: DecisionRule<F>> StochasticPolicy<F> for Softened<R> {
    fn tag(&self) -> PolicyTag {
        self.tag.clone()
    }

    fn trajectory_probs(&self, trajectory: &Trajectory<F>) -> Result<Vec<[F; N_ACTIONS]>, OpeError> {
        let s = F::of(self.smoothing);
        Ok(self
            .rule
            .decisions(trajectory)?
            .iter()
            .map(|d| softened_probs(d, s))
            .collect())
    }
}

pub fn as_stochastic<F: Scalar>(policy: &PolicySet<F>, smoothing: f64) -> Softened<BudgetedPolicy<'_, F>> {
    Softened {
        rule: BudgetedPolicy { policy },
        smoothing,
        tag: PolicyTag::MoFqi,
    }
}

// ── PS-WIS ──────────────────────────────────────────────────────────────

/// One step of a trajectory as seen by the estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedStep<F> {
    /// `π_e(a_t|s_t) / π_b(a_t|s_t)`.
    pub ratio: F,
    pub reward: RewardVector<F>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub values: [f64; N_OBJECTIVES],
    /// `(Σρ)² / Σρ²` at each time step.
    pub effective_sample_size: Vec<f64>,
    pub n_trajectories: usize,
    /// Steps where every weight vanished; they contribute nothing.
    pub zero_weight_steps: Vec<usize>,
    /// Number of cumulative ratios capped at the clip value.
    pub clipped: usize,
}

/// Per-step weighted importance sampling.
///
/// `ρ_t` is the product of ratios up to and including step `t`, capped at
/// `clip`. Trajectories that have ended keep their final weight and
/// contribute zero reward, so every step normalizes over all trajectories.
pub fn ps_wis<F: Scalar>(trajectories: &[Vec<WeightedStep<F>>], gamma: f64, clip: f64) -> ValueEstimate {
    let n = trajectories.len();
    let horizon = trajectories.iter().map(Vec::len).max().unwrap_or(0);
    let log_clip = clip.ln();
    // log cumulative weights, per trajectory and step
    let logs: Vec<Vec<f64>> = trajectories
        .par_iter()
        .map(|steps| {
            let mut acc = 0.0f64;
            steps
                .iter()
                .map(|s| {
                    acc += s.ratio.as_f64().ln();
                    acc
                })
                .collect()
        })
        .collect();
    let mut values = [0.0f64; N_OBJECTIVES];
    let mut ess = Vec::with_capacity(horizon);
    let mut zero_weight_steps = Vec::new();
    let mut clipped = 0usize;
    let mut discount = 1.0f64;
    let mut logw = vec![f64::NEG_INFINITY; n];
    let mut w = vec![0.0f64; n];
    let mut wr = vec![0.0f64; n];
    for t in 0..horizon {
        for (i, l) in logs.iter().enumerate() {
            let raw = l.get(t).or_else(|| l.last()).copied().unwrap_or(0.0);
            if raw > log_clip {
                clipped += usize::from(t < l.len());
            }
            logw[i] = raw.min(log_clip);
        }
        let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if top == f64::NEG_INFINITY || top.is_nan() {
            zero_weight_steps.push(t);
            ess.push(0.0);
            discount *= gamma;
            continue;
        }
        for (wi, lw) in w.iter_mut().zip(&logw) {
            *wi = (lw - top).exp();
        }
        let total = pairwise_sum(&w);
        let sq: Vec<f64> = w.iter().map(|v| v * v).collect();
        ess.push(total * total / pairwise_sum(&sq));
        for (d, v) in values.iter_mut().enumerate() {
            for (i, steps) in trajectories.iter().enumerate() {
                wr[i] = steps.get(t).map_or(0.0, |s| w[i] * s.reward.0[d].as_f64());
            }
            *v += discount * pairwise_sum(&wr) / total;
        }
        discount *= gamma;
    }
    ValueEstimate {
        values,
        effective_sample_size: ess,
        n_trajectories: n,
        zero_weight_steps,
        clipped,
    }
}

/// Which reward and which probabilities the estimator sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Joint actions and joint rewards.
    Joint,
    /// One lab's marginal decision and its own reward terms.
    Lab(Lab),
}

/// Builds estimator steps for `target` against `behaviour` probabilities.
pub fn weighted_steps<F: Scalar>(
    trajectory: &Trajectory<F>,
    target: &[[F; N_ACTIONS]],
    behaviour: &[[F; N_ACTIONS]],
    scope: Scope,
    p_min: F,
) -> Vec<WeightedStep<F>> {
    (0..trajectory.len())
        .map(|t| {
            let a = trajectory.actions[t];
            match scope {
                Scope::Joint => WeightedStep {
                    ratio: target[t][a.index()] / behaviour[t][a.index()].max(p_min),
                    reward: trajectory.rewards[t],
                },
                Scope::Lab(lab) => {
                    let bit = a.orders(lab);
                    let pb = marginal(&behaviour[t], lab, bit).max(p_min).min(F::one() - p_min);
                    WeightedStep {
                        ratio: marginal(&target[t], lab, bit) / pb,
                        reward: trajectory.lab_rewards[t][lab.index()],
                    }
                }
            }
        })
        .collect()
}

/// Runs PS-WIS for `target`, given precomputed behaviour probabilities.
pub fn evaluate_policy<F: Scalar>(
    trajectories: &[Trajectory<F>],
    behaviour_probs: &[Vec<[F; N_ACTIONS]>],
    target: &dyn StochasticPolicy<F>,
    scope: Scope,
    config: &EvalConfig,
) -> Result<ValueEstimate, OpeError> {
    let p_min = F::of(config.p_min);
    let steps = trajectories
        .par_iter()
        .zip(behaviour_probs)
        .map(|(traj, pb)| {
            let pe = target.trajectory_probs(traj)?;
            Ok(weighted_steps(traj, &pe, pb, scope, p_min))
        })
        .collect::<Result<Vec<_>, OpeError>>()?;
    Ok(ps_wis(&steps, config.gamma_wis, config.rho_clip))
}

/// Mean per-trajectory discounted return, per objective.
pub fn empirical_return<F: Scalar>(trajectories: &[Trajectory<F>], scope: Scope, gamma: f64) -> [f64; N_OBJECTIVES] {
    let n = trajectories.len().max(1) as f64;
    let mut out = [0.0; N_OBJECTIVES];
    for traj in trajectories {
        let mut g = 1.0;
        for t in 0..traj.len() {
            let r = match scope {
                Scope::Joint => traj.rewards[t],
                Scope::Lab(l) => traj.lab_rewards[t][l.index()],
            };
            for (o, v) in out.iter_mut().zip(r.0) {
                *o += g * v.as_f64() / n;
            }
            g *= gamma;
        }
    }
    out
}

// ── Clinical metrics ────────────────────────────────────────────────────

/// Keeps a recommendation only if it starts a run of consecutive
/// recommendations or a clinician order fell in the hour before it.
pub fn onset_filter(recommended: &[bool], clinician: &[bool]) -> Vec<bool> {
    (0..recommended.len())
        .map(|t| {
            recommended[t]
                && (t == 0 || !recommended[t - 1] || clinician.get(t - 1).copied().unwrap_or(false))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderReduction {
    pub lab: String,
    pub clinician: usize,
    pub recommended: usize,
    pub recommended_filtered: usize,
    /// `1 - filtered / clinician`, in percent; absent without clinician orders.
    pub reduction_percent: Option<f64>,
}

/// `series` holds, per admission, the clinician and recommended order series.
pub fn metric_order_reduction(lab: Lab, series: &[(Vec<bool>, Vec<bool>)]) -> OrderReduction {
    let count = |v: &[bool]| v.iter().filter(|&&b| b).count();
    let mut r = OrderReduction {
        lab: lab.name().to_string(),
        clinician: 0,
        recommended: 0,
        recommended_filtered: 0,
        reduction_percent: None,
    };
    for (clin, rec) in series {
        r.clinician += count(clin);
        r.recommended += count(rec);
        r.recommended_filtered += count(&onset_filter(rec, clin));
    }
    if r.clinician > 0 {
        r.reduction_percent = Some(100.0 * (1.0 - r.recommended_filtered as f64 / r.clinician as f64));
    }
    r
}

/// `|smoothed - filtered| / max(filtering σ, floor)` at each ordered hour.
/// Hours beyond either grid are skipped and counted.
pub fn metric_info_gain<F: Scalar>(
    orders: &[bool],
    smoothed: &ForecastGrid<F>,
    filtered: &ForecastGrid<F>,
    sigma_floor: F,
) -> (Vec<F>, usize) {
    let mut gains = Vec::new();
    let mut skipped = 0;
    for (h, _) in orders.iter().enumerate().filter(|(_, &o)| o) {
        match (smoothed.means.get(h), filtered.means.get(h), filtered.stds.get(h)) {
            (Some(&m_s), Some(&m_f), Some(&sd)) => gains.push((m_s - m_f).abs() / sd.max(sigma_floor)),
            _ => skipped += 1,
        }
    }
    (gains, skipped)
}

/// For each onset, hours back to the earliest order in `[onset - window, onset]`.
/// Returns the intervals and the number of onsets with no such order.
pub fn metric_time_to_treatment(order_hours: &[f64], onsets: &[f64], window: f64) -> (Vec<f64>, usize) {
    let mut intervals = Vec::new();
    let mut excluded = 0;
    for &onset in onsets {
        let earliest = order_hours
            .iter()
            .copied()
            .filter(|&h| h <= onset && h >= onset - window)
            .fold(f64::INFINITY, f64::min);
        if earliest.is_finite() {
            intervals.push(onset - earliest);
        } else {
            excluded += 1;
        }
    }
    (intervals, excluded)
}

/// Hour indices where `series` is set.
pub fn order_hours(series: &[bool]) -> Vec<f64> {
    series.iter().enumerate().filter(|(_, &b)| b).map(|(h, _)| h as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn step(ratio: f64, r: f64) -> WeightedStep<f64> {
        WeightedStep { ratio, reward: RewardVector([r, 0.0, 0.0, 0.0]) }
    }

    #[test]
    fn hand_evaluated_estimate() {
        let v = ps_wis(&[vec![step(1.0, 1.0)], vec![step(3.0, 3.0)]], 1.0, 1e3);
        assert_relative_eq!(v.values[0], 2.5, max_relative = 1e-12);
        assert_relative_eq!(v.effective_sample_size[0], 16.0 / 10.0, max_relative = 1e-12);
    }

    #[test]
    fn identical_policies_give_plain_average() {
        let trajs = vec![
            vec![step(1.0, 1.0), step(1.0, 2.0), step(1.0, 0.5)],
            vec![step(1.0, 4.0)],
            vec![step(1.0, 0.0), step(1.0, 3.0)],
        ];
        let v = ps_wis(&trajs, 1.0, 1e3);
        assert_relative_eq!(v.values[0], (3.5 + 4.0 + 3.0) / 3.0, max_relative = 1e-12);
        assert!(v.zero_weight_steps.is_empty());
    }

    #[test]
    fn clipping_and_zero_weights() {
        let v = ps_wis(&[vec![step(1e4, 1.0)], vec![step(1.0, 0.0)]], 1.0, 1e3);
        assert_eq!(v.clipped, 1);
        assert_relative_eq!(v.values[0], 1e3 / 1001.0, max_relative = 1e-12);
        let v = ps_wis(&[vec![step(0.0, 1.0)], vec![step(0.0, 2.0)]], 1.0, 1e3);
        assert_eq!(v.zero_weight_steps, vec![0]);
        assert_eq!(v.values[0], 0.0);
    }

    proptest! {
        #[test]
        fn common_scaling_at_a_step_is_harmless(
            ratios in proptest::collection::vec(0.1f64..5.0, 6),
            rewards in proptest::collection::vec(-2.0f64..2.0, 6),
            k in 0.1f64..10.0,
        ) {
            let trajs: Vec<Vec<WeightedStep<f64>>> = (0..3)
                .map(|i| vec![step(ratios[2 * i], rewards[2 * i]), step(ratios[2 * i + 1], rewards[2 * i + 1])])
                .collect();
            let scaled: Vec<Vec<WeightedStep<f64>>> = trajs
                .iter()
                .map(|t| vec![step(t[0].ratio * k, t[0].reward.0[0]), t[1]])
                .collect();
            let a = ps_wis(&trajs, 1.0, f64::INFINITY);
            let b = ps_wis(&scaled, 1.0, f64::INFINITY);
            prop_assert!((a.values[0] - b.values[0]).abs() < 1e-9);
            prop_assert!(a.effective_sample_size.iter().all(|e| *e > 0.0 && *e <= 3.0 + 1e-9));
        }

        #[test]
        fn onset_filter_never_adds(rec in proptest::collection::vec(any::<bool>(), 0..60), clin in proptest::collection::vec(any::<bool>(), 60)) {
            let f = onset_filter(&rec, &clin);
            prop_assert!(f.iter().filter(|&&b| b).count() <= rec.iter().filter(|&&b| b).count());
            prop_assert!(f.iter().zip(&rec).all(|(a, b)| !a || *b));
        }

        #[test]
        fn intervals_inside_window(orders in proptest::collection::vec(0.0f64..200.0, 0..20), onsets in proptest::collection::vec(0.0f64..200.0, 0..10)) {
            let (iv, excluded) = metric_time_to_treatment(&orders, &onsets, 48.0);
            prop_assert_eq!(iv.len() + excluded, onsets.len());
            prop_assert!(iv.iter().all(|d| (0.0..=48.0).contains(d)));
        }
    }

    #[test]
    fn random_policy_closed_forms() {
        let half = make_random_policy::<f64>(0.5).unwrap();
        let p = product_probs(&[half.p; 4]);
        assert!(p.iter().all(|v| (*v - 1.0 / 16.0).abs() < 1e-15));
        let low = product_probs(&[0.01f64; 4]);
        assert_relative_eq!(low[0], 0.99f64.powi(4), max_relative = 1e-12);
        assert_relative_eq!(low[0], 0.9606, epsilon = 1e-4);
        assert!(make_random_policy::<f64>(1.0).is_err());
        assert!(make_random_policy::<f64>(0.0).is_err());
    }

    #[test]
    fn softened_examples() {
        let p = softened_probs(&[true, false, false, false], 0.05f64);
        assert_relative_eq!(p[ActionVector::from_orders([true, false, false, false]).index()], 0.95f64.powi(4), max_relative = 1e-12);
        // the three unordered labs agreeing with their decisions
        let rest = marginal(&p, Lab::Bun, false) * marginal(&p, Lab::Wbc, false) * marginal(&p, Lab::Lactate, false);
        assert_relative_eq!(rest, 0.8574, epsilon = 1e-4);
        let min = p.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_relative_eq!(min, 0.05f64.powi(4), max_relative = 1e-12);
        assert_eq!(crate::trees::argmax(&p), 1);
        assert_relative_eq!(p.iter().sum::<f64>(), 1.0, max_relative = 1e-12);
        assert_relative_eq!(marginal(&p, Lab::Creatinine, true), 0.95, max_relative = 1e-12);
    }

    #[test]
    fn order_reduction_examples() {
        let rec = vec![false, false, false, true, true, true, false];
        let mut clin = vec![false; 7];
        clin[4] = true;
        assert_eq!(onset_filter(&rec, &clin), vec![false, false, false, true, false, true, false]);
        let same = vec![true, false, true, true];
        let r = metric_order_reduction(Lab::Wbc, &[(same.clone(), same.clone())]);
        assert_eq!(r.reduction_percent, Some(0.0));
        let r = metric_order_reduction(Lab::Wbc, &[(vec![false; 3], vec![true; 3])]);
        assert_eq!(r.reduction_percent, None);
        // counts quoted for WBC
        let pct: f64 = 100.0 * (1.0 - 12_358.0 / 22_172.0);
        assert!((pct - 44.27).abs() < 0.01);
    }

    #[test]
    fn alternating_orders_are_not_reduced() {
        let clin = vec![true, false, true, false, true];
        let r = metric_order_reduction(Lab::Bun, &[(clin.clone(), clin.clone())]);
        assert_eq!(r.reduction_percent, Some(0.0));
    }

    #[test]
    fn info_gain_examples() {
        let grid = |means: Vec<f64>, stds: Vec<f64>| ForecastGrid {
            trait_id: crate::cohort::TraitId::Wbc,
            grid_times: vec![0.0, 1.0, 2.0],
            means,
            stds,
        };
        let filt = grid(vec![10.0, 10.0, 10.0], vec![2.0, 2.0, 2.0]);
        let same = filt.clone();
        let (g, _) = metric_info_gain(&[false, true, false], &same, &filt, 0.1);
        assert_eq!(g, vec![0.0]);
        // a spike seen only with hindsight
        let smooth = grid(vec![10.0, 16.0, 10.0], vec![1.0, 1.0, 1.0]);
        let (g, skipped) = metric_info_gain(&[false, true, false, true], &smooth, &filt, 0.1);
        assert_eq!(g, vec![3.0]);
        assert_eq!(skipped, 1);
    }

    #[test]
    fn time_to_treatment_examples() {
        let (iv, _) = metric_time_to_treatment(&[10.0, 25.0], &[30.0], 48.0);
        assert_eq!(iv, vec![20.0]);
        let (iv, _) = metric_time_to_treatment(&[30.0], &[30.0], 48.0);
        assert_eq!(iv, vec![0.0]);
        let (iv, excluded) = metric_time_to_treatment(&[1.0], &[60.0], 48.0);
        assert!(iv.is_empty() && excluded == 1);
    }

    #[test]
    fn behaviour_policy_degenerate_and_calibrated() {
        let mut transitions = Vec::new();
        for i in 0..400 {
            let mut s = StateVector::<f64>::zeros();
            s.0[1] = (i % 37) as f64;
            s.0[2] = (i % 11) as f64;
            transitions.push(Transition {
                state: s,
                action: ActionVector::ZERO,
                next_state: s,
                reward: RewardVector::zero(),
                admission_id: "a".into(),
                time: i as u32,
                terminal: false,
            });
        }
        let params = TreeParams { n_trees: 10, ..Default::default() };
        let pb = fit_behaviour_policy(&transitions, &params, 1e-3).unwrap();
        let p = pb.probs(&transitions[0].state).unwrap();
        assert_relative_eq!(p[0], 1.0 - 15.0 * 1e-3, max_relative = 1e-12);

        for (i, t) in transitions.iter_mut().enumerate() {
            t.action = ActionVector::from_index((i * 7 + i / 5) % 16 * usize::from(i % 3 != 0));
        }
        let pb = fit_behaviour_policy(&transitions, &params, 1e-3).unwrap();
        let mut mean = [0.0; N_ACTIONS];
        let mut hist = [0.0; N_ACTIONS];
        for t in &transitions {
            let p = pb.probs(&t.state).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for a in 0..N_ACTIONS {
                mean[a] += p[a] / 400.0;
            }
            hist[t.action.index()] += 1.0 / 400.0;
        }
        for a in 0..N_ACTIONS {
            assert!((mean[a] - hist[a]).abs() < 0.05, "{a}: {} vs {}", mean[a], hist[a]);
        }
    }
}
