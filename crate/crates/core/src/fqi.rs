//! Multi-objective fitted Q-iteration with strict Pareto pruning, the
//! per-lab deterministic collapse, `ε_cost` calibration and the order budget.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::Lab;
use crate::mdp::{ActionVector, StateVector, Transition, N_ACTIONS, N_LABS, N_OBJECTIVES, STATE_DIM};
use crate::seeding::{derive_seed, stage_seed};
use crate::trees::{argmax, fit_classifier, fit_regressor, Ensemble, Matrix, TreeError, TreeParams};
use crate::Scalar;

/// Width of a Q-function input: the state followed by the four order bits.
pub const Q_INPUT_DIM: usize = STATE_DIM + N_LABS;

pub type QVector<F> = [F; N_OBJECTIVES];

#[derive(Debug, Error)]
pub enum FqiError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty transition dataset")]
    EmptyDataset,
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("policy format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ── Pareto pruning ──────────────────────────────────────────────────────

/// `a` is beaten by `b` in every component.
pub fn strictly_dominated<F: Scalar>(a: &QVector<F>, b: &QVector<F>) -> bool {
    a.iter().zip(b).all(|(x, y)| x < y)
}

/// Indices of the vectors no other vector strictly dominates, ascending.
///
/// Vectors are visited by decreasing component sum, so any dominator of a
/// vector is visited before it; since strict domination is transitive, it is
/// enough to compare against the vectors already retained.
pub fn pareto_front<F: Scalar>(q: &[QVector<F>]) -> Vec<usize> {
    let sum = |v: &QVector<F>| v.iter().fold(0.0, |acc, x| acc + x.as_f64());
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&a, &b| sum(&q[b]).total_cmp(&sum(&q[a])).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::with_capacity(q.len());
    for i in order {
        if !kept.iter().any(|&k| strictly_dominated(&q[i], &q[k])) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept
}

/// Nondominated actions of one state with their Q-vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct NondominatedSet<F> {
    pub actions: Vec<ActionVector>,
    pub q_vectors: Vec<QVector<F>>,
}

impl<F: Scalar> NondominatedSet<F> {
    pub fn from_q(q: &[QVector<F>; N_ACTIONS]) -> Self {
        let kept = pareto_front(q);
        NondominatedSet {
            actions: kept.iter().map(|&i| ActionVector::from_index(i)).collect(),
            q_vectors: kept.iter().map(|&i| q[i]).collect(),
        }
    }

    pub fn contains(&self, a: ActionVector) -> bool {
        self.actions.contains(&a)
    }
}

// ── Q-function ──────────────────────────────────────────────────────────

/// Vector-valued Q-function; `None` is the all-zero initial function.
#[derive(Debug, Clone, PartialEq)]
pub struct QFunction<F> {
    model: Option<Ensemble<F>>,
}

pub fn q_input<F: Scalar>(state: &StateVector<F>, action: ActionVector) -> [F; Q_INPUT_DIM] {
    let mut x = [F::zero(); Q_INPUT_DIM];
    x[..STATE_DIM].copy_from_slice(&state.0);
    x[STATE_DIM..].copy_from_slice(&action.features::<F>());
    x
}

impl<F: Scalar> QFunction<F> {
    pub fn zero() -> Self {
        QFunction { model: None }
    }

    pub fn from_model(model: Ensemble<F>) -> Result<Self, FqiError> {
        if model.input_dim() != Q_INPUT_DIM || model.output_dim() != N_OBJECTIVES {
            return Err(FqiError::Format("Q model has the wrong shape".into()));
        }
        Ok(QFunction { model: Some(model) })
    }

    pub fn model(&self) -> Option<&Ensemble<F>> {
        self.model.as_ref()
    }

    pub fn predict(&self, state: &StateVector<F>, action: ActionVector) -> QVector<F> {
        let mut out = [F::zero(); N_OBJECTIVES];
        if let Some(m) = &self.model {
            m.predict_into(&q_input(state, action), &mut out)
                .expect("Q input has the model's width");
        }
        out
    }

    pub fn predict_all(&self, state: &StateVector<F>) -> [QVector<F>; N_ACTIONS] {
        let mut out = [[F::zero(); N_OBJECTIVES]; N_ACTIONS];
        if self.model.is_some() {
            for a in ActionVector::all() {
                out[a.index()] = self.predict(state, a);
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_bytes(&mut out);
        out
    }

    fn write_bytes(&self, out: &mut Vec<u8>) {
        match &self.model {
            None => out.push(0),
            Some(m) => {
                out.push(1);
                m.write_bytes(out);
            }
        }
    }

    fn read_bytes(bytes: &[u8]) -> Result<(Self, usize), FqiError> {
        match bytes.first() {
            Some(0) => Ok((QFunction::zero(), 1)),
            Some(1) => {
                let (m, used) = Ensemble::read_bytes(&bytes[1..])?;
                Ok((QFunction::from_model(m)?, used + 1))
            }
            _ => Err(FqiError::Format("bad Q-function tag".into())),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FqiError> {
        let (q, used) = Self::read_bytes(bytes)?;
        if used != bytes.len() {
            return Err(FqiError::Format("trailing bytes after Q-function".into()));
        }
        Ok(q)
    }
}

// ── Training ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FqiConfig {
    pub gamma: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Per-objective slack of the collapse rule, before `ε_cost` tuning.
    pub epsilon: [f64; N_OBJECTIVES],
    pub q_trees: TreeParams,
    pub consistency_trees: TreeParams,
    /// Actions the consistency classifier gives at least this probability
    /// count as expressible.
    pub consistency_threshold: f64,
    pub policy_trees: TreeParams,
    pub budget_hours: usize,
    /// Relative tolerance of `ε_cost` calibration against the target order count.
    pub tuning_tolerance: f64,
    pub tuning_iterations: usize,
}

impl Default for FqiConfig {
    fn default() -> Self {
        FqiConfig {
            gamma: 0.9,
            iterations: 200,
            batch_size: 100_000,
            epsilon: [0.0; N_OBJECTIVES],
            q_trees: TreeParams::default(),
            consistency_trees: TreeParams::default(),
            consistency_threshold: 0.05,
            policy_trees: TreeParams::default(),
            budget_hours: 24,
            tuning_tolerance: 0.05,
            tuning_iterations: 30,
        }
    }
}

impl FqiConfig {
    pub fn validate(&self) -> Result<(), FqiError> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(FqiError::Config(format!("gamma {} not in [0, 1)", self.gamma)));
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(FqiError::Config("iterations and batch_size must be positive".into()));
        }
        if self.epsilon.iter().any(|e| !(*e >= 0.0)) {
            return Err(FqiError::Config("epsilon must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.consistency_threshold) {
            return Err(FqiError::Config("consistency_threshold not in [0, 1]".into()));
        }
        if self.budget_hours == 0 {
            return Err(FqiError::Config("budget_hours must be positive".into()));
        }
        Ok(())
    }
}

/// Diagnostics of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    /// Mean `|Q^k - Q^{k-1}|` per objective over the batch's state-action pairs.
    pub mean_abs_delta: [f64; N_OBJECTIVES],
    pub action_histogram: [usize; N_ACTIONS],
    pub mean_pareto_size: f64,
    pub mean_candidates: f64,
    /// Tuples whose nondominated and consistent sets did not intersect.
    pub fallbacks: usize,
}

#[derive(Debug, Clone)]
pub struct FqiResult<F> {
    pub q: QFunction<F>,
    pub metrics: Vec<IterationMetrics>,
}

/// Indices of `n` tuples drawn with replacement, each with probability
/// inversely proportional to the frequency of its action.
///
/// Drawing an action class uniformly and then a tuple uniformly within it
/// gives exactly those probabilities.
pub fn sample_batch<F>(dataset: &[Transition<F>], n: usize, seed: u64) -> Vec<usize> {
    let mut by_action: Vec<Vec<usize>> = vec![Vec::new(); N_ACTIONS];
    for (i, t) in dataset.iter().enumerate() {
        by_action[t.action.index()].push(i);
    }
    let classes: Vec<&Vec<usize>> = by_action.iter().filter(|c| !c.is_empty()).collect();
    if classes.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let c = classes[rng.gen_range(0..classes.len())];
            c[rng.gen_range(0..c.len())]
        })
        .collect()
}

fn consistent_actions<F: Scalar>(proba: &[F], threshold: F) -> u16 {
    let mut mask = 0u16;
    for (a, p) in proba.iter().enumerate() {
        if *p >= threshold && *p > F::zero() {
            mask |= 1 << a;
        }
    }
    mask
}

/// Runs MO-FQI and reports each iteration's diagnostics to `on_iteration`.
pub fn train_mo_fqi<F: Scalar>(
    dataset: &[Transition<F>],
    config: &FqiConfig,
    seed: u64,
    mut on_iteration: impl FnMut(&IterationMetrics),
) -> Result<FqiResult<F>, FqiError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(FqiError::EmptyDataset);
    }
    let gamma = F::of(config.gamma);
    let threshold = F::of(config.consistency_threshold);
    let batch_seed = stage_seed(seed, "fqi-batch");
    let q_seed = stage_seed(seed, "fqi-regress");
    let c_seed = stage_seed(seed, "fqi-consistency");
    let mut q = QFunction::<F>::zero();
    let mut metrics = Vec::with_capacity(config.iterations);

    for k in 1..=config.iterations {
        let batch = sample_batch(dataset, config.batch_size, derive_seed(batch_seed, k as u64));
        let mut histogram = [0usize; N_ACTIONS];
        let mut states = Matrix::with_capacity(STATE_DIM, batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        let mut x = Matrix::with_capacity(Q_INPUT_DIM, batch.len());
        for &i in &batch {
            let t = &dataset[i];
            histogram[t.action.index()] += 1;
            states.push_row(&t.state.0)?;
            labels.push(t.action.index());
            x.push_row(&q_input(&t.state, t.action))?;
        }

        // Q^0 is zero everywhere, so the first backup is the immediate reward
        // and needs neither pruning nor the consistency filter.
        let bootstrap = q.model().is_some() && gamma > F::zero();
        let consistency = if bootstrap {
            let params = config.consistency_trees.with_seed(derive_seed(c_seed, k as u64));
            Some(fit_classifier(&states, &labels, N_ACTIONS, &params)?)
        } else {
            None
        };

        let rows: Vec<(QVector<F>, usize, usize, usize)> = batch
            .par_iter()
            .map(|&i| {
                let t = &dataset[i];
                let mut target = t.reward.0;
                let (mut pareto_size, mut candidates, mut fallback) = (0, 0, 0);
                if let (Some(classifier), false) = (&consistency, t.terminal) {
                    let q_next = q.predict_all(&t.next_state);
                    let front = pareto_front(&q_next);
                    pareto_size = front.len();
                    let proba = classifier.predict_proba_raw(&t.next_state.0)?;
                    let mask = consistent_actions(&proba, threshold);
                    let mut chosen: Vec<usize> = front.iter().copied().filter(|a| mask & (1 << a) != 0).collect();
                    if chosen.is_empty() {
                        fallback = 1;
                        chosen = vec![argmax(&proba)];
                    }
                    candidates = chosen.len();
                    for (d, v) in target.iter_mut().enumerate() {
                        let best = chosen
                            .iter()
                            .map(|&a| q_next[a][d])
                            .fold(F::neg_infinity(), F::max);
                        *v += gamma * best;
                    }
                }
                Ok((target, pareto_size, candidates, fallback))
            })
            .collect::<Result<_, TreeError>>()?;

        let mut y = Matrix::with_capacity(N_OBJECTIVES, rows.len());
        let (mut pareto_total, mut cand_total, mut fallbacks) = (0usize, 0usize, 0usize);
        for (target, pareto_size, candidates, fb) in &rows {
            if target.iter().any(|v| !v.is_finite()) {
                return Err(FqiError::Invariant(format!("non-finite backup target at iteration {k}")));
            }
            y.push_row(target)?;
            pareto_total += pareto_size;
            cand_total += candidates;
            fallbacks += fb;
        }
        let params = config.q_trees.with_seed(derive_seed(q_seed, k as u64));
        let model = fit_regressor(&x, &y, &params)?;
        let new_q = QFunction::from_model(model)?;

        let delta = mean_abs_delta(&q, &new_q, &x)?;
        let bootstrapped = rows.iter().filter(|r| r.2 > 0).count().max(1) as f64;
        let m = IterationMetrics {
            iteration: k,
            mean_abs_delta: delta,
            action_histogram: histogram,
            mean_pareto_size: pareto_total as f64 / bootstrapped,
            mean_candidates: cand_total as f64 / bootstrapped,
            fallbacks,
        };
        log::debug!("fqi iteration {k}: mean |dQ| {:?}", m.mean_abs_delta);
        on_iteration(&m);
        metrics.push(m);
        q = new_q;
    }
    Ok(FqiResult { q, metrics })
}

fn mean_abs_delta<F: Scalar>(old: &QFunction<F>, new: &QFunction<F>, x: &Matrix<F>) -> Result<[f64; N_OBJECTIVES], FqiError> {
    let predict = |q: &QFunction<F>| -> Result<Option<Matrix<F>>, TreeError> {
        q.model().map(|m| m.predict_matrix(x)).transpose()
    };
    let (a, b) = (predict(old)?, predict(new)?);
    let n = x.rows().max(1) as f64;
    let mut out = [0.0; N_OBJECTIVES];
    for i in 0..x.rows() {
        for (d, o) in out.iter_mut().enumerate() {
            let va = a.as_ref().map_or(0.0, |m| m.get(i, d).as_f64());
            let vb = b.as_ref().map_or(0.0, |m| m.get(i, d).as_f64());
            *o += (va - vb).abs();
        }
    }
    Ok(out.map(|v| v / n))
}

// ── Collapse to per-lab policies ────────────────────────────────────────

/// `Q_d(s, skip) - Q_d(s, order lab)` for each lab, with the other labs not ordered.
pub type LabMargins<F> = [QVector<F>; N_LABS];

pub fn lab_margins<F: Scalar>(q: &QFunction<F>, state: &StateVector<F>) -> LabMargins<F> {
    let skip = q.predict(state, ActionVector::ZERO);
    let mut out = [[F::zero(); N_OBJECTIVES]; N_LABS];
    for lab in Lab::ALL {
        let order = q.predict(state, ActionVector::single(lab));
        for d in 0..N_OBJECTIVES {
            out[lab.index()][d] = skip[d] - order[d];
        }
    }
    out
}

pub fn lab_margins_all<F: Scalar>(q: &QFunction<F>, states: &[StateVector<F>]) -> Vec<LabMargins<F>> {
    states.par_iter().map(|s| lab_margins(q, s)).collect()
}

/// Order iff `Q_d(skip) < Q_d(order) + ε_d` for every objective.
pub fn collapse_decision<F: Scalar>(margin: &QVector<F>, epsilon: &QVector<F>) -> bool {
    margin.iter().zip(epsilon).all(|(m, e)| *m < *e)
}

/// Per-lab order labels for each state.
pub fn collapse_labels<F: Scalar>(margins: &[LabMargins<F>], epsilon: &[QVector<F>; N_LABS]) -> Vec<[bool; N_LABS]> {
    margins
        .iter()
        .map(|m| std::array::from_fn(|l| collapse_decision(&m[l], &epsilon[l])))
        .collect()
}

/// Outcome of calibrating one lab's cost slack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonTuning {
    pub lab: String,
    pub epsilon_cost: f64,
    pub epsilon_max: f64,
    pub recommended: usize,
    pub target: usize,
    pub reached: bool,
}

/// Number of states where `lab` is ordered with cost slack `eps_cost`.
pub fn recommended_count<F: Scalar>(margins: &[LabMargins<F>], lab: usize, base: &QVector<F>, eps_cost: F) -> usize {
    let mut eps = *base;
    eps[N_OBJECTIVES - 1] = eps_cost;
    margins.iter().filter(|m| collapse_decision(&m[lab], &eps)).count()
}

/// Bisects `ε_cost` per lab so the recommended count approaches `targets`.
pub fn tune_epsilon_cost<F: Scalar>(
    margins: &[LabMargins<F>],
    base: &QVector<F>,
    targets: [usize; N_LABS],
    tolerance: f64,
    max_iterations: usize,
) -> [EpsilonTuning; N_LABS] {
    std::array::from_fn(|l| {
        let lab = Lab::ALL[l];
        let target = targets[l];
        let count = |e: f64| recommended_count(margins, l, base, F::of(e));
        let close = |c: usize| (c as f64 - target as f64).abs() <= tolerance * target as f64;
        let raw_max = margins
            .iter()
            .flat_map(|m| m[l].iter().map(|v| v.as_f64()))
            .fold(0.0f64, f64::max);
        let eps_max = raw_max + 1e-9 * (1.0 + raw_max.abs());
        let result = |eps: f64, reached: bool| EpsilonTuning {
            lab: lab.name().to_string(),
            epsilon_cost: eps,
            epsilon_max: eps_max,
            recommended: count(eps),
            target,
            reached,
        };
        let at_zero = count(0.0);
        if close(at_zero) || at_zero >= target {
            return result(0.0, close(at_zero));
        }
        let at_max = count(eps_max);
        if at_max < target && !close(at_max) {
            log::warn!(
                "{}: target of {target} orders unreachable ({at_max} at the largest slack)",
                lab.name()
            );
            return result(eps_max, false);
        }
        let (mut lo, mut hi) = (0.0, eps_max);
        for _ in 0..max_iterations {
            let mid = 0.5 * (lo + hi);
            let c = count(mid);
            if close(c) {
                return result(mid, true);
            }
            if c < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let best = if (count(lo) as f64 - target as f64).abs() <= (count(hi) as f64 - target as f64).abs() {
            lo
        } else {
            hi
        };
        result(best, close(count(best)))
    })
}

/// Per-lab deterministic policies distilled from a Q-function.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySet<F> {
    pub policies: Vec<Ensemble<F>>,
    /// Slack per lab and objective.
    pub epsilon: [QVector<F>; N_LABS],
    /// Order when the classifier's probability of label 1 reaches this value.
    /// Chosen so the policy recommends as many training orders as there are
    /// positive labels; a plain majority vote drops most orders whenever the
    /// labels are sparse.
    pub thresholds: [F; N_LABS],
    pub budget_hours: usize,
}

impl<F: Scalar> PolicySet<F> {
    pub fn recommend(&self, state: &StateVector<F>) -> Result<[bool; N_LABS], FqiError> {
        let mut out = [false; N_LABS];
        for ((o, p), t) in out.iter_mut().zip(&self.policies).zip(&self.thresholds) {
            *o = order_probability(p, state)? >= *t;
        }
        Ok(out)
    }

    pub fn recommend_all(&self, states: &[StateVector<F>]) -> Result<Vec<[bool; N_LABS]>, FqiError> {
        states.par_iter().map(|s| self.recommend(s)).collect()
    }
}

fn order_probability<F: Scalar>(policy: &Ensemble<F>, state: &StateVector<F>) -> Result<F, FqiError> {
    let proba = policy.predict_proba_raw(&state.0)?;
    Ok(proba.get(1).copied().unwrap_or_else(F::zero))
}

/// Smallest threshold at which `target` of `probs` are at or above it.
/// A target of zero yields a threshold no probability can reach.
pub fn count_threshold<F: Scalar>(probs: &[F], target: usize) -> F {
    if target == 0 {
        return F::of(2.0);
    }
    let mut sorted = probs.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let t = sorted[(target - 1).min(sorted.len() - 1)];
    // never order where the classifier puts no mass on label 1
    if t > F::zero() { t } else { F::min_positive_value() }
}

/// Fits one classifier per lab on the collapse labels.
pub fn collapse_policy<F: Scalar>(
    q: &QFunction<F>,
    states: &[StateVector<F>],
    epsilon: [QVector<F>; N_LABS],
    config: &FqiConfig,
    seed: u64,
) -> Result<PolicySet<F>, FqiError> {
    let margins = lab_margins_all(q, states);
    policy_from_margins(states, &margins, epsilon, config, seed)
}

pub fn policy_from_margins<F: Scalar>(
    states: &[StateVector<F>],
    margins: &[LabMargins<F>],
    epsilon: [QVector<F>; N_LABS],
    config: &FqiConfig,
    seed: u64,
) -> Result<PolicySet<F>, FqiError> {
    if states.is_empty() {
        return Err(FqiError::EmptyDataset);
    }
    let labels = collapse_labels(margins, &epsilon);
    let x = Matrix::from_rows(&states.iter().map(|s| s.0).collect::<Vec<_>>())?;
    let policy_seed = stage_seed(seed, "policy");
    let mut policies = Vec::with_capacity(N_LABS);
    let mut thresholds = [F::zero(); N_LABS];
    for lab in Lab::ALL {
        let y: Vec<usize> = labels.iter().map(|l| usize::from(l[lab.index()])).collect();
        let params = config.policy_trees.with_seed(derive_seed(policy_seed, lab.index() as u64));
        let model = fit_classifier(&x, &y, 2, &params)?;
        let probs = states
            .par_iter()
            .map(|s| order_probability(&model, s))
            .collect::<Result<Vec<_>, _>>()?;
        thresholds[lab.index()] = count_threshold(&probs, y.iter().sum());
        policies.push(model);
    }
    Ok(PolicySet {
        policies,
        epsilon,
        thresholds,
        budget_hours: config.budget_hours,
    })
}

// ── Budget rule ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BudgetMark {
    None,
    Recommended,
    Inserted,
}

impl BudgetMark {
    pub fn is_order(self) -> bool {
        self != BudgetMark::None
    }
}

/// Inserts an order whenever `period` hours pass without one.
pub fn apply_budget(recommended: &[bool], period: usize) -> Vec<BudgetMark> {
    apply_budget_observed(recommended, &[], period)
}

/// As [`apply_budget`], with observed orders also resetting the window.
pub fn apply_budget_observed(recommended: &[bool], observed: &[bool], period: usize) -> Vec<BudgetMark> {
    assert!(period > 0, "budget period must be positive");
    let mut last: i64 = -1;
    recommended
        .iter()
        .enumerate()
        .map(|(h, &rec)| {
            let seen = observed.get(h).copied().unwrap_or(false);
            if rec {
                last = h as i64;
                BudgetMark::Recommended
            } else if h as i64 - last >= period as i64 {
                last = h as i64;
                BudgetMark::Inserted
            } else {
                if seen {
                    last = h as i64;
                }
                BudgetMark::None
            }
        })
        .collect()
}

// ── Artifact ────────────────────────────────────────────────────────────

pub const POLICY_MAGIC: &[u8; 4] = b"LPPS";
pub const POLICY_VERSION: u16 = 1;

/// Everything training produces, tied to the hash of its input dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyArtifact<F> {
    pub config_hash: String,
    pub q: QFunction<F>,
    pub policy: PolicySet<F>,
}

impl<F: Scalar> PolicyArtifact<F> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(POLICY_MAGIC);
        out.extend_from_slice(&POLICY_VERSION.to_le_bytes());
        out.push(F::WIDTH);
        out.extend_from_slice(&(self.config_hash.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_hash.as_bytes());
        out.extend_from_slice(&(self.policy.budget_hours as u64).to_le_bytes());
        for e in self.policy.epsilon.iter().flatten().chain(&self.policy.thresholds) {
            e.write_le(&mut out);
        }
        self.q.write_bytes(&mut out);
        out.extend_from_slice(&(self.policy.policies.len() as u32).to_le_bytes());
        for p in &self.policy.policies {
            p.write_bytes(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FqiError> {
        let fmt = |m: &str| FqiError::Format(m.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], FqiError> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| fmt("unexpected end of policy file"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != POLICY_MAGIC {
            return Err(fmt("not a policy artifact"));
        }
        let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
        if version != POLICY_VERSION {
            return Err(FqiError::Format(format!("policy version {version}, expected {POLICY_VERSION}")));
        }
        if take(1)?[0] != F::WIDTH {
            return Err(fmt("policy stores a different scalar width"));
        }
        let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let config_hash = String::from_utf8(take(n)?.to_vec()).map_err(|_| fmt("hash is not UTF-8"))?;
        let budget_hours = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let w = F::WIDTH as usize;
        let mut epsilon = [[F::zero(); N_OBJECTIVES]; N_LABS];
        let mut thresholds = [F::zero(); N_LABS];
        for e in epsilon.iter_mut().flatten().chain(thresholds.iter_mut()) {
            *e = F::read_le(take(w)?);
        }
        let (q, used) = QFunction::read_bytes(&bytes[pos..])?;
        pos += used;
        let count = u32::from_le_bytes(
            bytes
                .get(pos..pos + 4)
                .ok_or_else(|| fmt("unexpected end of policy file"))?
                .try_into()
                .unwrap(),
        ) as usize;
        pos += 4;
        let mut policies = Vec::with_capacity(count.min(N_LABS));
        for _ in 0..count {
            let (p, used) = Ensemble::read_bytes(&bytes[pos..])?;
            pos += used;
            policies.push(p);
        }
        if pos != bytes.len() {
            return Err(fmt("trailing bytes after policy"));
        }
        if policies.len() != N_LABS {
            return Err(fmt("expected one policy per lab"));
        }
        Ok(PolicyArtifact {
            config_hash,
            q,
            policy: PolicySet { policies, epsilon, thresholds, budget_hours },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), FqiError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FqiError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::RewardVector;
    use proptest::prelude::*;

    fn brute_force(q: &[QVector<f64>]) -> Vec<usize> {
        (0..q.len())
            .filter(|&i| !(0..q.len()).any(|j| strictly_dominated(&q[i], &q[j])))
            .collect()
    }

    #[test]
    fn pareto_examples() {
        assert_eq!(pareto_front(&[[1.0, 2.0, 3.0, 4.0]]), vec![0]);
        let q = [[1.0, 2.0, 0.0, -1.0], [2.0, 1.0, 0.0, -1.0], [0.0, 1.0, -1.0, -2.0]];
        assert_eq!(pareto_front(&q), vec![0, 1]);
        assert_eq!(pareto_front(&[[0.5; 4]; 16]), (0..16).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn pareto_matches_brute_force(raw in proptest::collection::vec(-3i32..3, 64), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
            let q: Vec<QVector<f64>> = raw.chunks(4).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64]).collect();
            let front = pareto_front(&q);
            prop_assert_eq!(&front, &brute_force(&q));
            prop_assert!(!front.is_empty());
            let rescaled: Vec<QVector<f64>> = q.iter().map(|v| [v[0], v[1] * scale + shift, v[2], v[3]]).collect();
            prop_assert_eq!(pareto_front(&rescaled), front);
        }

        #[test]
        fn budget_never_leaves_long_gaps(bits in proptest::collection::vec(proptest::bool::weighted(0.03), 1..300), period in 1usize..40) {
            let marks = apply_budget(&bits, period);
            let mut last: i64 = -1;
            for (h, m) in marks.iter().enumerate() {
                if bits[h] { prop_assert_eq!(*m, BudgetMark::Recommended); }
                if m.is_order() {
                    prop_assert!(h as i64 - last <= period as i64);
                    last = h as i64;
                }
            }
            prop_assert!((marks.len() as i64 - 1) - last < period as i64);
        }
    }

    #[test]
    fn budget_examples() {
        let inserted = |m: &[BudgetMark]| -> Vec<usize> {
            m.iter().enumerate().filter(|(_, x)| **x == BudgetMark::Inserted).map(|(h, _)| h).collect()
        };
        assert_eq!(inserted(&apply_budget(&[false; 30], 24)), vec![23]);
        assert_eq!(inserted(&apply_budget(&[false; 49], 24)), vec![23, 47]);
        let every12: Vec<bool> = (0..60).map(|h| h % 12 == 0).collect();
        assert!(inserted(&apply_budget(&every12, 24)).is_empty());
        let mut observed = vec![false; 30];
        observed[20] = true;
        assert!(inserted(&apply_budget_observed(&[false; 30], &observed, 24)).is_empty());
    }

    #[test]
    fn threshold_preserves_count() {
        let p = [0.1, 0.7, 0.3, 0.3, 0.0, 0.9];
        let count = |t: f64| p.iter().filter(|&&x| x >= t).count();
        assert_eq!(count(count_threshold(&p, 2)), 2);
        assert_eq!(count(count_threshold(&p, 0)), 0);
        // ties may overshoot, never undershoot
        assert_eq!(count(count_threshold(&p, 3)), 4);
        // states with no mass on ordering never order
        assert_eq!(count(count_threshold(&p, 6)), 5);
    }

    #[test]
    fn collapse_examples() {
        let margin = |order: QVector<f64>, skip: QVector<f64>| -> QVector<f64> { std::array::from_fn(|d| skip[d] - order[d]) };
        let zero = [0.0; 4];
        assert!(collapse_decision(&margin([2.0, 2.0, 2.0, -0.5], [1.0, 1.0, 1.0, -1.0]), &zero));
        assert!(!collapse_decision(&margin([2.0, 2.0, 2.0, -2.0], [1.0, 1.0, 1.0, -1.0]), &zero));
        assert!(collapse_decision(&margin([2.0, 2.0, 2.0, -2.0], [1.0, 1.0, 1.0, -1.0]), &[0.0, 0.0, 0.0, 1.5]));
    }

    fn transition(action: usize) -> Transition<f64> {
        Transition {
            state: StateVector::zeros(),
            action: ActionVector::from_index(action),
            next_state: StateVector::zeros(),
            reward: RewardVector::zero(),
            admission_id: "x".into(),
            time: 0,
            terminal: false,
        }
    }

    #[test]
    fn batch_weights_inverse_frequency() {
        let mut data: Vec<Transition<f64>> = (0..9900).map(|_| transition(0)).collect();
        data.extend((0..100).map(|_| transition(5)));
        let batch = sample_batch(&data, 10_000, 3);
        let b = batch.iter().filter(|&&i| data[i].action.index() == 5).count() as f64;
        assert!((b - 5000.0).abs() < 3.0 * 50.0, "{b}");
        assert_eq!(batch, sample_batch(&data, 10_000, 3));
        let uniform: Vec<Transition<f64>> = (0..100).map(|i| transition(i % 4)).collect();
        let counts = sample_batch(&uniform, 8000, 1).iter().fold([0usize; 4], |mut c, &i| {
            c[i % 4] += 1;
            c
        });
        assert!(counts.iter().all(|&c| (c as f64 - 2000.0).abs() < 3.0 * (8000.0f64 * 0.25 * 0.75).sqrt()));
    }

    fn margins_from(values: &[f64]) -> Vec<LabMargins<f64>> {
        values.iter().map(|&v| [[-1.0, -1.0, -1.0, v]; N_LABS]).collect()
    }

    #[test]
    fn tuning_hits_target() {
        let values: Vec<f64> = (0..1000).map(|i| 0.01 + i as f64 * 0.002).collect();
        let m = margins_from(&values);
        assert_eq!(recommended_count(&m, 0, &[0.0; 4], 0.0), 0);
        let r = tune_epsilon_cost(&m, &[0.0; 4], [400, 400, 400, 1], 0.05, 30);
        assert!(r[0].reached && (r[0].recommended as f64 - 400.0).abs() <= 20.0);
        let mut counts = Vec::new();
        for k in 0..10 {
            counts.push(recommended_count(&m, 0, &[0.0; 4], k as f64 * 0.25));
        }
        assert!(counts.windows(2).all(|w| w[0] <= w[1]));
        // count at zero already matches
        let mixed = margins_from(&[-1.0, -1.0, 1.0, 2.0]);
        let r = tune_epsilon_cost(&mixed, &[0.0; 4], [2; 4], 0.05, 30);
        assert_eq!(r[0].epsilon_cost, 0.0);
        // unreachable: other objectives block every state
        let blocked: Vec<LabMargins<f64>> = vec![[[1.0, 0.0, 0.0, 0.5]; N_LABS]; 10];
        let r = tune_epsilon_cost(&blocked, &[0.0; 4], [5; 4], 0.05, 30);
        assert!(!r[0].reached && r[0].epsilon_cost == r[0].epsilon_max);
    }

    #[test]
    fn zero_rewards_stay_zero() {
        let mut data = Vec::new();
        for i in 0..200 {
            let mut t = transition(i % 16);
            t.state.0[0] = (i % 7) as f64;
            t.next_state.0[0] = ((i + 1) % 7) as f64;
            data.push(t);
        }
        let config = FqiConfig {
            iterations: 3,
            batch_size: 300,
            q_trees: TreeParams { n_trees: 5, min_samples_leaf: 2, ..Default::default() },
            consistency_trees: TreeParams { n_trees: 5, min_samples_leaf: 2, ..Default::default() },
            ..Default::default()
        };
        let r = train_mo_fqi(&data, &config, 1, |_| {}).unwrap();
        assert_eq!(r.metrics.len(), 3);
        for t in &data {
            assert_eq!(r.q.predict(&t.state, t.action), [0.0; 4]);
        }
    }

    #[test]
    fn artifact_round_trip() {
        let mut data = Vec::new();
        for i in 0..120 {
            let mut t = transition(i % 16);
            t.state.0[3] = i as f64;
            t.reward.0[0] = (i % 3) as f64;
            data.push(t);
        }
        let config = FqiConfig {
            iterations: 2,
            batch_size: 100,
            q_trees: TreeParams { n_trees: 3, min_samples_leaf: 5, ..Default::default() },
            consistency_trees: TreeParams { n_trees: 3, min_samples_leaf: 5, ..Default::default() },
            policy_trees: TreeParams { n_trees: 3, min_samples_leaf: 5, ..Default::default() },
            ..Default::default()
        };
        let r = train_mo_fqi(&data, &config, 9, |_| {}).unwrap();
        let states: Vec<StateVector<f64>> = data.iter().map(|t| t.state).collect();
        let policy = collapse_policy(&r.q, &states, [[0.0, 0.0, 0.0, 0.1]; N_LABS], &config, 9).unwrap();
        let art = PolicyArtifact { config_hash: "h".into(), q: r.q, policy };
        let bytes = art.to_bytes();
        assert_eq!(PolicyArtifact::<f64>::from_bytes(&bytes).unwrap(), art);
        assert!(PolicyArtifact::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let again = train_mo_fqi(&data, &config, 9, |_| {}).unwrap();
        assert_eq!(again.q, art.q);
    }
}
