use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Result, RunConfig};
use crate::cohort::{Admission, Lab, TraitId};
use crate::forecast::Forecaster;
use crate::fqi::PolicySet;
use crate::mdp::{build_states, RewardContext, RewardVector, Transition, N_ACTIONS, N_LABS, N_OBJECTIVES};
use crate::ope::{
    empirical_return, fit_behaviour_policy, metric_info_gain, metric_order_reduction, metric_time_to_treatment,
    order_hours, ps_wis, softened_probs, weighted_steps, BudgetedPolicy, DecisionRule, EvalConfig, OrderReduction,
    RealizedRandom, Scope, StochasticPolicy, Trajectory, ValueEstimate,
};
use crate::seeding::{derive_seed, stage_seed};
use crate::Real;

/// One cell of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyValue {
    pub policy: String,
    /// Lab name, or `joint`.
    pub scope: String,
    pub component: String,
    pub mean: f64,
    /// Standard deviation across trials; absent for single-trial policies.
    pub std: Option<f64>,
    pub trials: usize,
    /// Highest mean among the policies for this scope and component.
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorDiagnostics {
    pub policy: String,
    pub scope: String,
    pub min_ess: f64,
    pub mean_ess: f64,
    pub clipped: usize,
    pub zero_weight_steps: usize,
}

/// Clinician against MO-FQI for one lab.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabMetric {
    pub lab: String,
    pub clinician_mean: Option<f64>,
    pub mo_fqi_mean: Option<f64>,
    pub clinician_count: usize,
    pub mo_fqi_count: usize,
    /// Orders beyond the forecast grid, or onsets without a qualifying order.
    pub clinician_excluded: usize,
    pub mo_fqi_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub config_hash: String,
    pub n_test_admissions: usize,
    pub n_test_steps: usize,
    /// Order rate per lab-hour in the training transitions.
    pub empirical_order_rate: f64,
    pub random_trials: usize,
    /// Policies × components × labs.
    pub values: Vec<PolicyValue>,
    /// Policies × components on joint actions and rewards.
    pub joint_values: Vec<PolicyValue>,
    /// Mean per-trajectory logged return per scope.
    pub logged_returns: BTreeMap<String, [f64; N_OBJECTIVES]>,
    /// Largest gap between the behaviour policy's estimate on its own data
    /// and the logged return.
    pub behaviour_self_check: f64,
    pub diagnostics: Vec<EstimatorDiagnostics>,
    /// MO-FQI orders with the budget applied.
    pub order_reduction: Vec<OrderReduction>,
    /// MO-FQI recommendations without the budget.
    pub order_reduction_raw: Vec<OrderReduction>,
    pub info_gain: Vec<LabMetric>,
    pub time_to_treatment: Vec<LabMetric>,
}

/// Per-order and per-onset samples behind the metric means, as
/// `(lab, policy, value)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Distributions {
    pub info_gain: Vec<(String, String, f64)>,
    pub time_to_treatment: Vec<(String, String, f64)>,
}

const MO_FQI: &str = "mo_fqi";
const BEHAVIOUR: &str = "behaviour";
const CLINICIAN: &str = "clinician";

type Probs = Vec<[Real; N_ACTIONS]>;

/// Per-admission evaluation inputs and metric samples.
struct AdmissionEval {
    trajectory: Trajectory<Real>,
    /// Raw and budget-augmented MO-FQI series per lab.
    series: [(Vec<bool>, Vec<bool>); N_LABS],
    /// Information gains of clinician and MO-FQI orders with skipped counts.
    gains: [[(Vec<Real>, usize); 2]; N_LABS],
    /// Time-to-treatment intervals of clinician and MO-FQI orders with excluded counts.
    ttt: [[(Vec<f64>, usize); 2]; N_LABS],
}

fn scopes() -> Vec<(String, Scope)> {
    let mut out: Vec<(String, Scope)> = Lab::ALL.iter().map(|&l| (l.name().to_string(), Scope::Lab(l))).collect();
    out.push(("joint".into(), Scope::Joint));
    out
}

fn estimate(
    trajectories: &[Trajectory<Real>],
    behaviour: &[Probs],
    target: &[Probs],
    scope: Scope,
    config: &EvalConfig,
) -> ValueEstimate {
    let steps: Vec<_> = trajectories
        .par_iter()
        .zip(behaviour)
        .zip(target)
        .map(|((traj, pb), pe)| weighted_steps(traj, pe, pb, scope, config.p_min))
        .collect();
    ps_wis(&steps, config.gamma_wis, config.rho_clip)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn sample_std(v: &[f64]) -> Option<f64> {
    let m = mean(v)?;
    (v.len() > 1).then(|| (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
}

fn evaluate_admission(
    admission: &Admission,
    forecaster: &Forecaster<Real>,
    ctx: &RewardContext<Real>,
    policy: &PolicySet<Real>,
    window: f64,
) -> Result<AdmissionEval> {
    let lab_traits: Vec<TraitId> = Lab::ALL.iter().map(|l| l.trait_id()).collect();
    let fc = forecaster.forecast_admission(admission, &lab_traits)?;
    let steps = build_states(admission, &fc, ctx)?;
    let onsets: Vec<_> = admission.interventions.iter().map(|i| (i.category, i.onset)).collect();
    let trajectory = Trajectory::from_steps(&steps, onsets, ctx);
    let series = BudgetedPolicy { policy }.series(&trajectory)?;
    let onset_hours: Vec<f64> = admission.interventions.iter().map(|i| i.onset).collect();
    let mut gains: [[(Vec<Real>, usize); 2]; N_LABS] = Default::default();
    let mut ttt: [[(Vec<f64>, usize); 2]; N_LABS] = Default::default();
    for lab in Lab::ALL {
        let l = lab.index();
        let t = lab.trait_id();
        let clinician = trajectory.clinician_orders(lab);
        let (smoothed, filtered) = (&fc.smoothing[&t], &fc.filtering[&t]);
        // time to treatment traces back through observed or recommended orders
        let combined: Vec<bool> = clinician.iter().zip(&series[l].1).map(|(c, r)| *c || *r).collect();
        for (k, (orders, traced)) in [(&clinician, &clinician), (&series[l].1, &combined)].into_iter().enumerate() {
            gains[l][k] = metric_info_gain(orders, smoothed, filtered, ctx.sigma_floor[l]);
            ttt[l][k] = metric_time_to_treatment(&order_hours(traced), &onset_hours, window);
        }
    }
    Ok(AdmissionEval {
        trajectory,
        series,
        gains,
        ttt,
    })
}

/// Runs the evaluation suite on the test admissions.
///
/// The behaviour policy is fit on `train_transitions`. MO-FQI is evaluated
/// with the budget applied and decisions softened; the random baselines
/// realize their decisions once per trial and admission.
pub fn evaluate(
    run: &RunConfig,
    policy: &PolicySet<Real>,
    train_transitions: &[Transition<Real>],
    test: &[Admission],
    forecaster: &Forecaster<Real>,
    ctx: &RewardContext<Real>,
    config_hash: &str,
) -> Result<(Evaluation, Distributions)> {
    let (config, seed) = (&run.eval, run.seed);
    config.validate()?;
    let behaviour = fit_behaviour_policy(
        train_transitions,
        &config.behaviour_trees.with_seed(stage_seed(seed, "behaviour")),
        config.p_min,
    )?;
    let orders: usize = train_transitions
        .iter()
        .map(|t| Lab::ALL.iter().filter(|&&l| t.action.orders(l)).count())
        .sum();
    let p_emp = orders as f64 / (N_LABS * train_transitions.len()).max(1) as f64;

    let per_admission = test
        .par_iter()
        .map(|a| evaluate_admission(a, forecaster, ctx, policy, config.window_hours))
        .collect::<Result<Vec<_>>>()?;
    let trajectories: Vec<Trajectory<Real>> = per_admission.iter().map(|e| e.trajectory.clone()).collect();
    let pb = trajectories
        .par_iter()
        .map(|t| behaviour.trajectory_probs(t))
        .collect::<Result<Vec<_>, _>>()?;

    let smoothing = config.smoothing;
    let soften = |decisions: Vec<[bool; N_LABS]>| -> Probs {
        decisions.iter().map(|d| softened_probs(d, smoothing)).collect()
    };
    let mo_fqi: Vec<Probs> = per_admission
        .iter()
        .map(|e| soften((0..e.trajectory.len()).map(|t| std::array::from_fn(|l| e.series[l].1[t])).collect()))
        .collect();

    let mut random_ps: Vec<(String, f64)> = config
        .random_probabilities
        .iter()
        .map(|&p| (format!("random({p})"), p))
        .collect();
    random_ps.push(("random(p_emp)".into(), p_emp));
    random_ps.sort_by(|a, b| a.1.total_cmp(&b.1));

    // policy name → scope → one estimate per trial
    let mut estimates: Vec<(String, Vec<Vec<ValueEstimate>>)> = Vec::new();
    let scopes = scopes();
    let single = |target: &[Probs]| -> Vec<Vec<ValueEstimate>> {
        scopes
            .iter()
            .map(|(_, s)| vec![estimate(&trajectories, &pb, target, *s, config)])
            .collect()
    };
    estimates.push((MO_FQI.into(), single(&mo_fqi)));
    estimates.push((BEHAVIOUR.into(), single(&pb)));
    for (k, (name, p)) in random_ps.iter().enumerate() {
        let mut per_scope: Vec<Vec<ValueEstimate>> = vec![Vec::new(); scopes.len()];
        for trial in 0..config.random_trials {
            let rule = RealizedRandom {
                p: *p,
                seed: derive_seed(stage_seed(seed, &format!("random-{k}")), trial as u64),
            };
            let target = trajectories
                .par_iter()
                .map(|t| DecisionRule::<Real>::decisions(&rule, t).map(soften))
                .collect::<Result<Vec<_>, _>>()?;
            for (slot, (_, s)) in per_scope.iter_mut().zip(&scopes) {
                slot.push(estimate(&trajectories, &pb, &target, *s, config));
            }
        }
        estimates.push((name.clone(), per_scope));
    }

    let mut values = Vec::new();
    let mut joint_values = Vec::new();
    let mut diagnostics = Vec::new();
    for (si, (scope_name, _)) in scopes.iter().enumerate() {
        let mut block = Vec::new();
        for d in 0..N_OBJECTIVES {
            for (name, per_scope) in &estimates {
                let trials = &per_scope[si];
                let v: Vec<f64> = trials.iter().map(|e| e.values[d]).collect();
                block.push(PolicyValue {
                    policy: name.clone(),
                    scope: scope_name.clone(),
                    component: RewardVector::<Real>::NAMES[d].to_string(),
                    mean: mean(&v).unwrap_or(f64::NAN),
                    std: sample_std(&v),
                    trials: v.len(),
                    best: false,
                });
            }
            let cells = &mut block[d * estimates.len()..];
            let top = cells.iter().map(|c| c.mean).fold(f64::NEG_INFINITY, f64::max);
            if let Some(c) = cells.iter_mut().find(|c| c.mean == top) {
                c.best = true;
            }
        }
        if scope_name == "joint" {
            joint_values = block;
        } else {
            values.extend(block);
        }
        for (name, per_scope) in &estimates {
            let trials = &per_scope[si];
            let ess: Vec<f64> = trials.iter().flat_map(|e| e.effective_sample_size.iter().copied()).collect();
            diagnostics.push(EstimatorDiagnostics {
                policy: name.clone(),
                scope: scope_name.clone(),
                min_ess: ess.iter().copied().fold(f64::INFINITY, f64::min),
                mean_ess: mean(&ess).unwrap_or(0.0),
                clipped: trials.iter().map(|e| e.clipped).sum(),
                zero_weight_steps: trials.iter().map(|e| e.zero_weight_steps.len()).sum(),
            });
        }
    }

    let mut logged_returns = BTreeMap::new();
    let mut behaviour_self_check = 0.0f64;
    for (si, (scope_name, scope)) in scopes.iter().enumerate() {
        let logged = empirical_return(&trajectories, *scope, config.gamma_wis);
        let own = &estimates[1].1[si][0];
        for d in 0..N_OBJECTIVES {
            behaviour_self_check = behaviour_self_check.max((own.values[d] - logged[d]).abs());
        }
        logged_returns.insert(scope_name.clone(), logged);
    }

    let mut order_reduction = Vec::new();
    let mut order_reduction_raw = Vec::new();
    let mut info_gain = Vec::new();
    let mut time_to_treatment = Vec::new();
    let mut dist = Distributions::default();
    for lab in Lab::ALL {
        let l = lab.index();
        let clinician: Vec<_> = per_admission.iter().map(|e| e.trajectory.clinician_orders(lab)).collect();
        let with = |pick: fn(&(Vec<bool>, Vec<bool>)) -> &Vec<bool>| -> Vec<(Vec<bool>, Vec<bool>)> {
            clinician
                .iter()
                .zip(&per_admission)
                .map(|(c, e)| (c.clone(), pick(&e.series[l]).clone()))
                .collect()
        };
        order_reduction.push(metric_order_reduction(lab, &with(|s| &s.1)));
        order_reduction_raw.push(metric_order_reduction(lab, &with(|s| &s.0)));

        let mut gain_samples: [Vec<f64>; 2] = Default::default();
        let mut gain_skipped = [0usize; 2];
        let mut ttt_samples: [Vec<f64>; 2] = Default::default();
        let mut ttt_excluded = [0usize; 2];
        for e in &per_admission {
            for k in 0..2 {
                gain_samples[k].extend(e.gains[l][k].0.iter().copied());
                gain_skipped[k] += e.gains[l][k].1;
                ttt_samples[k].extend(e.ttt[l][k].0.iter().copied());
                ttt_excluded[k] += e.ttt[l][k].1;
            }
        }
        for (k, who) in [CLINICIAN, MO_FQI].into_iter().enumerate() {
            let tag = |v: &f64| (lab.name().to_string(), who.to_string(), *v);
            dist.info_gain.extend(gain_samples[k].iter().map(tag));
            dist.time_to_treatment.extend(ttt_samples[k].iter().map(tag));
        }
        let metric = |samples: &[Vec<f64>; 2], excluded: [usize; 2]| LabMetric {
            lab: lab.name().to_string(),
            clinician_mean: mean(&samples[0]),
            mo_fqi_mean: mean(&samples[1]),
            clinician_count: samples[0].len(),
            mo_fqi_count: samples[1].len(),
            clinician_excluded: excluded[0],
            mo_fqi_excluded: excluded[1],
        };
        info_gain.push(metric(&gain_samples, gain_skipped));
        time_to_treatment.push(metric(&ttt_samples, ttt_excluded));
    }

    let evaluation = Evaluation {
        config_hash: config_hash.to_string(),
        n_test_admissions: test.len(),
        n_test_steps: trajectories.iter().map(Trajectory::len).sum(),
        empirical_order_rate: p_emp,
        random_trials: config.random_trials,
        values,
        joint_values,
        logged_returns,
        behaviour_self_check,
        diagnostics,
        order_reduction,
        order_reduction_raw,
        info_gain,
        time_to_treatment,
    };
    Ok((evaluation, dist))
}
