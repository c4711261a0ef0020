use serde::{Deserialize, Serialize};

use super::{
    compute_sofa, info_score, reward_cost, reward_info, reward_sofa, reward_treat,
    threshold_from_training, ActionVector, MdpError, RewardVector, SofaInputs, SofaTable,
    StateVector, Transition, N_LABS, STATE_DIM,
};
use crate::cohort::{Admission, InterventionCategory, Lab, TraitId};
use crate::forecast::{AdmissionForecast, Forecaster};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MdpConfig {
    /// Cost decay Γ per lab, hours.
    pub decay_hours: [f64; N_LABS],
    /// Elapsed-time features are capped here; also the value before a lab's first order.
    pub delta_cap_hours: f64,
    /// σ in the information reward is floored at this fraction of the cohort SD.
    pub sigma_floor_fraction: f64,
    #[serde(default)]
    pub sofa: SofaTable,
}

impl Default for MdpConfig {
    fn default() -> Self {
        MdpConfig {
            decay_hours: [6.0; N_LABS],
            delta_cap_hours: 48.0,
            sigma_floor_fraction: 0.05,
            sofa: SofaTable::default(),
        }
    }
}

impl MdpConfig {
    pub fn validate(&self) -> Result<(), MdpError> {
        if self.decay_hours.iter().any(|g| !(*g > 0.0)) {
            return Err(MdpError::Argument("decay factors must be positive".into()));
        }
        if !(self.delta_cap_hours > 0.0) || !(self.sigma_floor_fraction > 0.0) {
            return Err(MdpError::Argument("delta cap and sigma floor must be positive".into()));
        }
        Ok(())
    }
}

/// Everything needed to turn forecasts into states and rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardContext<F> {
    pub config: MdpConfig,
    /// Stand-in for the last lab value before a lab's first result.
    pub default_last: [F; N_LABS],
    pub sigma_floor: [F; N_LABS],
    /// Information thresholds `c`.
    pub thresholds: [F; N_LABS],
}

impl<F: Scalar> RewardContext<F> {
    /// Context with zero thresholds; see [`RewardContext::fit`].
    pub fn new(config: MdpConfig, forecaster: &Forecaster<F>) -> Result<Self, MdpError> {
        config.validate()?;
        let mut default_last = [F::zero(); N_LABS];
        let mut sigma_floor = [F::zero(); N_LABS];
        for lab in Lab::ALL {
            let t = lab.trait_id();
            let sd = forecaster.cohort_sd.get(&t).copied().unwrap_or(F::one());
            let floor = F::of(config.sigma_floor_fraction) * sd;
            sigma_floor[lab.index()] = if floor > F::zero() { floor } else { F::of(1e-6) };
            default_last[lab.index()] = forecaster
                .kernels
                .get(&t)
                .map(|k| k.prior_mean)
                .or_else(|| forecaster.cohort_mean.get(&t).copied())
                .unwrap_or(F::zero());
        }
        Ok(RewardContext {
            config,
            default_last,
            sigma_floor,
            thresholds: [F::zero(); N_LABS],
        })
    }

    /// Sets thresholds to the median information score at training orders.
    pub fn fit(
        config: MdpConfig,
        forecaster: &Forecaster<F>,
        train: &[Admission],
        train_forecasts: &[AdmissionForecast<F>],
    ) -> Result<Self, MdpError> {
        let mut ctx = Self::new(config, forecaster)?;
        let mut scores: [Vec<F>; N_LABS] = Default::default();
        for (adm, fc) in train.iter().zip(train_forecasts) {
            let per_lab = order_info_scores(adm, fc, &ctx)?;
            for (all, mine) in scores.iter_mut().zip(per_lab) {
                all.extend(mine);
            }
        }
        ctx.thresholds = threshold_from_training(&scores)?;
        Ok(ctx)
    }

    fn decay(&self) -> [F; N_LABS] {
        self.config.decay_hours.map(F::of)
    }
}

/// Hourly states, logged actions and intervention onsets of one admission.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmissionSteps<F> {
    pub admission_id: String,
    pub states: Vec<StateVector<F>>,
    pub actions: Vec<ActionVector>,
    /// Categories with onset in `(t, t+1]` (`[0, 1]` for the first hour).
    pub initiated: Vec<Vec<InterventionCategory>>,
}

fn in_step(x: f64, t: usize) -> bool {
    let lo = t as f64;
    (x > lo || (t == 0 && x >= 0.0)) && x <= lo + 1.0
}

fn grid<'a, F>(
    forecast: &'a AdmissionForecast<F>,
    t: TraitId,
    hours: usize,
) -> Result<&'a crate::forecast::ForecastGrid<F>, MdpError> {
    forecast
        .filtering
        .get(&t)
        .filter(|g| g.means.len() >= hours && g.stds.len() >= hours)
        .ok_or_else(|| MdpError::MissingForecast {
            admission: forecast.admission_id.clone(),
            trait_name: t.name().to_string(),
        })
}

pub fn build_states<F: Scalar>(
    admission: &Admission,
    forecast: &AdmissionForecast<F>,
    ctx: &RewardContext<F>,
) -> Result<AdmissionSteps<F>, MdpError> {
    let hours = admission.length_of_stay as usize;
    let g = |t: TraitId| grid(forecast, t, hours);
    let (bp, bili, plt, creat, pf, gcs, dopa) = (
        g(TraitId::MeanBp)?,
        g(TraitId::Bilirubin)?,
        g(TraitId::Platelet)?,
        g(TraitId::Creatinine)?,
        g(TraitId::Pao2Fio2)?,
        g(TraitId::Gcs)?,
        g(TraitId::Dopamine)?,
    );
    let vitals = [
        g(TraitId::HeartRate)?,
        g(TraitId::RespRate)?,
        g(TraitId::Temp)?,
        bp,
    ];
    let labs = [
        g(TraitId::Creatinine)?,
        g(TraitId::Bun)?,
        g(TraitId::Wbc)?,
        g(TraitId::Lactate)?,
    ];

    let mut order_times: [Vec<f64>; N_LABS] = Default::default();
    let mut results: [Vec<(f64, f64)>; N_LABS] = Default::default();
    for lab in Lab::ALL {
        let mut o = admission.order_times(lab);
        o.sort_by(f64::total_cmp);
        order_times[lab.index()] = o;
        let mut r: Vec<(f64, f64)> = admission
            .observations_of(lab.trait_id())
            .map(|e| (e.timestamp, e.value))
            .collect();
        r.sort_by(|a, b| a.0.total_cmp(&b.0));
        results[lab.index()] = r;
    }

    let cap = ctx.config.delta_cap_hours;
    let mut states = Vec::with_capacity(hours);
    let mut actions = Vec::with_capacity(hours);
    let mut initiated = Vec::with_capacity(hours);
    for t in 0..hours {
        let now = t as f64;
        let mut s = [F::zero(); STATE_DIM];
        let sofa = compute_sofa(
            &SofaInputs {
                mean_bp: bp.means[t],
                bilirubin: bili.means[t],
                platelet: plt.means[t].max(F::zero()),
                creatinine: creat.means[t],
                pao2_fio2: pf.means[t],
                gcs: gcs.means[t].round().max(F::of(3.0)).min(F::of(15.0)),
                dopamine: dopa.means[t] >= F::of(0.5),
            },
            &ctx.config.sofa,
        )?;
        s[StateVector::<F>::SOFA] = F::of(sofa as f64);
        for (k, v) in vitals.iter().enumerate() {
            s[StateVector::<F>::VITALS + k] = v.means[t];
        }
        let mut orders = [false; N_LABS];
        for lab in Lab::ALL {
            let k = lab.index();
            s[StateVector::<F>::LAB_MEANS + k] = labs[k].means[t];
            s[StateVector::<F>::LAB_STDS + k] = labs[k].stds[t];
            s[StateVector::<F>::LAST_VALUES + k] = results[k]
                .iter()
                .take_while(|(ts, _)| *ts <= now)
                .last()
                .map_or(ctx.default_last[k], |(_, v)| F::of(*v));
            let elapsed = order_times[k]
                .iter()
                .take_while(|&&ts| ts <= now)
                .last()
                .map_or(cap, |&ts| (now - ts).min(cap));
            s[StateVector::<F>::ELAPSED + k] = F::of(elapsed);
            orders[k] = order_times[k].iter().any(|&ts| in_step(ts, t));
        }
        states.push(StateVector(s));
        actions.push(ActionVector::from_orders(orders));
        initiated.push(
            admission
                .interventions
                .iter()
                .filter(|iv| in_step(iv.onset, t))
                .map(|iv| iv.category)
                .collect(),
        );
    }
    Ok(AdmissionSteps {
        admission_id: admission.admission_id.clone(),
        states,
        actions,
        initiated,
    })
}

fn lab_array<F: Scalar>(s: &StateVector<F>, offset: usize) -> [F; N_LABS] {
    let mut out = [F::zero(); N_LABS];
    out.copy_from_slice(&s.0[offset..offset + N_LABS]);
    out
}

/// Information scores `g` at every hour where each lab was ordered.
pub fn order_info_scores<F: Scalar>(
    admission: &Admission,
    forecast: &AdmissionForecast<F>,
    ctx: &RewardContext<F>,
) -> Result<[Vec<F>; N_LABS], MdpError> {
    let steps = build_states(admission, forecast, ctx)?;
    let mut scores: [Vec<F>; N_LABS] = Default::default();
    for (s, a) in steps.states.iter().zip(&steps.actions) {
        for lab in Lab::ALL.into_iter().filter(|&l| a.orders(l)) {
            let k = lab.index();
            let sigma = s.lab_std(lab).max(ctx.sigma_floor[k]);
            scores[k].push(info_score(s.lab_mean(lab), s.last_value(lab), sigma));
        }
    }
    Ok(scores)
}

/// Reward of taking `action` in `state`, given the next state's SOFA and
/// the interventions starting in between.
pub fn step_reward<F: Scalar>(
    state: &StateVector<F>,
    next_state: &StateVector<F>,
    action: ActionVector,
    initiated: &[InterventionCategory],
    ctx: &RewardContext<F>,
) -> RewardVector<F> {
    RewardVector([
        reward_sofa(action, next_state.sofa(), state.sofa()),
        reward_treat(action, initiated),
        reward_info(
            action,
            &lab_array(state, StateVector::<F>::LAB_MEANS),
            &lab_array(state, StateVector::<F>::LAST_VALUES),
            &lab_array(state, StateVector::<F>::LAB_STDS),
            &ctx.thresholds,
            &ctx.sigma_floor,
        ),
        -reward_cost(action, &lab_array(state, StateVector::<F>::ELAPSED), &ctx.decay()),
    ])
}

/// One transition per hour `t` with `t + 1 < LOS`.
pub fn build_transitions<F: Scalar>(
    admission: &Admission,
    forecast: &AdmissionForecast<F>,
    ctx: &RewardContext<F>,
) -> Result<Vec<Transition<F>>, MdpError> {
    let steps = build_states(admission, forecast, ctx)?;
    Ok(transitions_from_steps(&steps, ctx))
}

pub(crate) fn transitions_from_steps<F: Scalar>(
    steps: &AdmissionSteps<F>,
    ctx: &RewardContext<F>,
) -> Vec<Transition<F>> {
    let n = steps.states.len();
    (0..n.saturating_sub(1))
        .map(|t| {
            let (s, s_next, a) = (&steps.states[t], &steps.states[t + 1], steps.actions[t]);
            Transition {
                state: *s,
                action: a,
                next_state: *s_next,
                reward: step_reward(s, s_next, a, &steps.initiated[t], ctx),
                admission_id: steps.admission_id.clone(),
                time: t as u32,
                terminal: t + 2 == n,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{simulate_cohort, CohortConfig, InterventionEvent, ObservationEvent, OrderEvent};
    use crate::forecast::{ForecastConfig, KernelParams};
    use std::collections::BTreeMap;

    fn forecaster() -> Forecaster<f64> {
        let mut kernels = BTreeMap::new();
        let mut sd = BTreeMap::new();
        let mut mean = BTreeMap::new();
        for t in TraitId::CONTINUOUS {
            kernels.insert(
                t,
                KernelParams { output_variance: 1.0, lengthscale: 6.0, noise_variance: 0.01, prior_mean: 5.0 },
            );
            sd.insert(t, 1.0);
            mean.insert(t, 5.0);
        }
        Forecaster { kernels, cohort_sd: sd, cohort_mean: mean }
    }

    fn flat_admission(los: u32, orders: Vec<OrderEvent>) -> Admission {
        let mut events = Vec::new();
        for t in TraitId::REQUIRED {
            let value = match t {
                TraitId::Gcs => 15.0,
                TraitId::Platelet => 250.0,
                TraitId::Pao2Fio2 => 450.0,
                TraitId::MeanBp => 80.0,
                TraitId::Bilirubin | TraitId::Creatinine => 0.8,
                _ => 5.0,
            };
            if let Some(lab) = t.as_lab() {
                for o in orders.iter().filter(|o| o.lab == lab) {
                    events.push(ObservationEvent { trait_id: t, timestamp: o.timestamp, value });
                }
            } else {
                events.push(ObservationEvent { trait_id: t, timestamp: 0.5, value });
            }
        }
        Admission {
            admission_id: "T1".into(),
            length_of_stay: los,
            events,
            orders,
            interventions: vec![],
        }
    }

    #[test]
    fn fence_post_count() {
        let fc = forecaster();
        let ctx = RewardContext::new(MdpConfig::default(), &fc).unwrap();
        let adm = flat_admission(48, vec![]);
        let f = fc.forecast_admission(&adm, &[]).unwrap();
        let tr = build_transitions(&adm, &f, &ctx).unwrap();
        assert_eq!(tr.len(), 47);
        assert!(tr.last().unwrap().terminal);
        assert!(tr.iter().rev().skip(1).all(|t| !t.terminal));
    }

    #[test]
    fn no_orders_means_zero_actions_and_rewards() {
        let fc = forecaster();
        let ctx = RewardContext::new(MdpConfig::default(), &fc).unwrap();
        let mut adm = flat_admission(40, vec![]);
        adm.interventions.push(InterventionEvent {
            category: InterventionCategory::Antibiotics,
            onset: 5.5,
            duration: 3.0,
        });
        let f = fc.forecast_admission(&adm, &[]).unwrap();
        for tr in build_transitions(&adm, &f, &ctx).unwrap() {
            assert!(tr.action.is_zero());
            assert!(tr.reward.is_zero());
            assert_eq!(tr.state.elapsed(Lab::Wbc), 48.0);
        }
    }

    #[test]
    fn actions_elapsed_and_treatment() {
        let fc = forecaster();
        let ctx = RewardContext::new(MdpConfig::default(), &fc).unwrap();
        let orders = vec![
            OrderEvent { lab: Lab::Wbc, timestamp: 3.4 },
            OrderEvent { lab: Lab::Wbc, timestamp: 10.0 },
        ];
        let mut adm = flat_admission(30, orders);
        adm.interventions.push(InterventionEvent {
            category: InterventionCategory::Dialysis,
            onset: 10.5,
            duration: 3.0,
        });
        let f = fc.forecast_admission(&adm, &[]).unwrap();
        let tr = build_transitions(&adm, &f, &ctx).unwrap();
        assert_eq!(tr[3].action, ActionVector::single(Lab::Wbc));
        assert_eq!(tr[9].action, ActionVector::single(Lab::Wbc));
        assert!(tr[10].action.is_zero());
        assert_eq!(tr[2].state.elapsed(Lab::Wbc), 48.0);
        assert!((tr[5].state.elapsed(Lab::Wbc) - 1.6).abs() < 1e-12);
        assert_eq!(tr[10].state.elapsed(Lab::Wbc), 0.0);
        assert_eq!(tr[10].state.last_value(Lab::Wbc), 5.0);
        // dialysis starts in (10, 11] but nothing is ordered then
        assert_eq!(tr[10].reward.0[RewardVector::<f64>::TREAT], 0.0);
        let cost = tr[9].reward.0[RewardVector::<f64>::COST];
        assert!((cost + (-(9.0 - 3.4) / 6.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn missing_forecast_is_an_error() {
        let fc = forecaster();
        let ctx = RewardContext::new(MdpConfig::default(), &fc).unwrap();
        let adm = flat_admission(30, vec![]);
        let mut f = fc.forecast_admission(&adm, &[]).unwrap();
        f.filtering.remove(&TraitId::Lactate);
        assert!(matches!(
            build_transitions(&adm, &f, &ctx),
            Err(MdpError::MissingForecast { .. })
        ));
    }

    #[test]
    fn simulated_cohort_invariants() {
        let cohort = simulate_cohort(&CohortConfig { n_admissions: 40, seed: 2, ..Default::default() }).unwrap();
        let fc = Forecaster::<f64>::fit(&cohort, &ForecastConfig::default()).unwrap();
        let forecasts = fc.forecast_cohort(&cohort, &[]).unwrap();
        let ctx = RewardContext::fit(MdpConfig::default(), &fc, &cohort, &forecasts).unwrap();
        assert!(ctx.thresholds.iter().all(|c| *c >= 0.0));
        for (adm, f) in cohort.iter().zip(&forecasts) {
            let tr = build_transitions(adm, f, &ctx).unwrap();
            assert_eq!(tr.len(), adm.length_of_stay as usize - 1);
            for t in &tr {
                let s = &t.state.0;
                assert!(s[0] >= 0.0 && s[0] <= 24.0);
                assert!(s[StateVector::<f64>::ELAPSED..].iter().all(|d| (0.0..=48.0).contains(d)));
                assert!(s[StateVector::<f64>::LAB_STDS..StateVector::<f64>::LAST_VALUES].iter().all(|v| *v >= 0.0));
                let r = &t.reward.0;
                assert!(r[0] == 0.0 || r[0] == 1.0);
                assert!(r[1] >= 0.0 && r[1] <= 4.0 && r[2] >= 0.0 && r[3] <= 0.0);
                if t.action.is_zero() {
                    assert!(t.reward.is_zero());
                }
                let recomputed = reward_sofa(t.action, t.next_state.sofa(), t.state.sofa());
                assert_eq!(recomputed, r[0]);
            }
        }
    }
}
