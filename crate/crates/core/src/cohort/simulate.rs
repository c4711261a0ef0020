use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;

use super::{
    Admission, CohortConfig, CohortError, InterventionCategory, InterventionEvent, Lab,
    ObservationEvent, OrderEvent, TraitId, TraitModel, MAX_LOS_HOURS,
};
use crate::seeding::derive_seed;

/// Generates `config.n_admissions` synthetic admissions.
///
/// Each admission draws from its own stream seeded by `(seed, index)`, so
/// the result does not depend on how rayon schedules the work.
pub fn simulate_cohort(config: &CohortConfig) -> Result<Vec<Admission>, CohortError> {
    config.validate()?;
    let marginals = Marginals::new(config);
    Ok((0..config.n_admissions)
        .into_par_iter()
        .map(|index| simulate_admission(config, &marginals, index))
        .collect())
}

/// Per-trait transform from the standardized latent level to trait units.
struct Marginals {
    stationary: [f64; 3],
    entries: Vec<(TraitId, TraitModel, Transform)>,
}

struct Transform {
    centre: f64,
    within_var: f64,
    scale: f64,
    location: f64,
}

impl Marginals {
    fn new(config: &CohortConfig) -> Self {
        let pi = config.severity.stationary();
        let b = config.between_admission_fraction;
        let entries = config
            .traits
            .iter()
            .map(|(&id, m)| {
                let pi = recording_weights(config, id, &pi);
                let centre: f64 = (0..3).map(|k| pi[k] * m.severity_shift[k]).sum();
                let shift_var: f64 = (0..3)
                    .map(|k| pi[k] * (m.severity_shift[k] - centre).powi(2))
                    .sum();
                let within_var = config.within_variance(shift_var);
                let (scale, location) = if m.log_normal {
                    let sigma = (1.0 + (m.sd / m.mean).powi(2)).ln().sqrt();
                    // match the mixture mean exactly
                    let mgf: f64 = (0..3)
                        .map(|k| {
                            pi[k]
                                * (sigma * (m.severity_shift[k] - centre)
                                    + 0.5 * sigma * sigma * (b + within_var))
                                    .exp()
                        })
                        .sum();
                    (sigma, m.mean.ln() - mgf.ln())
                } else {
                    (m.sd, m.mean)
                };
                (
                    id,
                    m.clone(),
                    Transform {
                        centre,
                        within_var,
                        scale,
                        location,
                    },
                )
            })
            .collect();
        Marginals {
            stationary: pi,
            entries,
        }
    }
}

/// Severity distribution at recording times. Labs are recorded when
/// ordered, and ordering intensity depends on severity, so the mean of
/// recorded values is matched under this tilted distribution.
fn recording_weights(config: &CohortConfig, id: TraitId, pi: &[f64; 3]) -> [f64; 3] {
    let Some(lab) = id.as_lab() else {
        return *pi;
    };
    let om = &config.orders;
    let rate = match lab {
        Lab::Bun => om.rate_per_hour[0] * om.bun_with_creatinine + om.rate_per_hour[1],
        other => om.rate_per_hour[other.index()],
    };
    let mut w = [0.0; 3];
    for k in 0..3 {
        w[k] = pi[k] * (1.0 - (-rate * om.severity_multiplier[k]).exp());
    }
    let z: f64 = w.iter().sum();
    if z > 0.0 {
        w.map(|x| x / z)
    } else {
        *pi
    }
}

fn round_to(x: f64, decimals: u32) -> f64 {
    let f = 10f64.powi(decimals as i32);
    (x * f).round() / f
}

fn round_time(t: f64) -> f64 {
    round_to(t, 3)
}

fn simulate_admission(config: &CohortConfig, marginals: &Marginals, index: usize) -> Admission {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, index as u64));
    let extra = Exp::new(1.0 / config.los_mean_extra_hours).expect("positive mean");
    let los = loop {
        let l = config.los_min_hours as f64 + extra.sample(&mut rng);
        if l < MAX_LOS_HOURS as f64 {
            break l.floor() as u32;
        }
    };
    let hours = los as usize;

    // latent severity, one state per hour
    let mut severity = Vec::with_capacity(hours);
    let u: f64 = rng.gen();
    let pi = marginals.stationary;
    let mut state = if u < pi[0] {
        0
    } else if u < pi[0] + pi[1] {
        1
    } else {
        2
    };
    for _ in 0..hours {
        severity.push(state);
        state = config.severity.next_state(state, rng.gen());
    }
    let severity_at = |t: f64| severity[(t.floor() as usize).min(hours - 1)];

    // interventions while septic
    let iv = &config.interventions;
    let duration_extra = (iv.mean_extra_duration_hours > 0.0)
        .then(|| Exp::new(1.0 / iv.mean_extra_duration_hours).expect("positive mean"));
    let mut interventions = Vec::new();
    let mut active_until = [f64::NEG_INFINITY; 4];
    for (h, &s) in severity.iter().enumerate() {
        if s != 2 {
            continue;
        }
        for (c, category) in InterventionCategory::ALL.into_iter().enumerate() {
            if (h as f64) < active_until[c] {
                continue;
            }
            if rng.gen::<f64>() < iv.septic_hazard[c] {
                let onset = round_time(h as f64 + rng.gen_range(0.001..1.0)).min(los as f64);
                let mut duration = iv.min_duration_hours
                    + duration_extra.as_ref().map_or(0.0, |d| d.sample(&mut rng));
                duration = round_time(duration.min(los as f64 - onset)).max(0.001);
                active_until[c] = onset + duration;
                interventions.push(InterventionEvent {
                    category,
                    onset,
                    duration,
                });
            }
        }
    }

    // clinician orders
    let om = &config.orders;
    let mut orders: Vec<OrderEvent> = Vec::new();
    let push_order = |orders: &mut Vec<OrderEvent>, lab: Lab, t: f64| {
        let t = round_time(t).clamp(0.001, los as f64);
        if !orders.iter().any(|o| o.lab == lab && o.timestamp == t) {
            orders.push(OrderEvent { lab, timestamp: t });
        }
    };
    let panel_time = rng.gen_range(0.05..om.admission_delay_hours);
    for lab in Lab::ALL {
        if rng.gen::<f64>() < om.admission_panel_prob {
            push_order(&mut orders, lab, panel_time);
        }
    }
    for (h, &s) in severity.iter().enumerate() {
        let mult = om.severity_multiplier[s];
        let fire = |rng: &mut ChaCha8Rng, rate: f64| rng.gen::<f64>() < 1.0 - (-rate * mult).exp();
        if fire(&mut rng, om.rate_per_hour[0]) {
            let t = h as f64 + rng.gen_range(0.001..1.0);
            push_order(&mut orders, Lab::Creatinine, t);
            if rng.gen::<f64>() < om.bun_with_creatinine {
                push_order(&mut orders, Lab::Bun, t);
            }
        }
        for lab in [Lab::Bun, Lab::Wbc, Lab::Lactate] {
            if fire(&mut rng, om.rate_per_hour[lab.index()]) {
                let t = h as f64 + rng.gen_range(0.001..1.0);
                push_order(&mut orders, lab, t);
            }
        }
    }
    for lab in Lab::ALL {
        if !orders.iter().any(|o| o.lab == lab) {
            let t = rng.gen_range(0.001..los as f64);
            push_order(&mut orders, lab, t);
        }
    }

    // observation times per trait
    let mut events = Vec::new();
    let between_sd = config.between_admission_fraction.sqrt();
    for (id, model, tf) in &marginals.entries {
        let mut times: Vec<f64> = match id.as_lab() {
            Some(lab) => orders
                .iter()
                .filter(|o| o.lab == lab)
                .map(|o| o.timestamp)
                .collect(),
            None => {
                let mut ts = Vec::new();
                if model.obs_per_hour > 0.0 {
                    let gap = Exp::new(model.obs_per_hour).expect("positive rate");
                    // first recording shortly after admission
                    let mut t = rng.gen_range(0.0..(1.0 / model.obs_per_hour).min(3.0));
                    while t < los as f64 {
                        ts.push(round_time(t));
                        t += gap.sample(&mut rng);
                    }
                }
                if matches!(id, TraitId::RespRate | TraitId::HeartRate | TraitId::MeanBp) {
                    ts.push(los as f64);
                }
                if ts.is_empty() {
                    ts.push(round_time(rng.gen_range(0.0..los as f64)));
                }
                ts
            }
        };
        times.sort_by(f64::total_cmp);
        times.dedup();

        let offset = between_sd * rng.sample::<f64, _>(StandardNormal);
        let within_sd = tf.within_var.sqrt();
        let mut ou = within_sd * rng.sample::<f64, _>(StandardNormal);
        let mut last_t = times.first().copied().unwrap_or(0.0);
        for t in times {
            let a = (-(t - last_t) / model.tau_hours).exp();
            ou = ou * a + within_sd * (1.0 - a * a).sqrt() * rng.sample::<f64, _>(StandardNormal);
            last_t = t;
            let z = offset + ou + model.severity_shift[severity_at(t)] - tf.centre;
            let raw = if model.log_normal {
                (tf.location + tf.scale * z).exp()
            } else {
                tf.location + tf.scale * z
            };
            let value = round_to(raw.clamp(model.lower, model.upper), model.decimals);
            events.push(ObservationEvent {
                trait_id: *id,
                timestamp: t,
                value,
            });
        }
    }

    // dopamine flag follows vasopressor administration
    events.push(ObservationEvent {
        trait_id: TraitId::Dopamine,
        timestamp: 0.0,
        value: 0.0,
    });
    for v in interventions
        .iter()
        .filter(|v| v.category == InterventionCategory::Vasopressors)
    {
        events.push(ObservationEvent {
            trait_id: TraitId::Dopamine,
            timestamp: v.onset,
            value: 1.0,
        });
        let end = round_time(v.onset + v.duration);
        if end < los as f64 {
            events.push(ObservationEvent {
                trait_id: TraitId::Dopamine,
                timestamp: end,
                value: 0.0,
            });
        }
    }

    let mut admission = Admission {
        admission_id: format!("A{:06}", index + 1),
        length_of_stay: los,
        events,
        orders,
        interventions,
    };
    admission.canonicalize();
    admission
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, n: usize) -> CohortConfig {
        CohortConfig {
            n_admissions: n,
            seed,
            ..CohortConfig::default()
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let a = simulate_cohort(&small(7, 10)).unwrap();
        let b = simulate_cohort(&small(7, 10)).unwrap();
        assert_eq!(a, b);
        let c = simulate_cohort(&small(8, 10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn admissions_satisfy_invariants() {
        for adm in simulate_cohort(&small(3, 60)).unwrap() {
            adm.check_invariants().unwrap();
            for t in TraitId::ALL {
                assert!(adm.observations_of(t).next().is_some(), "{} missing", t.name());
            }
        }
    }

    #[test]
    fn zero_sepsis_hazard_gives_no_interventions() {
        let mut cfg = small(11, 80);
        cfg.severity.sepsis_hazard = 0.0;
        let cohort = simulate_cohort(&cfg).unwrap();
        assert!(cohort.iter().all(|a| a.interventions.is_empty()));
    }

    #[test]
    fn creatinine_mean_matches_configuration() {
        // mean over recordings; SE clustered by admission
        let cfg = small(21, 1500);
        let cohort = simulate_cohort(&cfg).unwrap();
        let clusters: Vec<(f64, f64)> = cohort
            .iter()
            .map(|a| {
                let v: Vec<f64> = a.observations_of(TraitId::Creatinine).map(|e| e.value).collect();
                (v.iter().sum::<f64>(), v.len() as f64)
            })
            .collect();
        let k = clusters.len() as f64;
        let total: f64 = clusters.iter().map(|c| c.1).sum();
        let mean = clusters.iter().map(|c| c.0).sum::<f64>() / total;
        let resid: f64 = clusters.iter().map(|(s, n)| (s - mean * n).powi(2)).sum();
        let se = (resid * k / (k - 1.0)).sqrt() / total;
        assert!(
            (mean - 1.5).abs() < 3.0 * se,
            "cohort creatinine mean {mean} vs 1.5 (se {se})"
        );
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = small(1, 0);
        assert!(matches!(simulate_cohort(&cfg), Err(CohortError::Config(_))));
        cfg.n_admissions = 3;
        cfg.traits.get_mut(&TraitId::Wbc).unwrap().sd = -1.0;
        assert!(matches!(simulate_cohort(&cfg), Err(CohortError::Config(_))));
    }

    #[test]
    fn labs_are_sparse_and_vitals_dense() {
        let cohort = simulate_cohort(&small(5, 100)).unwrap();
        let hours: f64 = cohort.iter().map(|a| a.length_of_stay as f64).sum();
        let per_day = |t: TraitId| {
            cohort.iter().map(|a| a.observations_of(t).count()).sum::<usize>() as f64 / hours * 24.0
        };
        for lab in Lab::ALL {
            let d = per_day(lab.trait_id());
            assert!((0.7..=4.0).contains(&d), "{} {d}/day", lab.name());
        }
        let hr = per_day(TraitId::HeartRate);
        assert!((18.0..=30.0).contains(&hr), "hr {hr}/day");
    }
}
