use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CohortError, TraitId};

/// Latent severity states: stable, deteriorating, septic.
pub const SEVERITY_STATES: usize = 3;

/// Generative model for one trait.
///
/// The latent standardized level of a trait is the sum of a per-admission
/// offset, a mean-reverting within-admission process and a severity shift.
/// Shifts are centred on the stationary severity distribution so the
/// cohort-level mean and SD match `mean` and `sd`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitModel {
    pub mean: f64,
    pub sd: f64,
    /// Autocorrelation time-constant of the within-admission process, hours.
    pub tau_hours: f64,
    /// Plausible bounds; sampled values are clamped into them.
    pub lower: f64,
    pub upper: f64,
    /// Use a log-normal marginal (for strictly positive labs).
    #[serde(default)]
    pub log_normal: bool,
    /// Shift of the standardized level in each severity state.
    pub severity_shift: [f64; SEVERITY_STATES],
    /// Mean recordings per hour for traits that are not orderable labs.
    #[serde(default)]
    pub obs_per_hour: f64,
    /// Round sampled values to this many decimals.
    #[serde(default = "default_decimals")]
    pub decimals: u32,
}

fn default_decimals() -> u32 {
    2
}

/// Hourly transition probabilities of the latent severity chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityChain {
    pub p_deteriorate: f64,
    pub p_recover: f64,
    /// Probability per hour that a deteriorating patient becomes septic.
    pub sepsis_hazard: f64,
    pub p_resolve: f64,
}

impl SeverityChain {
    /// Stationary distribution of the birth-death chain.
    pub fn stationary(&self) -> [f64; SEVERITY_STATES] {
        let r1 = if self.p_recover > 0.0 {
            self.p_deteriorate / self.p_recover
        } else if self.p_deteriorate > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        let r2 = if self.p_resolve > 0.0 {
            self.sepsis_hazard / self.p_resolve
        } else if self.sepsis_hazard > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        let w = [1.0, r1, r1 * r2];
        if w.iter().any(|x| !x.is_finite()) {
            // absorbing chain; the generator validates against this
            return [1.0, 0.0, 0.0];
        }
        let z: f64 = w.iter().sum();
        [w[0] / z, w[1] / z, w[2] / z]
    }

    pub fn next_state(&self, state: usize, u: f64) -> usize {
        match state {
            0 => usize::from(u < self.p_deteriorate),
            1 => {
                if u < self.p_recover {
                    0
                } else if u < self.p_recover + self.sepsis_hazard {
                    2
                } else {
                    1
                }
            }
            _ => {
                if u < self.p_resolve {
                    1
                } else {
                    2
                }
            }
        }
    }
}

/// Clinician lab-ordering behaviour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderModel {
    /// Baseline orders per hour for creatinine, BUN, WBC, lactate.
    pub rate_per_hour: [f64; 4],
    /// Multiplier on every rate in each severity state.
    pub severity_multiplier: [f64; SEVERITY_STATES],
    /// Probability a BUN order accompanies each creatinine order.
    pub bun_with_creatinine: f64,
    /// Probability each lab is drawn in the admission panel.
    pub admission_panel_prob: f64,
    /// Admission panel is drawn uniformly within this many hours of admission.
    pub admission_delay_hours: f64,
}

/// Intervention onsets while septic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionModel {
    /// Hourly hazard for antibiotics, vasopressors, dialysis, ventilation.
    pub septic_hazard: [f64; 4],
    pub min_duration_hours: f64,
    pub mean_extra_duration_hours: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub n_admissions: usize,
    pub seed: u64,
    /// Length of stay is `los_min + Exp(los_mean_extra)`, redrawn until below 480.
    pub los_min_hours: u32,
    pub los_mean_extra_hours: f64,
    /// Fraction of standardized variance explained by the per-admission offset.
    pub between_admission_fraction: f64,
    pub severity: SeverityChain,
    pub orders: OrderModel,
    pub interventions: InterventionModel,
    pub traits: BTreeMap<TraitId, TraitModel>,
}

impl Default for CohortConfig {
    fn default() -> Self {
        let t = |mean: f64,
                 sd: f64,
                 tau_hours: f64,
                 (lower, upper): (f64, f64),
                 log_normal: bool,
                 shift: [f64; 3],
                 obs_per_hour: f64,
                 decimals: u32| TraitModel {
            mean,
            sd,
            tau_hours,
            lower,
            upper,
            log_normal,
            severity_shift: shift,
            obs_per_hour,
            decimals,
        };
        let mut traits = BTreeMap::new();
        traits.insert(
            TraitId::RespRate,
            t(20.1, 5.7, 6.0, (4.0, 60.0), false, [0.0, 0.6, 1.3], 1.0, 0),
        );
        traits.insert(
            TraitId::HeartRate,
            t(87.5, 18.2, 6.0, (25.0, 220.0), false, [0.0, 0.8, 1.5], 0.95, 0),
        );
        traits.insert(
            TraitId::MeanBp,
            t(77.9, 15.3, 6.0, (20.0, 180.0), false, [0.0, -0.5, -1.2], 0.95, 0),
        );
        traits.insert(
            TraitId::Temp,
            t(98.5, 1.4, 8.0, (88.0, 108.0), false, [0.0, 0.4, 1.0], 0.25, 1),
        );
        traits.insert(
            TraitId::Creatinine,
            t(1.5, 1.2, 24.0, (0.1, 20.0), true, [0.0, 0.5, 1.0], 0.0, 2),
        );
        traits.insert(
            TraitId::Bun,
            t(31.0, 21.1, 24.0, (1.0, 250.0), true, [0.0, 0.4, 0.8], 0.0, 1),
        );
        traits.insert(
            TraitId::Wbc,
            t(11.6, 6.2, 12.0, (0.1, 150.0), true, [0.0, 0.6, 1.3], 0.0, 1),
        );
        traits.insert(
            TraitId::Lactate,
            t(2.4, 1.8, 8.0, (0.2, 30.0), true, [0.0, 0.7, 1.6], 0.0, 2),
        );
        traits.insert(
            TraitId::Bilirubin,
            t(1.5, 2.5, 24.0, (0.1, 50.0), true, [0.0, 0.3, 0.8], 1.0 / 24.0, 2),
        );
        traits.insert(
            TraitId::Platelet,
            t(210.0, 110.0, 24.0, (5.0, 1500.0), false, [0.0, -0.4, -1.0], 1.0 / 24.0, 0),
        );
        traits.insert(
            TraitId::Pao2Fio2,
            t(280.0, 110.0, 12.0, (30.0, 700.0), false, [0.0, -0.5, -1.2], 1.0 / 12.0, 0),
        );
        traits.insert(
            TraitId::Gcs,
            t(12.5, 3.0, 12.0, (3.0, 15.0), false, [0.0, -0.3, -0.9], 0.25, 0),
        );
        CohortConfig {
            n_admissions: 500,
            seed: 0,
            los_min_hours: 25,
            los_mean_extra_hours: 112.0,
            between_admission_fraction: 0.4,
            severity: SeverityChain {
                p_deteriorate: 0.02,
                p_recover: 0.06,
                sepsis_hazard: 0.04,
                p_resolve: 0.05,
            },
            orders: OrderModel {
                rate_per_hour: [0.06, 0.01, 0.055, 0.035],
                severity_multiplier: [0.8, 1.6, 2.2],
                bun_with_creatinine: 0.9,
                admission_panel_prob: 0.9,
                admission_delay_hours: 4.0,
            },
            interventions: InterventionModel {
                septic_hazard: [0.12, 0.07, 0.02, 0.04],
                min_duration_hours: 2.0,
                mean_extra_duration_hours: 20.0,
            },
            traits,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<(), CohortError> {
        let bad = |m: String| Err(CohortError::Config(m));
        if self.n_admissions == 0 {
            return bad("n_admissions must be positive".into());
        }
        if self.los_min_hours <= super::MIN_LOS_HOURS || self.los_min_hours >= super::MAX_LOS_HOURS
        {
            return bad(format!("los_min_hours {} not in (24, 480)", self.los_min_hours));
        }
        if !(self.los_mean_extra_hours > 0.0) {
            return bad("los_mean_extra_hours must be positive".into());
        }
        if !(0.0..1.0).contains(&self.between_admission_fraction) {
            return bad("between_admission_fraction must lie in [0, 1)".into());
        }
        let s = &self.severity;
        for (name, p) in [
            ("p_deteriorate", s.p_deteriorate),
            ("p_recover", s.p_recover),
            ("sepsis_hazard", s.sepsis_hazard),
            ("p_resolve", s.p_resolve),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if s.p_recover + s.sepsis_hazard > 1.0 {
            return bad("p_recover + sepsis_hazard exceeds 1".into());
        }
        if (s.p_deteriorate > 0.0 && s.p_recover == 0.0)
            || (s.sepsis_hazard > 0.0 && s.p_resolve == 0.0)
        {
            return bad("severity chain has an absorbing state".into());
        }
        let o = &self.orders;
        if o.rate_per_hour.iter().any(|r| !(*r >= 0.0))
            || o.severity_multiplier.iter().any(|m| !(*m >= 0.0))
        {
            return bad("order rates must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&o.bun_with_creatinine)
            || !(0.0..=1.0).contains(&o.admission_panel_prob)
            || !(o.admission_delay_hours > 0.0)
        {
            return bad("invalid order model".into());
        }
        let iv = &self.interventions;
        if iv.septic_hazard.iter().any(|h| !(0.0..=1.0).contains(h))
            || !(iv.min_duration_hours > 0.0)
            || !(iv.mean_extra_duration_hours >= 0.0)
        {
            return bad("invalid intervention model".into());
        }
        let shift_var = |m: &TraitModel| {
            let pi = self.severity.stationary();
            let mean: f64 = (0..3).map(|k| pi[k] * m.severity_shift[k]).sum();
            (0..3)
                .map(|k| pi[k] * (m.severity_shift[k] - mean).powi(2))
                .sum::<f64>()
        };
        for required in super::TraitId::REQUIRED {
            let Some(m) = self.traits.get(&required) else {
                return bad(format!("missing generative model for {}", required.name()));
            };
            if !(m.sd > 0.0) || !(m.tau_hours > 0.0) || !(m.lower < m.upper) {
                return bad(format!("{}: sd, tau must be positive and bounds ordered", required.name()));
            }
            if m.log_normal && !(m.mean > 0.0) {
                return bad(format!("{}: log-normal trait needs a positive mean", required.name()));
            }
            if !(m.obs_per_hour >= 0.0) {
                return bad(format!("{}: negative observation rate", required.name()));
            }
            if self.within_variance(shift_var(m)) <= 0.0 {
                return bad(format!(
                    "{}: severity shifts explain all of the variance",
                    required.name()
                ));
            }
        }
        Ok(())
    }

    /// Standardized variance left for the within-admission process.
    pub(crate) fn within_variance(&self, shift_variance: f64) -> f64 {
        1.0 - self.between_admission_fraction - shift_variance
    }
}
