//! Hourly resampling of sparse, irregular trait series.
//!
//! Continuous traits get independent per-trait Gaussian processes with an
//! exponential kernel whose hyperparameters are shared across the cohort.
//! GCS and the dopamine flag are carried forward from the last recording.

mod gp;

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Admission, TraitId};
use crate::Scalar;

pub use gp::{fit_kernel, log_marginal_likelihood, predict, KernelParams, KernelSearch, MIN_FIT_OBSERVATIONS};

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("not enough observations to fit {trait_name}: {observations} (need {})", MIN_FIT_OBSERVATIONS)]
    InsufficientData {
        trait_name: String,
        observations: usize,
    },
    #[error("invalid kernel parameters {0}")]
    InvalidParams(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("cannot impute {0}: no observations")]
    EmptySeries(String),
    #[error("no fitted model for {0}")]
    MissingTrait(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Conditioning set used for a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Observations at or before the query time.
    Filtering,
    /// Every observation of the admission.
    Smoothing,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Filtering => "filtering",
            Mode::Smoothing => "smoothing",
        }
    }
}

/// Observations of one trait in one admission, strictly increasing in time.
#[derive(Debug, Clone, PartialEq)]
pub struct TraitSeries<F> {
    trait_id: TraitId,
    times: Vec<F>,
    values: Vec<F>,
}

impl<F: Scalar> TraitSeries<F> {
    pub fn new(trait_id: TraitId, times: Vec<F>, values: Vec<F>) -> Result<Self, ForecastError> {
        if times.len() != values.len() {
            return Err(ForecastError::Argument("times and values differ in length".into()));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(ForecastError::Argument(format!(
                "{} timestamps not strictly increasing",
                trait_id.name()
            )));
        }
        if times.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(ForecastError::Argument("non-finite series entry".into()));
        }
        Ok(TraitSeries {
            trait_id,
            times,
            values,
        })
    }

    /// Collects an admission's recordings; values sharing a timestamp are averaged.
    pub fn from_admission(admission: &Admission, trait_id: TraitId) -> Self {
        let mut pairs: Vec<(f64, f64)> = admission
            .observations_of(trait_id)
            .map(|e| (e.timestamp, e.value))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut times: Vec<F> = Vec::with_capacity(pairs.len());
        let mut values: Vec<F> = Vec::with_capacity(pairs.len());
        let mut k = 0;
        while k < pairs.len() {
            let t = pairs[k].0;
            let mut sum = 0.0;
            let mut n = 0.0;
            while k < pairs.len() && pairs[k].0 == t {
                sum += pairs[k].1;
                n += 1.0;
                k += 1;
            }
            times.push(F::of(t));
            values.push(F::of(sum / n));
        }
        TraitSeries {
            trait_id,
            times,
            values,
        }
    }

    pub fn trait_id(&self) -> TraitId {
        self.trait_id
    }

    pub fn times(&self) -> &[F] {
        &self.times
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Hourly predictive means and standard deviations of one trait.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastGrid<F> {
    pub trait_id: TraitId,
    pub grid_times: Vec<F>,
    pub means: Vec<F>,
    pub stds: Vec<F>,
}

/// Last observation carried forward; before the first recording the first
/// value is carried backward. Standard deviations are zero.
pub fn impute_locf<F: Scalar>(series: &TraitSeries<F>, grid: &[F]) -> Result<ForecastGrid<F>, ForecastError> {
    if series.is_empty() {
        return Err(ForecastError::EmptySeries(series.trait_id().name().into()));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(ForecastError::Argument("grid times must be strictly increasing".into()));
    }
    let (times, values) = (series.times(), series.values());
    let mut k = 0;
    let means = grid
        .iter()
        .map(|&t| {
            while k + 1 < times.len() && times[k + 1] <= t {
                k += 1;
            }
            values[k]
        })
        .collect();
    Ok(ForecastGrid {
        trait_id: series.trait_id(),
        grid_times: grid.to_vec(),
        means,
        stds: vec![F::zero(); grid.len()],
    })
}

/// GCS is not modelled with a GP; it is carried forward.
pub fn impute_gcs<F: Scalar>(series: &TraitSeries<F>, grid: &[F]) -> Result<ForecastGrid<F>, ForecastError> {
    impute_locf(series, grid)
}

/// Hourly grid `0, 1, …, LOS-1`.
pub fn hourly_grid<F: Scalar>(length_of_stay: u32) -> Vec<F> {
    (0..length_of_stay).map(|h| F::of(h as f64)).collect()
}

// ── Cohort-level forecaster ─────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastConfig {
    /// Series used per trait when fitting kernels (evenly strided subset).
    pub max_fit_series: usize,
    #[serde(default)]
    pub search: KernelSearch,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        ForecastConfig {
            max_fit_series: 400,
            search: KernelSearch::default(),
        }
    }
}

/// Kernels fitted on a training cohort, plus the cohort SD of each trait.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecaster<F> {
    pub kernels: BTreeMap<TraitId, KernelParams<F>>,
    pub cohort_sd: BTreeMap<TraitId, F>,
    pub cohort_mean: BTreeMap<TraitId, F>,
}

/// Per-admission hourly forecasts.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmissionForecast<F> {
    pub admission_id: String,
    pub filtering: BTreeMap<TraitId, ForecastGrid<F>>,
    /// Present only for the traits requested in smoothing mode.
    pub smoothing: BTreeMap<TraitId, ForecastGrid<F>>,
}

impl<F: Scalar> Forecaster<F> {
    pub fn fit(train: &[Admission], config: &ForecastConfig) -> Result<Self, ForecastError> {
        let stride = (train.len() / config.max_fit_series.max(1)).max(1);
        let fitted: Result<Vec<_>, ForecastError> = TraitId::CONTINUOUS
            .par_iter()
            .map(|&t| {
                let series: Vec<TraitSeries<F>> = train
                    .iter()
                    .step_by(stride)
                    .map(|a| TraitSeries::from_admission(a, t))
                    .filter(|s| !s.is_empty())
                    .collect();
                fit_kernel(t, &series, &config.search).map(|k| (t, k))
            })
            .collect();
        let kernels = fitted?.into_iter().collect();

        let mut cohort_sd = BTreeMap::new();
        let mut cohort_mean = BTreeMap::new();
        for t in TraitId::ALL {
            let values: Vec<f64> = train
                .iter()
                .flat_map(|a| a.observations_of(t).map(|e| e.value))
                .collect();
            let n = values.len().max(1) as f64;
            let mean = values.iter().sum::<f64>() / n;
            let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            cohort_mean.insert(t, F::of(mean));
            cohort_sd.insert(t, F::of(sd));
        }
        Ok(Forecaster {
            kernels,
            cohort_sd,
            cohort_mean,
        })
    }

    pub fn kernel(&self, t: TraitId) -> Result<&KernelParams<F>, ForecastError> {
        self.kernels
            .get(&t)
            .ok_or_else(|| ForecastError::MissingTrait(t.name().into()))
    }

    /// Filtering forecasts for every trait, and smoothing forecasts for
    /// `smoothed` traits, on the admission's hourly grid.
    pub fn forecast_admission(
        &self,
        admission: &Admission,
        smoothed: &[TraitId],
    ) -> Result<AdmissionForecast<F>, ForecastError> {
        let grid = hourly_grid::<F>(admission.length_of_stay);
        let mut filtering = BTreeMap::new();
        let mut smoothing = BTreeMap::new();
        for t in TraitId::CONTINUOUS {
            let series = TraitSeries::from_admission(admission, t);
            let kernel = self.kernel(t)?;
            filtering.insert(t, predict(&series, kernel, &grid, Mode::Filtering)?);
            if smoothed.contains(&t) {
                smoothing.insert(t, predict(&series, kernel, &grid, Mode::Smoothing)?);
            }
        }
        for t in [TraitId::Gcs, TraitId::Dopamine] {
            let series = TraitSeries::from_admission(admission, t);
            let grid_values = if series.is_empty() && t == TraitId::Dopamine {
                ForecastGrid {
                    trait_id: t,
                    grid_times: grid.clone(),
                    means: vec![F::zero(); grid.len()],
                    stds: vec![F::zero(); grid.len()],
                }
            } else {
                impute_locf(&series, &grid)?
            };
            filtering.insert(t, grid_values);
        }
        Ok(AdmissionForecast {
            admission_id: admission.admission_id.clone(),
            filtering,
            smoothing,
        })
    }

    pub fn forecast_cohort(
        &self,
        admissions: &[Admission],
        smoothed: &[TraitId],
    ) -> Result<Vec<AdmissionForecast<F>>, ForecastError> {
        admissions
            .par_iter()
            .map(|a| self.forecast_admission(a, smoothed))
            .collect()
    }
}

/// Writes forecasts as `admission_id,trait_id,time,mean,std,mode`.
pub fn write_forecast_csv<F: Scalar, W: Write>(
    mut out: W,
    forecasts: &[AdmissionForecast<F>],
) -> Result<(), ForecastError> {
    writeln!(out, "admission_id,trait_id,time,mean,std,mode")?;
    for f in forecasts {
        for (mode, grids) in [(Mode::Filtering, &f.filtering), (Mode::Smoothing, &f.smoothing)] {
            for g in grids.values() {
                for k in 0..g.grid_times.len() {
                    writeln!(
                        out,
                        "{},{},{},{},{},{}",
                        f.admission_id,
                        g.trait_id.name(),
                        g.grid_times[k],
                        g.means[k],
                        g.stds[k],
                        mode.name()
                    )?;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gcs(times: &[f64], values: &[f64]) -> TraitSeries<f64> {
        TraitSeries::new(TraitId::Gcs, times.to_vec(), values.to_vec()).unwrap()
    }

    #[test]
    fn gcs_carried_forward_and_backward() {
        let s = gcs(&[2.0, 10.0], &[14.0, 12.0]);
        let g = impute_gcs(&s, &[0.0, 5.0, 10.0, 11.0]).unwrap();
        assert_eq!(g.means, vec![14.0, 14.0, 12.0, 12.0]);
        assert!(g.stds.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn gcs_requires_observations() {
        let s = gcs(&[], &[]);
        assert!(matches!(impute_gcs(&s, &[0.0]), Err(ForecastError::EmptySeries(_))));
    }

    #[test]
    fn series_validation() {
        assert!(TraitSeries::new(TraitId::Wbc, vec![1.0, 1.0], vec![0.0, 0.0]).is_err());
        assert!(TraitSeries::new(TraitId::Wbc, vec![1.0], vec![f64::NAN]).is_err());
        assert!(TraitSeries::new(TraitId::Wbc, vec![1.0, 2.0], vec![0.0]).is_err());
    }

    #[test]
    fn duplicate_timestamps_are_averaged() {
        use crate::cohort::{ObservationEvent, Admission};
        let adm = Admission {
            admission_id: "X".into(),
            length_of_stay: 30,
            events: vec![
                ObservationEvent { trait_id: TraitId::HeartRate, timestamp: 1.0, value: 80.0 },
                ObservationEvent { trait_id: TraitId::HeartRate, timestamp: 1.0, value: 90.0 },
                ObservationEvent { trait_id: TraitId::HeartRate, timestamp: 2.0, value: 70.0 },
            ],
            orders: vec![],
            interventions: vec![],
        };
        let s = TraitSeries::<f64>::from_admission(&adm, TraitId::HeartRate);
        assert_eq!(s.times(), &[1.0, 2.0]);
        assert_eq!(s.values(), &[85.0, 70.0]);
    }
}
