//! Exact Gaussian-process regression with the exponential
//! (Ornstein–Uhlenbeck) kernel `k(t, t') = s² exp(-|t - t'| / ℓ)`.
//!
//! The OU kernel is Markov, so the posterior is computed with a scalar
//! Kalman filter (filtering mode) and a Rauch–Tung–Striebel pass
//! (smoothing mode) in linear time. Both give the same posterior as the
//! dense GP equations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ForecastError, ForecastGrid, Mode, TraitSeries};
use crate::cohort::TraitId;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams<F> {
    pub output_variance: F,
    /// Hours.
    pub lengthscale: F,
    pub noise_variance: F,
    pub prior_mean: F,
}

impl<F: Scalar> KernelParams<F> {
    pub fn validate(&self) -> Result<(), ForecastError> {
        let ok = self.output_variance >= F::zero()
            && self.noise_variance >= F::zero()
            && self.lengthscale > F::zero()
            && self.prior_mean.is_finite()
            && self.output_variance.is_finite()
            && self.noise_variance.is_finite()
            && self.lengthscale.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ForecastError::InvalidParams(format!("{self:?}")))
        }
    }
}

/// Gaussian belief over the centred latent level `f(t) - prior_mean`.
#[derive(Debug, Clone, Copy)]
struct Belief<F> {
    mean: F,
    var: F,
}

impl<F: Scalar> Belief<F> {
    fn propagate(self, dt: F, p: &KernelParams<F>) -> Self {
        let a = (-dt / p.lengthscale).exp();
        Belief {
            mean: self.mean * a,
            var: self.var * a * a + p.output_variance * (F::one() - a * a),
        }
    }

    /// Conditions on `y` (centred); returns the posterior and the
    /// innovation log-density.
    fn update(self, y: F, p: &KernelParams<F>) -> (Self, F) {
        let s = self.var + p.noise_variance;
        if s <= F::zero() {
            return (self, F::zero());
        }
        let resid = y - self.mean;
        let gain = self.var / s;
        let two_pi = F::of(std::f64::consts::TAU);
        let logp = -F::of(0.5) * ((two_pi * s).ln() + resid * resid / s);
        (
            Belief {
                mean: self.mean + gain * resid,
                var: ((F::one() - gain) * self.var).max(F::zero()),
            },
            logp,
        )
    }
}

/// Log marginal likelihood of one series under `params`.
pub fn log_marginal_likelihood<F: Scalar>(series: &TraitSeries<F>, params: &KernelParams<F>) -> F {
    let mut belief = Belief {
        mean: F::zero(),
        var: params.output_variance,
    };
    let mut last: Option<F> = None;
    let mut total = F::zero();
    for (&t, &y) in series.times().iter().zip(series.values()) {
        if let Some(prev) = last {
            belief = belief.propagate(t - prev, params);
        }
        let (post, logp) = belief.update(y - params.prior_mean, params);
        belief = post;
        total += logp;
        last = Some(t);
    }
    total
}

/// Posterior predictive mean and standard deviation on `grid`.
///
/// In [`Mode::Filtering`] the prediction at `t` conditions on observations
/// with timestamp `<= t`; in [`Mode::Smoothing`] it conditions on all of
/// them. The reported std includes the observation noise.
pub fn predict<F: Scalar>(
    series: &TraitSeries<F>,
    params: &KernelParams<F>,
    grid: &[F],
    mode: Mode,
) -> Result<ForecastGrid<F>, ForecastError> {
    params.validate()?;
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(ForecastError::Argument("grid times must be strictly increasing".into()));
    }

    // merged timeline; an observation sharing a grid time is processed first
    struct Step<F> {
        time: F,
        obs: Option<F>,
        grid_index: Option<usize>,
    }
    let mut steps: Vec<Step<F>> = Vec::with_capacity(series.len() + grid.len());
    let (mut i, mut j) = (0, 0);
    let (times, values) = (series.times(), series.values());
    while i < times.len() || j < grid.len() {
        let take_obs = j >= grid.len() || (i < times.len() && times[i] <= grid[j]);
        if take_obs {
            let same = j < grid.len() && times[i] == grid[j];
            steps.push(Step {
                time: times[i],
                obs: Some(values[i] - params.prior_mean),
                grid_index: same.then_some(j),
            });
            i += 1;
            if same {
                j += 1;
            }
        } else {
            steps.push(Step {
                time: grid[j],
                obs: None,
                grid_index: Some(j),
            });
            j += 1;
        }
    }

    let prior = Belief {
        mean: F::zero(),
        var: params.output_variance,
    };
    let mut predicted = Vec::with_capacity(steps.len());
    let mut filtered = Vec::with_capacity(steps.len());
    let mut belief = prior;
    for (k, step) in steps.iter().enumerate() {
        if k > 0 {
            belief = belief.propagate(step.time - steps[k - 1].time, params);
        }
        predicted.push(belief);
        if let Some(y) = step.obs {
            belief = belief.update(y, params).0;
        }
        filtered.push(belief);
    }

    let posterior = match mode {
        Mode::Filtering => filtered,
        Mode::Smoothing => {
            let mut smoothed = filtered.clone();
            for k in (0..steps.len().saturating_sub(1)).rev() {
                let dt = steps[k + 1].time - steps[k].time;
                let a = (-dt / params.lengthscale).exp();
                let next_pred = predicted[k + 1];
                let gain = if next_pred.var > F::zero() {
                    filtered[k].var * a / next_pred.var
                } else {
                    F::zero()
                };
                let s_next = smoothed[k + 1];
                smoothed[k] = Belief {
                    mean: filtered[k].mean + gain * (s_next.mean - next_pred.mean),
                    var: (filtered[k].var + gain * gain * (s_next.var - next_pred.var))
                        .max(F::zero()),
                };
            }
            smoothed
        }
    };

    let mut means = vec![F::zero(); grid.len()];
    let mut stds = vec![F::zero(); grid.len()];
    for (step, b) in steps.iter().zip(&posterior) {
        if let Some(g) = step.grid_index {
            means[g] = params.prior_mean + b.mean;
            stds[g] = (b.var + params.noise_variance).sqrt();
        }
    }
    Ok(ForecastGrid {
        trait_id: series.trait_id(),
        grid_times: grid.to_vec(),
        means,
        stds,
    })
}

/// Search grid for [`fit_kernel`]: multipliers of the pooled variance and
/// lengthscales in hours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelSearch {
    pub variance_multipliers: Vec<f64>,
    pub noise_fractions: Vec<f64>,
    pub lengthscales: Vec<f64>,
}

impl Default for KernelSearch {
    fn default() -> Self {
        KernelSearch {
            variance_multipliers: (-8..=4).map(|k| 2f64.powf(k as f64 / 2.0)).collect(),
            noise_fractions: vec![1e-4, 1e-3, 1e-2, 3e-2, 0.1, 0.3],
            lengthscales: (0..=18).map(|k| 0.5 * 2f64.powf(k as f64 / 2.0)).collect(),
        }
    }
}

pub const MIN_FIT_OBSERVATIONS: usize = 10;

/// Maximum-marginal-likelihood kernel for one trait, pooled over series.
///
/// `prior_mean` is the mean of all observations; the variance grids are
/// scaled by their pooled variance.
pub fn fit_kernel<F: Scalar>(
    trait_id: TraitId,
    series: &[TraitSeries<F>],
    search: &KernelSearch,
) -> Result<KernelParams<F>, ForecastError> {
    let n: usize = series.iter().map(TraitSeries::len).sum();
    if n < MIN_FIT_OBSERVATIONS {
        return Err(ForecastError::InsufficientData {
            trait_name: trait_id.name().to_string(),
            observations: n,
        });
    }
    let all: Vec<f64> = series
        .iter()
        .flat_map(|s| s.values().iter().map(|v| v.as_f64()))
        .collect();
    let mean = all.iter().sum::<f64>() / n as f64;
    let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let scale = var.max(1e-12 * mean * mean).max(1e-12);

    let mut candidates = Vec::new();
    for &vm in &search.variance_multipliers {
        for &nf in &search.noise_fractions {
            for &ls in &search.lengthscales {
                candidates.push(KernelParams {
                    output_variance: F::of(vm * scale),
                    lengthscale: F::of(ls),
                    noise_variance: F::of(nf * scale),
                    prior_mean: F::of(mean),
                });
            }
        }
    }
    let scores: Vec<f64> = candidates
        .par_iter()
        .map(|p| {
            series
                .iter()
                .map(|s| log_marginal_likelihood(s, p).as_f64())
                .sum()
        })
        .collect();
    // first maximum in grid order keeps ties deterministic
    let mut best = 0;
    for (k, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = k;
        }
    }
    Ok(candidates[best])
}
