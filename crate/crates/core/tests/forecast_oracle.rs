//! The linear-time OU posterior checked against dense GP algebra, and
//! hyperparameter recovery from data drawn by a Cholesky sampler.

use labpolicy::cohort::TraitId;
use labpolicy::forecast::{fit_kernel, predict, KernelParams, KernelSearch, Mode, TraitSeries};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn kernel(a: f64, b: f64, p: &KernelParams<f64>) -> f64 {
    p.output_variance * (-(a - b).abs() / p.lengthscale).exp()
}

/// Dense GP posterior at `t` given `(times, values)`.
fn dense_posterior(times: &[f64], values: &[f64], p: &KernelParams<f64>, t: f64) -> (f64, f64) {
    if times.is_empty() {
        return (p.prior_mean, p.output_variance + p.noise_variance);
    }
    let n = times.len();
    let k = DMatrix::from_fn(n, n, |i, j| {
        kernel(times[i], times[j], p) + if i == j { p.noise_variance } else { 0.0 }
    });
    let ks = DVector::from_fn(n, |i, _| kernel(times[i], t, p));
    let y = DVector::from_fn(n, |i, _| values[i] - p.prior_mean);
    let chol = k.cholesky().expect("positive definite");
    let alpha = chol.solve(&y);
    let v = chol.solve(&ks);
    let mean = p.prior_mean + ks.dot(&alpha);
    let var = p.output_variance - ks.dot(&v) + p.noise_variance;
    (mean, var)
}

fn random_series(rng: &mut ChaCha8Rng, n: usize, span: f64) -> (Vec<f64>, Vec<f64>) {
    let mut times: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * span * 100.0).round() / 100.0).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let values = times.iter().map(|_| 3.0 + 2.0 * rng.gen::<f64>()).collect();
    (times, values)
}

#[test]
fn matches_dense_gp_in_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..40 {
        let (times, values) = random_series(&mut rng, 1 + case % 9, 30.0);
        let p = KernelParams {
            output_variance: 0.5 + rng.gen::<f64>() * 3.0,
            lengthscale: 0.5 + rng.gen::<f64>() * 12.0,
            noise_variance: if case % 4 == 0 { 0.0 } else { rng.gen::<f64>() * 0.5 },
            prior_mean: 4.0,
        };
        let series = TraitSeries::new(TraitId::Lactate, times.clone(), values.clone()).unwrap();
        let grid: Vec<f64> = (0..31).map(|h| h as f64).collect();
        let filt = predict(&series, &p, &grid, Mode::Filtering).unwrap();
        let smooth = predict(&series, &p, &grid, Mode::Smoothing).unwrap();
        for (g, &t) in grid.iter().enumerate() {
            let past = times.iter().take_while(|&&s| s <= t).count();
            let (m, v) = dense_posterior(&times[..past], &values[..past], &p, t);
            assert!((filt.means[g] - m).abs() < 1e-8, "case {case} t {t}: {} vs {m}", filt.means[g]);
            assert!((filt.stds[g].powi(2) - v).abs() < 1e-8);
            let (m, v) = dense_posterior(&times, &values, &p, t);
            assert!((smooth.means[g] - m).abs() < 1e-8, "case {case} t {t}");
            assert!((smooth.stds[g].powi(2) - v).abs() < 1e-8);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn smoothing_never_widens(seed in 0u64..10_000, n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (times, values) = random_series(&mut rng, n, 48.0);
        let p = KernelParams { output_variance: 1.5, lengthscale: 6.0, noise_variance: 0.1, prior_mean: 4.0 };
        let series = TraitSeries::new(TraitId::Wbc, times, values).unwrap();
        let grid: Vec<f64> = (0..48).map(|h| h as f64).collect();
        let f = predict(&series, &p, &grid, Mode::Filtering).unwrap();
        let s = predict(&series, &p, &grid, Mode::Smoothing).unwrap();
        for g in 0..grid.len() {
            prop_assert!(s.stds[g] <= f.stds[g] + 1e-12);
        }
        let again = predict(&series, &p, &grid, Mode::Smoothing).unwrap();
        prop_assert_eq!(s, again);
    }

    #[test]
    fn far_from_data_reverts_to_prior(value in -50.0f64..50.0) {
        let p = KernelParams { output_variance: 2.0, lengthscale: 1.0, noise_variance: 0.0, prior_mean: 7.0 };
        let series = TraitSeries::new(TraitId::Wbc, vec![0.0], vec![value]).unwrap();
        let f = predict(&series, &p, &[200.0], Mode::Filtering).unwrap();
        prop_assert!((f.means[0] - 7.0).abs() < 1e-9);
    }
}

#[test]
fn recovers_lengthscale_from_reference_sampler() {
    let truth = KernelParams {
        output_variance: 4.0,
        lengthscale: 8.0,
        noise_variance: 0.01,
        prior_mean: 10.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let series: Vec<TraitSeries<f64>> = (0..150)
        .map(|_| {
            let (times, _) = random_series(&mut rng, 40, 100.0);
            let n = times.len();
            let k = DMatrix::from_fn(n, n, |i, j| {
                kernel(times[i], times[j], &truth) + if i == j { truth.noise_variance } else { 0.0 }
            });
            let l = k.cholesky().unwrap().l();
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = l * z;
            let values = y.iter().map(|v| v + truth.prior_mean).collect();
            TraitSeries::new(TraitId::Creatinine, times, values).unwrap()
        })
        .collect();
    let search = KernelSearch::default();
    let fit = fit_kernel(TraitId::Creatinine, &series, &search).unwrap();
    let step = search.lengthscales[1] / search.lengthscales[0];
    assert!(
        fit.lengthscale >= 8.0 / step * (1.0 - 1e-9) && fit.lengthscale <= 8.0 * step * (1.0 + 1e-9),
        "lengthscale {}",
        fit.lengthscale
    );
}
