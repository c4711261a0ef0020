//! The four reward components. Each is zero unless some lab is ordered.

use super::{ActionVector, MdpError, N_LABS};
use crate::cohort::{InterventionCategory, Lab};
use crate::scalar::median;
use crate::Scalar;

/// A SOFA rise of at least this many points flags possible sepsis.
pub const SOFA_CHANGE_THRESHOLD: f64 = 2.0;

/// 1 when a lab is ordered and SOFA rose by at least two points.
pub fn reward_sofa<F: Scalar>(action: ActionVector, sofa_t: F, sofa_prev: F) -> F {
    if !action.is_zero() && sofa_t - sofa_prev >= F::of(SOFA_CHANGE_THRESHOLD) {
        F::one()
    } else {
        F::zero()
    }
}

/// Number of distinct intervention categories initiated in the next step,
/// when any lab is ordered.
pub fn reward_treat<F: Scalar>(action: ActionVector, initiated: &[InterventionCategory]) -> F {
    if action.is_zero() {
        return F::zero();
    }
    let distinct = InterventionCategory::ALL
        .iter()
        .filter(|c| initiated.contains(c))
        .count();
    F::of_usize(distinct)
}

/// Normalized forecast deviation `|m - y| / σ`.
pub fn info_score<F: Scalar>(mean: F, last: F, sigma: F) -> F {
    ((mean - last) / sigma).abs()
}

/// `Σ_l max(0, g_l - c_l)` over ordered labs; `σ_l` is raised to `sigma_floor_l`.
pub fn reward_info<F: Scalar>(
    action: ActionVector,
    means: &[F; N_LABS],
    last: &[F; N_LABS],
    sigma: &[F; N_LABS],
    thresholds: &[F; N_LABS],
    sigma_floor: &[F; N_LABS],
) -> F {
    Lab::ALL
        .iter()
        .filter(|&&l| action.orders(l))
        .map(|&l| {
            let k = l.index();
            let g = info_score(means[k], last[k], sigma[k].max(sigma_floor[k]));
            (g - thresholds[k]).max(F::zero())
        })
        .fold(F::zero(), |a, b| a + b)
}

/// `Σ_l exp(-Δ_l / Γ_l)` over ordered labs, as a positive cost.
pub fn reward_cost<F: Scalar>(action: ActionVector, elapsed: &[F; N_LABS], decay: &[F; N_LABS]) -> F {
    Lab::ALL
        .iter()
        .filter(|&&l| action.orders(l))
        .map(|&l| (-elapsed[l.index()] / decay[l.index()]).exp())
        .fold(F::zero(), |a, b| a + b)
}

/// Per-lab median information score at training order times.
pub fn threshold_from_training<F: Scalar>(scores: &[Vec<F>; N_LABS]) -> Result<[F; N_LABS], MdpError> {
    let mut c = [F::zero(); N_LABS];
    for lab in Lab::ALL {
        c[lab.index()] = median(&scores[lab.index()])
            .ok_or_else(|| MdpError::Threshold(lab.name().to_string()))?;
    }
    Ok(c)
}
