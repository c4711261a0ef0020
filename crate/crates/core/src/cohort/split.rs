use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Admission, CohortError};

/// Partitions admissions into train and test sets.
///
/// The split is at admission granularity and the train set holds
/// `round(n * train_fraction)` admissions (at least one on each side).
/// Both halves keep the input order.
pub fn split_cohort(
    admissions: &[Admission],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<Admission>, Vec<Admission>), CohortError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CohortError::Split(format!(
            "train fraction {train_fraction} not in (0, 1)"
        )));
    }
    let n = admissions.len();
    if n < 2 {
        return Err(CohortError::Split(format!("need at least 2 admissions, got {n}")));
    }
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_train = vec![false; n];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let (train, test): (Vec<_>, Vec<_>) = admissions
        .iter()
        .zip(in_train)
        .partition(|(_, train)| *train);
    Ok((
        train.into_iter().map(|(a, _)| a.clone()).collect(),
        test.into_iter().map(|(a, _)| a.clone()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stub(n: usize) -> Vec<Admission> {
        (0..n)
            .map(|i| Admission {
                admission_id: format!("A{i}"),
                length_of_stay: 48,
                events: vec![],
                orders: vec![],
                interventions: vec![],
            })
            .collect()
    }

    #[test]
    fn full_cohort_sizes() {
        let (train, test) = split_cohort(&stub(6060), 0.6, 1).unwrap();
        assert_eq!((train.len(), test.len()), (3636, 2424));
        let mut ids: Vec<_> = train.iter().chain(&test).map(|a| &a.admission_id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 6060);
    }

    #[test]
    fn two_admissions_half() {
        let (train, test) = split_cohort(&stub(2), 0.5, 9).unwrap();
        assert_eq!((train.len(), test.len()), (1, 1));
    }

    #[test]
    fn deterministic_and_validated() {
        let a = split_cohort(&stub(50), 0.6, 3).unwrap();
        let b = split_cohort(&stub(50), 0.6, 3).unwrap();
        assert_eq!(a, b);
        assert!(split_cohort(&stub(1), 0.5, 0).is_err());
        assert!(split_cohort(&stub(10), 1.0, 0).is_err());
        assert!(split_cohort(&stub(10), 0.0, 0).is_err());
    }
}
