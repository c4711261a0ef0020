use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Admission, DropCounts, InterventionCategory, Lab, TraitId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitStats {
    pub count: usize,
    pub mean: f64,
    pub sd: f64,
}

/// Cohort-level statistics written next to an event file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub n_admissions: usize,
    pub total_hours: u64,
    pub mean_length_of_stay: f64,
    pub traits: BTreeMap<String, TraitStats>,
    pub orders: BTreeMap<String, usize>,
    pub interventions: BTreeMap<String, usize>,
    #[serde(default)]
    pub dropped: DropCounts,
}

impl CohortSummary {
    pub fn from_admissions(admissions: &[Admission], dropped: DropCounts) -> Self {
        let total_hours: u64 = admissions.iter().map(|a| a.length_of_stay as u64).sum();
        let mut traits = BTreeMap::new();
        for t in TraitId::ALL {
            let values: Vec<f64> = admissions
                .iter()
                .flat_map(|a| a.observations_of(t).map(|e| e.value))
                .collect();
            let n = values.len();
            let mean = if n > 0 { values.iter().sum::<f64>() / n as f64 } else { 0.0 };
            let sd = if n > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            traits.insert(t.name().to_string(), TraitStats { count: n, mean, sd });
        }
        let orders = Lab::ALL
            .iter()
            .map(|&l| {
                let n = admissions.iter().map(|a| a.order_times(l).len()).sum();
                (l.name().to_string(), n)
            })
            .collect();
        let interventions = InterventionCategory::ALL
            .iter()
            .map(|&c| {
                let n = admissions
                    .iter()
                    .map(|a| a.interventions.iter().filter(|i| i.category == c).count())
                    .sum();
                (c.name().to_string(), n)
            })
            .collect();
        CohortSummary {
            n_admissions: admissions.len(),
            total_hours,
            mean_length_of_stay: if admissions.is_empty() {
                0.0
            } else {
                total_hours as f64 / admissions.len() as f64
            },
            traits,
            orders,
            interventions,
            dropped,
        }
    }
}
