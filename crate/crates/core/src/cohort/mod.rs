//! ICU admissions: domain types, a synthetic generator, CSV event I/O and
//! admission-level train/test splitting.

mod config;
mod io;
mod simulate;
mod split;
mod summary;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    CohortConfig, InterventionModel, OrderModel, SeverityChain, TraitModel, SEVERITY_STATES,
};
pub use io::{
    export_events, ingest_events, read_events, write_events, DropCounts, IngestReport, EVENT_HEADER,
};
pub use simulate::simulate_cohort;
pub use split::split_cohort;
pub use summary::{CohortSummary, TraitStats};

/// Shortest admission retained (exclusive bound, hours).
pub const MIN_LOS_HOURS: u32 = 24;
/// Longest admission retained (exclusive bound, hours).
pub const MAX_LOS_HOURS: u32 = 480;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("invalid cohort configuration: {0}")]
    Config(String),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("event file contains no admissions")]
    EmptyCohort,
    #[error("cannot split cohort: {0}")]
    Split(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

// ── Traits, labs and interventions ──────────────────────────────────────

/// A physiological trait tracked per admission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraitId {
    RespRate,
    HeartRate,
    MeanBp,
    Temp,
    Creatinine,
    Bun,
    Wbc,
    Lactate,
    Bilirubin,
    Platelet,
    Pao2Fio2,
    Gcs,
    Dopamine,
}

impl TraitId {
    pub const ALL: [TraitId; 13] = [
        TraitId::RespRate,
        TraitId::HeartRate,
        TraitId::MeanBp,
        TraitId::Temp,
        TraitId::Creatinine,
        TraitId::Bun,
        TraitId::Wbc,
        TraitId::Lactate,
        TraitId::Bilirubin,
        TraitId::Platelet,
        TraitId::Pao2Fio2,
        TraitId::Gcs,
        TraitId::Dopamine,
    ];

    /// Traits resampled with a Gaussian-process forecaster.
    pub const CONTINUOUS: [TraitId; 11] = [
        TraitId::RespRate,
        TraitId::HeartRate,
        TraitId::MeanBp,
        TraitId::Temp,
        TraitId::Creatinine,
        TraitId::Bun,
        TraitId::Wbc,
        TraitId::Lactate,
        TraitId::Bilirubin,
        TraitId::Platelet,
        TraitId::Pao2Fio2,
    ];

    /// Traits every retained admission must have at least one recording of.
    pub const REQUIRED: [TraitId; 12] = [
        TraitId::RespRate,
        TraitId::HeartRate,
        TraitId::MeanBp,
        TraitId::Temp,
        TraitId::Creatinine,
        TraitId::Bun,
        TraitId::Wbc,
        TraitId::Lactate,
        TraitId::Bilirubin,
        TraitId::Platelet,
        TraitId::Pao2Fio2,
        TraitId::Gcs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TraitId::RespRate => "resp_rate",
            TraitId::HeartRate => "heart_rate",
            TraitId::MeanBp => "mean_bp",
            TraitId::Temp => "temp",
            TraitId::Creatinine => "creatinine",
            TraitId::Bun => "bun",
            TraitId::Wbc => "wbc",
            TraitId::Lactate => "lactate",
            TraitId::Bilirubin => "bilirubin",
            TraitId::Platelet => "platelet",
            TraitId::Pao2Fio2 => "pao2_fio2",
            TraitId::Gcs => "gcs",
            TraitId::Dopamine => "dopamine",
        }
    }

    pub fn parse(name: &str) -> Option<TraitId> {
        TraitId::ALL.into_iter().find(|t| t.name() == name)
    }

    pub fn as_lab(self) -> Option<Lab> {
        Lab::ALL.into_iter().find(|l| l.trait_id() == self)
    }
}

/// The orderable lab tests, in action-vector order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lab {
    Creatinine,
    Bun,
    Wbc,
    Lactate,
}

impl Lab {
    pub const ALL: [Lab; 4] = [Lab::Creatinine, Lab::Bun, Lab::Wbc, Lab::Lactate];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn trait_id(self) -> TraitId {
        match self {
            Lab::Creatinine => TraitId::Creatinine,
            Lab::Bun => TraitId::Bun,
            Lab::Wbc => TraitId::Wbc,
            Lab::Lactate => TraitId::Lactate,
        }
    }

    pub fn name(self) -> &'static str {
        self.trait_id().name()
    }
}

/// Intervention categories whose onset is rewarded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionCategory {
    Antibiotics,
    Vasopressors,
    Dialysis,
    MechanicalVentilation,
}

impl InterventionCategory {
    pub const ALL: [InterventionCategory; 4] = [
        InterventionCategory::Antibiotics,
        InterventionCategory::Vasopressors,
        InterventionCategory::Dialysis,
        InterventionCategory::MechanicalVentilation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InterventionCategory::Antibiotics => "antibiotics",
            InterventionCategory::Vasopressors => "vasopressors",
            InterventionCategory::Dialysis => "dialysis",
            InterventionCategory::MechanicalVentilation => "mechanical_ventilation",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

// ── Events and admissions ───────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationEvent {
    pub trait_id: TraitId,
    /// Hours from admission.
    pub timestamp: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderEvent {
    pub lab: Lab,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionEvent {
    pub category: InterventionCategory,
    pub onset: f64,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Admission {
    pub admission_id: String,
    /// Whole hours; retained admissions satisfy 24 < LOS < 480.
    pub length_of_stay: u32,
    pub events: Vec<ObservationEvent>,
    pub orders: Vec<OrderEvent>,
    pub interventions: Vec<InterventionEvent>,
}

impl Admission {
    /// Sorts events into the canonical order used for export and comparison.
    pub fn canonicalize(&mut self) {
        self.events.sort_by(|a, b| {
            a.timestamp
                .total_cmp(&b.timestamp)
                .then(a.trait_id.cmp(&b.trait_id))
        });
        self.orders
            .sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp).then(a.lab.cmp(&b.lab)));
        self.interventions.sort_by(|a, b| {
            a.onset
                .total_cmp(&b.onset)
                .then(a.category.cmp(&b.category))
        });
    }

    pub fn observations_of(&self, trait_id: TraitId) -> impl Iterator<Item = &ObservationEvent> {
        self.events.iter().filter(move |e| e.trait_id == trait_id)
    }

    pub fn order_times(&self, lab: Lab) -> Vec<f64> {
        self.orders
            .iter()
            .filter(|o| o.lab == lab)
            .map(|o| o.timestamp)
            .collect()
    }

    pub fn los_in_range(&self) -> bool {
        self.length_of_stay > MIN_LOS_HOURS && self.length_of_stay < MAX_LOS_HOURS
    }

    /// Checks the structural invariants, returning a description of the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        if !self.los_in_range() {
            return Err(format!("length of stay {} out of range", self.length_of_stay));
        }
        let los = self.length_of_stay as f64;
        let within = |t: f64| (0.0..=los).contains(&t);
        if let Some(e) = self.events.iter().find(|e| !within(e.timestamp)) {
            return Err(format!("observation at {} outside stay", e.timestamp));
        }
        if let Some(o) = self.orders.iter().find(|o| !within(o.timestamp)) {
            return Err(format!("order at {} outside stay", o.timestamp));
        }
        for iv in &self.interventions {
            if !within(iv.onset) || iv.duration <= 0.0 {
                return Err(format!("bad intervention {:?}", iv));
            }
        }
        for lab in Lab::ALL {
            let orders = self.order_times(lab);
            for e in self.observations_of(lab.trait_id()) {
                if !orders.contains(&e.timestamp) {
                    return Err(format!(
                        "{} observation at {} has no matching order",
                        lab.name(),
                        e.timestamp
                    ));
                }
            }
        }
        Ok(())
    }
}
