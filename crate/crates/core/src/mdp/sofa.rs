use serde::{Deserialize, Serialize};

use super::MdpError;
use crate::Scalar;

/// Inputs to the six-organ SOFA score, in trait units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SofaInputs<F> {
    pub mean_bp: F,
    pub bilirubin: F,
    /// ×10³/µL.
    pub platelet: F,
    pub creatinine: F,
    pub pao2_fio2: F,
    pub gcs: F,
    pub dopamine: bool,
}

/// Organ thresholds, four per organ for scores 1 through 4.
///
/// "Falling" organs score a point for each threshold the value is below;
/// "rising" organs for each threshold the value reaches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SofaTable {
    /// PaO2/FiO2, mmHg (falling).
    pub respiration: [f64; 4],
    /// Platelets ×10³/µL (falling).
    pub coagulation: [f64; 4],
    /// Bilirubin mg/dL (rising).
    pub liver: [f64; 4],
    /// Mean arterial pressure below this scores 1.
    pub map_threshold: f64,
    /// Points when on dopamine.
    pub dopamine_points: u8,
    /// GCS (falling).
    pub cns: [f64; 4],
    /// Creatinine mg/dL (rising).
    pub renal: [f64; 4],
}

impl Default for SofaTable {
    fn default() -> Self {
        SofaTable {
            respiration: [400.0, 300.0, 200.0, 100.0],
            coagulation: [150.0, 100.0, 50.0, 20.0],
            liver: [1.2, 2.0, 6.0, 12.0],
            map_threshold: 70.0,
            dopamine_points: 2,
            cns: [15.0, 13.0, 10.0, 6.0],
            renal: [1.2, 2.0, 3.5, 5.0],
        }
    }
}

fn falling<F: Scalar>(value: F, thresholds: &[f64; 4]) -> u8 {
    thresholds.iter().filter(|&&t| value < F::of(t)).count() as u8
}

fn rising<F: Scalar>(value: F, thresholds: &[f64; 4]) -> u8 {
    thresholds.iter().filter(|&&t| value >= F::of(t)).count() as u8
}

/// SOFA score in `0..=24`.
pub fn compute_sofa<F: Scalar>(inputs: &SofaInputs<F>, table: &SofaTable) -> Result<u8, MdpError> {
    if !(inputs.gcs >= F::of(3.0) && inputs.gcs <= F::of(15.0)) {
        return Err(MdpError::Argument(format!("GCS {} outside [3, 15]", inputs.gcs)));
    }
    if !(inputs.platelet >= F::zero()) {
        return Err(MdpError::Argument(format!("negative platelet count {}", inputs.platelet)));
    }
    let cardio = if inputs.dopamine {
        table.dopamine_points.max(1)
    } else {
        u8::from(inputs.mean_bp < F::of(table.map_threshold))
    };
    Ok(falling(inputs.pao2_fio2, &table.respiration)
        + falling(inputs.platelet, &table.coagulation)
        + rising(inputs.bilirubin, &table.liver)
        + cardio.min(4)
        + falling(inputs.gcs, &table.cns)
        + rising(inputs.creatinine, &table.renal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn healthy() -> SofaInputs<f64> {
        SofaInputs {
            mean_bp: 80.0,
            bilirubin: 0.8,
            platelet: 250.0,
            creatinine: 0.9,
            pao2_fio2: 450.0,
            gcs: 15.0,
            dopamine: false,
        }
    }

    #[test]
    fn healthy_baseline_scores_zero() {
        assert_eq!(compute_sofa(&healthy(), &SofaTable::default()).unwrap(), 0);
    }

    #[test]
    fn coagulation_row() {
        let x = SofaInputs { platelet: 90.0, ..healthy() };
        assert_eq!(compute_sofa(&x, &SofaTable::default()).unwrap(), 2);
    }

    #[test]
    fn cns_and_renal_rows() {
        let x = SofaInputs { gcs: 8.0, creatinine: 4.0, ..healthy() };
        assert_eq!(compute_sofa(&x, &SofaTable::default()).unwrap(), 6);
    }

    #[test]
    fn worst_case_is_24() {
        let x = SofaInputs {
            mean_bp: 40.0,
            bilirubin: 20.0,
            platelet: 5.0,
            creatinine: 8.0,
            pao2_fio2: 50.0,
            gcs: 3.0,
            dopamine: false,
        };
        let table = SofaTable { dopamine_points: 4, ..SofaTable::default() };
        assert_eq!(compute_sofa(&SofaInputs { dopamine: true, ..x }, &table).unwrap(), 24);
    }

    #[test]
    fn gcs_out_of_range() {
        let x = SofaInputs { gcs: 2.0, ..healthy() };
        assert!(matches!(compute_sofa(&x, &SofaTable::default()), Err(MdpError::Argument(_))));
    }

    proptest! {
        #[test]
        fn monotone_in_each_organ(
            platelet in 0.0f64..400.0, dp in 0.0f64..100.0,
            gcs in 3.0f64..14.0, dg in 0.0f64..1.0,
            creat in 0.1f64..8.0, dc in 0.0f64..3.0,
            bili in 0.1f64..15.0, db in 0.0f64..5.0,
        ) {
            let t = SofaTable::default();
            let base = SofaInputs { platelet, gcs, creatinine: creat, bilirubin: bili, ..healthy() };
            let s = compute_sofa(&base, &t).unwrap();
            let more_platelets = compute_sofa(&SofaInputs { platelet: platelet + dp, ..base }, &t).unwrap();
            let better_gcs = compute_sofa(&SofaInputs { gcs: (gcs + dg).min(15.0), ..base }, &t).unwrap();
            let more_creat = compute_sofa(&SofaInputs { creatinine: creat + dc, ..base }, &t).unwrap();
            let more_bili = compute_sofa(&SofaInputs { bilirubin: bili + db, ..base }, &t).unwrap();
            prop_assert!(more_platelets <= s);
            prop_assert!(better_gcs <= s);
            prop_assert!(more_creat >= s);
            prop_assert!(more_bili >= s);
            prop_assert!(s <= 24);
        }
    }
}
