//! Hourly MDP: 21-dimensional states, joint lab-order actions, the
//! four-component reward and one-step transition tuples.

mod build;
mod dataset;
mod reward;
mod sofa;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::Lab;
use crate::Scalar;

pub use build::{
    build_states, build_transitions, order_info_scores, step_reward, AdmissionSteps, MdpConfig, RewardContext,
};
pub use dataset::{
    read_dataset, schema_path, write_dataset, write_dataset_csv, DatasetSchema, TransitionDataset, DATASET_MAGIC,
    DATASET_VERSION,
};
pub use reward::{
    info_score, reward_cost, reward_info, reward_sofa, reward_treat, threshold_from_training,
    SOFA_CHANGE_THRESHOLD,
};
pub use sofa::{compute_sofa, SofaInputs, SofaTable};

pub const N_LABS: usize = 4;
pub const N_ACTIONS: usize = 1 << N_LABS;
pub const N_OBJECTIVES: usize = 4;
pub const STATE_DIM: usize = 21;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("admission {admission}: no forecast for {trait_name}")]
    MissingForecast { admission: String, trait_name: String },
    #[error("no training orders for {0}; cannot set its information threshold")]
    Threshold(String),
    #[error("dataset format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

// ── State ───────────────────────────────────────────────────────────────

/// `[sofa | HR RR Temp MeanBP | lab means | lab stds | last lab values | hours since order]`,
/// labs in [`Lab::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateVector<F>(pub [F; STATE_DIM]);

impl<F: Scalar> StateVector<F> {
    pub const SOFA: usize = 0;
    pub const VITALS: usize = 1;
    pub const LAB_MEANS: usize = 5;
    pub const LAB_STDS: usize = 9;
    pub const LAST_VALUES: usize = 13;
    pub const ELAPSED: usize = 17;

    pub fn zeros() -> Self {
        StateVector([F::zero(); STATE_DIM])
    }

    pub fn sofa(&self) -> F {
        self.0[Self::SOFA]
    }

    pub fn lab_mean(&self, lab: Lab) -> F {
        self.0[Self::LAB_MEANS + lab.index()]
    }

    pub fn lab_std(&self, lab: Lab) -> F {
        self.0[Self::LAB_STDS + lab.index()]
    }

    pub fn last_value(&self, lab: Lab) -> F {
        self.0[Self::LAST_VALUES + lab.index()]
    }

    pub fn elapsed(&self, lab: Lab) -> F {
        self.0[Self::ELAPSED + lab.index()]
    }

    pub fn as_slice(&self) -> &[F] {
        &self.0
    }
}

pub fn state_feature_names() -> Vec<String> {
    let mut names = vec!["sofa".to_string()];
    for v in ["heart_rate", "resp_rate", "temp", "mean_bp"] {
        names.push(format!("mean_{v}"));
    }
    for prefix in ["mean", "std", "last", "elapsed"] {
        for lab in Lab::ALL {
            names.push(format!("{prefix}_{}", lab.name()));
        }
    }
    names
}

// ── Action ──────────────────────────────────────────────────────────────

/// Joint lab-order decision; bit `l` set means lab `l` is ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct ActionVector(u8);

impl ActionVector {
    pub const ZERO: ActionVector = ActionVector(0);

    pub fn from_index(index: usize) -> Self {
        assert!(index < N_ACTIONS, "action index {index} out of range");
        ActionVector(index as u8)
    }

    pub fn from_orders(orders: [bool; N_LABS]) -> Self {
        let bits = orders
            .iter()
            .enumerate()
            .fold(0u8, |acc, (l, &o)| acc | (u8::from(o) << l));
        ActionVector(bits)
    }

    /// Only lab `lab` ordered.
    pub fn single(lab: Lab) -> Self {
        ActionVector(1 << lab.index())
    }

    pub fn all() -> impl Iterator<Item = ActionVector> {
        (0..N_ACTIONS).map(ActionVector::from_index)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub fn orders(self, lab: Lab) -> bool {
        self.0 & (1 << lab.index()) != 0
    }

    pub fn with(self, lab: Lab, ordered: bool) -> Self {
        if ordered {
            ActionVector(self.0 | (1 << lab.index()))
        } else {
            ActionVector(self.0 & !(1 << lab.index()))
        }
    }

    pub fn features<F: Scalar>(self) -> [F; N_LABS] {
        let mut f = [F::zero(); N_LABS];
        for lab in Lab::ALL {
            if self.orders(lab) {
                f[lab.index()] = F::one();
            }
        }
        f
    }
}

// ── Reward and transitions ──────────────────────────────────────────────

/// `[r_sofa, r_treat, r_info, -r_cost]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardVector<F>(pub [F; N_OBJECTIVES]);

impl<F: Scalar> RewardVector<F> {
    pub const SOFA: usize = 0;
    pub const TREAT: usize = 1;
    pub const INFO: usize = 2;
    pub const COST: usize = 3;
    pub const NAMES: [&'static str; N_OBJECTIVES] = ["sofa", "treat", "info", "cost"];

    pub fn zero() -> Self {
        RewardVector([F::zero(); N_OBJECTIVES])
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == F::zero())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition<F> {
    pub state: StateVector<F>,
    pub action: ActionVector,
    pub next_state: StateVector<F>,
    pub reward: RewardVector<F>,
    pub admission_id: String,
    /// Hour index `t`; the transition spans `[t, t+1]`.
    pub time: u32,
    /// Last transition of its admission.
    pub terminal: bool,
}
