//! End-to-end orchestration: the run configuration, in-memory stage
//! functions, file-based stages over an output directory and the hash chain
//! that ties artifacts to the inputs that produced them.

mod evaluate;
mod report;
mod stages;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cohort::{split_cohort, Admission, CohortConfig, CohortError, Lab};
use crate::forecast::{ForecastConfig, ForecastError, Forecaster};
use crate::fqi::{
    lab_margins_all, policy_from_margins, train_mo_fqi, tune_epsilon_cost, EpsilonTuning, FqiConfig, FqiError,
    IterationMetrics, PolicySet, QFunction,
};
use crate::mdp::{
    build_transitions, order_info_scores, threshold_from_training, MdpConfig, MdpError, RewardContext, Transition,
    N_LABS, N_OBJECTIVES,
};
use crate::ope::{EvalConfig, OpeError};
use crate::seeding::stage_seed;
use crate::trees::TreeError;
use crate::Real;

pub use evaluate::{evaluate, Distributions, EstimatorDiagnostics, Evaluation, LabMetric, PolicyValue};
pub use report::render_report;
pub use stages::{
    cmd_build_transitions, cmd_evaluate, cmd_forecast, cmd_ingest, cmd_report, cmd_simulate, cmd_train,
    ContextArtifact, ForecastArtifact, TrainSummary, CONTEXT_FILE, EVALUATION_FILE, EVENTS_FILE, FORECASTER_FILE,
    FORECAST_CSV_FILE, INFO_GAIN_CSV_FILE, INGEST_REPORT_FILE, METRICS_FILE, POLICY_FILE, REPORT_FILE, SUMMARY_FILE,
    TEST_TRANSITIONS_FILE, TIME_TO_TREATMENT_CSV_FILE, TRAIN_TRANSITIONS_FILE, TUNING_FILE, VALUES_CSV_FILE,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("missing input {}", .0.display())]
    MissingInput(PathBuf),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("config hash mismatch for {what}: expected {expected}, found {found}")]
    HashMismatch {
        what: String,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Fqi(#[from] FqiError),
    #[error(transparent)]
    Ope(#[from] OpeError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    /// Process exit status: 2 usage or configuration, 3 invariant, 4 incompatible artifacts.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::MissingInput(_) | PipelineError::Io { .. } => 2,
            PipelineError::Json(_) => 2,
            PipelineError::HashMismatch { .. } => 4,
            PipelineError::Invariant(_) => 3,
            PipelineError::Cohort(e) => match e {
                CohortError::Config(_) | CohortError::Parse { .. } | CohortError::Csv(_) | CohortError::Io(_) => 2,
                CohortError::EmptyCohort | CohortError::Split(_) => 3,
            },
            PipelineError::Forecast(ForecastError::Argument(_) | ForecastError::Io(_)) => 2,
            PipelineError::Forecast(_) => 3,
            PipelineError::Mdp(MdpError::Argument(_) | MdpError::Format(_) | MdpError::Io(_) | MdpError::Json(_)) => 2,
            PipelineError::Mdp(_) => 3,
            PipelineError::Fqi(FqiError::Config(_) | FqiError::Format(_) | FqiError::Io(_)) => 2,
            PipelineError::Fqi(_) => 3,
            PipelineError::Ope(OpeError::Argument(_)) => 2,
            PipelineError::Ope(_) | PipelineError::Tree(_) => 3,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            PipelineError::MissingInput(path.to_path_buf())
        } else {
            PipelineError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

// ── Run configuration ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; every stage derives its own stream from it. It also
    /// replaces `cohort.seed` when simulating.
    pub seed: u64,
    pub train_fraction: f64,
    /// Test admissions whose forecasts the forecast stage exports as CSV.
    pub forecast_export_admissions: usize,
    pub cohort: CohortConfig,
    pub forecast: ForecastConfig,
    pub mdp: MdpConfig,
    pub fqi: FqiConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            train_fraction: 0.6,
            forecast_export_admissions: 20,
            cohort: CohortConfig::default(),
            forecast: ForecastConfig::default(),
            mdp: MdpConfig::default(),
            fqi: FqiConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| PipelineError::Config(format!("cannot parse config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => PipelineError::Config(format!("config {} not found", path.display())),
            _ => PipelineError::io(path, e),
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(PipelineError::Config(format!(
                "train_fraction {} not in (0, 1)",
                self.train_fraction
            )));
        }
        self.cohort.validate()?;
        self.mdp.validate()?;
        self.fqi.validate()?;
        self.eval.validate()?;
        if self.forecast.max_fit_series == 0 {
            return Err(PipelineError::Config("forecast.max_fit_series must be positive".into()));
        }
        Ok(())
    }

    /// Cohort configuration with the run seed applied.
    pub fn cohort_config(&self) -> CohortConfig {
        CohortConfig {
            seed: self.seed,
            ..self.cohort.clone()
        }
    }

    /// Hash of the whole configuration.
    pub fn config_hash(&self) -> String {
        hash_json(self)
    }
}

// ── Hash chain ──────────────────────────────────────────────────────────

/// Hex SHA-256 of raw bytes.
pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of the compact JSON encoding of `value`.
pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> String {
    hash_bytes(&serde_json::to_vec(value).expect("configuration types serialize to JSON"))
}

/// Hash identifying a forecaster fit on a given event file.
pub fn forecaster_hash(run: &RunConfig, events_hash: &str) -> String {
    hash_json(&("forecast", events_hash, run.seed, run.train_fraction, &run.forecast))
}

/// Hash identifying the transitions built on top of a forecaster.
pub fn transitions_hash(run: &RunConfig, forecaster_hash: &str) -> String {
    hash_json(&("transitions", forecaster_hash, &run.mdp))
}

// ── In-memory stages ────────────────────────────────────────────────────

pub fn split(run: &RunConfig, admissions: &[Admission]) -> Result<(Vec<Admission>, Vec<Admission>)> {
    Ok(split_cohort(admissions, run.train_fraction, stage_seed(run.seed, "split"))?)
}

pub fn fit_forecaster(run: &RunConfig, train: &[Admission]) -> Result<Forecaster<Real>> {
    Ok(Forecaster::fit(train, &run.forecast)?)
}

/// Reward context with information thresholds set from the training orders.
pub fn fit_context(
    config: &MdpConfig,
    forecaster: &Forecaster<Real>,
    train: &[Admission],
) -> Result<RewardContext<Real>> {
    let mut ctx = RewardContext::new(config.clone(), forecaster)?;
    let per_admission = train
        .par_iter()
        .map(|a| {
            let fc = forecaster.forecast_admission(a, &[])?;
            Ok(order_info_scores(a, &fc, &ctx)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut scores: [Vec<Real>; N_LABS] = Default::default();
    for per_lab in per_admission {
        for (all, mine) in scores.iter_mut().zip(per_lab) {
            all.extend(mine);
        }
    }
    ctx.thresholds = threshold_from_training(&scores)?;
    Ok(ctx)
}

pub fn make_transitions(
    admissions: &[Admission],
    forecaster: &Forecaster<Real>,
    ctx: &RewardContext<Real>,
) -> Result<Vec<Transition<Real>>> {
    let per_admission = admissions
        .par_iter()
        .map(|a| {
            let fc = forecaster.forecast_admission(a, &[])?;
            Ok(build_transitions(a, &fc, ctx)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_admission.into_iter().flatten().collect())
}

/// Products of training: the Q-function, the per-lab policies, the cost
/// slack calibration and per-iteration diagnostics.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub q: QFunction<Real>,
    pub policy: PolicySet<Real>,
    pub tuning: Vec<EpsilonTuning>,
    pub metrics: Vec<IterationMetrics>,
}

/// MO-FQI, then per-lab `ε_cost` calibration against the clinician order
/// counts of the training data, then distillation into per-lab classifiers.
pub fn train_policy(
    config: &FqiConfig,
    seed: u64,
    transitions: &[Transition<Real>],
    on_iteration: impl FnMut(&IterationMetrics),
) -> Result<TrainOutput> {
    let result = train_mo_fqi(transitions, config, seed, on_iteration)?;
    for m in &result.metrics {
        if m.mean_abs_delta.iter().any(|v| !v.is_finite()) {
            return Err(PipelineError::Invariant(format!(
                "non-finite Q update at iteration {}",
                m.iteration
            )));
        }
    }
    let states: Vec<_> = transitions.iter().map(|t| t.state).collect();
    let margins = lab_margins_all(&result.q, &states);
    let targets: [usize; N_LABS] =
        std::array::from_fn(|l| transitions.iter().filter(|t| t.action.orders(Lab::ALL[l])).count());
    let tuning = tune_epsilon_cost(
        &margins,
        &config.epsilon,
        targets,
        config.tuning_tolerance,
        config.tuning_iterations,
    );
    let epsilon: [[Real; N_OBJECTIVES]; N_LABS] = std::array::from_fn(|l| {
        let mut e = config.epsilon;
        e[N_OBJECTIVES - 1] = tuning[l].epsilon_cost;
        e
    });
    let policy = policy_from_margins(&states, &margins, epsilon, config, seed)?;
    Ok(TrainOutput {
        q: result.q,
        policy,
        tuning: tuning.to_vec(),
        metrics: result.metrics,
    })
}
