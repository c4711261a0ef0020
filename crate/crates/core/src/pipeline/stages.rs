use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::{
    evaluate, fit_context, fit_forecaster, forecaster_hash, hash_bytes, make_transitions, split, train_policy,
    transitions_hash, Evaluation, PipelineError, Result, RunConfig,
};
use crate::cohort::{
    export_events, ingest_events, read_events, simulate_cohort, Admission, CohortSummary, DropCounts, IngestReport,
    Lab, TraitId,
};
use crate::forecast::{write_forecast_csv, Forecaster};
use crate::fqi::{EpsilonTuning, IterationMetrics, PolicyArtifact};
use crate::mdp::{read_dataset, write_dataset, RewardContext, Transition, TransitionDataset};
use crate::Real;

pub const EVENTS_FILE: &str = "events.csv";
pub const SUMMARY_FILE: &str = "cohort_summary.json";
pub const INGEST_REPORT_FILE: &str = "ingest_report.json";
pub const FORECASTER_FILE: &str = "forecaster.json";
pub const FORECAST_CSV_FILE: &str = "forecast.csv";
pub const CONTEXT_FILE: &str = "reward_context.json";
pub const TRAIN_TRANSITIONS_FILE: &str = "train_transitions.bin";
pub const TEST_TRANSITIONS_FILE: &str = "test_transitions.bin";
pub const POLICY_FILE: &str = "policy.bin";
pub const METRICS_FILE: &str = "fqi_metrics.jsonl";
pub const TUNING_FILE: &str = "epsilon_tuning.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const VALUES_CSV_FILE: &str = "values.csv";
pub const INFO_GAIN_CSV_FILE: &str = "info_gain.csv";
pub const TIME_TO_TREATMENT_CSV_FILE: &str = "time_to_treatment.csv";
pub const REPORT_FILE: &str = "report.md";

/// Fitted forecaster plus the train/test partition it was fit on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastArtifact {
    pub config_hash: String,
    pub events_hash: String,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub forecaster: Forecaster<Real>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextArtifact {
    pub config_hash: String,
    pub forecaster_hash: String,
    pub context: RewardContext<Real>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub gamma: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub n_transitions: usize,
    pub tuning: Vec<EpsilonTuning>,
}

// ── File helpers ────────────────────────────────────────────────────────

fn require(path: &Path) -> Result<PathBuf> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(PipelineError::MissingInput(path.to_path_buf()))
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| PipelineError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| PipelineError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text.as_bytes())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| PipelineError::Config(format!("{}: malformed artifact: {e}", path.display())))
}

fn create_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e))
}

fn check_hash(what: &str, expected: &str, found: &str) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(PipelineError::HashMismatch {
            what: what.to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        })
    }
}

fn load_events(out: &Path) -> Result<(Vec<Admission>, String)> {
    let bytes = read(&out.join(EVENTS_FILE))?;
    let (admissions, _) = read_events(&bytes[..])?;
    Ok((admissions, hash_bytes(&bytes)))
}

fn partition(admissions: Vec<Admission>, artifact: &ForecastArtifact) -> (Vec<Admission>, Vec<Admission>) {
    let train_ids: BTreeSet<&str> = artifact.train_ids.iter().map(String::as_str).collect();
    let test_ids: BTreeSet<&str> = artifact.test_ids.iter().map(String::as_str).collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for a in admissions {
        if train_ids.contains(a.admission_id.as_str()) {
            train.push(a);
        } else if test_ids.contains(a.admission_id.as_str()) {
            test.push(a);
        }
    }
    (train, test)
}

fn check_finite(transitions: &[Transition<Real>]) -> Result<()> {
    match transitions.iter().find(|t| {
        t.state.0.iter().chain(&t.next_state.0).chain(&t.reward.0).any(|v| !v.is_finite())
    }) {
        Some(t) => Err(PipelineError::Invariant(format!(
            "non-finite transition for admission {} at hour {}",
            t.admission_id, t.time
        ))),
        None => Ok(()),
    }
}

// ── Stages ──────────────────────────────────────────────────────────────

/// Simulates a cohort and writes its events and summary.
pub fn cmd_simulate(run: &RunConfig, out: &Path) -> Result<CohortSummary> {
    run.validate()?;
    create_dir(out)?;
    let admissions = simulate_cohort(&run.cohort_config())?;
    export_events(&out.join(EVENTS_FILE), &admissions)?;
    let summary = CohortSummary::from_admissions(&admissions, DropCounts::default());
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Parses an external event file, applies the cohort filters and writes
/// the retained admissions in canonical form.
pub fn cmd_ingest(run: &RunConfig, out: &Path, input: &Path) -> Result<IngestReport> {
    run.validate()?;
    let (admissions, report) = ingest_events(&require(input)?)?;
    create_dir(out)?;
    export_events(&out.join(EVENTS_FILE), &admissions)?;
    let summary = CohortSummary::from_admissions(&admissions, report.dropped.clone());
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    write_json(&out.join(INGEST_REPORT_FILE), &report)?;
    Ok(report)
}

/// Splits the cohort, fits the forecaster on the training admissions and
/// exports forecasts of the first test admissions.
pub fn cmd_forecast(run: &RunConfig, out: &Path) -> Result<ForecastArtifact> {
    run.validate()?;
    let (admissions, events_hash) = load_events(out)?;
    let (train, test) = split(run, &admissions)?;
    let forecaster = fit_forecaster(run, &train)?;
    let artifact = ForecastArtifact {
        config_hash: forecaster_hash(run, &events_hash),
        events_hash,
        train_ids: train.iter().map(|a| a.admission_id.clone()).collect(),
        test_ids: test.iter().map(|a| a.admission_id.clone()).collect(),
        forecaster,
    };
    write_json(&out.join(FORECASTER_FILE), &artifact)?;
    let lab_traits: Vec<TraitId> = Lab::ALL.iter().map(|l| l.trait_id()).collect();
    let shown = &test[..run.forecast_export_admissions.min(test.len())];
    let forecasts = artifact.forecaster.forecast_cohort(shown, &lab_traits)?;
    let mut csv = Vec::new();
    write_forecast_csv(&mut csv, &forecasts)?;
    write(&out.join(FORECAST_CSV_FILE), &csv)?;
    Ok(artifact)
}

/// Builds the reward context and the train and test transition datasets.
/// Returns the number of train and test transitions.
pub fn cmd_build_transitions(run: &RunConfig, out: &Path) -> Result<(usize, usize)> {
    run.validate()?;
    let (admissions, events_hash) = load_events(out)?;
    let fa: ForecastArtifact = read_json(&require(&out.join(FORECASTER_FILE))?)?;
    check_hash("forecaster events", &fa.events_hash, &events_hash)?;
    let (train, test) = partition(admissions, &fa);
    let context = fit_context(&run.mdp, &fa.forecaster, &train)?;
    let hash = transitions_hash(run, &fa.config_hash);
    let train_t = make_transitions(&train, &fa.forecaster, &context)?;
    let test_t = make_transitions(&test, &fa.forecaster, &context)?;
    check_finite(&train_t)?;
    check_finite(&test_t)?;
    let sizes = (train_t.len(), test_t.len());
    write_json(
        &out.join(CONTEXT_FILE),
        &ContextArtifact {
            config_hash: hash.clone(),
            forecaster_hash: fa.config_hash.clone(),
            context,
        },
    )?;
    write_dataset(&out.join(TRAIN_TRANSITIONS_FILE), &TransitionDataset::new(train_t, hash.clone()))?;
    write_dataset(&out.join(TEST_TRANSITIONS_FILE), &TransitionDataset::new(test_t, hash))?;
    Ok(sizes)
}

/// Trains MO-FQI on the training transitions, calibrates the cost slack
/// and writes the policy artifact, the per-iteration log and the calibration.
pub fn cmd_train(
    run: &RunConfig,
    out: &Path,
    on_iteration: impl FnMut(&IterationMetrics),
) -> Result<TrainSummary> {
    run.validate()?;
    let dataset: TransitionDataset<Real> = read_dataset(&require(&out.join(TRAIN_TRANSITIONS_FILE))?)?;
    check_finite(&dataset.transitions)?;
    let output = train_policy(&run.fqi, run.seed, &dataset.transitions, on_iteration)?;
    let summary = TrainSummary {
        config_hash: dataset.config_hash.clone(),
        gamma: run.fqi.gamma,
        iterations: run.fqi.iterations,
        batch_size: run.fqi.batch_size,
        n_transitions: dataset.len(),
        tuning: output.tuning.clone(),
    };
    let mut log = serde_json::to_string(&serde_json::json!({
        "config_hash": summary.config_hash,
        "gamma": summary.gamma,
        "iterations": summary.iterations,
        "batch_size": summary.batch_size,
        "n_transitions": summary.n_transitions,
    }))?;
    log.push('\n');
    for m in &output.metrics {
        log.push_str(&serde_json::to_string(m)?);
        log.push('\n');
    }
    write(&out.join(METRICS_FILE), log.as_bytes())?;
    write_json(&out.join(TUNING_FILE), &summary)?;
    let artifact = PolicyArtifact {
        config_hash: dataset.config_hash,
        q: output.q,
        policy: output.policy,
    };
    write(&out.join(POLICY_FILE), &artifact.to_bytes())?;
    Ok(summary)
}

/// Evaluates the trained policy on the test admissions after checking that
/// every artifact in the chain derives from the same inputs.
pub fn cmd_evaluate(run: &RunConfig, out: &Path) -> Result<Evaluation> {
    run.validate()?;
    let artifact = PolicyArtifact::<Real>::from_bytes(&read(&require(&out.join(POLICY_FILE))?)?)?;
    let train: TransitionDataset<Real> = read_dataset(&require(&out.join(TRAIN_TRANSITIONS_FILE))?)?;
    let test_ds: TransitionDataset<Real> = read_dataset(&require(&out.join(TEST_TRANSITIONS_FILE))?)?;
    let ctx: ContextArtifact = read_json(&require(&out.join(CONTEXT_FILE))?)?;
    let fa: ForecastArtifact = read_json(&require(&out.join(FORECASTER_FILE))?)?;
    let (admissions, events_hash) = load_events(out)?;

    check_hash("policy vs training transitions", &train.config_hash, &artifact.config_hash)?;
    check_hash("test vs training transitions", &train.config_hash, &test_ds.config_hash)?;
    check_hash("reward context vs transitions", &train.config_hash, &ctx.config_hash)?;
    check_hash("reward context vs forecaster", &fa.config_hash, &ctx.forecaster_hash)?;
    check_hash("forecaster vs events", &fa.events_hash, &events_hash)?;

    let (_, test) = partition(admissions, &fa);
    let (evaluation, dist) = evaluate(
        run,
        &artifact.policy,
        &train.transitions,
        &test,
        &fa.forecaster,
        &ctx.context,
        &artifact.config_hash,
    )?;
    write_json(&out.join(EVALUATION_FILE), &evaluation)?;

    let mut values = String::from("policy,scope,component,mean,std,trials,best\n");
    for v in evaluation.values.iter().chain(&evaluation.joint_values) {
        values.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            v.policy,
            v.scope,
            v.component,
            v.mean,
            v.std.map(|s| s.to_string()).unwrap_or_default(),
            v.trials,
            u8::from(v.best)
        ));
    }
    write(&out.join(VALUES_CSV_FILE), values.as_bytes())?;
    for (file, header, rows) in [
        (INFO_GAIN_CSV_FILE, "lab,policy,gain\n", &dist.info_gain),
        (TIME_TO_TREATMENT_CSV_FILE, "lab,policy,hours\n", &dist.time_to_treatment),
    ] {
        let mut text = String::from(header);
        for (lab, policy, v) in rows {
            text.push_str(&format!("{lab},{policy},{v}\n"));
        }
        write(&out.join(file), text.as_bytes())?;
    }
    Ok(evaluation)
}

/// Renders the evaluation as a markdown report and writes it next to it.
pub fn cmd_report(out: &Path) -> Result<String> {
    let evaluation: Evaluation = read_json(&require(&out.join(EVALUATION_FILE))?)?;
    let text = super::render_report(&evaluation);
    write(&out.join(REPORT_FILE), text.as_bytes())?;
    Ok(text)
}
