use std::fmt::Write;

use super::{Evaluation, LabMetric, PolicyValue};
use crate::mdp::RewardVector;
use crate::Real;

fn cell(v: &PolicyValue) -> String {
    let star = if v.best { " ★" } else { "" };
    match v.std {
        Some(s) => format!("{:.4} ± {:.4}{star}", v.mean, s),
        None => format!("{:.4}{star}", v.mean),
    }
}

fn value_table(out: &mut String, title: &str, values: &[PolicyValue], scope: &str) {
    let components = RewardVector::<Real>::NAMES;
    let _ = writeln!(out, "### {title}\n");
    let _ = writeln!(out, "| policy | {} |", components.join(" | "));
    let _ = writeln!(out, "|---|{}", "---|".repeat(components.len()));
    let mut policies: Vec<&str> = Vec::new();
    for v in values.iter().filter(|v| v.scope == scope) {
        if !policies.contains(&v.policy.as_str()) {
            policies.push(&v.policy);
        }
    }
    for p in policies {
        let cells: Vec<String> = components
            .iter()
            .map(|c| {
                values
                    .iter()
                    .find(|v| v.scope == scope && v.policy == p && v.component == *c)
                    .map_or_else(|| "n/a".to_string(), cell)
            })
            .collect();
        let _ = writeln!(out, "| {p} | {} |", cells.join(" | "));
    }
    out.push('\n');
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"))
}

fn metric_table(out: &mut String, title: &str, unit: &str, rows: &[LabMetric]) {
    let _ = writeln!(out, "## {title}\n");
    let _ = writeln!(out, "| lab | clinician mean {unit} | MO-FQI mean {unit} | clinician n | MO-FQI n | excluded (clinician / MO-FQI) |");
    let _ = writeln!(out, "|---|---|---|---|---|---|");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} / {} |",
            r.lab,
            opt(r.clinician_mean),
            opt(r.mo_fqi_mean),
            r.clinician_count,
            r.mo_fqi_count,
            r.clinician_excluded,
            r.mo_fqi_excluded
        );
    }
    out.push('\n');
}

/// Markdown summary of an evaluation. ★ marks the best policy per component.
pub fn render_report(e: &Evaluation) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Lab-ordering policy evaluation\n");
    let _ = writeln!(out, "- config hash: `{}`", e.config_hash);
    let _ = writeln!(out, "- test admissions: {} ({} decision hours)", e.n_test_admissions, e.n_test_steps);
    let _ = writeln!(out, "- empirical order rate p_emp: {:.4}", e.empirical_order_rate);
    let _ = writeln!(out, "- random baselines: mean ± std over {} trials", e.random_trials);
    let _ = writeln!(
        out,
        "- behaviour policy on its own data vs logged return: max gap {:.3e}\n",
        e.behaviour_self_check
    );

    let _ = writeln!(out, "## Estimated policy values\n");
    let mut scopes: Vec<&str> = Vec::new();
    for v in &e.values {
        if !scopes.contains(&v.scope.as_str()) {
            scopes.push(&v.scope);
        }
    }
    for s in scopes {
        value_table(&mut out, s, &e.values, s);
    }
    value_table(&mut out, "joint actions", &e.joint_values, "joint");

    let _ = writeln!(out, "## Order counts\n");
    let _ = writeln!(out, "| lab | clinician | MO-FQI (budgeted) | after onset filter | reduction | raw recommendations | raw after filter |");
    let _ = writeln!(out, "|---|---|---|---|---|---|---|");
    for (r, raw) in e.order_reduction.iter().zip(&e.order_reduction_raw) {
        let pct = r.reduction_percent.map_or_else(|| "n/a".to_string(), |p| format!("{p:.1}%"));
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} |",
            r.lab, r.clinician, r.recommended, r.recommended_filtered, pct, raw.recommended, raw.recommended_filtered
        );
    }
    out.push('\n');
    metric_table(&mut out, "Information gain per order", "gain", &e.info_gain);
    metric_table(&mut out, "Time from order to treatment onset", "hours", &e.time_to_treatment);

    let _ = writeln!(out, "## Estimator diagnostics\n");
    let _ = writeln!(out, "| policy | scope | min ESS | mean ESS | clipped weights | zero-weight steps |");
    let _ = writeln!(out, "|---|---|---|---|---|---|");
    for d in &e.diagnostics {
        let _ = writeln!(
            out,
            "| {} | {} | {:.1} | {:.1} | {} | {} |",
            d.policy, d.scope, d.min_ess, d.mean_ess, d.clipped, d.zero_weight_steps
        );
    }
    out
}
