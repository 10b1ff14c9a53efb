use ndarray::Array2;
use oncoclip::math::percentile_sorted;
use oncoclip::survival::{
    breslow_baseline, cox_fit, cumulative_dynamic_auc, dichotomize_median, harrell_cindex, ipcw_brier, ipcw_cindex_truncated, km_estimate,
    logrank_test, survival_at, CensoringDist, CoxOptions, KmCurve,
};
use serde_json::{json, Value};

use super::Outcome;
use crate::args::{Analysis, SurvivalArgs};
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;
use crate::table::Table;

struct Cohort {
    table: Table,
    times: Vec<f64>,
    events: Vec<bool>,
}

impl Cohort {
    fn subset(&self, keep: &[bool]) -> (Vec<f64>, Vec<bool>) {
        let pick = |i: &usize| keep[*i];
        let idx: Vec<usize> = (0..self.times.len()).filter(pick).collect();
        (idx.iter().map(|&i| self.times[i]).collect(), idx.iter().map(|&i| self.events[i]).collect())
    }

    fn scores(&self) -> Result<Vec<f64>> {
        self.table.floats("score")
    }
}

fn curve_json(label: Option<&str>, c: &KmCurve) -> Value {
    let median = c.times.iter().zip(&c.survival).find(|(_, &s)| s <= 0.5).map(|(t, _)| *t);
    json!({
        "group": label,
        "times": c.times,
        "survival": c.survival,
        "at_risk": c.at_risk,
        "events": c.events,
        "median": median,
    })
}

/// Two groups from a label column, in sorted label order.
fn two_groups(values: &[&str]) -> Result<(Vec<String>, Vec<bool>)> {
    let mut names: Vec<String> = values.iter().map(|s| s.to_string()).collect();
    names.sort();
    names.dedup();
    if names.len() != 2 {
        return Err(CliError::data(format!("log-rank needs exactly two groups, found {}", names.len())));
    }
    let in_a = values.iter().map(|v| *v == names[0]).collect();
    Ok((names, in_a))
}

fn logrank_json(c: &Cohort, names: &[String], in_a: &[bool]) -> Result<Value> {
    let lr = logrank_test(&c.times, &c.events, in_a)?;
    Ok(json!({ "groups": names, "chi2": lr.chi2, "p": lr.p, "observed": lr.observed, "expected": lr.expected, "variance": lr.variance }))
}

fn grouped_curves(c: &Cohort, names: &[String], values: &[&str]) -> Result<Vec<Value>> {
    names
        .iter()
        .map(|g| {
            let keep: Vec<bool> = values.iter().map(|v| v == g).collect();
            let (t, e) = c.subset(&keep);
            Ok(curve_json(Some(g), &km_estimate(&t, &e)?))
        })
        .collect()
}

pub fn run(a: &SurvivalArgs) -> Result<Outcome> {
    let mut manifest = RunManifest::new("eval-survival", a, None)?;
    manifest.input(&a.input)?;
    let table = Table::read(&a.input)?;
    let cohort = Cohort { times: table.floats("time")?, events: table.bools("event")?, table };
    let c = &cohort;
    let result = match a.analysis {
        Analysis::Km => {
            manifest.metric("kaplan_meier", "product-limit-v1");
            match &a.group {
                None => json!({ "analysis": "km", "curves": [curve_json(None, &km_estimate(&c.times, &c.events)?)] }),
                Some(col) => {
                    let values = c.table.strings(col)?;
                    let mut names: Vec<String> = values.iter().map(|s| s.to_string()).collect();
                    names.sort();
                    names.dedup();
                    let mut out = json!({ "analysis": "km", "curves": grouped_curves(c, &names, &values)? });
                    if names.len() == 2 {
                        manifest.metric("logrank", "hypergeometric-1df-v1");
                        let (names, in_a) = two_groups(&values)?;
                        out["logrank"] = logrank_json(c, &names, &in_a)?;
                    }
                    out
                }
            }
        }
        Analysis::Logrank => {
            manifest.metric("logrank", "hypergeometric-1df-v1");
            let col = a.group.as_deref().ok_or_else(|| CliError::Usage("--analysis logrank needs --group".into()))?;
            let values = c.table.strings(col)?;
            let (names, in_a) = two_groups(&values)?;
            json!({ "analysis": "logrank", "logrank": logrank_json(c, &names, &in_a)? })
        }
        Analysis::Stratify => {
            manifest.metric("median_split", "strictly-above-median-high-v1");
            manifest.metric("logrank", "hypergeometric-1df-v1");
            let (median, high) = dichotomize_median(&c.scores()?)?;
            let values: Vec<&str> = high.iter().map(|&h| if h { "high" } else { "low" }).collect();
            let names = vec!["high".to_string(), "low".to_string()];
            let in_a = high.clone();
            let lr = if high.iter().all(|&h| !h) { Value::Null } else { logrank_json(c, &names, &in_a)? };
            json!({
                "analysis": "stratify",
                "median": median,
                "n_high": high.iter().filter(|&&h| h).count(),
                "curves": grouped_curves(c, &names, &values)?,
                "logrank": lr,
            })
        }
        Analysis::Cox => {
            manifest.metric("cox", "breslow-newton-wald-v1");
            let covs = a.covariates.clone().unwrap_or_else(|| vec!["score".into()]);
            let x = c.table.matrix(&covs)?;
            let fit = cox_fit(x.view(), &c.times, &c.events, &CoxOptions::default())?;
            let table: Vec<Value> = covs
                .iter()
                .zip(&fit.coefficients)
                .map(|(name, k)| json!({ "covariate": name, "beta": k.beta, "se": k.se, "hazard_ratio": k.hazard_ratio, "ci": k.ci, "z": k.z, "p": k.p }))
                .collect();
            json!({
                "analysis": "cox",
                "coefficients": table,
                "log_likelihood": fit.log_likelihood,
                "iterations": fit.iterations,
                "converged": fit.converged,
                "n": fit.n,
                "n_events": fit.n_events,
            })
        }
        Analysis::Cindex => {
            manifest.metric("harrell_cindex", "pairs-half-ties-v1");
            manifest.metric("ipcw_cindex", "uno-truncated-g-squared-v1");
            let risks = c.scores()?;
            let tau = a.tau.unwrap_or_else(|| c.times.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            let g = CensoringDist::fit(&c.times, &c.events)?;
            json!({
                "analysis": "cindex",
                "harrell": harrell_cindex(&c.times, &c.events, &risks)?,
                "ipcw": ipcw_cindex_truncated(&g, &c.times, &c.events, &risks, tau)?,
                "tau": tau,
            })
        }
        Analysis::Td => {
            manifest.metric("cumulative_dynamic_auc", "ipcw-cases-left-limit-v1");
            manifest.metric("ipcw_brier", "graf-v1");
            let risks = c.scores()?;
            let times = match &a.times {
                Some(t) => t.clone(),
                None => {
                    let mut ev: Vec<f64> = c.times.iter().zip(&c.events).filter(|(_, &e)| e).map(|(t, _)| *t).collect();
                    if ev.is_empty() {
                        return Err(CliError::data("no events to place default evaluation times"));
                    }
                    ev.sort_by(f64::total_cmp);
                    [25.0, 50.0, 75.0].iter().map(|&q| percentile_sorted(&ev, q)).collect()
                }
            };
            let g = CensoringDist::fit(&c.times, &c.events)?;
            let auc = cumulative_dynamic_auc(&g, &c.times, &c.events, &risks, &times)?;
            let x = Array2::from_shape_vec((risks.len(), 1), risks.clone()).expect("one column");
            let fit = cox_fit(x.view(), &c.times, &c.events, &CoxOptions::default())?;
            let base = breslow_baseline(&fit, x.view(), &c.times, &c.events)?;
            let brier = times
                .iter()
                .map(|&t| {
                    let pred = risks.iter().map(|&r| survival_at(&fit, &base, &[r], t)).collect::<oncoclip::Result<Vec<_>>>()?;
                    Ok(ipcw_brier(&g, &pred, &c.times, &c.events, t)?)
                })
                .collect::<Result<Vec<f64>>>()?;
            json!({ "analysis": "td", "times": times, "auc": auc, "brier": brier, "score_beta": fit.beta()[0] })
        }
    };
    Ok(Outcome { result, manifest })
}
