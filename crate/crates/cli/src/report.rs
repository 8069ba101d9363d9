//! report.json assembly and expectation checks.

use std::collections::BTreeMap;

use serde_json::{json, Map, Value};

use crate::config::{Expectation, Scenario};
use crate::run::RunOutput;

/// Name of the only field allowed to differ between identical runs.
pub const TIMESTAMP_KEY: &str = "timestamp";

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub metric: String,
    pub pass: bool,
    pub observed: Value,
}

fn observed_string(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn check_one(metric: &str, e: &Expectation, metrics: &Map<String, Value>) -> Check {
    let observed = metrics.get(metric).cloned().unwrap_or(Value::Null);
    let pass = match &observed {
        Value::Null => false,
        v => {
            let mut ok = true;
            if let Some(eq) = &e.equals {
                ok &= observed_string(v) == *eq;
            }
            let x = v.as_f64();
            if let (Some(target), Some(tol)) = (e.value, e.tol) {
                ok &= x.is_some_and(|x| (x - target).abs() <= tol);
            }
            if let Some(lo) = e.min {
                ok &= x.is_some_and(|x| x >= lo);
            }
            if let Some(hi) = e.max {
                ok &= x.is_some_and(|x| x <= hi);
            }
            ok
        }
    };
    Check { metric: metric.to_string(), pass, observed }
}

pub fn check_all(expected: &BTreeMap<String, Expectation>, metrics: &Map<String, Value>) -> Vec<Check> {
    expected.iter().map(|(m, e)| check_one(m, e, metrics)).collect()
}

fn expectation_json(e: &Expectation, c: &Check) -> Value {
    let mut o = Map::new();
    o.insert("observed".into(), c.observed.clone());
    o.insert("pass".into(), json!(c.pass));
    o.insert("basis".into(), json!(e.basis));
    for (k, v) in [("value", e.value), ("tol", e.tol), ("min", e.min), ("max", e.max)] {
        if let Some(v) = v {
            o.insert(k.into(), json!(v));
        }
    }
    if let Some(eq) = &e.equals {
        o.insert("equals".into(), json!(eq));
    }
    Value::Object(o)
}

/// Builds the full report; `timestamp` is the only non-deterministic input.
pub fn build(sc: &Scenario, run: &RunOutput, checks: &[Check], timestamp: u64) -> Value {
    let grid = &sc.spec.grid;
    let mut exp = Map::new();
    for c in checks {
        exp.insert(c.metric.clone(), expectation_json(&sc.expected[&c.metric], c));
    }
    let mut r = Map::new();
    r.insert("name".into(), json!(sc.name));
    r.insert("kind".into(), json!(sc.kind.as_str()));
    r.insert("seed".into(), json!(sc.seed));
    r.insert("status".into(), json!(run.status.as_str()));
    r.insert(TIMESTAMP_KEY.into(), json!(timestamp));
    r.insert("integrand".into(), json!(sc.spec.integrand.key()));
    r.insert(
        "grid".into(),
        json!({
            "dim": grid.dim(),
            "cells_per_axis": grid.cells_per_axis(),
            "extent": grid.extent().iter().map(|(a, b)| [*a, *b]).collect::<Vec<_>>(),
            "components": grid.components(),
            "active_cells": grid.n_cells(),
            "holes": grid.hole_count(),
        }),
    );
    r.insert("schedule".into(), json!(sc.schedule.k_values()));
    r.insert("metrics".into(), Value::Object(run.metrics.clone()));
    for (k, v) in &run.sections {
        r.insert(k.clone(), v.clone());
    }
    r.insert(
        "expectations".into(),
        json!({ "all_pass": checks.iter().all(|c| c.pass), "results": Value::Object(exp) }),
    );
    r.insert("error".into(), run.error.clone().unwrap_or(Value::Null));
    Value::Object(r)
}

/// The report with the timestamp removed, for comparisons.
pub fn without_timestamp(report: &Value) -> Value {
    let mut r = report.clone();
    if let Value::Object(o) = &mut r {
        o.remove(TIMESTAMP_KEY);
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp(
        value: Option<f64>,
        tol: Option<f64>,
        min: Option<f64>,
        max: Option<f64>,
        equals: Option<&str>,
    ) -> Expectation {
        Expectation { value, tol, min, max, equals: equals.map(str::to_string), basis: "test".into() }
    }

    #[test]
    fn targets_of_every_form() {
        let mut m = Map::new();
        m.insert("x".into(), json!(1.05));
        m.insert("b".into(), json!(true));
        m.insert("s".into(), json!("borderline"));
        m.insert("n".into(), json!(1u64));
        assert!(check_one("x", &exp(Some(1.0), Some(0.1), None, None, None), &m).pass);
        assert!(!check_one("x", &exp(Some(1.0), Some(0.01), None, None, None), &m).pass);
        assert!(check_one("x", &exp(None, None, Some(1.0), Some(1.1), None), &m).pass);
        assert!(!check_one("x", &exp(None, None, None, Some(1.0), None), &m).pass);
        assert!(check_one("b", &exp(None, None, None, None, Some("true")), &m).pass);
        assert!(check_one("s", &exp(None, None, None, None, Some("borderline")), &m).pass);
        assert!(check_one("n", &exp(None, None, None, None, Some("1")), &m).pass);
        assert!(!check_one("missing", &exp(None, None, Some(0.0), None, None), &m).pass);
    }
}
