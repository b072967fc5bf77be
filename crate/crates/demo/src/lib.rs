//! Browser demo: derive an influence function, check it against the
//! numerical oracle, and run a small cross-fit estimate. Every export takes
//! plain strings/numbers and returns a JSON string with an `ok` flag.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use std::sync::Arc;
use wasm_bindgen::prelude::*;

use ifkit::catalog::get_entry;
use ifkit::dist::{DiscreteDist, Schema};
use ifkit::dsl::{check_if, derive_if, parse_functional};
use ifkit::estimate::{crossfit_detailed, LearnerSet};
use ifkit::nuisance::parse_learner;
use ifkit::simlab::{crossfit_plugin, get_dgp, Broken, StudyConfig};

fn wrap(r: Result<Value, String>) -> String {
    match r {
        Ok(mut v) => {
            v["ok"] = json!(true);
            v.to_string()
        }
        Err(e) => json!({"ok": false, "error": e}).to_string(),
    }
}

fn schema(text: &str) -> Result<Schema, String> {
    let map: serde_json::Map<String, Value> = serde_json::from_str(text).map_err(|e| format!("schema: {e}"))?;
    let vars = map
        .iter()
        .map(|(k, v)| v.as_u64().map(|l| (k.clone(), l as usize)).ok_or(format!("schema: `{k}` needs an integer level count")))
        .collect::<Result<Vec<_>, _>>()?;
    Schema::new(vars).map_err(|e| e.to_string())
}

/// Symbolic influence function and rewrite trace.
#[wasm_bindgen]
pub fn derive(schema_json: &str, expr: &str) -> String {
    wrap((|| {
        let s = schema(schema_json)?;
        let e = parse_functional(expr).map_err(|e| e.to_string())?;
        let (phi, trace) = derive_if(&e, &s).map_err(|e| e.to_string())?;
        Ok(json!({"influence_function": phi.to_string(), "trace": trace.to_json()}))
    })())
}

/// Compare the derived influence function with finite differences on a
/// random strictly positive distribution drawn from `seed`.
#[wasm_bindgen]
pub fn check(schema_json: &str, expr: &str, seed: u32, tol: f64) -> String {
    wrap((|| {
        let s = Arc::new(schema(schema_json)?);
        let e = parse_functional(expr).map_err(|e| e.to_string())?;
        let p = DiscreteDist::random_positive(s, &mut ChaCha8Rng::seed_from_u64(seed as u64));
        let r = check_if(&e, &p, tol).map_err(|e| e.to_string())?;
        serde_json::to_value(&r).map_err(|e| e.to_string())
    })())
}

/// Sample `n` rows from a registered process and report the cross-fit
/// one-step, the plug-in and the truth.
#[wasm_bindgen]
pub fn estimate(dgp: &str, functional: &str, n: u32, seed: u32, learner: &str, broken: &str) -> String {
    wrap((|| {
        let d = get_dgp(dgp).map_err(|e| e.to_string())?;
        let mut cfg = StudyConfig::new(dgp, functional, vec![n as usize], 1, seed as u64).with_learner("default", learner);
        cfg.broken = broken.parse::<Broken>().map_err(|e| e.to_string())?;
        parse_learner(learner).map_err(|e| e.to_string())?;
        let entry = get_entry(functional).map_err(|e| e.to_string())?;
        let learners: LearnerSet = cfg.learner_set(&d, &entry).map_err(|e| e.to_string())?;
        let data = d.sample(n as usize, seed as u64).map_err(|e| e.to_string())?;
        let cf = crossfit_detailed(&entry, &learners, &data, 5, seed as u64, 0.95).map_err(|e| e.to_string())?;
        let plugin = crossfit_plugin(&entry, &cf, &data).ok();
        let truth = d.truth(&entry).map_err(|e| e.to_string())?;
        Ok(json!({
            "truth": truth,
            "onestep": cf.estimate.psi_hat,
            "se": cf.estimate.se,
            "ci": cf.estimate.ci.map(|(l, h)| [l, h]),
            "plugin": plugin,
            "clamp_events": cf.estimate.clamp_events,
            "per_fold": cf.estimate.per_fold,
        }))
    })())
}
