#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::Path;

use sapsim::stats::expit;
use sapsim::SeededStream;
use serde_json::{json, Value};

/// Point-treatment source: binary w1, normal w2, confounded a, binary y.
pub fn write_point_source(path: &Path, n: usize, seed: u64) {
    let mut rng = SeededStream::new(seed, 0).rng();
    let mut s = String::from("w1,w2,a,y\n");
    for _ in 0..n {
        let w1 = rng.bernoulli(0.4) as u8;
        let w2 = rng.normal(0.0, 1.0);
        let a = rng.bernoulli(expit(-0.3 + 0.6 * w1 as f64 + 0.4 * w2)) as u8;
        let y = rng.bernoulli(expit(-1.0 + 0.8 * w1 as f64 + 0.5 * w2 + 0.6 * a as f64)) as u8;
        let _ = writeln!(s, "{w1},{w2},{a},{y}");
    }
    std::fs::write(path, s).unwrap();
}

/// Cluster trial source with a cluster covariate that predicts the outcome.
pub fn write_cluster_source(path: &Path, clusters: usize, seed: u64) {
    let mut rng = SeededStream::new(seed, 0).rng();
    let mut s = String::from("clinic,arm,e1,age,delta,y\n");
    for c in 0..clusters {
        let arm = (c % 2) as u8;
        let e1 = rng.normal(0.0, 1.0);
        let size = 30 + rng.below(30);
        for _ in 0..size {
            let age = rng.normal(0.0, 1.0);
            let y = rng.bernoulli(expit(-0.5 + 0.6 * e1 + 0.3 * age)) as u8;
            let _ = writeln!(s, "c{c:03},{arm},{e1},{age},1,{y}");
        }
    }
    std::fs::write(path, s).unwrap();
}

pub fn glm() -> Value {
    json!({"kind": "glm_main_terms", "family": "binomial"})
}

pub fn parametric() -> Value {
    json!({"outcome": {"method": "parametric", "learner": glm()},
           "propensity": {"method": "parametric", "learner": glm()}})
}

pub fn point_config(data: &Path, out: &Path, iterations: usize, override_beta: Option<f64>) -> Value {
    let mut generator = json!({"kind": "outcome_blind", "fit_seed": 3});
    if let Some(b) = override_beta {
        generator["treatment_override"] = json!(b);
    }
    json!({
        "name": "point",
        "dataset": {"path": data, "schema": {"study_type": "point_treatment",
            "columns": {"w1": "baseline", "w2": "baseline", "a": "treatment", "y": "outcome"}}},
        "generator": generator,
        "estimand": {"scale": "difference"},
        "candidates": [
            {"id": "tmle_glm_ic", "axes": {"nuisance": "glm", "variance": "ic"},
             "estimator": {"type": "tmle", "nuisance": parametric()}},
            {"id": "tmle_glm_boot", "axes": {"nuisance": "glm", "variance": "bootstrap"},
             "estimator": {"type": "tmle", "nuisance": parametric(),
                           "variance": {"method": "bootstrap", "replicates": 200}}},
        ],
        "iterations": iterations,
        "seed": 11,
        "workers": 1,
        "output_dir": out,
        "truth_replicates": 100000,
    })
}

pub fn trial_config(data: &Path, out: &Path, iterations: usize) -> Value {
    json!({
        "name": "trial",
        "dataset": {"path": data, "schema": {"study_type": "cluster_two_stage",
            "columns": {"clinic": "cluster_id", "arm": "treatment", "e1": "cluster_baseline",
                        "age": "baseline", "delta": "measurement", "y": "outcome"}}},
        "generator": {"kind": "treatment_blind",
                      "mechanism": {"intercept": 0.8, "coefficients": {"age": 0.4}}},
        "estimand": {"scale": "ratio"},
        "candidates": [
            {"id": "two_stage_aps", "axes": {"endpoint": "tmle", "effect": "aps"},
             "estimator": {"type": "two_stage", "stage1": "tmle_parametric", "nuisance": parametric(),
                           "aps": {"candidates": [[], ["e1"]]}, "estimand": {"scale": "ratio"},
                           "variance": {"method": "cross_validated_ic"}}},
        ],
        "iterations": iterations,
        "seed": 5,
        "workers": 8,
        "output_dir": out,
    })
}

pub fn write_json(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}
