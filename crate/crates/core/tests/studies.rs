mod common;

use std::fmt::Write as _;
use std::path::Path;

use sapsim::data::{load_dataset, validate_schema, Schema, StudyType};
use sapsim::harness::{Study, StudyConfig};
use sapsim::ltmle::Panel;
use sapsim::plasmode::{sha256_hex, TruthMethod};
use sapsim::stats::expit;
use sapsim::{Error, SeededStream};
use serde_json::json;

/// Long format, two periods, with monotone censoring after period 0.
fn write_longitudinal(path: &Path, n: usize) {
    let mut rng = SeededStream::new(77, 0).rng();
    let mut s = String::from("id,t,w,l,a,c,y\n");
    for i in 0..n {
        let w = rng.normal(0.0, 1.0);
        let mut l = rng.bernoulli(0.4) as u8;
        for t in 0..2 {
            let a = rng.bernoulli(expit(-0.2 + 0.5 * l as f64 + 0.3 * w)) as u8;
            let c = rng.bernoulli(0.05) as u8;
            let y = if t == 1 && c == 0 {
                (rng.bernoulli(expit(-1.0 + 0.6 * a as f64 + 0.8 * l as f64 + 0.2 * w)) as u8).to_string()
            } else {
                String::new()
            };
            let _ = writeln!(s, "s{i},{t},{w},{l},{a},{c},{y}");
            if c == 1 {
                break;
            }
            l = rng.bernoulli(expit(-0.5 + 0.9 * a as f64)) as u8;
        }
    }
    std::fs::write(path, s).unwrap();
}

fn long_schema() -> serde_json::Value {
    json!({"study_type": "longitudinal", "columns": {
        "id": "subject_id", "t": "time_index", "w": "baseline", "l": "time_varying",
        "a": "treatment", "c": "censoring", "y": "outcome"}})
}

#[test]
fn panel_from_long_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("long.csv");
    write_longitudinal(&path, 300);
    let schema: Schema = serde_json::from_value(long_schema()).unwrap();
    let ds = load_dataset(&path, &schema).unwrap();
    assert!(validate_schema(&ds, StudyType::Longitudinal).is_empty());
    let panel = Panel::from_dataset(&ds).unwrap();
    assert_eq!(panel.n(), 300);
    assert_eq!(panel.periods(), 2);
    let censored = (0..300).filter(|&i| !panel.present[1][i]).count();
    assert!(censored > 0 && censored < 60);
    assert!((0..300).all(|i| panel.present[1][i] || panel.outcome[i].is_nan()));
}

#[test]
fn longitudinal_study_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("long.csv");
    write_longitudinal(&data, 400);
    let ltmle = json!({"type": "ltmle", "nuisance": common::parametric()});
    let cfg = json!({
        "dataset": {"path": data, "schema": long_schema()},
        "generator": {"kind": "outcome_blind", "fit_seed": 1},
        "estimand": {"scale": "difference"},
        "candidates": [{"id": "ltmle_glm", "axes": {"nuisance": "glm", "variance": "ic"}, "estimator": ltmle}],
        "iterations": 100,
        "seed": 3,
        "workers": 2,
        "output_dir": dir.path().join("out"),
    });
    let cfg: StudyConfig = serde_json::from_value(cfg).unwrap();
    let study = Study::prepare(cfg).unwrap();
    let truth = study.truth().unwrap();
    assert_eq!(truth.method, TruthMethod::MonteCarloGformula);
    assert!(truth.mc_se > 0.0 && truth.mc_se < 0.01);
    let res = study.run().unwrap();
    let m = &res.metrics.estimators[0];
    assert!(m.failures <= 5, "{} failures", m.failures);
    assert!(m.bias.abs() < 0.05, "bias {}", m.bias);
    assert!(m.ci_coverage > 0.8);
    assert_eq!(res.selection.winner, "ltmle_glm");
    res.write(&dir.path().join("out")).unwrap();
    assert!(std::fs::read_to_string(dir.path().join("out/report.md")).unwrap().contains("unopposed"));
}

#[test]
fn point_study_can_use_ltmle_and_tmle() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("p.csv");
    common::write_point_source(&data, 300, 5);
    let mut v = common::point_config(&data, &dir.path().join("out"), 100, None);
    v["candidates"][1] = json!({"id": "ltmle", "estimator": {"type": "ltmle", "nuisance": common::parametric()}});
    let study = Study::prepare(serde_json::from_value(v).unwrap()).unwrap();
    let res = study.run().unwrap();
    let a: Vec<_> = res.records.iter().filter(|r| r.estimator_id == "ltmle").collect();
    let b: Vec<_> = res.records.iter().filter(|r| r.estimator_id == "tmle_glm_ic").collect();
    // Both target the same ATE on the same datasets.
    let gap = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x.psi_hat.unwrap() - y.psi_hat.unwrap()).abs())
        .fold(0.0, f64::max);
    assert!(gap < 0.05, "max gap {gap}");
}

#[test]
fn config_round_trips() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/trial_study.json")).unwrap();
    let cfg = StudyConfig::from_json(&text).unwrap();
    let again = StudyConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(cfg, again);
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/point_study.json")).unwrap();
    let cfg = StudyConfig::from_json(&text).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg, StudyConfig::from_json(&serde_json::to_string_pretty(&cfg).unwrap()).unwrap());
}

#[test]
fn shipped_configs_prepare() {
    for name in ["point_study.json", "trial_study.json"] {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
        Study::from_path(&path).unwrap();
    }
}

#[test]
fn mechanism_file_is_hashed() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("c.csv");
    common::write_cluster_source(&data, 10, 1);
    let mech = dir.path().join("mech.json");
    std::fs::write(&mech, r#"{"intercept": 1.0, "coefficients": {"age": 0.2}}"#).unwrap();
    let mut v = common::trial_config(&data, &dir.path().join("out"), 100);
    v["generator"] = json!({"kind": "treatment_blind", "mechanism_file": mech});
    let study = Study::prepare(serde_json::from_value(v).unwrap()).unwrap();
    assert_eq!(study.mechanism_sha256.as_deref(), Some(sha256_hex(&std::fs::read(&mech).unwrap()).as_str()));
    let (a, _) = study.generate(1).unwrap();
    let (b, _) = study.generate(1).unwrap();
    assert_eq!(a.to_csv_string(), b.to_csv_string());
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("p.csv");
    common::write_point_source(&data, 100, 1);
    let base = common::point_config(&data, dir.path(), 100, None);
    let check = |mutate: &dyn Fn(&mut serde_json::Value)| {
        let mut v = base.clone();
        mutate(&mut v);
        let cfg: StudyConfig = serde_json::from_value(v).unwrap();
        let e = Study::prepare(cfg).unwrap_err();
        assert!(e.is_validation(), "{e}");
    };
    check(&|v| v["iterations"] = json!(99));
    check(&|v| v["candidates"][1]["id"] = json!("tmle_glm_ic"));
    check(&|v| v["truth_replicates"] = json!(1000));
    check(&|v| v["workers"] = json!(0));
    check(&|v| v["dataset"]["path"] = json!(dir.path().join("missing.csv")));
    check(&|v| v["candidates"][0]["estimator"]["variance"] = json!({"method": "cross_validated_ic"}));
    let mut v = base.clone();
    v["dataset"]["schema"]["columns"]["w3"] = json!("baseline");
    let e = Study::prepare(serde_json::from_value(v).unwrap()).unwrap_err();
    assert!(matches!(&e, Error::SchemaMismatch { column, .. } if column == "w3"), "{e}");
}
