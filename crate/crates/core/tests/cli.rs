mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::*;
use serde_json::Value;

fn longhaz(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(bin())
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn quickstart_pipeline() {
    let config = fixture("quickstart").join("config.json");
    let out = tempfile::tempdir().unwrap();
    let o = out.path();

    let h2 = longhaz(&["h2"], &config, o);
    assert_eq!(code(&h2), 4);
    assert!(String::from_utf8_lossy(&h2.stderr).contains("longhaz fit"));

    let expand = longhaz(&["expand"], &config, o);
    assert_eq!(code(&expand), 0);
    let summary = json(o.join("expansion.json"));
    assert!(summary["summary"]["rows"].as_u64().unwrap() > 2000);
    assert!(summary["summary"]["events_per_cause"]["1"].as_u64().unwrap() > 0);
    assert!(o.join("pseudo.csv").exists());

    assert_eq!(code(&longhaz(&["fit"], &config, o)), 0);
    let fit = json(o.join("fit.json"));
    let sigma = &fit["variance"]["sigma"];
    assert_eq!(sigma.as_array().unwrap().len(), 2);
    assert_eq!(sigma[0].as_array().unwrap().len(), 4);
    let rho = fit["correlations"][0]["value"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&rho));
    assert_eq!(fit["dispersion_fixed"][0], Value::Bool(true));
    let blups = std::fs::read_to_string(o.join("blups.csv")).unwrap();
    assert!(blups.starts_with("component,level,trait,blup"));

    assert_eq!(code(&longhaz(&["h2"], &config, o)), 0);
    let h2 = json(o.join("h2.json"));
    for t in h2["traits"].as_array().unwrap() {
        let v = t["h2_hazard"].as_f64().unwrap();
        assert!((0.0..1.0).contains(&v));
    }
    assert!(h2["genetic_correlations"][0]["value"].is_number());

    assert_eq!(code(&longhaz(&["km"], &config, o)), 0);
    assert!(json(o.join("km.json"))[0]["median"].is_number());
    assert_eq!(code(&longhaz(&["cif"], &config, o)), 0);
    assert!(o.join("cif_cause1.csv").exists() && o.join("cif_cause2.csv").exists());
}

#[test]
fn fix_dispersion_is_reported_exactly() {
    let config = fixture("heavy_censoring").join("config.json");
    let out = tempfile::tempdir().unwrap();
    let o = Command::new(bin())
        .args(["fit", "--fix-dispersion", "1.0", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.path().join("fit.json")).unwrap();
    let fit: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(fit["variance"]["phi"][0].as_f64(), Some(1.0));
    assert_eq!(fit["dispersion_fixed"][0], Value::Bool(true));
}

#[test]
fn missing_column_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture("quickstart").join("data.csv");
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        serde_json::json!({
            "data": data,
            "model": {"traits": [{"cause": 1, "time_type": "continuous", "family": "poisson_pieces",
                                  "covariates": ["parity_weight"]}], "random": []}
        })
        .to_string(),
    )
    .unwrap();
    let o = longhaz(&["expand"], &config, dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("column not found"));
}

#[test]
fn non_convergence_still_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let q = fixture("quickstart");
    let mut config = json(q.join("config.json"));
    config["data"] = Value::String(q.join("data.csv").display().to_string());
    config["pedigree"] = Value::String(q.join("pedigree.csv").display().to_string());
    config["fit"] = serde_json::json!({"max_iter": 1});
    let path = dir.path().join("config.json");
    std::fs::write(&path, config.to_string()).unwrap();
    let o = longhaz(&["fit"], &path, dir.path());
    assert_eq!(code(&o), 3);
    let fit = json(dir.path().join("fit.json"));
    assert_eq!(fit["convergence"]["converged"], Value::Bool(false));
    assert!(dir.path().join("blups.csv").exists());
}

#[test]
fn km_median_matches_simulated_truth() {
    // Constant per-period hazard 0.2: S(3) = 0.512, S(4) = 0.4096.
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        serde_json::json!({
            "data": "data.csv",
            "model": {"traits": [{"cause": 1, "time_type": "discrete", "family": "bernoulli"}], "random": []},
            "simulate": {"n_sires": 50, "daughters_per_sire": 20, "truth": {
                "time_type": "discrete", "baseline": [[0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2]],
                "sire_covariance": [[0.0]]}}
        })
        .to_string(),
    )
    .unwrap();
    assert_eq!(code(&longhaz(&["simulate"], &config, dir.path())), 0);
    assert_eq!(code(&longhaz(&["km"], &config, dir.path())), 0);
    let median = json(dir.path().join("km.json"))[0]["median"].as_f64().unwrap();
    assert!((median - 4.0).abs() <= 1.0, "median {median}");
}

#[test]
fn diag_reports_flatter_continuous_likelihood() {
    let config = fixture("heavy_censoring").join("config.json");
    let out = tempfile::tempdir().unwrap();
    let o = longhaz(&["diag"], &config, out.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    let ratio: f64 = stdout.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(ratio > 1.0, "{stdout}");
    let report = json(out.path().join("diag.json"));
    assert!(report["censored_fraction"].as_f64().unwrap() >= 0.6);
}

#[test]
fn simulate_is_reproducible_across_thread_counts() {
    let config = fixture("quickstart").join("config.json");
    let dirs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for (d, threads) in dirs.iter().zip(["1", "3"]) {
        let o = Command::new(bin())
            .args(["simulate", "--threads", threads, "--seed", "5", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(d.path())
            .output()
            .unwrap();
        assert_eq!(code(&o), 0);
    }
    for f in ["data.csv", "pedigree.csv", "truth.json"] {
        assert_eq!(
            std::fs::read(dirs[0].path().join(f)).unwrap(),
            std::fs::read(dirs[1].path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn bad_config_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"modle": {}}"#).unwrap();
    assert_eq!(code(&longhaz(&["fit"], &config, dir.path())), 2);
    let missing = dir.path().join("absent.json");
    assert_eq!(code(&longhaz(&["fit"], &missing, dir.path())), 2);
}
