use std::fs;
use std::path::Path;
use std::process::Command;

use tempfile::TempDir;

const MARKOV: &str = r#"{
    "model": {
        "noise": {"kind": "markov2", "p": 0.25},
        "field": {"kind": "sigma_xi", "sigma": [[{"sin": {"base": 1.0, "amp": 0.1}}]], "drift": [{"const": 0.0}]}
    },
    "x0": [0.0],
    "horizon": 1.0,
    "eps": 0.2,
    "paths": 400,
    "schedule": {"eps": [0.4, 0.2]},
    "coefficients": {"probes": [[0.0], [1.0]]}
}"#;

const GAME: &str = r#"{
    "model": {"noise": {"kind": "rademacher", "d": 1}, "field": {"kind": "log_price", "sigma": 0.2, "rate": 0.02}},
    "x0": [0.0],
    "horizon": 1.0,
    "eps": 0.1,
    "schedule": {"eps": [0.2, 0.141, 0.1]},
    "payoff": {"kind": "game_put", "strike": 1.1, "rate": 0.02, "penalty": 0.05},
    "engine": {"kind": "grid", "spacing": [0.2], "scale_with_eps": true, "record_regions": true}
}"#;

fn avgame(dir: &Path, args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_avgame")).args(args).arg("--out").arg(dir).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn write_configs(tmp: &TempDir) -> (String, String) {
    let markov = tmp.path().join("markov.json");
    let game = tmp.path().join("game.json");
    fs::write(&markov, MARKOV).unwrap();
    fs::write(&game, GAME).unwrap();
    (markov.to_string_lossy().into_owned(), game.to_string_lossy().into_owned())
}

#[test]
fn every_subcommand_is_byte_reproducible() {
    let tmp = TempDir::new().unwrap();
    let (markov, game) = write_configs(&tmp);
    let runs: Vec<Vec<&str>> = vec![
        vec!["coeffs", &markov],
        vec!["simulate", &markov, "--seed", "7"],
        vec!["reference", &markov, "--seed", "7"],
        vec!["compare", &markov, "--seed", "7"],
        vec!["value", &game],
        vec!["converge", &game],
        vec!["bounds"],
    ];
    for (i, args) in runs.iter().enumerate() {
        let a = tmp.path().join(format!("a{i}"));
        let b = tmp.path().join(format!("b{i}"));
        avgame(&a, args);
        avgame(&b, args);
        let (fa, fb) = (files(&a), files(&b));
        assert!(fa.iter().any(|(n, _)| n == "manifest.json"), "{args:?}: no manifest");
        assert!(fa.iter().any(|(n, _)| n.ends_with(".csv")), "{args:?}: no csv");
        assert_eq!(fa, fb, "{args:?}: outputs differ between identical runs");
    }
}

#[test]
fn manifest_records_seed_and_config_hash() {
    let tmp = TempDir::new().unwrap();
    let (markov, _) = write_configs(&tmp);
    let dir = tmp.path().join("m");
    avgame(&dir, &["simulate", &markov, "--seed", "42"]);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 42);
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
    let hash = manifest["config_sha256"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    // a whitespace change is a different config file
    let edited = tmp.path().join("edited.json");
    fs::write(&edited, format!("{MARKOV}\n")).unwrap();
    let dir2 = tmp.path().join("m2");
    avgame(&dir2, &["simulate", edited.to_str().unwrap(), "--seed", "42"]);
    let manifest2: serde_json::Value = serde_json::from_slice(&fs::read(dir2.join("manifest.json")).unwrap()).unwrap();
    assert_ne!(manifest2["config_sha256"].as_str().unwrap(), hash);
}

#[test]
fn seed_changes_ensembles_and_threads_do_not() {
    let tmp = TempDir::new().unwrap();
    let (markov, _) = write_configs(&tmp);
    let run = |name: &str, extra: &[&str]| {
        let dir = tmp.path().join(name);
        let mut args = vec!["reference", markov.as_str()];
        args.extend_from_slice(extra);
        avgame(&dir, &args);
        fs::read(dir.join("reference.csv")).unwrap()
    };
    let one = run("t1", &["--seed", "3", "--threads", "1"]);
    let two = run("t2", &["--seed", "3", "--threads", "2"]);
    let other = run("s4", &["--seed", "4", "--threads", "1"]);
    assert_eq!(one, two);
    assert_ne!(one, other);
}

#[test]
fn invalid_config_fails_cleanly() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, MARKOV.replace("\"horizon\": 1.0", "\"horizon\": -1.0")).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_avgame"))
        .args(["simulate", bad.to_str().unwrap(), "--out"])
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("horizon"));
}
