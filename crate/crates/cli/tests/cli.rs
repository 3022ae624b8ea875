use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn compseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_compseg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawning compseg")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = compseg(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Temp dir with `small.json` and a synthesized `data/`.
fn workspace() -> TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ok(tmp.path(), &["config", "--small"]);
    std::fs::write(tmp.path().join("small.json"), cfg).unwrap();
    ok(tmp.path(), &["--config", "small.json", "synth"]);
    tmp
}

fn fitted() -> TempDir {
    let tmp = workspace();
    for stage in ["init", "refine"] {
        ok(tmp.path(), &["--config", "small.json", stage]);
    }
    tmp
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = fitted();
    let d = tmp.path();
    ok(d, &["--config", "small.json", "train"]);
    for f in ["config.json", "init.model.json", "refined.state.json", "em.csv", "trained.model.json", "loss.csv"] {
        assert!(d.join("run").join(f).exists(), "missing run/{f}");
    }
    ok(d, &["--config", "small.json", "segment", "--model", "run/trained.model.json"]);
    let table = ok(d, &["--config", "small.json", "eval", "--csv", "table.csv"]);
    let last = table.lines().last().unwrap();
    assert!(last.starts_with("all") && last.contains("20"), "{table}");
    assert!(d.join("table.csv").exists());
    let sidecars = std::fs::read_dir(d.join("run/pred"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "json"))
        .count();
    assert_eq!(sidecars, 20);
}

#[test]
fn ablations_need_a_flag_and_record_the_prior() {
    let tmp = fitted();
    let d = tmp.path();
    let out = compseg(d, &["--config", "small.json", "ablate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--no-prior or --gt-prior"));

    ok(d, &["--config", "small.json", "ablate", "--no-prior", "--omega", "0.3", "--out", "np"]);
    ok(d, &["--config", "small.json", "ablate", "--gt-prior", "--out", "gt"]);
    let one = |dir: &str| {
        let entry = std::fs::read_dir(d.join(dir))
            .unwrap()
            .map(|e| e.unwrap().path())
            .find(|p| p.extension().is_some_and(|x| x == "json"))
            .unwrap();
        serde_json::from_str::<serde_json::Value>(&std::fs::read_to_string(entry).unwrap()).unwrap()
    };
    assert_eq!(one("np")["prior"], "no-prior");
    assert_eq!(one("np")["omega"], 0.3);
    assert_eq!(one("gt")["prior"], "gt-prior");

    let bad = compseg(d, &["--config", "small.json", "ablate", "--no-prior", "--omega", "1.0", "--out", "x"]);
    assert!(!bad.status.success());
}

#[test]
fn eval_reports_missing_predictions_with_status_two() {
    let tmp = fitted();
    let d = tmp.path();
    ok(d, &["--config", "small.json", "segment"]);
    let pred = d.join("run/pred");
    let victim = std::fs::read_dir(&pred)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "pgm"))
        .unwrap();
    let id = victim.file_stem().unwrap().to_string_lossy().into_owned();
    std::fs::remove_file(&victim).unwrap();
    let out = compseg(d, &["--config", "small.json", "eval"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&id));
}

#[test]
fn eval_refuses_foreign_predictions_unless_forced() {
    let tmp = fitted();
    let d = tmp.path();
    ok(d, &["--config", "small.json", "segment"]);
    let pred = d.join("run/pred");
    let sidecar = std::fs::read_dir(&pred)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "json"))
        .unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&sidecar).unwrap()).unwrap();
    v["config_hash"] = "0".repeat(64).into();
    std::fs::write(&sidecar, v.to_string()).unwrap();

    let out = compseg(d, &["--config", "small.json", "eval"]);
    assert!(!out.status.success());
    assert_ne!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    ok(d, &["--config", "small.json", "eval", "--force"]);
}

#[test]
fn reruns_with_the_same_seed_are_byte_identical() {
    let run = |seed: &str| {
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path();
        std::fs::write(d.join("small.json"), ok(d, &["config", "--small"])).unwrap();
        for stage in ["synth", "init", "refine", "segment"] {
            ok(d, &["--config", "small.json", "--seed", seed, "--threads", "2", stage]);
        }
        let mut files = Vec::new();
        for sub in ["data/bench", "run", "run/pred"] {
            let mut names: Vec<_> = std::fs::read_dir(d.join(sub))
                .unwrap()
                .map(|e| e.unwrap().path())
                .filter(|p| p.is_file())
                .collect();
            names.sort();
            for p in names {
                files.push((p.strip_prefix(d).unwrap().to_owned(), std::fs::read(&p).unwrap()));
            }
        }
        files
    };
    let a = run("7");
    assert!(!a.is_empty());
    assert!(a == run("7"), "outputs differ between identical runs");
    assert!(a != run("8"));
}

#[test]
fn lattice_mismatch_names_both_sizes() {
    let tmp = workspace();
    let d = tmp.path();
    let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("small.json")).unwrap()).unwrap();
    let (h, w) = (cfg["lattice"]["height"].as_u64().unwrap(), cfg["lattice"]["width"].as_u64().unwrap());
    cfg["lattice"]["height"] = (h + 2).into();
    cfg["world"]["lattice"]["height"] = (h + 2).into();
    std::fs::write(d.join("other.json"), cfg.to_string()).unwrap();
    let out = compseg(d, &["--config", "other.json", "init"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&format!("{h}x{w}")) && err.contains(&format!("{}x{w}", h + 2)), "{err}");
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let text = ok(d, &["config", "--small"]);
    std::fs::write(d.join("c.json"), &text).unwrap();
    assert_eq!(ok(d, &["--config", "c.json", "config"]), text);

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["no_such_key"] = 1.into();
    std::fs::write(d.join("bad.json"), v.to_string()).unwrap();
    assert!(!compseg(d, &["--config", "bad.json", "config"]).status.success());
}
