use std::fs;
use std::path::Path;
use std::process::Command;

use cfam_cli::artifact::{ModelArtifact, SCHEMA_VERSION};
use cfam_cli::commands::{cmd_fit, cmd_predict, DECISIONS_FILE, MODEL_FILE};
use cfam_cli::ingest::{export, ingest, ingest_covariates};
use cfam_cli::{CliError, RunConfig};
use cfam_core::{generate, Augmentation, InteractionKind, Rule, Scenario};
use tempfile::TempDir;

fn write(dir: &Path, name: &str, body: &str) {
    fs::write(dir.join(name), body).unwrap();
}

fn toy_dir() -> TempDir {
    let d = TempDir::new().unwrap();
    write(d.path(), "outcome.csv", "id,y,a\ns1,1.5,B\ns2,0.5,A\ns3,2.0,B\n");
    write(d.path(), "scalars.csv", "id,age,score\ns3,30,0.1\ns1,40,0.2\ns2,50,0.3\n");
    write(d.path(), "functional_eeg.csv", "grid,0,0.5,1\ns1,1,2,3\ns2,0,0,1\ns3,2,2,2\n");
    d
}

/// Writes rows `rows` of a simulated trial in the directory layout.
fn sim_dir(dir: &Path, n: usize, seed: u64, rows: &[usize]) {
    let mut s = Scenario::standard(n, 1.0, 0.0, InteractionKind::Nonlinear);
    s.p = 3;
    s.q = 3;
    s.seed = seed;
    let sim = generate::<f64>(&s).unwrap();
    let d = &sim.data;
    let raw = d.raw_outcomes();
    fs::create_dir_all(dir).unwrap();
    let mut out = String::from("id,y,a\n");
    let mut sc = String::from("id,z1,z2,z3\n");
    for &i in rows {
        out += &format!("p{i},{},{}\n", raw[i], d.arms[i]);
        let z: Vec<String> = d.covariates.scalars.row(i).iter().map(|v| format!("{v:?}")).collect();
        sc += &format!("p{i},{}\n", z.join(","));
    }
    write(dir, "outcome.csv", &out);
    write(dir, "scalars.csv", &sc);
    for (j, f) in d.covariates.functional.iter().enumerate() {
        let g: Vec<String> = f.grid.points().iter().map(|v| format!("{v:?}")).collect();
        let mut body = format!("grid,{}\n", g.join(","));
        for &i in rows {
            let x: Vec<String> = f.values.row(i).iter().map(|v| format!("{v:?}")).collect();
            body += &format!("p{i},{}\n", x.join(","));
        }
        write(dir, &format!("functional_x{}.csv", j + 1), &body);
    }
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cfam"));
    c.env("RUST_LOG", "warn");
    c
}

fn read_column(path: &Path, col: usize) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap()[col].to_string()).collect()
}

#[test]
fn config_round_trips_and_defaults() {
    let d = RunConfig::default();
    assert_eq!(d.folds, 10);
    assert_eq!(d.basis_dim, None);
    assert_eq!(RunConfig::from_toml(&d.to_toml()).unwrap(), d);
    let custom = RunConfig {
        lambda: Some(0.125),
        folds: 5,
        basis_dim: Some(7),
        inner_tol: 1e-7,
        augment: Augmentation::Fam,
        linear_mode: true,
        preset: Some("table1".into()),
        reps: Some(3),
        threads: Some(2),
        cv_patience: 0,
        ..RunConfig::default()
    };
    assert_eq!(RunConfig::from_toml(&custom.to_toml()).unwrap(), custom);
    let partial = RunConfig::from_toml("folds = 4\naugment = \"lasso\"\n").unwrap();
    assert_eq!(partial.folds, 4);
    assert_eq!(partial.augment, Augmentation::Lasso);
    assert_eq!(partial.n_mc, 1000);
    assert!(matches!(RunConfig::from_toml("fold = 3"), Err(CliError::Config(_))));
    assert!(matches!(RunConfig::from_toml("folds = 1"), Err(CliError::Config(_))));
}

#[test]
fn ingests_toy_directory() {
    let d = toy_dir();
    let ing = ingest(d.path()).unwrap();
    assert_eq!(ing.data.n(), 3);
    assert_eq!(ing.arm_labels, vec!["A", "B"]);
    assert_eq!(ing.data.arms, vec![2, 1, 2]);
    assert_eq!(ing.table.ids, vec!["s1", "s2", "s3"]);
    assert_eq!(ing.data.arm_means, vec![0.5, 1.75]);
    assert!((ing.data.y[0] + 0.25).abs() < 1e-15);
    assert_eq!(ing.data.pi, vec![1.0 / 3.0, 2.0 / 3.0]);
    // Rows are matched by id, not position.
    assert_eq!(ing.table.covariates.scalars.row(0).to_vec(), vec![40.0, 0.2]);
    assert_eq!(ing.table.functional_names, vec!["eeg"]);
    assert_eq!(ing.table.covariates.functional[0].values.row(2).to_vec(), vec![2.0, 2.0, 2.0]);
}

#[test]
fn numeric_arm_labels_sort_numerically() {
    let d = toy_dir();
    write(d.path(), "outcome.csv", "id,y,a\ns1,1,10\ns2,2,9\ns3,3,10\n");
    let ing = ingest(d.path()).unwrap();
    assert_eq!(ing.arm_labels, vec!["9", "10"]);
}

#[test]
fn nan_is_reported_with_file_row_and_column() {
    let d = toy_dir();
    write(d.path(), "scalars.csv", "id,age,score\ns3,30,0.1\ns1,NaN,0.2\ns2,50,0.3\n");
    let err = ingest(d.path()).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    let msg = err.to_string();
    assert!(msg.contains("scalars.csv row 3 column age"), "{msg}");
}

#[test]
fn ingestion_report_lists_every_problem() {
    let d = toy_dir();
    write(d.path(), "outcome.csv", "id,y,a\ns1,1.5,B\ns2,oops,A\ns3,2.0,B\ns4,1,A\n");
    write(d.path(), "functional_eeg.csv", "grid,0,0.5,0.5\ns1,1,2,3\ns2,0,0,1\ns3,2,2,inf\n");
    let msg = ingest(d.path()).unwrap_err().to_string();
    for part in ["outcome.csv row 3 column y", "scalars.csv: missing id \"s4\"", "functional_eeg.csv row 1", "functional_eeg.csv row 4 column 4"] {
        assert!(msg.contains(part), "{part} not in {msg}");
    }
}

#[test]
fn grids_outside_unit_interval_are_rejected() {
    let d = toy_dir();
    write(d.path(), "functional_eeg.csv", "grid,0,5,10\ns1,1,2,3\ns2,0,0,1\ns3,2,2,2\n");
    let msg = ingest(d.path()).unwrap_err().to_string();
    assert!(msg.contains("[0, 1]"), "{msg}");
}

#[test]
fn export_then_ingest_round_trips() {
    let src = TempDir::new().unwrap();
    sim_dir(src.path(), 40, 3, &(0..40).collect::<Vec<_>>());
    let a = ingest(src.path()).unwrap();
    let dst = TempDir::new().unwrap();
    export(&a, dst.path()).unwrap();
    let b = ingest(dst.path()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn artifact_reproduces_predictions_exactly() {
    let data = TempDir::new().unwrap();
    sim_dir(data.path(), 120, 4, &(0..120).collect::<Vec<_>>());
    let out = TempDir::new().unwrap();
    let cfg = RunConfig {
        data_dir: Some(data.path().into()),
        out_dir: out.path().into(),
        lambda: Some(0.05),
        ..RunConfig::default()
    };
    let art = cmd_fit(&cfg).unwrap();
    let loaded = ModelArtifact::load(&out.path().join(MODEL_FILE)).unwrap();
    assert_eq!(loaded, art);
    let cov = ingest_covariates(data.path()).unwrap().covariates;
    let a = art.fit.predict_scores(&cov).unwrap();
    let b = loaded.fit.predict_scores(&cov).unwrap();
    assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn future_schema_fails_loudly() {
    let text = format!("{{\"schema_version\": {}, \"fit\": null}}", SCHEMA_VERSION + 1);
    let err = ModelArtifact::from_json(&text).unwrap_err();
    assert!(err.to_string().contains("newer"), "{err}");
    assert!(ModelArtifact::from_json("{\"hello\": 1}").is_err());
}

#[test]
fn predict_on_training_rows_matches_fit_decisions() {
    let data = TempDir::new().unwrap();
    sim_dir(data.path(), 150, 5, &(0..150).collect::<Vec<_>>());
    let fit_out = TempDir::new().unwrap();
    let pred_out = TempDir::new().unwrap();
    let st = bin()
        .args(["fit", "--folds", "5", "--seed", "3", "--threads", "1", "--augment", "lasso"])
        .arg("--data")
        .arg(data.path())
        .arg("--out")
        .arg(fit_out.path())
        .status()
        .unwrap();
    assert!(st.success());
    for f in ["model.json", "components.csv", "gamma.csv", "cv.csv", "decisions.csv", "scores.csv"] {
        assert!(fit_out.path().join(f).exists(), "{f}");
    }
    let st = bin()
        .arg("predict")
        .arg("--model")
        .arg(fit_out.path().join(MODEL_FILE))
        .arg("--data")
        .arg(data.path())
        .arg("--out")
        .arg(pred_out.path())
        .status()
        .unwrap();
    assert!(st.success());
    assert_eq!(
        fs::read_to_string(fit_out.path().join(DECISIONS_FILE)).unwrap(),
        fs::read_to_string(pred_out.path().join(DECISIONS_FILE)).unwrap()
    );
}

#[test]
fn held_out_predictions_match_library_rule() {
    let train = TempDir::new().unwrap();
    let test = TempDir::new().unwrap();
    sim_dir(train.path(), 200, 6, &(0..150).collect::<Vec<_>>());
    sim_dir(test.path(), 200, 6, &(150..200).collect::<Vec<_>>());
    let out = TempDir::new().unwrap();
    let fit_cfg = RunConfig {
        data_dir: Some(train.path().into()),
        out_dir: out.path().into(),
        lambda: Some(0.03),
        ..RunConfig::default()
    };
    cmd_fit(&fit_cfg).unwrap();
    let pred = TempDir::new().unwrap();
    let cfg = RunConfig {
        data_dir: Some(test.path().into()),
        out_dir: pred.path().into(),
        model: Some(out.path().join(MODEL_FILE)),
        ..RunConfig::default()
    };
    let decisions = cmd_predict(&cfg).unwrap();
    let art = ModelArtifact::load(&out.path().join(MODEL_FILE)).unwrap();
    let cov = ingest_covariates(test.path()).unwrap().covariates;
    let lib = Rule::new(&art.fit).unwrap().decide_all(&cov).unwrap();
    assert_eq!(decisions, lib);
    let labels: Vec<String> = lib.iter().map(|&d| art.arm_labels[d - 1].clone()).collect();
    assert_eq!(read_column(&pred.path().join(DECISIONS_FILE), 1), labels);
    assert_eq!(read_column(&pred.path().join("scores.csv"), 0).len(), 2 * 50);
}

#[test]
fn predict_rejects_mismatched_covariates() {
    let data = TempDir::new().unwrap();
    sim_dir(data.path(), 80, 7, &(0..80).collect::<Vec<_>>());
    let out = TempDir::new().unwrap();
    let cfg = RunConfig {
        data_dir: Some(data.path().into()),
        out_dir: out.path().into(),
        lambda: Some(0.1),
        ..RunConfig::default()
    };
    cmd_fit(&cfg).unwrap();
    fs::remove_file(data.path().join("functional_x3.csv")).unwrap();
    let err = cmd_predict(&RunConfig { model: Some(out.path().join(MODEL_FILE)), ..cfg }).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

fn stderr_reason(out: &std::process::Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let last = text.lines().last().unwrap_or_default();
    serde_json::from_str(last).unwrap_or_else(|e| panic!("{e}: {text}"))
}

#[test]
fn exit_codes_and_reasons() {
    let d = toy_dir();
    let out = TempDir::new().unwrap();

    let cfg = out.path().join("bad.toml");
    fs::write(&cfg, "folds = 1\n").unwrap();
    let o = bin().arg("fit").arg("--config").arg(&cfg).arg("--data").arg(d.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_reason(&o)["error"], "config");

    write(d.path(), "scalars.csv", "id,age,score\ns3,30,0.1\ns1,NaN,0.2\ns2,50,0.3\n");
    let o = bin().arg("fit").arg("--data").arg(d.path()).arg("--out").arg(out.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(3));
    let reason = stderr_reason(&o);
    assert_eq!(reason["exit"], 3);
    assert!(reason["message"].as_str().unwrap().contains("scalars.csv row 3 column age"));

    let o = bin().args(["simulate", "--preset", "nope"]).arg("--out").arg(out.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = bin().args(["fit", "--augment", "maybe"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn cv_command_writes_curve() {
    let data = TempDir::new().unwrap();
    sim_dir(data.path(), 100, 8, &(0..100).collect::<Vec<_>>());
    let out = TempDir::new().unwrap();
    let o = bin()
        .args(["cv", "--folds", "4", "--linear-mode"])
        .arg("--data")
        .arg(data.path())
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let chosen = read_column(&out.path().join("cv.csv"), 5);
    assert_eq!(chosen.iter().filter(|c| *c == "true").count(), 1);
}

#[test]
fn commands_are_reproducible() {
    let data = TempDir::new().unwrap();
    sim_dir(data.path(), 100, 9, &(0..100).collect::<Vec<_>>());
    let run = || {
        let out = TempDir::new().unwrap();
        let st = bin()
            .args(["fit", "--folds", "4", "--seed", "11"])
            .arg("--data")
            .arg(data.path())
            .arg("--out")
            .arg(out.path())
            .status()
            .unwrap();
        assert!(st.success());
        fs::read_to_string(out.path().join("scores.csv")).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn simulate_table1_smoke() {
    let out = TempDir::new().unwrap();
    let o = bin()
        .args(["simulate", "--preset", "table1", "--reps", "2", "--threads", "1"])
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut r = csv::Reader::from_path(out.path().join("results.csv")).unwrap();
    assert_eq!(
        r.headers().unwrap().iter().collect::<Vec<_>>(),
        ["scenario_id", "method", "rep", "n", "delta", "xi", "metric", "value"]
    );
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    let rse = rows.iter().filter(|x| &x[6] == "rse_beta1").count();
    assert_eq!(rse, 6 * 2);
    assert!(out.path().join("summary.csv").exists());
}
