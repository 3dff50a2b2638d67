//! End-to-end checks of the command-line front end.

use std::path::Path;
use std::process::{Command, Output};

fn nerhdp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nerhdp"))
        .args(args)
        .current_dir(dir)
        .env_remove("NERHDP_THREADS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture(dir: &Path) {
    let mut survey = String::from("area_id,weight,welfare,x1\n");
    let mut census = String::from("area_id,x1\n");
    for a in 0..4 {
        for j in 0..10 {
            let x = (a * 10 + j) as f64 / 20.0;
            // Deterministic wobble keeps the residuals non-degenerate.
            let welfare = (0.4 + 0.6 * x + 0.3 * ((j * 7 + a * 3) % 5) as f64 / 4.0).exp();
            census += &format!("A{a},{x}\n");
            if j < 5 {
                survey += &format!("A{a},2,{welfare},{x}\n");
            }
        }
    }
    census += "A4,0.3\nA4,0.9\n";
    std::fs::write(dir.join("survey.csv"), survey).unwrap();
    std::fs::write(dir.join("census.csv"), census).unwrap();
}

#[test]
fn malformed_number_reports_file_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.csv"), "area_id,weight,welfare,x1\nA,1,2.0,0.5\nA,1,abc,0.3\n").unwrap();
    std::fs::write(dir.path().join("c.csv"), "area_id,x1\nA,0.5\n").unwrap();
    let o = nerhdp(&["fit", "--survey", "bad.csv", "--census", "c.csv"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("bad.csv:3") && e.contains("welfare") && e.contains("abc"), "{e}");
}

#[test]
fn survey_area_missing_from_census_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    std::fs::write(dir.path().join("c.csv"), "area_id,x1\nZZ,0.5\n").unwrap();
    let o = nerhdp(&["fit", "--survey", "survey.csv", "--census", "c.csv"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("absent from census"), "{}", stderr(&o));
}

#[test]
fn stochastic_commands_require_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let o = nerhdp(&["mspe", "--survey", "survey.csv", "--census", "census.csv", "--z", "2"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("'seed' is required"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_names_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "# comment\nbogus = 1\n").unwrap();
    let o = nerhdp(&["--config", "run.cfg", "fit"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("run.cfg:2") && e.contains("unknown key 'bogus'"), "{e}");
    assert_eq!(e.matches("configuration error").count(), 1, "{e}");
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    std::fs::write(
        dir.path().join("run.cfg"),
        "survey = survey.csv\ncensus = census.csv\nz = 1.5\nk = 10\nseed = 3\n",
    )
    .unwrap();
    let o = nerhdp(&["--config", "run.cfg", "predict", "--z", "2.5", "--out-dir", "out"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["z"], "2.5");
    assert_eq!(manifest["config"]["k"], "10");
    assert_eq!(manifest["seed"], 3);
}

#[test]
fn predict_covers_out_of_sample_area_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let args = |out: &'static str| {
        vec!["predict", "--survey", "survey.csv", "--census", "census.csv", "--z", "2.5", "--k", "50", "--seed", "7", "--out-dir", out]
    };
    assert!(nerhdp(&args("a"), dir.path()).status.success());
    assert!(nerhdp(&args("b"), dir.path()).status.success());
    let a = std::fs::read_to_string(dir.path().join("a/ebp.csv")).unwrap();
    assert_eq!(a, std::fs::read_to_string(dir.path().join("b/ebp.csv")).unwrap());
    assert!(a.starts_with("area_id,alpha,estimate\n"), "{a}");
    // Five census areas times three orders.
    assert_eq!(a.lines().count(), 1 + 15);
    assert!(a.contains("A4,0,"));
    let params = std::fs::read_to_string(dir.path().join("a/params.csv")).unwrap();
    assert!(params.starts_with("area_id,beta0,slope_1,sigma_gamma2,sigma_eps2,tau,n_i,B_i,resid_mean\n"));
}

#[test]
fn direct_then_diagnose() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let o = nerhdp(&["direct", "--survey", "survey.csv", "--census", "census.csv", "--z", "2.5", "--out-dir", "d"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = nerhdp(
        &["mspe", "--survey", "survey.csv", "--census", "census.csv", "--z", "2.5", "--k", "20", "--b", "10", "--seed", "1", "--out-dir", "m"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = nerhdp(&["diagnose", "--direct", "d/direct.csv", "--model", "m/ebp.csv", "--out-dir", "g"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("g/diagnostics.json")).unwrap()).unwrap();
    let per_alpha = report.as_array().expect("one entry per alpha");
    assert_eq!(per_alpha.len(), 3);
    assert!(per_alpha.iter().all(|a| a["w"]["w"].as_f64().is_some_and(|w| w >= 0.0)));
    assert!(dir.path().join("g/cv_ecdf.csv").exists());
}
