use std::path::Path;
use std::process::{Command, Output};

fn mmvq(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmvq"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = mmvq(&["grad-check"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(
        out.contains("mrl_total_loss") && out.contains("downstream_mtl_loss"),
        "{out}"
    );
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mmvq(&["--bogus", "synth-data"], dir.path()).status.code(), Some(1));
    assert_eq!(
        mmvq(&["train-downstream", "--mode", "both"], dir.path()).status.code(),
        Some(1)
    );
    assert_eq!(mmvq(&[], dir.path()).status.code(), Some(1));
    let help = mmvq(&["--help"], dir.path());
    assert_eq!(help.status.code(), Some(0));
    assert!(stdout(&help).contains("error-analysis"));
}

#[test]
fn missing_inputs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = mmvq(&["--out", "runs", "train-mrl"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("extract-features"));
    let o = mmvq(&["--out", "runs", "evaluate", "--predictions", "nope.csv"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = mmvq(&["--config", "missing.json", "synth-data"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

const HEADER: &str = "subject_id,session_id,true_class,pred_class,p_hc,p_psz,p_msz,true_bprs,pred_bprs\n";

#[test]
fn evaluate_and_error_analysis_on_external_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = HEADER.to_string();
    for (i, c) in ["HC", "P-SZ", "M-SZ", "HC", "P-SZ", "M-SZ"].iter().enumerate() {
        let p = match *c {
            "HC" => "1,0,0",
            "P-SZ" => "0,1,0",
            _ => "0,0,1",
        };
        let t = 20 + 10 * i;
        csv.push_str(&format!("S{i},S{i}_01,{c},{c},{p},{t},{t}\n"));
    }
    std::fs::write(dir.path().join("perfect.csv"), &csv).unwrap();
    let o = mmvq(
        &["--out", "runs", "evaluate", "--predictions", "perfect.csv"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("100.00"), "{out}");
    assert!(out.contains("0.00"), "{out}");

    let mut csv = HEADER.to_string();
    for i in 0..4 {
        csv.push_str(&format!("S{i},S{i}_01,HC,HC,1,0,0,30,31\n"));
    }
    csv.push_str("X,X_01,M-SZ,M-SZ,0,0,1,62,47\n");
    std::fs::write(dir.path().join("lso.csv"), &csv).unwrap();
    let o = mmvq(
        &[
            "--out",
            "runs",
            "error-analysis",
            "--predictions",
            "lso.csv",
            "--exclude-subject",
            "X",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("excluding X: MAE 3.80 → 1.00 (73.68% drop)"), "{out}");
    let o = mmvq(
        &[
            "--out",
            "runs",
            "--force",
            "error-analysis",
            "--predictions",
            "lso.csv",
            "--exclude-subject",
            "Q",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
}
