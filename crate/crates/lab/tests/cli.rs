use std::path::Path;
use std::process::{Command, Output};

fn lab(args: &[&str], config: Option<&Path>, out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_flair-lab"));
    cmd.args(args).arg("--out").arg(out);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path
}

const TINY: &str = "n_per_domain = 100\nq = 8\nmax_steps = 6\nplateau_window = 0\nheldout = 1\n";

#[test]
fn configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let bogus = write_config(dir.path(), "no_such_key = 3\n");
    assert_eq!(lab(&["train"], Some(&bogus), &out).status.code(), Some(1));
    let missing = dir.path().join("absent.toml");
    assert_eq!(lab(&["train"], Some(&missing), &out).status.code(), Some(1));
    let ok = write_config(dir.path(), TINY);
    assert_eq!(lab(&["train", "--heldout", "9"], Some(&ok), &out).status.code(), Some(1));
    assert_eq!(lab(&["train", "--variant", "no_x"], Some(&ok), &out).status.code(), Some(1));
    assert_eq!(lab(&["frobnicate"], Some(&ok), &out).status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    // Two points per group per batch cannot support three prototypes.
    let cfg = write_config(dir.path(), "n_per_domain = 100\nq = 1\nK = 3\nmax_steps = 6\nheldout = 1\n");
    let out = lab(&["train", "--seed", "2"], Some(&cfg), &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("failed"));
    // The failed cell is still reported.
    assert!(dir.path().join("out/variant_full/report.json").exists());
}

#[test]
fn train_then_eval_round_trips_through_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let train = lab(&["train", "--seed", "5", "--variant", "no_Rfair"], Some(&cfg), &out);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    assert!(out.join("variant_no_Rfair/model_h1_s5.ckpt").exists());
    let eval = lab(&["eval", "--seed", "5", "--variant", "no_Rfair"], Some(&cfg), &out);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let evaluated: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("variant_no_Rfair/eval_h1_s5.json")).unwrap()).unwrap();
    let trained: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("variant_no_Rfair/report.json")).unwrap()).unwrap();
    assert_eq!(evaluated, trained["cells"][0]["report"]);
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("eval_h1_s5.json"));
}

#[test]
fn gen_baseline_and_sweep_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY}sweep_param = \"K\"\nsweep_values = [2, 3]\n"));
    let out = dir.path().join("out");
    assert!(lab(&["gen", "--seed", "4"], Some(&cfg), &out).status.success());
    let csv = std::fs::read_to_string(out.join("benchmark_s4.csv")).unwrap();
    assert!(csv.lines().count() > 6 * 100);

    assert!(lab(&["baseline", "--seed", "4"], Some(&cfg), &out).status.success());
    assert!(out.join("baseline_erm/report.json").exists());

    let swept = lab(&["sweep", "--seed", "4"], Some(&cfg), &out);
    assert!(swept.status.success(), "{}", String::from_utf8_lossy(&swept.stderr));
    let trade = std::fs::read_to_string(out.join("tradeoff.csv")).unwrap();
    assert_eq!(trade.lines().count(), 1 + 3);
    assert!(trade.contains("\nK,2,") && trade.contains("\nK,3,") && trade.contains("\nbaseline,erm,"));
}

#[test]
fn missing_output_directory_is_a_configuration_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_flair-lab")).arg("train").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}
