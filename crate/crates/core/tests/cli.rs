use std::path::Path;
use std::process::{Command, Output};

use specmask::diagnostics::PHASE_HIST_BINS;
use specmask::Tensor;

fn specmask(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specmask"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("SPECMASK_SEED")
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn bench_writes_one_row_per_episode() {
    let dir = tempfile::tempdir().unwrap();
    let out = specmask(
        &[
            "bench",
            "--episodes",
            "30",
            "--variant",
            "apm-m",
            "--acpa",
            "--seed",
            "7",
        ],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = json(&dir.path().join("report.json"));
    assert_eq!(report["rows"].as_array().unwrap().len(), 30);
    let csv = std::fs::read_to_string(dir.path().join("rows.csv")).unwrap();
    assert_eq!(csv.lines().count(), 31);
    let manifest = json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["command"], "bench");
    assert_eq!(manifest["config"]["seed"], 7);
    assert_eq!(manifest["config"]["adapt"]["use_acpa"], true);
    assert_eq!(manifest["config"]["adapt"]["apm_variant"], "apm-m");
    assert!(dir.path().join("gate_response_amp.smt").exists());
    let gates = Tensor::read(dir.path().join("gate_response_amp.smt")).unwrap();
    assert_eq!(gates.shape(), &[16, 16]);
}

#[test]
fn zero_learning_rate_rows_are_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let out = specmask(&["bench", "--lr", "0", "--episodes", "3"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let report = json(&dir.path().join("report.json"));
    for row in report["rows"].as_array().unwrap() {
        assert_eq!(row["adapted_miou"], row["baseline_miou"]);
        assert_eq!(row["delta_miou"].as_f64(), Some(0.0));
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = specmask(
        &["bench", "--config", missing.to_str().unwrap()],
        &dir.path().join("a"),
    );
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"episods": 3}"#).unwrap();
    assert_eq!(
        specmask(
            &["bench", "--config", bad.to_str().unwrap()],
            &dir.path().join("b")
        )
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        specmask(&["bench", "--episodes", "0"], &dir.path().join("c"))
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        specmask(&["bench", "--iterations", "0"], &dir.path().join("d"))
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        specmask(&["bench", "--variant", "apm-x"], &dir.path().join("e"))
            .status
            .code(),
        Some(2)
    );

    let bad_env = Command::new(env!("CARGO_BIN_EXE_specmask"))
        .args(["bench", "--episodes", "1", "--out"])
        .arg(dir.path().join("g"))
        .env("SPECMASK_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(bad_env.status.code(), Some(2));

    let junk = dir.path().join("junk.smt");
    std::fs::write(&junk, b"not a tensor").unwrap();
    assert_eq!(
        specmask(&["diag", junk.to_str().unwrap()], &dir.path().join("f"))
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"seed": 5, "episodes": 2, "adapt": {"iterations": 3}}"#,
    )
    .unwrap();
    let out = specmask(
        &[
            "bench",
            "--config",
            cfg.to_str().unwrap(),
            "--episodes",
            "1",
        ],
        &dir.path().join("run"),
    );
    assert_eq!(out.status.code(), Some(0));
    let manifest = json(&dir.path().join("run/manifest.json"));
    assert_eq!(manifest["config"]["seed"], 5);
    assert_eq!(manifest["config"]["episodes"], 1);
    assert_eq!(manifest["config"]["adapt"]["iterations"], 3);

    let env_run = Command::new(env!("CARGO_BIN_EXE_specmask"))
        .args(["bench", "--episodes", "1", "--iterations", "2", "--out"])
        .arg(dir.path().join("env"))
        .env("SPECMASK_SEED", "11")
        .output()
        .unwrap();
    assert_eq!(env_run.status.code(), Some(0));
    assert_eq!(
        json(&dir.path().join("env/manifest.json"))["config"]["seed"],
        11
    );
}

#[test]
fn rerun_from_manifest_reproduces_report() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let out = specmask(
        &[
            "bench",
            "--episodes",
            "3",
            "--iterations",
            "5",
            "--seed",
            "4",
        ],
        &first,
    );
    assert_eq!(out.status.code(), Some(0));
    let manifest = first.join("manifest.json");
    let second = dir.path().join("second");
    let out = specmask(&["bench", "--config", manifest.to_str().unwrap()], &second);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        std::fs::read(first.join("report.json")).unwrap(),
        std::fs::read(second.join("report.json")).unwrap()
    );
    assert_eq!(
        std::fs::read(first.join("rows.csv")).unwrap(),
        std::fs::read(second.join("rows.csv")).unwrap()
    );
}

#[test]
fn sweep_table_has_nine_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = specmask(&["sweep", "--episodes", "4"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let report = json(&dir.path().join("report.json"));
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 9);
    let full = rows
        .iter()
        .find(|r| r["amp_band"] == "full" && r["phase_band"] == "full")
        .unwrap();
    assert_eq!(full["mean_miou"], report["baseline_miou"]);
    let csv = std::fs::read_to_string(dir.path().join("rows.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("amp_band,phase_band,mean_miou"));
    assert_eq!(csv.lines().count(), 10);
}

#[test]
fn diag_self_and_negated_maps() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = Vec::new();
    let mut state = 12345u64;
    for _ in 0..4 * 8 * 8 {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        data.push((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5);
    }
    let f = Tensor::new(vec![4, 8, 8], data).unwrap();
    let a = dir.path().join("a.smt");
    let neg = dir.path().join("neg.smt");
    f.write(&a).unwrap();
    f.scale(-1.0).write(&neg).unwrap();

    let out = specmask(
        &["diag", a.to_str().unwrap(), a.to_str().unwrap()],
        &dir.path().join("self"),
    );
    assert_eq!(out.status.code(), Some(0));
    let report = json(&dir.path().join("self/report.json"));
    assert!((report["cross_cka"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!((report["reports"][0]["cka"].as_f64().unwrap() - 1.0).abs() < 1e-9);

    let out = specmask(
        &["diag", a.to_str().unwrap(), neg.to_str().unwrap()],
        &dir.path().join("neg"),
    );
    assert_eq!(out.status.code(), Some(0));
    let report = json(&dir.path().join("neg/report.json"));
    let mass: Vec<f64> = report["cross_phase_hist"]["mass"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(mass.len(), PHASE_HIST_BINS);
    let total: f64 = mass.iter().sum();
    assert!(mass[PHASE_HIST_BINS - 1] / total >= 0.999);
    assert!(dir.path().join("neg/cross_phase_hist.csv").exists());
    assert!(dir.path().join("neg/corr_cdf_1.csv").exists());

    let single = specmask(&["diag", a.to_str().unwrap()], &dir.path().join("one"));
    assert_eq!(single.status.code(), Some(0));
    assert!(json(&dir.path().join("one/report.json"))["cross_cka"].is_null());
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = specmask(&["gradcheck"], &dir.path().join("ok"));
    assert_eq!(ok.status.code(), Some(0));
    let text = String::from_utf8(ok.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.ends_with(" ok")).count(), 5);

    let bad = specmask(
        &["gradcheck", "--perturb-backward"],
        &dir.path().join("bad"),
    );
    assert_eq!(bad.status.code(), Some(1));

    let two = specmask(
        &["gradcheck", "--seed", "1", "--seed", "2"],
        &dir.path().join("two"),
    );
    assert_eq!(two.status.code(), Some(0));
    let text = String::from_utf8(two.stdout).unwrap();
    let errs: Vec<&str> = text
        .lines()
        .map(|l| l.split("max_rel_err=").nth(1).unwrap())
        .collect();
    assert_eq!(errs.len(), 10);
    assert!(text.lines().all(|l| l.ends_with(" ok")));
    assert_ne!(errs[..5], errs[5..]);
}
