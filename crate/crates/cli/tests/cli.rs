use std::fs;
use std::path::Path;
use std::process::Command;

use sevstep_cli::{run, ExperimentConfig, EXIT_OK, EXIT_USAGE};

const SMALL_ATTACK: &str = "\
scenario = \"attack-aes\"
fixture.sectors = 4
fixture.known = 4
attack.profile_ops = 50
attack.rows = []
attack.search.tolerance = 0.0
attack.search.node_budget = 100000000
sim.p_noise = 0.0
sim.ooo.p_ooo = 0.0
sim.compile.blocks_traced = 8
";

fn sevstep(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sevstep")).args(args).output().unwrap()
}

fn run_in_process(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = run(std::iter::once("sevstep").chain(args.iter().copied()), &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn bad_arguments_exit_with_usage_code() {
    let out = sevstep(&["--scenario", "dance"]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    let out = sevstep(&["--frobnicate"]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert_eq!(sevstep(&["--help"]).status.code(), Some(EXIT_OK));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "sim.p_noize = 0.1\n").unwrap();
    let out = sevstep(&["--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sim.p_noize"));
}

#[test]
fn printed_config_loads_back() {
    let (code, text) = run_in_process(&["--print-config", "--seed", "9"]);
    assert_eq!(code, EXIT_OK);
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.attack, ExperimentConfig::default().attack);
}

#[test]
fn reference_config_matches_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/reference.toml");
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}

#[test]
fn calibrate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let (code, summary) = run_in_process(&["--scenario", "calibrate", "--seed", "3", "--out", a.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "{summary}");
    let (_, again) = run_in_process(&["--scenario", "calibrate", "--seed", "3", "--out", b.to_str().unwrap()]);
    assert_eq!(summary, again);
    assert_eq!(read_dir_sorted(&a), read_dir_sorted(&b));

    let v: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(v["single"], 4000);
    assert_eq!(v["multi"], 0);
    let csv = fs::read_to_string(a.join("calibration.csv")).unwrap();
    assert!(csv.starts_with("timer,"));
}

#[test]
fn pf_trace_reports_the_fingerprint() {
    let dir = tempfile::tempdir().unwrap();
    let (code, summary) = run_in_process(&["--scenario", "pf-trace", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    let v: serde_json::Value = serde_json::from_str(&summary).unwrap();
    let pages: Vec<&str> = v["pages"].as_array().unwrap().iter().map(|p| p.as_str().unwrap()).collect();
    assert_eq!(pages, ["0x65c", "0x64b", "0x65f", "0x660", "0x65b", "0x660", "0x661"]);
    assert_eq!(v["control_matches"], 0);
}

#[test]
fn small_noise_free_attack_recovers_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("attack.toml");
    fs::write(&cfg, SMALL_ATTACK).unwrap();
    let out1 = dir.path().join("one");
    let out2 = dir.path().join("two");
    let (code, summary) = run_in_process(&["--config", cfg.to_str().unwrap(), "--seed", "3", "--out", out1.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "{summary}");
    let v: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(v["recovered"]["match"], true);
    assert_eq!(v["recovered"]["data_key"], v["fixture_keys"]["data_key"]);
    for f in ["fixture.json", "predictions.csv", "keys.json", "summary.json"] {
        assert!(out1.join(f).exists(), "{f}");
    }

    // Replaying the saved fixture gives the same artifacts.
    let fixture = out1.join("fixture.json");
    let replay = format!("{SMALL_ATTACK}fixture.path = {:?}\n", fixture.to_str().unwrap());
    fs::write(&cfg, replay).unwrap();
    let (code, again) = run_in_process(&["--config", cfg.to_str().unwrap(), "--seed", "3", "--out", out2.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(summary, again);
    assert_eq!(read_dir_sorted(&out1), read_dir_sorted(&out2));
}
