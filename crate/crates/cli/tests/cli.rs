use std::path::Path;
use std::process::{Command, Output};

use mwreg::dataio::RunConfig;
use mwreg::evalbench::read_report_csv;
use mwreg::model::ModelConfig;

fn mwreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mwreg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = mwreg(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy_config(dir: &Path) -> std::path::PathBuf {
    let cfg = RunConfig {
        model: ModelConfig::toy(),
        ..Default::default()
    };
    let path = dir.join("toy.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

#[test]
fn synth_baseline_eval_gives_one_window() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (seq, poses, report) = (d.join("seq"), d.join("baseline.txt"), d.join("report.csv"));
    ok(&["synth", "--seed", "7", "--scans", "10", "--output", s(&seq)]);
    ok(&["baseline", "--scans", s(&seq), "--output", s(&poses)]);
    ok(&["eval", "--poses", s(&poses), "--truth", s(&seq.join("poses.txt")), "--output", s(&report), "--sequence", "synth7"]);
    let r = read_report_csv(std::fs::File::open(&report).unwrap()).unwrap();
    assert_eq!(r.window_count(), 1);
    assert!(r.mean_trans < 0.05 && r.mean_rot < 0.02, "{r:?}");
}

#[test]
fn inference_window_rules() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = toy_config(d);
    let (seq, ckpt, poses) = (d.join("seq"), d.join("m.ckpt"), d.join("pred.txt"));
    ok(&["synth", "--seed", "3", "--scans", "12", "--points", "1500", "--output", s(&seq)]);
    ok(&["--config", s(&cfg), "train", "--scans", s(&seq), "--output", s(&ckpt), "--steps", "2"]);
    let log = std::fs::read_to_string(d.join("m.loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("step,loss\n"));

    ok(&["infer", "--checkpoint", s(&ckpt), "--scans", s(&seq), "--output", s(&poses), "--window", "5", "--ply", s(&d.join("a.ply"))]);
    assert_eq!(std::fs::read_to_string(&poses).unwrap().lines().count(), 12);
    assert!(std::fs::read_to_string(d.join("a.ply")).unwrap().starts_with("ply\n"));

    let out = mwreg(&["infer", "--checkpoint", s(&ckpt), "--scans", s(&seq), "--output", s(&poses), "--window", "20"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[WindowTooLarge]:"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn preprocessed_cache_feeds_inference() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = toy_config(d);
    let (seq, cache, ckpt) = (d.join("seq"), d.join("cache"), d.join("m.ckpt"));
    ok(&["synth", "--scans", "3", "--points", "1500", "--output", s(&seq)]);
    ok(&["preprocess", "--scans", s(&seq), "--output", s(&cache)]);
    ok(&["--config", s(&cfg), "train", "--scans", s(&cache), "--output", s(&ckpt), "--steps", "1"]);
    let (a, b) = (d.join("a.txt"), d.join("b.txt"));
    ok(&["infer", "--checkpoint", s(&ckpt), "--scans", s(&cache), "--output", s(&a)]);
    ok(&["infer", "--checkpoint", s(&ckpt), "--scans", s(&seq), "--output", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn compare_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (m, b, out) = (d.join("m.csv"), d.join("b.csv"), d.join("cmp.csv"));
    let header = "sequence,window,start,rmse_trans_m,rmse_rot_rad\n";
    std::fs::write(&m, format!("{header}07,10,0,1.0e-2,2.0e-2\n07,mean,,1.0e-2,2.0e-2\n")).unwrap();
    std::fs::write(&b, format!("{header}07,10,0,1.0e-1,1.0e-2\n07,mean,,1.0e-1,1.0e-2\n")).unwrap();
    ok(&["compare", "--model", s(&m), "--baseline", s(&b), "--output", s(&out)]);
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("sequence,window,model_trans_m,model_rot_rad,baseline_trans_m,baseline_rot_rad,trans_winner,rot_winner\n"));
    assert!(text.lines().last().unwrap().ends_with(",model,baseline"), "{text}");
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    assert_eq!(mwreg(&["synth"]).status.code(), Some(2));
    assert_eq!(mwreg(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("poses.txt");
    std::fs::write(&bad, "1 0 0 0 0 1 0 0 0 0 1\n").unwrap();
    let out = mwreg(&["eval", "--poses", s(&bad), "--truth", s(&bad), "--output", s(&dir.path().join("r.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[MalformedLine]: malformed line 1"));
}

#[test]
fn config_dump_parses_back() {
    let out = mwreg(&["config"]);
    assert!(out.status.success());
    let cfg = RunConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg, RunConfig::default());
}
