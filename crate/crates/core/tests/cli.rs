use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use spikestag::checkpoint::load_model;

const TINY: &[&str] = &[
    "--data", "synthetic", "--steps", "300", "--nodes", "5", "--input-len", "12", "--horizon", "3", "--emb-dim", "4",
    "--d1", "8", "--d2", "8", "--h-dim", "8", "--d-k", "8", "--ts", "2", "--epochs", "2", "--batch-size", "16",
];

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spikestag"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn train(dir: &Path, extra: &[&str]) -> String {
    let out = dir.to_str().unwrap();
    let mut args = vec!["train", "--out", out];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn train_eval_predict_energy() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let summary = train(&run, &["--seed", "1"]);
    assert!(summary.contains("test_r2:") && summary.contains("test_rse:"));
    for f in ["model.stag", "metrics.csv", "config.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,loss,r2,rse");
    assert_eq!(lines.len(), 3);

    let ckpt = run.join("model.stag");
    let ck = ckpt.to_str().unwrap();
    let data = ["--data", "synthetic", "--steps", "300"];
    let eval = |split: &str| {
        let mut a = vec!["eval", "--checkpoint", ck, "--split", split];
        a.extend_from_slice(&data);
        ok(&a)
    };
    let e1 = eval("test");
    assert!(e1.starts_with("r2: ") && e1.contains("\nrse: "));
    assert_eq!(e1, eval("test"));

    let fc = tmp.path().join("fc.csv");
    let mut a = vec!["predict", "--checkpoint", ck, "--out", fc.to_str().unwrap()];
    a.extend_from_slice(&data);
    ok(&a);
    let text = fs::read_to_string(&fc).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 1 + 3);
    assert_eq!(rows[0], "timestamp,node0,node1,node2,node3,node4");
    // Hourly data of 300 steps ends at step 299; the forecast starts one hour later.
    assert!(rows[1].starts_with("2024-01-13T12:00:00Z,"));

    let en = tmp.path().join("energy");
    let mut a = vec!["energy", "--checkpoint", ck, "--out", en.to_str().unwrap(), "--batch", "4"];
    a.extend_from_slice(&data);
    let report = ok(&a);
    assert!(report.contains("Param (M)") && report.contains("reduction_pct:"));
    let csv = fs::read_to_string(en.join("energy.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("layer,mac_ops,ac_ops,spike_rate,energy_mj"));
    let txt = fs::read_to_string(en.join("energy.txt")).unwrap();
    assert!(txt.lines().all(|l| l.contains(": ")));
    assert_eq!(report, ok(&a));
}

#[test]
fn same_seed_same_metrics_log() {
    let tmp = tempfile::tempdir().unwrap();
    train(&tmp.path().join("a"), &["--seed", "4"]);
    train(&tmp.path().join("b"), &["--seed", "4"]);
    let read = |d: &str| fs::read_to_string(tmp.path().join(d).join("metrics.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
}

#[test]
fn w1_checkpoint_has_no_ssa_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    train(tmp.path(), &["--ablation", "W1"]);
    let m = load_model(tmp.path().join("model.stag")).unwrap();
    assert!(m.params.keys().all(|k| !k.starts_with("ssa") && !k.starts_with("gate")));
    assert!(m.params.contains_key("lstm.w_x"));
}

#[test]
fn invalid_key_exits_nonzero_naming_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.txt");
    fs::write(&cfg, "depth=3\n").unwrap();
    let out = bin(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("depth"));

    let out = bin(&["train", "--ts", "many"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ts"));
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.stag");
    fs::write(&p, b"NOPE\x01\x00\x00\x00").unwrap();
    let out = bin(&["eval", "--checkpoint", p.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn csv_data_round_trip_through_train() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = spikestag::data::synth_generate(4, 200, 9).unwrap();
    let csv = tmp.path().join("d.csv");
    spikestag::data::write_csv(&ds, &csv).unwrap();
    let run = tmp.path().join("run");
    let mut args = vec!["train", "--out", run.to_str().unwrap()];
    let mut tiny: Vec<&str> = TINY.to_vec();
    // Drop `--data synthetic --steps 300 --nodes 5`: nodes come from the file.
    tiny.drain(0..6);
    args.extend(tiny);
    args.extend(["--data", csv.to_str().unwrap()]);
    ok(&args);
    assert_eq!(load_model(run.join("model.stag")).unwrap().config.nodes, 4);
}

#[test]
fn overfit_tiny_run_scores_high_on_its_training_data() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let out = run.to_str().unwrap();
    ok(&[
        "train", "--out", out, "--data", "synthetic", "--steps", "600", "--nodes", "4", "--input-len", "48", "--horizon",
        "1", "--epochs", "20", "--train-stride", "1", "--seed", "2",
    ]);
    let ck = run.join("model.stag");
    let e = ok(&["eval", "--checkpoint", ck.to_str().unwrap(), "--split", "train", "--steps", "600", "--data-seed", "2"]);
    let r2: f64 = e.lines().next().unwrap()[4..].trim().parse().unwrap();
    assert!(r2 > 0.95, "train r2 {r2}");
}
