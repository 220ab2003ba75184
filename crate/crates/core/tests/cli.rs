use std::path::Path;
use std::process::{Command, Output};

use tsdr::io::Manifest;

fn tsdr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsdr"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn synth_fit_metrics_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_ok(&tsdr(
        d,
        &[
            "synth", "--model", "hmpca", "--sigma2", "1.1", "--n", "100", "--seed", "7", "--out",
            "d.stk",
        ],
    ));
    for f in ["d.stk", "d.truth.stk", "d.spec.json", "d.manifest.json"] {
        assert!(d.join(f).exists(), "{f} missing");
    }
    assert_ok(&tsdr(
        d,
        &[
            "fit", "--in", "d.stk", "--p-u", "16", "--q-u", "16", "--out", "m.bin",
        ],
    ));
    let out = tsdr(
        d,
        &["metrics", "--model", "m.bin", "--truth", "d.truth.stk"],
    );
    assert_ok(&out);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let mse = report["mse"].as_f64().unwrap();
    assert!(mse > 0.0 && mse < 0.1, "mse {mse}");
    assert_eq!(report["ranks"], serde_json::json!([8, 8, 8]));

    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(d.join("m.manifest.json")).unwrap()).unwrap();
    assert!(manifest.verify().unwrap());
    assert_eq!(manifest.run.command, "fit");
    assert_eq!(manifest.run.outputs.len(), 1);

    let synth_manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(d.join("d.manifest.json")).unwrap()).unwrap();
    assert_eq!(synth_manifest.run.seed, Some(7));
    let first = std::fs::read(d.join("d.stk")).unwrap();
    assert_ok(&tsdr(
        d,
        &[
            "synth", "--model", "hmpca", "--sigma2", "1.1", "--n", "100", "--seed", "7", "--out",
            "d.stk",
        ],
    ));
    assert_eq!(
        std::fs::read(d.join("d.stk")).unwrap(),
        first,
        "same seed, same bytes"
    );
}

#[test]
fn reconstruct_select_and_scores() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_ok(&tsdr(
        d,
        &["synth", "--n", "120", "--seed", "3", "--out", "x.mrcs"],
    ));
    assert_ok(&tsdr(
        d,
        &[
            "fit", "--in", "x.mrcs", "--p-u", "12", "--q-u", "12", "--out", "m.bin",
        ],
    ));
    assert_ok(&tsdr(
        d,
        &[
            "reconstruct",
            "--model",
            "m.bin",
            "--in",
            "x.mrcs",
            "--out",
            "r.2sdr",
            "--scores",
            "z.csv",
        ],
    ));
    let scores = std::fs::read_to_string(d.join("z.csv")).unwrap();
    let mut lines = scores.lines();
    assert!(lines.next().unwrap().starts_with("score1"));
    assert_eq!(lines.count(), 120);

    assert_ok(&tsdr(
        d,
        &[
            "select", "--in", "x.mrcs", "--p-u", "12", "--q-u", "12", "--out", "sel.json",
        ],
    ));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("sel.json")).unwrap()).unwrap();
    assert!(
        report["sure"].is_object() && report["gic"].is_object(),
        "{report}"
    );
}

#[test]
fn cluster_and_embed_on_scores() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut text = String::from("a,b\n");
    for k in 0..3 {
        for i in 0..15 {
            let t = i as f64 * 0.7;
            text.push_str(&format!(
                "{},{}\n",
                10.0 * k as f64 + 0.3 * t.sin(),
                -5.0 * k as f64 + 0.3 * t.cos()
            ));
        }
    }
    std::fs::write(d.join("pts.csv"), text).unwrap();
    assert_ok(&tsdr(
        d,
        &[
            "cluster",
            "--in",
            "pts.csv",
            "--out",
            "lab.csv",
            "--phase",
            "phase.csv",
            "--min-size",
            "5",
        ],
    ));
    let labels = std::fs::read_to_string(d.join("lab.csv")).unwrap();
    assert_eq!(labels.lines().count(), 46);
    assert!(
        std::fs::read_to_string(d.join("phase.csv"))
            .unwrap()
            .lines()
            .count()
            > 2
    );

    let truth: String = std::iter::once("index,label\n".to_string())
        .chain((0..45).map(|i| format!("{i},{}\n", i / 15)))
        .collect();
    std::fs::write(d.join("truth.csv"), truth).unwrap();
    let out = tsdr(
        d,
        &["metrics", "--labels", "truth.csv", "--pred", "lab.csv"],
    );
    assert_ok(&out);
    let m: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(m["impurity"].as_f64(), Some(0.0));
    assert_eq!(m["c_impurity"].as_f64(), Some(0.0));

    assert_ok(&tsdr(
        d,
        &[
            "embed",
            "--in",
            "pts.csv",
            "--out",
            "y.csv",
            "--perplexity",
            "5",
            "--eta",
            "10",
            "--iters",
            "200",
            "--kl",
            "kl.csv",
        ],
    ));
    assert_eq!(
        std::fs::read_to_string(d.join("y.csv"))
            .unwrap()
            .lines()
            .count(),
        46
    );
    assert!(std::fs::read_to_string(d.join("kl.csv"))
        .unwrap()
        .starts_with("iteration,kl"));
}

#[test]
fn bench_table2_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_ok(&tsdr(
        d,
        &[
            "bench", "table2", "--noise", "t5", "--reps", "2", "--n", "300", "--sigma2", "1.1",
            "--out", "t2.csv",
        ],
    ));
    let text = std::fs::read_to_string(d.join("t2.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "noise,sigma2,n,reps,failures,SURE,GIC,AIC,BIC"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..5], &["T5", "1.1", "300", "2", "0"]);
    for v in &row[5..] {
        let acc: f64 = v.parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let none = tsdr(d, &[]);
    assert_eq!(none.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&none.stderr).contains("Usage"));
    assert_eq!(tsdr(d, &["fit", "--bogus"]).status.code(), Some(2));
    assert_eq!(tsdr(d, &["--help"]).status.code(), Some(0));
    assert_eq!(
        tsdr(d, &["synth", "--n", "0", "--out", "x.stk"])
            .status
            .code(),
        Some(2)
    );
    let missing = tsdr(d, &["fit", "--in", "nope.stk", "--out", "m.bin"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.stk"));
    std::fs::write(d.join("junk.stk"), b"not a stack").unwrap();
    assert_eq!(
        tsdr(d, &["fit", "--in", "junk.stk", "--out", "m.bin"])
            .status
            .code(),
        Some(2)
    );
}
