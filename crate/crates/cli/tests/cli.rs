use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn one(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_one")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A one-epoch run on a small subset so the tests stay quick.
fn small_train(method: &str, out: &Path, extra: &[&str]) -> Output {
    let root = data_root();
    let mut args = vec![
        "train",
        "--method",
        method,
        "--preset",
        "desk-mnist",
        "--seed",
        "7",
        "--set",
        "epochs=1",
        "--set",
        "train_subset=600",
        "--set",
        "test_subset=200",
        "--set",
        "ensemble_size=2",
        "--data-root",
        root.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    one(&args)
}

fn last_test(csv: &Path, head: &str) -> f64 {
    let text = fs::read_to_string(csv).unwrap();
    let line = text.lines().rev().find(|l| l.split(',').nth(1) == Some("test") && l.split(',').nth(2) == Some(head)).unwrap();
    line.split(',').nth(3).unwrap().parse().unwrap()
}

fn json_field(s: &str, key: &str) -> f64 {
    let v: serde_json::Value = serde_json::from_str(s.trim()).unwrap();
    v[key].as_f64().unwrap()
}

#[test]
fn train_writes_manifest_checkpoint_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = small_train("one", &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["manifest.json", "one.ckpt", "one-state.ckpt", "metrics.csv", "metrics.ndjson"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["epochs"], 1);
    let listed: Vec<String> = manifest["artifacts"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    assert_eq!(listed.len(), 4);
    assert!(listed.iter().all(|p| Path::new(p).is_file()));

    let ckpt = out.join("one.ckpt");
    let ck = ckpt.to_str().unwrap();
    let single = one(&["eval", "--checkpoint", ck, "--mode", "single"]);
    assert!(single.status.success());
    assert_eq!(json_field(&stdout(&single), "top1_err"), last_test(&out.join("metrics.csv"), "branch0"));
    let ens = one(&["eval", "--checkpoint", ck, "--mode", "ensemble"]);
    assert_eq!(json_field(&stdout(&ens), "top1_err"), last_test(&out.join("metrics.csv"), "teacher"));

    let var = one(&["variance", "--checkpoint", ck]);
    assert!(var.status.success());
    assert!(json_field(&stdout(&var), "variance") >= 0.0);

    let json = one(&["export", "--metrics", out.join("metrics.csv").to_str().unwrap(), "--format", "json"]);
    assert_eq!(stdout(&json), fs::read_to_string(out.join("metrics.ndjson")).unwrap());
    let csv = one(&["export", "--metrics", out.join("metrics.csv").to_str().unwrap(), "--format", "csv"]);
    assert_eq!(stdout(&csv), fs::read_to_string(out.join("metrics.csv")).unwrap());

    let p = one(&["perturb", "--checkpoint", ck, "--dmax", "5", "--dirs", "5"]);
    assert!(p.status.success());
    let rows: Vec<String> = stdout(&p).lines().skip(1).map(str::to_string).collect();
    assert_eq!(rows.len(), 11 * 5);
    assert!(rows[0].starts_with("0,0,") && rows.last().unwrap().starts_with("5,4,"));
}

#[test]
fn training_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(small_train("vanilla", &a, &[]).status.success());
    assert!(small_train("vanilla", &b, &[]).status.success());
    for f in ["metrics.csv", "metrics.ndjson", "vanilla.ckpt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn variance_needs_two_heads() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v");
    assert!(small_train("vanilla", &out, &[]).status.success());
    let o = one(&["variance", "--checkpoint", out.join("vanilla.ckpt").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ensemble_and_kd_methods_run() {
    let dir = tempfile::tempdir().unwrap();
    let e = dir.path().join("e");
    assert!(small_train("ensemble", &e, &[]).status.success());
    assert!(e.join("ensemble-net1.ckpt").is_file());
    let text = fs::read_to_string(e.join("metrics.csv")).unwrap();
    assert!(text.lines().any(|l| l.contains(",test,ensemble,")));
    let k = dir.path().join("k");
    assert!(small_train("kd", &k, &["--flags", "no_gating"]).status.success());
    assert!(k.join("kd.ckpt").is_file() && k.join("kd-teacher.ckpt").is_file());
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = one(&["train", "--method", "bogus"]);
    assert!(!o.status.success());
    let o = one(&["eval", "--checkpoint", dir.path().join("none.ckpt").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let o = small_train("one", &dir.path().join("x"), &["--set", "epochs=0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = one(&["train", "--method", "one", "--no-such-flag"]);
    assert!(!o.status.success());
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let o = one(&["train", "--method", "one", "--preset", "desk-mnist", "--data-root", empty.to_str().unwrap(), "--out", dir.path().join("y").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn help_documents_every_flag() {
    let cases: &[(&str, &[&str])] = &[
        ("train", &["--method", "--preset", "--config", "--set", "--flags", "--seed", "--out", "--resume", "--data-root"]),
        ("eval", &["--checkpoint", "--mode", "--data-root"]),
        ("perturb", &["--checkpoint", "--dmax", "--dirs", "--points", "--seed", "--out"]),
        ("variance", &["--checkpoint", "--data-root"]),
        ("export", &["--metrics", "--format"]),
        ("aggregate", &["--out"]),
    ];
    for (cmd, flags) in cases {
        let h = stdout(&one(&[cmd, "--help"]));
        for f in *flags {
            assert!(h.contains(f), "{cmd} --help lacks {f}");
        }
    }
}
