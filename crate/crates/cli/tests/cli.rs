use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn fedfair(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedfair"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A small MovieLens-100K shaped raw directory: 40 users, 30 items.
fn raw_fixture(dir: &Path) -> PathBuf {
    let raw = dir.join("raw");
    fs::create_dir_all(&raw).unwrap();
    let mut data = String::new();
    let mut users = String::new();
    for u in 1..=40u32 {
        let gender = if u % 3 == 0 { "F" } else { "M" };
        users.push_str(&format!("{u}|30|{gender}|other|00000\n"));
        for i in 1..=30u32 {
            if (u * 7 + i * 3) % 5 < 3 {
                let rating = 1 + (u + 2 * i) % 5;
                let ts = 1_000 + u * 31 + i * 17;
                data.push_str(&format!("{u}\t{i}\t{rating}\t{ts}\n"));
            }
        }
    }
    fs::write(raw.join("u.data"), data).unwrap();
    fs::write(raw.join("u.user"), users).unwrap();
    raw
}

fn prepared(dir: &TempDir) -> PathBuf {
    let raw = raw_fixture(dir.path());
    let out = dir.path().join("prepared");
    let o = fedfair(&[
        "prepare",
        "--dataset",
        "ml-100k",
        "--ncore",
        "5",
        "--raw",
        raw.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn train_args<'a>(data: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["train", "--data", data, "--out", out, "--hidden", "8", "--epochs", "2"];
    v.extend_from_slice(extra);
    v
}

#[test]
fn prepare_writes_splits_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = prepared(&dir);
    for f in ["ratings.tsv", "train.tsv", "validation.tsv", "test.tsv", "groups-gender.tsv", "groups-activity.tsv", "stats.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let stats: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["users"], 40);
    assert_eq!(stats["items"], 30);
    let total = stats["train"].as_u64().unwrap() + stats["validation"].as_u64().unwrap() + stats["test"].as_u64().unwrap();
    assert_eq!(total, stats["ratings"].as_u64().unwrap());

    let before: Vec<Vec<u8>> = ["train.tsv", "test.tsv", "groups-gender.tsv", "stats.json"]
        .iter()
        .map(|f| fs::read(out.join(f)).unwrap())
        .collect();
    let raw = dir.path().join("raw");
    let o = fedfair(&["prepare", "--dataset", "ml-100k", "--ncore", "5", "--raw", raw.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    for (f, b) in ["train.tsv", "test.tsv", "groups-gender.tsv", "stats.json"].iter().zip(before) {
        assert_eq!(fs::read(out.join(f)).unwrap(), b, "{f} changed");
    }
}

#[test]
fn prepare_reports_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedfair(&["prepare", "--dataset", "ml-100k", "--raw", dir.path().to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("u.data") && err.contains("u.user"), "{err}");
    assert!(!dir.path().join("o").exists(), "nothing written on failure");
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&fedfair(&["train", "--bogus"])), 1);
    assert_eq!(code(&fedfair(&["frobnicate"])), 1);
    let o = fedfair(&["train", "--beta", "1.0"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("beta"), "{}", stderr(&o));
    assert_eq!(code(&fedfair(&["train", "--alpha", "3"])), 1);
}

#[test]
fn train_without_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedfair(&["train", "--data", dir.path().to_str().unwrap(), "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("prepare"));
}

#[test]
fn train_writes_run_directory_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(&dir);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = fedfair(&train_args(data.to_str().unwrap(), out.to_str().unwrap(), &["--beta", "0", "--seed", "7"]));
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["manifest.json", "config.toml", "rounds.csv", "summary.csv", "model.ckpt"] {
        assert!(a.join(f).is_file(), "{f} missing");
    }
    let summary = fs::read_to_string(a.join("summary.csv")).unwrap();
    assert_eq!(summary, fs::read_to_string(b.join("summary.csv")).unwrap());
    assert_eq!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(b.join("model.ckpt")).unwrap());

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let hash = manifest["hash"].as_str().unwrap();
    assert!(summary.lines().nth(1).unwrap().starts_with(hash));
    let rounds = fs::read_to_string(a.join("rounds.csv")).unwrap();
    assert_eq!(rounds.lines().count(), 3);
    assert!(rounds.lines().skip(1).all(|l| l.starts_with(hash)));

    // the written config reproduces the run
    let c = dir.path().join("c");
    let o = fedfair(&["train", "--config", a.join("config.toml").to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", c.to_str().unwrap(), "--dump-digests"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(summary, fs::read_to_string(c.join("summary.csv")).unwrap());

    assert!(!a.join("digests.csv").exists());
    let digests = fs::read_to_string(c.join("digests.csv")).unwrap();
    let mut lines = digests.lines();
    assert_eq!(lines.next(), Some("digest,holders"));
    let rows: Vec<(&str, usize)> = lines
        .map(|l| {
            let (d, n) = l.split_once(',').unwrap();
            (d, n.parse().unwrap())
        })
        .collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|(d, n)| d.len() == 64 && *n >= 1));
}

#[test]
fn ldp_with_no_noise_and_loose_clip_matches_ldp_off() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(&dir);
    let d = data.to_str().unwrap();
    let (off, on) = (dir.path().join("off"), dir.path().join("on"));
    let o = fedfair(&train_args(d, off.to_str().unwrap(), &["--ldp", "off"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = fedfair(&train_args(d, on.to_str().unwrap(), &["--ldp", "on", "--lambda", "0", "--delta", "1e9"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let col = |p: &Path, name: &str| -> String {
        let text = fs::read_to_string(p.join("summary.csv")).unwrap();
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        row[header.iter().position(|h| *h == name).unwrap()].to_string()
    };
    assert_eq!(col(&off, "test_rmse"), col(&on, "test_rmse"));
    assert_eq!(col(&off, "test_disparity"), col(&on, "test_disparity"));
    assert_eq!(col(&off, "epsilon"), "inf");
}

#[test]
fn sweep_writes_stamped_tables() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(&dir);
    let out = dir.path().join("sweep");
    let o = fedfair(&[
        "sweep", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--hidden", "8", "--epochs", "2", "--betas", "0,0.5",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let hash = manifest["hash"].as_str().unwrap();
    let table = fs::read_to_string(out.join("table1.csv")).unwrap();
    assert_eq!(table.lines().count(), 3, "{table}");
    assert!(table.lines().skip(1).all(|l| l.starts_with(hash)));
    let fig = fs::read_to_string(out.join("figure3.csv")).unwrap();
    assert_eq!(fig.lines().count(), 1 + 2 * 2);
    assert!(out.join("percent_change.csv").is_file());
    assert!(!out.join("figure5.csv").exists());

    let grid = dir.path().join("grid");
    let o = fedfair(&[
        "sweep", "--data", data.to_str().unwrap(), "--out", grid.to_str().unwrap(), "--hidden", "8", "--epochs", "1", "--deltas", "0.4",
        "--lambdas", "0.15,0.3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fig5 = fs::read_to_string(grid.join("figure5.csv")).unwrap();
    let rows: Vec<&str> = fig5.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].contains("epsilon"));
    assert!(rows[1].contains(&(2.0f64 * 0.4 / 0.15).to_string()[..5]), "{}", rows[1]);
}

#[test]
fn empty_sweep_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedfair(&["sweep", "--betas", "", "--out", dir.path().join("s").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("empty"), "{}", stderr(&o));
    assert!(!dir.path().join("s").exists());
}

#[test]
fn verify_passes_and_catches_an_injected_fault() {
    let o = fedfair(&["verify"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 5, "{out}");
    assert!(out.lines().all(|l| l.contains("PASS")));

    let o = fedfair(&["verify", "--inject-fault", "gradient"]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("gradient"), "{}", stderr(&o));
    let failing: Vec<&str> = stdout(&o).lines().filter(|l| l.contains("FAIL")).map(|l| l.to_string().leak() as &str).collect();
    assert_eq!(failing.len(), 1, "{failing:?}");
}
