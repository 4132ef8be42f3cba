use std::path::Path;
use std::process::{Command, Output};

use densepoint::networks::{build, NetworkConfig};
use densepoint::tensor::checkpoint;

const SMALL: &[&str] = &[
    "--synth-points", "64", "--train-per-class", "4", "--test-per-class", "2", "--k", "4", "--votes", "2",
];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_densepoint"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn small(cmd: &str, extra: &[&str]) -> Vec<String> {
    std::iter::once(cmd).chain(SMALL.iter().copied()).chain(extra.iter().copied()).map(String::from).collect()
}

fn refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn last_stderr_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("").to_string()
}

#[test]
fn failures_print_one_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["eval", "--source", "xyz", "--root", "missing"]);
    assert_eq!(out.status.code(), Some(1));
    let line = last_stderr_line(&out);
    assert!(line.starts_with("error: ") && line.contains("dataset missing"), "{line}");

    let out = run(dir.path(), &["train", "--no-such-flag", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(last_stderr_line(&out).starts_with("error: "));

    std::fs::write(dir.path().join("run.ini"), "[train]\nepochs = 1\nmomentum = 0.9\n").unwrap();
    let out = run(dir.path(), &["count", "--config", "run.ini"]);
    assert_eq!(out.status.code(), Some(1));
    let line = last_stderr_line(&out);
    assert!(line.starts_with("error: ") && line.contains("momentum"), "{line}");
}

#[test]
fn config_file_loses_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.ini"), "[network]\ngroups = 4\n[output]\ndir = from_file\n").unwrap();
    let out = run(dir.path(), &["count", "--config", "run.ini", "--groups", "8"]);
    assert!(out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("network.groups = 8"), "{err}");
    assert!(err.contains("output.dir = from_file"), "{err}");
    assert!(dir.path().join("from_file/cost.tsv").is_file());
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &refs(&small("train", &["--epochs", "0", "--seed", "5"])));
    let mut c = NetworkConfig::classification(4, 2, 4);
    c.input_points = 64;
    let net = build(&c, 5).unwrap();
    let saved = std::fs::read(dir.path().join("out/model.ckpt")).unwrap();
    assert_eq!(saved, checkpoint::to_bytes(&net.store));
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    for d in ["a", "b", "c"] {
        let seed = if d == "c" { "1" } else { "0" };
        ok(dir.path(), &refs(&small("train", &["--epochs", "2", "--seed", seed, "--dir", d])));
    }
    let read = |d: &str| std::fs::read(dir.path().join(d).join("model.ckpt")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    let log = std::fs::read_to_string(dir.path().join("a/train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("epoch\ttrain_loss"));
}

#[test]
fn eval_accuracy_matches_the_dump() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &refs(&small("train", &["--epochs", "1"])));
    let stdout = ok(dir.path(), &refs(&small("eval", &["--dump", "dump.tsv"])));
    let reported: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("accuracy\t"))
        .expect("accuracy row")
        .parse()
        .unwrap();
    let dump = std::fs::read_to_string(dir.path().join("dump.tsv")).unwrap();
    let mut lines = dump.lines();
    assert_eq!(lines.next(), Some("id\tlabel\tpred\tmax_prob"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 8);
    let correct = rows.iter().filter(|r| r[1] == r[2]).count();
    assert!((reported - correct as f64 / rows.len() as f64).abs() <= 1e-6);
    for r in &rows {
        let p: f64 = r[3].parse().unwrap();
        assert!((0.25..=1.0).contains(&p), "{p}");
    }
}

#[test]
fn xyz_round_trip_evaluates_like_the_generator() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &refs(&small("train", &["--epochs", "1"])));
    ok(dir.path(), &refs(&small("synth", &["--root", "xyz"])));
    ok(dir.path(), &refs(&small("synth", &["--format", "cache", "--cache", "c.bin"])));
    let acc = |args: &[&str]| -> f64 {
        let out = ok(dir.path(), &refs(&small("eval", args)));
        out.lines().find_map(|l| l.strip_prefix("accuracy\t")).unwrap().parse().unwrap()
    };
    let direct = acc(&[]);
    assert_eq!(direct, acc(&["--source", "cache", "--cache", "c.bin"]));
    assert_eq!(direct, acc(&["--source", "xyz", "--root", "xyz", "--points", "64"]));
}

#[test]
fn count_rows_sum_to_total_and_sweeps_are_monotone() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["count"]);
    let tsv = std::fs::read_to_string(dir.path().join("out/cost.tsv")).unwrap();
    let mut lines = tsv.lines();
    let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
    let pcol = header.iter().position(|h| *h == "params").unwrap();
    let (mut sum, mut total) = (0u64, None);
    for l in lines {
        let f: Vec<&str> = l.split('\t').collect();
        let v: u64 = f[pcol].parse().unwrap();
        if f[0] == "total" {
            total = Some(v);
        } else {
            sum += v;
        }
    }
    assert_eq!(Some(sum), total);

    let column = |text: &str, col: usize| -> Vec<u64> {
        text.lines().skip(1).map(|l| l.split('\t').nth(col).unwrap().parse().unwrap()).collect()
    };
    let ng = ok(dir.path(), &["count", "--sweep", "ng=1,2,4,6,12"]);
    assert!(column(&ng, 1).windows(2).all(|w| w[0] > w[1]));
    assert!(column(&ng, 3).windows(2).all(|w| w[0] > w[1]));
    let k = ok(dir.path(), &["count", "--sweep", "k=12,24,36"]);
    assert!(column(&k, 1).windows(2).all(|w| w[0] < w[1]));
    let depth = ok(dir.path(), &["count", "--sweep", "depth=6,9,11,15,19,23"]);
    assert!(column(&depth, 1).windows(2).all(|w| w[0] < w[1]));
    assert!(dir.path().join("out/sweep_depth.tsv").is_file());
}

#[test]
fn gradcheck_passes_and_catches_a_fault() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck"]);
    assert!(out.lines().skip(1).all(|l| l.ends_with("\tpass")));
    let bad = run(dir.path(), &["gradcheck", "--inject-fault", "gather_reduce"]);
    assert_eq!(bad.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&bad.stdout);
    let row = stdout.lines().find(|l| l.starts_with("op\tgather_reduce\t")).unwrap();
    assert!(row.ends_with("\tFAIL"), "{row}");
    assert!(last_stderr_line(&bad).starts_with("error: "));
    assert_eq!(run(dir.path(), &["gradcheck", "--inject-fault", "nope"]).status.code(), Some(1));
}

#[test]
fn bench_reports_ordered_timings() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["bench", "--presets", "6", "--points", "64", "--reps", "3", "--batch", "2", "--warmup", "0"]);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("preset\tmode\tbatch\tpoints\tmedian_ms\tmin_ms\tmax_ms"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        let t: Vec<f64> = r[4..].iter().map(|v| v.parse().unwrap()).collect();
        assert!(t[1] <= t[0] && t[0] <= t[2], "{r:?}");
    }
    assert!(dir.path().join("out/bench.tsv").is_file());
}
