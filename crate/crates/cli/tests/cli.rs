use std::path::Path;
use std::process::{Command, Output};

fn palmreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_palmreg")).args(args).output().expect("spawn palmreg")
}

fn ok(args: &[&str]) -> String {
    let out = palmreg(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_writes_image_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    let (img, truth) = (dir.path().join("a.pgm"), dir.path().join("a.txt"));
    ok(&["synth", "--seed", "3", "--size", "256", "--minutiae", "20", "--theta", "-30", "--out", p(&img), "--truth", p(&truth)]);
    let bytes = std::fs::read(&img).unwrap();
    assert!(bytes.starts_with(b"P5"));
    let text = std::fs::read_to_string(&truth).unwrap();
    assert!(text.contains("pose_theta_deg: -30.000000"));
    assert!(text.lines().any(|l| l.starts_with("minutia: ")));
}

#[test]
fn end_to_end_flow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let reference = d.join("ref.ofld");
    ok(&["build-reference", "--synthetic", "4", "--size", "512", "--out", p(&reference)]);
    let synth = |seed: &str, theta: &str, name: &str| {
        ok(&["synth", "--seed", seed, "--size", "512", "--minutiae", "80", "--theta", theta, "--snr", "15", "--out", p(&d.join(name))]);
    };
    synth("1", "45", "a.pgm");
    synth("2", "0", "c.pgm");
    ok(&["perturb", p(&d.join("a.pgm")), "--out", p(&d.join("b.pgm")), "--theta", "6", "--dx", "10", "--jitter", "2", "--snr", "15"]);

    let line = ok(&["register", p(&d.join("a.pgm")), "--ref", p(&reference)]);
    let fields: Vec<&str> = line.split_whitespace().collect();
    assert_eq!(fields.len(), 7, "{line}");
    let theta: f64 = fields[0].parse().unwrap();
    assert!((theta + 45.0).abs() <= 3.0, "{line}");

    let gallery = d.join("gallery");
    std::fs::create_dir(&gallery).unwrap();
    let debug = d.join("debug");
    for name in ["a", "b", "c"] {
        let mut args = vec!["extract".to_string(), p(&d.join(format!("{name}.pgm"))).into(), "--ref".into(), p(&reference).into()];
        args.extend(["--out".into(), p(&gallery.join(format!("{name}.tpl"))).into()]);
        if name == "a" {
            args.extend(["--debug-dir".into(), p(&debug).into()]);
        }
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    }
    assert!(debug.join("skeleton.pgm").exists() && debug.join("enhanced.pgm").exists());

    let score = ok(&["match", p(&gallery.join("a.tpl")), p(&gallery.join("b.tpl"))]);
    let decimals = score.trim().split('.').nth(1).unwrap();
    assert_eq!(decimals.len(), 6, "{score}");

    let ranked = ok(&["identify", p(&gallery.join("b.tpl")), "--gallery", p(&gallery)]);
    let ids: Vec<&str> = ranked.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(ids, ["b", "a", "c"], "{ranked}");

    let report = ok(&["bench", "--gallery", p(&gallery), "--workers", "1"]);
    assert!(report.contains("matches: 9"), "{report}");
    assert!(report.contains("matches_per_sec"));
}

#[test]
fn input_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.tpl");
    assert_eq!(palmreg(&["match", p(&missing), p(&missing)]).status.code(), Some(2));

    let bad = dir.path().join("bad.tpl");
    std::fs::write(&bad, b"not a template").unwrap();
    assert_eq!(palmreg(&["match", p(&bad), p(&bad)]).status.code(), Some(2));

    assert_eq!(palmreg(&["-s", "no.such_key=1", "config"]).status.code(), Some(2));
    assert_eq!(palmreg(&["frobnicate"]).status.code(), Some(2));

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(palmreg(&["identify", p(&bad), "--gallery", p(&empty)]).status.code(), Some(2));
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("palmreg.conf");
    std::fs::write(&cfg, "# tighter bins\nght.bin_px = 8\n").unwrap();
    let text = ok(&["--config", p(&cfg), "-s", "global.n_p=40", "config"]);
    assert!(text.lines().any(|l| l == "ght.bin_px = 8"), "{text}");
    assert!(text.lines().any(|l| l == "global.n_p = 40"), "{text}");
}

#[test]
fn selftest_passes() {
    let out = ok(&["selftest"]);
    assert!(!out.contains("FAIL"), "{out}");
}
