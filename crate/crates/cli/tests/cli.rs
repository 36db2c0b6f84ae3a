use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set", "d_model=16",
    "--set", "ffn_dim=32",
    "--set", "n_heads=2",
    "--set", "enc_layers=1",
    "--set", "dec_layers=1",
    "--set", "steps=6",
    "--set", "batch_size=4",
];

fn flexcast(args: &[&str], extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flexcast"))
        .args(args)
        .args(extra)
        .output()
        .expect("binary runs")
}

/// Calendar date `day` days after 2021-01-01.
fn date(mut day: usize) -> String {
    const MONTHS: [usize; 12] = [31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];
    let mut year = 2021;
    loop {
        for (m, len) in MONTHS.iter().enumerate() {
            if day < *len {
                return format!("{year}-{:02}-{:02}", m + 1, day + 1);
            }
            day -= len;
        }
        year += 1;
    }
}

fn write_csv(dir: &Path, name: &str, len: usize) -> PathBuf {
    let mut text = String::from("date,load,temp\n");
    for t in 0..len {
        let phase = std::f64::consts::TAU * t as f64 / 24.0;
        text.push_str(&format!(
            "{} {:02}:00:00,{:.6},{:.6}\n",
            date(t / 24),
            t % 24,
            phase.sin() + 0.01 * (t % 7) as f64,
            10.0 + 2.0 * phase.cos()
        ));
    }
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_lists_subcommands_and_flags() {
    let out = flexcast(&["--help"], &[]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for word in [
        "pretrain", "finetune", "evaluate", "forecast", "find-period", "selftest", "--config", "--seed",
        "--horizon", "--period", "--patching", "--decoding", "--resize", "--replicated-token",
        "--ref-patch", "--out", "--data", "--checkpoint",
    ] {
        assert!(text.contains(word), "help lacks {word}");
    }
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "decoding = banana\n").unwrap();
    let out = flexcast(&["pretrain", "--config", s(&cfg)], &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("ppd") && err.contains("autoregressive"), "{err}");

    fs::write(&cfg, "seed = 1\nlearning_rate = 0.1\n").unwrap();
    let out = flexcast(&["pretrain", "--config", s(&cfg)], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("learning_rate"));
}

#[test]
fn missing_data_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.csv");
    let out = flexcast(&["find-period", "--data", s(&missing)], &[]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn pretrain_is_reproducible_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fs::create_dir(&data).unwrap();
    write_csv(&data, "a.csv", 720);
    let run = |out: &str, seed: &str| {
        let out_dir = dir.path().join(out);
        let res = flexcast(&["pretrain", "--data", s(&data), "--out", s(&out_dir), "--seed", seed], SMALL);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        fs::read(out_dir.join("model.ckpt")).unwrap()
    };
    let a = run("a", "5");
    let b = run("b", "5");
    let c = run("c", "6");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn pretrain_then_forecast_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_csv(dir.path(), "series.csv", 2400);
    let out_dir = dir.path().join("out");
    let res = flexcast(&["pretrain", "--data", s(&csv), "--out", s(&out_dir)], SMALL);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let ckpt = out_dir.join("model.ckpt");

    let res = flexcast(
        &["forecast", "--data", s(&csv), "--checkpoint", s(&ckpt), "--horizon", "30", "--out", s(&out_dir)],
        SMALL,
    );
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = fs::read_to_string(out_dir.join("forecast.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "load,temp");
    assert_eq!(lines.len(), 31);
    for line in &lines[1..] {
        let vals: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals.len(), 2);
        assert!(vals.iter().all(|v| v.is_finite()));
    }

    let res = flexcast(
        &[
            "evaluate", "--zero-shot", "--data", s(&csv), "--checkpoint", s(&ckpt), "--horizon", "24,48",
            "--period", "24", "--out", s(&out_dir),
        ],
        SMALL,
    );
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report = fs::read_to_string(out_dir.join("report.txt")).unwrap();
    assert!(report.starts_with("# cycle_length=24"), "{report}");
    for needle in ["series 24 mse", "series 48 mse", "series 24 mae", "series 48 n_windows"] {
        assert!(report.contains(needle), "{report}");
    }
}

#[test]
fn find_period_reports_each_channel() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_csv(dir.path(), "series.csv", 960);
    let out = flexcast(&["find-period", "--data", s(&csv)], &[]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("load 24 ")), "{text}");
    assert!(text.lines().any(|l| l.starts_with("temp 24 ")), "{text}");
}

#[test]
fn selftest_passes() {
    let out = flexcast(&["selftest"], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 7);
}
