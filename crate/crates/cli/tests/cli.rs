use std::fs;
use std::path::Path;
use std::process::Command;

use epse_cli::{execute, parse_config, Subcommand, RESULT_COLUMNS};

const BASE: &str = r#"
n = 32
delta = 0.5
sigma2 = 0.01
t_max = 4
trials = 3
seed = 11

[ensemble]
kind = "row-orthogonal-haar"

[prior]
kind = "bg"
p = 0.1
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_epse"))
}

fn write_base(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("config.in.toml");
    fs::write(&p, BASE).unwrap();
    p
}

#[test]
fn unknown_keys_are_rejected() {
    assert!(parse_config(BASE, &[]).is_ok());
    for bad in [
        format!("{BASE}\nsigma_2 = 0.1\n"),
        BASE.replace("p = 0.1", "p = 0.1\nsparsity = 0.1"),
        BASE.replace("kind = \"row-orthogonal-haar\"", "kind = \"row-orthogonal-haar\"\nkappa = 2.0"),
        BASE.replace("kind = \"bg\"\np = 0.1", "kind = \"qpsk\"\np = 0.1"),
        BASE.replace("row-orthogonal-haar", "row-orthogonal"),
        format!("{BASE}\n[verify]\nmoment_size = [4]\n"),
    ] {
        assert!(parse_config(&bad, &[]).is_err(), "accepted:\n{bad}");
    }
    assert!(parse_config(BASE, &["prior.q=0.2".into()]).is_err());
    assert!(parse_config(BASE, &["t_max".into()]).is_err());
}

#[test]
fn overrides_are_typed() {
    let c = parse_config(
        BASE,
        &[
            "prior.p=0.05".into(),
            "trials=7".into(),
            "checks=[\"se-agreement\"]".into(),
            "output_dir=elsewhere".into(),
        ],
    )
    .unwrap();
    assert_eq!(c.prior, epse_core::Prior::Bg { p: 0.05 });
    assert_eq!(c.trials, 7);
    assert_eq!(c.checks.len(), 1);
    assert_eq!(c.output_dir, "elsewhere");
    let c = parse_config(BASE, &["prior={ kind = \"qpsk\" }".into()]).unwrap();
    assert_eq!(c.prior, epse_core::Prior::Qpsk {});
}

#[test]
fn invalid_values_are_rejected() {
    assert!(parse_config(BASE, &["delta=1.5".into()]).is_err());
    assert!(parse_config(BASE, &["trials=0".into()]).is_err());
    assert!(parse_config(BASE, &["n=1".into(), "delta=0.4".into()]).is_err());
    assert!(parse_config(BASE, &["prior={ kind = \"gaussian-test-only\" }".into()]).is_err());
}

#[test]
fn single_trial_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let c = parse_config(BASE, &["trials=1".into()]).unwrap();
    let out = execute(Subcommand::Run, &c, Some(1), Some(dir.path())).unwrap();
    assert!(out.passed());
    let text = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), RESULT_COLUMNS.join(","));
    assert_eq!(lines.count(), c.t_max);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["report"]["succeeded"], 1);
    assert_eq!(summary["report"]["se"]["mse_ba"].as_array().unwrap().len(), c.t_max + 1);
    // The config echo parses back to the same config.
    let echo = fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert_eq!(parse_config(&echo, &[]).unwrap(), c);
}

#[test]
fn same_seed_gives_identical_csv() {
    let c = parse_config(BASE, &[]).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    execute(Subcommand::Run, &c, Some(1), Some(a.path())).unwrap();
    execute(Subcommand::Run, &c, Some(4), Some(b.path())).unwrap();
    for f in ["results.csv", "aggregate.csv"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
    let other = parse_config(BASE, &["seed=12".into()]).unwrap();
    let d = tempfile::tempdir().unwrap();
    execute(Subcommand::Run, &other, None, Some(d.path())).unwrap();
    assert_ne!(
        fs::read(a.path().join("results.csv")).unwrap(),
        fs::read(d.path().join("results.csv")).unwrap()
    );
}

#[test]
fn single_atom_se_is_constant() {
    let dir = tempfile::tempdir().unwrap();
    let c = parse_config(
        BASE,
        &[
            "delta=1.0".into(),
            "ensemble={ kind = \"custom-spectrum-haar\", singular = [1.0] }".into(),
            "t_max=8".into(),
        ],
    )
    .unwrap();
    execute(Subcommand::Se, &c, None, Some(dir.path())).unwrap();
    let mut r = csv::Reader::from_path(dir.path().join("se.csv")).unwrap();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.unwrap();
        if rec[2].is_empty() {
            continue;
        }
        let mse_ab: f64 = rec[2].parse().unwrap();
        assert!((mse_ab - c.sigma2).abs() <= 1e-12, "{mse_ab}");
        rows += 1;
    }
    assert_eq!(rows, 8);
}

#[test]
fn threshold_scan_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{BASE}\n[scan]\ndelta_min = 0.2\ndelta_max = 0.8\npoints = 4\ninit_points = 8\n");
    let c = parse_config(&text, &[]).unwrap();
    let out = execute(Subcommand::ThresholdScan, &c, None, Some(dir.path())).unwrap();
    assert!(out.passed());
    let text = fs::read_to_string(dir.path().join("threshold.csv")).unwrap();
    assert_eq!(text.lines().count(), 5);
    let c = parse_config(BASE, &[]).unwrap();
    assert!(execute(Subcommand::ThresholdScan, &c, None, Some(dir.path())).is_err());
}

#[test]
fn verify_conditioning_exits_zero_at_64() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_base(dir.path());
    let out = dir.path().join("out");
    let status = bin()
        .args(["verify-conditioning", "--config"])
        .arg(&cfg)
        .args(["--set", "n=64", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stdout));
    let mut r = csv::Reader::from_path(out.join("conditioning.csv")).unwrap();
    let mut names = std::collections::BTreeSet::new();
    for rec in r.records() {
        let rec = rec.unwrap();
        let residual: f64 = rec[3].parse().unwrap();
        assert!(residual <= 1e-8, "{rec:?}");
        names.insert(rec[2].to_string());
    }
    for n in ["vq-tau", "vq", "vm", "pv01", "pv10", "mean-r-vs-mean-c", "v00-two-way"] {
        assert!(names.contains(n), "missing {n}");
    }
}

#[test]
fn verify_haar_small() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_base(dir.path());
    let status = bin()
        .args(["verify-haar", "-c"])
        .arg(&cfg)
        .args([
            "--set",
            "verify.moment_sizes=[4]",
            "--set",
            "verify.clt_n=32",
            "--set",
            "verify.strong_law_sizes=[64,128,256]",
            "--out",
        ])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stdout));
    let text = fs::read_to_string(dir.path().join("out/haar_moments.csv")).unwrap();
    // E|V00|^2 = 1/4 at n = 4.
    let row = text.lines().find(|l| l.contains("haar,E|V00|^2,")).unwrap();
    let mean: f64 = row.split(',').nth(4).unwrap().parse().unwrap();
    assert!((mean - 0.25).abs() < 0.01);
}

#[test]
fn failed_check_gives_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_base(dir.path());
    let run = |extra: &[&str]| {
        bin()
            .args(["verify-denoiser", "--config"])
            .arg(&cfg)
            .args(["--set", "verify.denoiser_samples=2000", "--out"])
            .arg(dir.path().join("out"))
            .args(extra)
            .status()
            .unwrap()
    };
    assert!(run(&[]).success());
    assert!(!run(&["--set", "verify.sigmas=0.0"]).success());
    let bad = bin().args(["run", "--config"]).arg(&cfg).args(["--set", "bogus=1"]).status().unwrap();
    assert!(!bad.success());
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            epse_cli::load_config(&path, &[]).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 2);
}
