//! End-to-end checks of the command-line tool: exit codes, the CSV format
//! contract, error reporting, and the preset catalog.

use std::path::Path;
use std::process::{Command, Output};

fn galwave(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_galwave"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn trajectory_csv_format_contract() {
    let dir = tempfile::tempdir().unwrap();
    let out = galwave(&["solve", "eigenmode1d"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(dir.path().join("eigenmode1d_trajectory.csv")).unwrap();
    assert!(!text.contains('\r'), "LF line endings only");
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,d1,d2,d3,d4,e1,e2,e3,e4");
    let mut rows = 0;
    for line in lines {
        for fieldtext in line.split(',') {
            // 17 significant digits, scientific notation
            let mantissa = fieldtext.split('e').next().unwrap();
            let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
            assert_eq!(digits.len(), 17, "field `{fieldtext}`");
            // round trip: parse and re-format reproduces the bytes
            let v: f64 = fieldtext.parse().unwrap();
            assert_eq!(format!("{v:.16e}"), fieldtext);
        }
        rows += 1;
    }
    assert_eq!(rows, 1001);
}

#[test]
fn missing_required_key_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("broken.cfg");
    std::fs::write(
        &cfg,
        "[domain]\ndim = 1\nL1 = 1\n[basis]\nm = 2\n[coefficients]\nrho = 1\nA_s.11 = 1\n[initial]\nu0 = x*(1-x)\nu1 = 0\n[time]\nT = 1\n",
    )
    .unwrap();
    let out = galwave(&["validate", cfg.to_str().unwrap()], dir.path());
    assert!(!out.status.success());
    let all = format!("{}{}", stdout(&out), stderr(&out));
    assert!(all.contains("time.dt"), "{all}");
}

#[test]
fn duplicate_key_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("dup.cfg");
    std::fs::write(&cfg, "[domain]\ndim = 1\ndim = 2\n").unwrap();
    let out = galwave(&["validate", cfg.to_str().unwrap()], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
}

#[test]
fn unknown_preset_lists_catalog() {
    let dir = tempfile::tempdir().unwrap();
    let out = galwave(&["solve", "not_a_preset"], dir.path());
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("eigenmode1d") && err.contains("nonlipschitz_sqrt"), "{err}");
}

#[test]
fn nonlipschitz_without_k_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("raw_sqrt.cfg");
    std::fs::write(
        &cfg,
        "[domain]\ndim = 1\nL1 = 1\n[basis]\nm = 4\n[coefficients]\nrho = 1\nA_s.11 = 1\n\
         [nonlinearity]\nkind = expr\nf = sign(z)*sqrt(abs(z))\n[initial]\nu0 = x*(1-x)\nu1 = 0\n\
         [time]\nT = 1\ndt = 0.001\n",
    )
    .unwrap();
    let out = galwave(&["solve", cfg.to_str().unwrap()], dir.path());
    assert!(!out.status.success());
    let all = format!("{}{}", stdout(&out), stderr(&out));
    assert!(all.contains("Lipschitz approximation"), "{all}");
    // the same config solves once an approximation level is requested
    let out = galwave(&["solve", cfg.to_str().unwrap(), "--k", "64"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn failing_validation_gives_machine_readable_section() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sinking.cfg");
    std::fs::write(
        &cfg,
        "[domain]\ndim = 1\nL1 = 1\n[basis]\nm = 2\n[coefficients]\nalpha = 0.25\nrho = 0.5 - t\nA_s.11 = 1\n\
         [initial]\nu0 = x*(1-x)\nu1 = 0\n[time]\nT = 1\ndt = 0.01\n",
    )
    .unwrap();
    let out = galwave(&["validate", cfg.to_str().unwrap()], dir.path());
    assert!(!out.status.success());
    let text = stdout(&out);
    assert!(text.contains("[failures]"), "{text}");
    assert!(text.contains("validate ="), "{text}");
}

#[test]
fn energy_bound_margins_hold_on_conserved_preset() {
    let dir = tempfile::tempdir().unwrap();
    let out = galwave(&["energy", "eigenmode1d"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(dir.path().join("eigenmode1d_bound.csv")).unwrap();
    for line in text.lines().skip(1) {
        let fields: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        let (bound, margin) = (fields[5], fields[6]);
        assert!(margin >= -1e-8 * (1.0 + bound), "margin {margin}");
    }
}

#[test]
fn truncation_flag_changes_the_projection() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("plain");
    let b = dir.path().join("clamped");
    assert!(galwave(&["solve", "bump1d"], &a).status.success());
    // clamp level below max u0 = 0.25 truncates the initial data
    assert!(galwave(&["solve", "bump1d", "--j", "0.1"], &b).status.success());
    let ta = std::fs::read_to_string(a.join("bump1d_trajectory.csv")).unwrap();
    let tb = std::fs::read_to_string(b.join("bump1d_trajectory.csv")).unwrap();
    let first = |text: &str| -> f64 {
        text.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap()
    };
    assert!((first(&ta) - first(&tb)).abs() > 1e-4);
}

#[test]
fn manifest_hash_is_stable_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(galwave(&["solve", "bump1d"], &a).status.success());
    assert!(galwave(&["solve", "bump1d"], &b).status.success());
    let hash_of = |p: &Path| -> String {
        std::fs::read_to_string(p.join("bump1d_manifest.txt"))
            .unwrap()
            .lines()
            .find(|l| l.starts_with("config_hash"))
            .unwrap()
            .to_owned()
    };
    assert_eq!(hash_of(&a), hash_of(&b));
}

// Every subcommand terminates with exit 0 on every preset.

fn all_presets(sub: &str, extra: &[&str]) {
    for preset in galwave::cli::config::PRESETS {
        let dir = tempfile::tempdir().unwrap();
        let mut args = vec![sub, preset];
        args.extend_from_slice(extra);
        let out = galwave(&args, dir.path());
        assert!(
            out.status.success(),
            "galwave {sub} {preset}: {}\n{}",
            stdout(&out),
            stderr(&out)
        );
    }
}

#[test]
fn validate_exits_zero_on_every_preset() {
    all_presets("validate", &[]);
}

#[test]
fn solve_exits_zero_on_every_preset() {
    all_presets("solve", &[]);
}

#[test]
fn energy_exits_zero_on_every_preset() {
    all_presets("energy", &[]);
}

#[test]
fn converge_exits_zero_on_every_preset() {
    all_presets("converge", &["--m", "2,4", "--dt", "2e-2,1e-2"]);
}

#[test]
fn mms_exits_zero_on_every_preset() {
    all_presets("mms", &[]);
}

#[test]
fn unique_exits_zero_on_every_preset() {
    all_presets("unique", &[]);
}
