//! Bit-reproducible CSV and manifest emission.
//!
//! Floats are serialized with 17 significant digits (scientific form), which
//! round-trips every f64 exactly; lines end with LF; files are written to a
//! temporary sibling and renamed into place.

use crate::diagnostics::{BoundReport, EnergyRecord, ErrorTable, ProbeResult};
use crate::integrate::Trajectory;
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

/// 17-significant-digit scientific form; parses back to the same bits.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes a file atomically (temporary sibling + rename).
pub fn write_atomic(path: &Path, contents: &str) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = PathBuf::from(path);
    let mut name = tmp
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(".tmp");
    tmp.set_file_name(name);
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Trajectory CSV with header `t,d1..dm,e1..em`.
pub fn trajectory_csv(traj: &Trajectory<f64>) -> String {
    let m = traj
        .states
        .first()
        .map(|s| s.d.len())
        .unwrap_or(0);
    let mut out = String::from("t");
    for j in 1..=m {
        let _ = write!(out, ",d{j}");
    }
    for j in 1..=m {
        let _ = write!(out, ",e{j}");
    }
    out.push('\n');
    for s in &traj.states {
        let _ = write!(out, "{}", format_float(s.t));
        for j in 0..m {
            let _ = write!(out, ",{}", format_float(s.d[j]));
        }
        for j in 0..m {
            let _ = write!(out, ",{}", format_float(s.e[j]));
        }
        out.push('\n');
    }
    out
}

/// Energy CSV: `t,kinetic,potential,gpart,total,second` (absent fields are
/// written as 0).
pub fn energy_csv(records: &[EnergyRecord<f64>]) -> String {
    let mut out = String::from("t,kinetic,potential,gpart,total,second\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            format_float(r.t),
            format_float(r.kinetic),
            format_float(r.potential),
            format_float(r.gpart.unwrap_or(0.0)),
            format_float(r.total),
            format_float(r.second.unwrap_or(0.0)),
        );
    }
    out
}

/// Bound-report CSV: `t,phi,phi_tilde,int_phi_tilde,energy,bound,margin`.
pub fn bound_csv(report: &BoundReport<f64>) -> String {
    let mut out = String::from("t,phi,phi_tilde,int_phi_tilde,energy,bound,margin\n");
    for s in &report.samples {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            format_float(s.t),
            format_float(s.phi),
            format_float(s.phi_tilde),
            format_float(s.int_phi_tilde),
            format_float(s.energy),
            format_float(s.bound),
            format_float(s.margin),
        );
    }
    out
}

/// Convergence table CSV: `m,dt,err_h,err_v`.
pub fn convergence_csv(table: &ErrorTable<f64>) -> String {
    let mut out = String::from("m,dt,err_h,err_v\n");
    for row in &table.rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            row.m,
            format_float(row.dt),
            format_float(row.err_h),
            format_float(row.err_v),
        );
    }
    out
}

/// Difference-growth CSV of the uniqueness probe: `t,diff_h`.
pub fn probe_csv(probe: &ProbeResult<f64>) -> String {
    let mut out = String::from("t,diff_h\n");
    for &(t, d) in &probe.curve {
        let _ = writeln!(out, "{},{}", format_float(t), format_float(d));
    }
    out
}

/// Line-oriented `key = value` run manifest.
#[derive(Debug, Default)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Manifest::default()
    }

    pub fn put(&mut self, key: &str, value: impl Into<String>) {
        self.entries.push((key.to_owned(), value.into()));
    }

    pub fn put_float(&mut self, key: &str, value: f64) {
        self.put(key, format_float(value));
    }

    pub fn put_check(&mut self, name: &str, passed: bool) {
        self.put(
            &format!("check.{name}"),
            if passed { "pass" } else { "fail" },
        );
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn all_checks_pass(&self) -> bool {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with("check."))
            .all(|(_, v)| v == "pass")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_roundtrips_bits() {
        for x in [
            0.0,
            1.0,
            -1.0,
            std::f64::consts::PI,
            1.0 / 3.0,
            2.2250738585072014e-308,
            9.87654321e17,
            -4.9e-17,
        ] {
            let s = format_float(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{x} -> {s}");
        }
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        write_atomic(&path, "one\n").unwrap();
        write_atomic(&path, "two\n").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "two\n");
        assert!(!path.with_file_name("a.csv.tmp").exists());
    }
}
