//! Command-line front end: config ingestion, preset catalog, subcommand
//! dispatch, and CSV/report emission.

pub mod config;
pub mod output;

use crate::assembly::GalerkinSystem;
use crate::diagnostics::{
    self, energy_series, gronwall_check, mms_source, uniqueness_probe, Reference, StudyOptions,
};
use crate::exprlang::{parse, BinOp, Expr, Var};
use crate::integrate::{initial_projection_error, initial_state, solve, SolveOptions, Trajectory};
use crate::problem::{validate, ProblemSpec, ValidationGrid};
use clap::{Args, Parser, Subcommand};
use config::{load_config, preset, Config, ConfigError, RunSettings};
use output::{format_float, write_atomic, Manifest};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "galwave",
    version,
    about = "Spectral Galerkin solver and verification harness for semilinear wave equations"
)]
struct CliArgs {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file path or preset name (eigenmode1d, bump1d, sec4_1d_p1,
    /// sec4_2d_antisym, nonlipschitz_sqrt)
    config: String,
    /// Output directory (overrides output.dir)
    #[arg(long)]
    out: Option<String>,
    /// Lipschitz approximation level (overrides approx.k)
    #[arg(long)]
    k: Option<usize>,
    /// Initial-data truncation level (overrides approx.j)
    #[arg(long)]
    j: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Check the structural assumptions by sampling and print the report
    Validate(Common),
    /// Integrate the projected system and write the trajectory CSV
    Solve(Common),
    /// Solve, then write energy records and the a priori bound report
    Energy(Common),
    /// Error table over mode counts and time steps
    Converge {
        #[command(flatten)]
        common: Common,
        /// Mode counts, comma separated
        #[arg(long, value_delimiter = ',')]
        m: Vec<usize>,
        /// Time steps, comma separated
        #[arg(long, value_delimiter = ',')]
        dt: Vec<f64>,
        /// Reference mode count (default: largest of --m)
        #[arg(long)]
        ref_m: Option<usize>,
        /// Reference time step (default: smallest of --dt)
        #[arg(long)]
        ref_dt: Option<f64>,
        /// Comparison intervals over [0, T]
        #[arg(long, default_value_t = 50)]
        intervals: usize,
        /// Worker threads for the run grid
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Manufactured-solution run: builds the source for (1+t^2) u0 + t u1
    Mms(Common),
    /// Stability probe: perturb the initial data by delta in the first mode
    Unique {
        #[command(flatten)]
        common: Common,
        /// Perturbation size
        #[arg(long, default_value_t = 1e-3)]
        delta: f64,
    },
}

/// Entry point; returns the process exit code.
pub fn main() -> i32 {
    let args = CliArgs::parse();
    let result = match &args.command {
        Command::Validate(c) => run_validate(c),
        Command::Solve(c) => run_solve(c),
        Command::Energy(c) => run_energy(c),
        Command::Converge {
            common,
            m,
            dt,
            ref_m,
            ref_dt,
            intervals,
            threads,
        } => run_converge(common, m, dt, *ref_m, *ref_dt, *intervals, *threads),
        Command::Mms(c) => run_mms(c),
        Command::Unique { common, delta } => run_unique(common, *delta),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            println!("[failures]");
            println!("run = {e}");
            2
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Assembly(#[from] crate::assembly::AssemblyError),
    #[error(transparent)]
    Problem(#[from] crate::problem::ProblemError),
    #[error(transparent)]
    Diagnostics(#[from] diagnostics::DiagnosticsError),
    #[error("solve failed: {0}")]
    Solve(#[from] crate::integrate::SolveError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("--m and --dt lists must be nonempty")]
    EmptyLists,
}

/// Everything shared by the subcommands after config resolution.
struct Prepared {
    config_name: String,
    spec: ProblemSpec<f64>,
    settings: RunSettings,
    hash: String,
    out_dir: PathBuf,
    prefix: String,
}

fn resolve_config(common: &Common) -> Result<(Config, String), ConfigError> {
    let path = Path::new(&common.config);
    let (mut config, name) = if path.exists() {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".to_owned());
        (load_config(path)?, stem)
    } else {
        (preset(&common.config)?, common.config.clone())
    };
    if let Some(k) = common.k {
        config.set("approx", "k", &k.to_string());
    }
    if let Some(j) = common.j {
        config.set("approx", "j", &format_float(j));
    }
    if let Some(out) = &common.out {
        config.set("output", "dir", out);
    }
    Ok((config, name))
}

fn prepare(common: &Common) -> Result<Prepared, CliError> {
    let (config, name) = resolve_config(common)?;
    let hash = hex_digest(&config.hash_text());
    let (spec, settings) = config.build()?;
    let out_dir = PathBuf::from(&settings.out_dir);
    let prefix = settings.prefix.clone().unwrap_or_else(|| name.clone());
    Ok(Prepared {
        config_name: name,
        spec,
        settings,
        hash,
        out_dir,
        prefix,
    })
}

fn hex_digest(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn base_manifest(p: &Prepared, subcommand: &str) -> Manifest {
    let mut m = Manifest::new();
    m.put("artifact", "galwave");
    m.put("version", env!("CARGO_PKG_VERSION"));
    m.put("subcommand", subcommand);
    m.put("config", &p.config_name);
    m.put("config_hash", &p.hash);
    m.put("integrator", p.settings.integrator.name());
    m.put_float("dt", p.settings.dt);
    m.put("m", p.settings.m.to_string());
    m
}

fn finish(
    p: &Prepared,
    mut manifest: Manifest,
    started: Instant,
    failures: Vec<(String, String)>,
) -> Result<i32, CliError> {
    manifest.put(
        "wall_time_s",
        format!("{:.3}", started.elapsed().as_secs_f64()),
    );
    let pass = manifest.all_checks_pass() && failures.is_empty();
    let path = p.out_dir.join(format!("{}_manifest.txt", p.prefix));
    write_atomic(&path, &manifest.render())?;
    println!("manifest: {}", path.display());
    if !pass {
        println!("[failures]");
        for (k, v) in &failures {
            println!("{k} = {v}");
        }
        return Ok(1);
    }
    Ok(0)
}

fn run_validation(
    p: &Prepared,
    manifest: &mut Manifest,
    failures: &mut Vec<(String, String)>,
) -> Result<bool, CliError> {
    let grid = ValidationGrid {
        sign_range: p.settings.sign_range,
        sign_samples: p.settings.sign_samples,
        ..ValidationGrid::default()
    };
    let report = validate(&p.spec, &grid)?;
    print!("{report}");
    manifest.put_check("validate", report.passed);
    if !report.passed {
        failures.push(("validate".to_owned(), "structural assumptions violated".to_owned()));
    }
    Ok(report.passed)
}

fn build_system(p: &Prepared) -> Result<GalerkinSystem<f64>, CliError> {
    Ok(GalerkinSystem::new(
        p.spec.clone(),
        p.settings.m,
        p.settings.quad_order,
        crate::assembly::default_sup_resolution(),
    )?)
}

fn solve_options(p: &Prepared) -> SolveOptions<f64> {
    SolveOptions {
        integrator: p.settings.integrator,
        dt: p.settings.dt,
        sample_every: p.settings.sample_every,
        newton: p.settings.newton,
    }
}

fn run_trajectory(
    p: &Prepared,
    sys: &GalerkinSystem<f64>,
    manifest: &mut Manifest,
    failures: &mut Vec<(String, String)>,
) -> Result<Option<Trajectory<f64>>, CliError> {
    let state0 = initial_state(sys, None)?;
    let (pe0, pe1) = initial_projection_error(sys, &state0)?;
    manifest.put_float("projection_error_u0_h", pe0);
    manifest.put_float("projection_error_u1_h", pe1);
    match solve(sys, &solve_options(p)) {
        Ok(traj) => {
            manifest.put("steps", traj.meta.steps.to_string());
            manifest.put(
                "newton_iterations_total",
                traj.meta.newton_iterations_total.to_string(),
            );
            manifest.put(
                "newton_iterations_max",
                traj.meta.newton_iterations_max.to_string(),
            );
            manifest.put_check("solve", true);
            Ok(Some(traj))
        }
        Err(failure) => {
            manifest.put_check("solve", false);
            failures.push(("solve".to_owned(), failure.error.to_string()));
            // keep the partial trajectory for post-mortem output
            let path = p.out_dir.join(format!("{}_trajectory.csv", p.prefix));
            write_atomic(&path, &output::trajectory_csv(&failure.partial))?;
            Ok(None)
        }
    }
}

fn run_validate(common: &Common) -> Result<i32, CliError> {
    let started = Instant::now();
    let p = prepare(common)?;
    let mut manifest = base_manifest(&p, "validate");
    let mut failures = Vec::new();
    run_validation(&p, &mut manifest, &mut failures)?;
    finish(&p, manifest, started, failures)
}

fn run_solve(common: &Common) -> Result<i32, CliError> {
    let started = Instant::now();
    let p = prepare(common)?;
    let mut manifest = base_manifest(&p, "solve");
    let mut failures = Vec::new();
    if run_validation(&p, &mut manifest, &mut failures)? {
        let sys = build_system(&p)?;
        if let Some(traj) = run_trajectory(&p, &sys, &mut manifest, &mut failures)? {
            let path = p.out_dir.join(format!("{}_trajectory.csv", p.prefix));
            write_atomic(&path, &output::trajectory_csv(&traj))?;
            manifest.put("output.trajectory", path.display().to_string());
            println!("trajectory: {} ({} samples)", path.display(), traj.states.len());
        }
    }
    finish(&p, manifest, started, failures)
}

fn run_energy(common: &Common) -> Result<i32, CliError> {
    let started = Instant::now();
    let p = prepare(common)?;
    let mut manifest = base_manifest(&p, "energy");
    let mut failures = Vec::new();
    if run_validation(&p, &mut manifest, &mut failures)? {
        let sys = build_system(&p)?;
        if let Some(traj) = run_trajectory(&p, &sys, &mut manifest, &mut failures)? {
            let records = energy_series(&sys, &traj, true, true)?;
            let path = p.out_dir.join(format!("{}_energy.csv", p.prefix));
            write_atomic(&path, &output::energy_csv(&records))?;
            manifest.put("output.energy", path.display().to_string());

            let report = gronwall_check(&sys, &traj)?;
            let path = p.out_dir.join(format!("{}_bound.csv", p.prefix));
            write_atomic(&path, &output::bound_csv(&report))?;
            manifest.put("output.bound", path.display().to_string());
            manifest.put_float("lip_used", report.lip_used);
            manifest.put_float("worst_margin", report.worst_margin);
            manifest.put_check("gronwall", report.passed);
            if let Some(note) = &report.note {
                failures.push(("gronwall".to_owned(), note.clone()));
            }
            println!(
                "energy: {} samples, worst margin {}",
                report.samples.len(),
                format_float(report.worst_margin)
            );
        }
    }
    finish(&p, manifest, started, failures)
}

#[allow(clippy::too_many_arguments)]
fn run_converge(
    common: &Common,
    m_list: &[usize],
    dt_list: &[f64],
    ref_m: Option<usize>,
    ref_dt: Option<f64>,
    intervals: usize,
    threads: usize,
) -> Result<i32, CliError> {
    let started = Instant::now();
    let p = prepare(common)?;
    let mut manifest = base_manifest(&p, "converge");
    let mut failures = Vec::new();
    if m_list.is_empty() || dt_list.is_empty() {
        return Err(CliError::EmptyLists);
    }
    if run_validation(&p, &mut manifest, &mut failures)? {
        let reference = Reference::SelfRef {
            m: ref_m.unwrap_or_else(|| *m_list.iter().max().unwrap()),
            dt: ref_dt.unwrap_or_else(|| dt_list.iter().cloned().fold(f64::INFINITY, f64::min)),
        };
        let opts = StudyOptions {
            integrator: p.settings.integrator,
            newton: p.settings.newton,
            comparison_intervals: intervals,
            threads,
            quad_order: p.settings.quad_order,
            sup_resolution: crate::assembly::default_sup_resolution(),
        };
        match diagnostics::convergence_study(&p.spec, m_list, dt_list, &reference, &opts) {
            Ok(table) => {
                let path = p.out_dir.join(format!("{}_convergence.csv", p.prefix));
                write_atomic(&path, &output::convergence_csv(&table))?;
                manifest.put("output.convergence", path.display().to_string());
                manifest.put("rows", table.rows.len().to_string());
                manifest.put_check("converge", true);
                println!("convergence table: {}", path.display());
            }
            Err(e) => {
                manifest.put_check("converge", false);
                failures.push(("converge".to_owned(), e.to_string()));
            }
        }
    }
    finish(&p, manifest, started, failures)
}

/// The canonical manufactured target `(1 + t^2) u0 + t u1`: it matches both
/// initial conditions and inherits the boundary behaviour of the data.
fn mms_target(spec: &ProblemSpec<f64>) -> Expr {
    let envelope = parse("1 + t^2").expect("static expression");
    let mut target = Expr::Bin(
        BinOp::Mul,
        Box::new(envelope),
        Box::new(spec.initial.u0.clone()),
    );
    if !spec.initial.u1.is_zero_literal() {
        let drift = Expr::Bin(
            BinOp::Mul,
            Box::new(Expr::Var(Var::T)),
            Box::new(spec.initial.u1.clone()),
        );
        target = Expr::Bin(BinOp::Add, Box::new(target), Box::new(drift));
    }
    target
}

fn run_mms(common: &Common) -> Result<i32, CliError> {
    let started = Instant::now();
    let mut p = prepare(common)?;
    let mut manifest = base_manifest(&p, "mms");
    let mut failures = Vec::new();
    if run_validation(&p, &mut manifest, &mut failures)? {
        let target = mms_target(&p.spec);
        manifest.put("mms_target", target.to_string());
        let sources = mms_source(&p.spec, &target)?;
        p.spec.sources = sources;
        let sys = build_system(&p)?;
        if let Some(traj) = run_trajectory(&p, &sys, &mut manifest, &mut failures)? {
            let path = p.out_dir.join(format!("{}_trajectory.csv", p.prefix));
            write_atomic(&path, &output::trajectory_csv(&traj))?;
            manifest.put("output.trajectory", path.display().to_string());
            let (err_h, err_v) = diagnostics::errors_vs_exact(&sys, &traj, &target)?;
            manifest.put_float("mms_err_h", err_h);
            manifest.put_float("mms_err_v", err_v);
            manifest.put_check("mms", err_h.is_finite() && err_v.is_finite());
            println!(
                "mms: max H error {}, max V error {}",
                format_float(err_h),
                format_float(err_v)
            );
        }
    }
    finish(&p, manifest, started, failures)
}

fn run_unique(common: &Common, delta: f64) -> Result<i32, CliError> {
    let started = Instant::now();
    let p = prepare(common)?;
    let mut manifest = base_manifest(&p, "unique");
    let mut failures = Vec::new();
    if run_validation(&p, &mut manifest, &mut failures)? {
        let sys = build_system(&p)?;
        match uniqueness_probe(&sys, &solve_options(&p), delta) {
            Ok(probe) => {
                let path = p.out_dir.join(format!("{}_unique.csv", p.prefix));
                write_atomic(&path, &output::probe_csv(&probe))?;
                manifest.put("output.unique", path.display().to_string());
                manifest.put_float("delta", delta);
                manifest.put_float("ratio", probe.ratio);
                manifest.put_check("unique", probe.ratio.is_finite());
                println!("unique: ratio r(delta) = {}", format_float(probe.ratio));
            }
            Err(e) => {
                manifest.put_check("unique", false);
                failures.push(("unique".to_owned(), e.to_string()));
            }
        }
    }
    finish(&p, manifest, started, failures)
}
