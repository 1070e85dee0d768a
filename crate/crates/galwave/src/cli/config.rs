//! Line-oriented `key = value` configuration under `[section]` headers, the
//! preset catalog, and conversion to a full problem specification.
//!
//! Sections and keys are a closed schema: unknown sections, unknown keys and
//! duplicate keys are rejected with line numbers. Expression values use the
//! expression language; matrix entries are keyed `A_s.11`, `A_s.12`, ...,
//! vector entries `b.1`, ...; explicit derivative expressions carry the
//! suffixes `_dt` and `_dx1..` on the same keys.

use crate::basis::BoxDomain;
use crate::exprlang::{parse, Expr, Var};
use crate::integrate::{Integrator, NewtonParams};
use crate::problem::{
    lipschitz_approx, AntisymmetricMatrixField, CoefficientSet, FieldExpr, InitialData,
    NonlinearitySpec, ProblemSpec, SourceField, SourceSet, SymmetricMatrixField, VectorField,
};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected `key = value` or `[section]`")]
    Malformed { line: usize },
    #[error("line {line}: unknown section `[{name}]`")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: key `{key}` outside any section")]
    KeyOutsideSection { line: usize, key: String },
    #[error("line {line}: duplicate key `{section}.{key}`")]
    DuplicateKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("line {line}: unknown key `{section}.{key}`")]
    UnknownKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("missing required key `{section}.{key}`")]
    MissingKey { section: String, key: String },
    #[error("key `{section}.{key}`: {message}")]
    BadValue {
        section: String,
        key: String,
        message: String,
    },
    #[error("key `{section}.{key}`: {source}")]
    BadExpression {
        section: String,
        key: String,
        source: crate::exprlang::ParseError,
    },
    #[error("unknown preset `{0}` (available: {1})")]
    UnknownPreset(String, String),
    #[error(transparent)]
    Domain(#[from] crate::basis::BasisError),
    #[error(transparent)]
    Problem(#[from] crate::problem::ProblemError),
}

pub const SECTIONS: [&str; 9] = [
    "domain",
    "basis",
    "coefficients",
    "nonlinearity",
    "sources",
    "initial",
    "time",
    "output",
    "approx",
];

pub const PRESETS: [&str; 5] = [
    "eigenmode1d",
    "bump1d",
    "sec4_1d_p1",
    "sec4_2d_antisym",
    "nonlipschitz_sqrt",
];

/// Parsed configuration: section -> key -> (value, line).
#[derive(Debug, Clone, Default)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, (String, usize)>>,
}

impl Config {
    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .get(section)
            .and_then(|s| s.get(key))
            .map(|(v, _)| v.as_str())
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) {
        self.sections
            .entry(section.to_owned())
            .or_default()
            .insert(key.to_owned(), (value.to_owned(), 0));
    }

    pub fn remove(&mut self, section: &str, key: &str) {
        if let Some(s) = self.sections.get_mut(section) {
            s.remove(key);
        }
    }

    /// Canonical text form: sections in schema order, keys sorted; this is
    /// what the run manifest hashes.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for &section in SECTIONS.iter() {
            if let Some(keys) = self.sections.get(section) {
                if keys.is_empty() {
                    continue;
                }
                let _ = writeln!(out, "[{section}]");
                for (key, (value, _)) in keys {
                    let _ = writeln!(out, "{key} = {value}");
                }
                let _ = writeln!(out);
            }
        }
        out
    }

    /// Canonical text of the computation-defining sections only; the
    /// `[output]` section names where results go, not what is computed, so
    /// it stays out of the run hash.
    pub fn hash_text(&self) -> String {
        let mut pruned = self.clone();
        pruned.sections.remove("output");
        pruned.canonical_text()
    }
}

/// Parses config text; strict on structure but schema checks happen in
/// [`Config::build`].
pub fn parse_config(text: &str) -> Result<Config, ConfigError> {
    let mut config = Config::default();
    let mut current: Option<String> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or(ConfigError::Malformed { line: line_no })?
                .trim()
                .to_owned();
            if !SECTIONS.contains(&name.as_str()) {
                return Err(ConfigError::UnknownSection {
                    line: line_no,
                    name,
                });
            }
            current = Some(name.clone());
            config.sections.entry(name).or_default();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or(ConfigError::Malformed { line: line_no })?;
        let key = key.trim().to_owned();
        let value = value.trim().to_owned();
        let section = current.clone().ok_or(ConfigError::KeyOutsideSection {
            line: line_no,
            key: key.clone(),
        })?;
        let entry = config.sections.get_mut(&section).unwrap();
        if entry.contains_key(&key) {
            return Err(ConfigError::DuplicateKey {
                line: line_no,
                section,
                key,
            });
        }
        entry.insert(key, (value, line_no));
    }
    Ok(config)
}

/// Loads a config file.
pub fn load_config(path: &Path) -> Result<Config, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

/// Returns a built-in preset configuration.
pub fn preset(name: &str) -> Result<Config, ConfigError> {
    let mut c = Config::default();
    let mut put = |triples: &[(&str, &str, &str)]| {
        for (s, k, v) in triples {
            c.set(s, k, v);
        }
    };
    const PI: &str = "3.141592653589793";
    match name {
        // constant-coefficient eigenmode of the Dirichlet Laplacian
        "eigenmode1d" => put(&[
            ("domain", "dim", "1"),
            ("domain", "L1", "1"),
            ("basis", "m", "4"),
            ("coefficients", "alpha", "1"),
            ("coefficients", "rho", "1"),
            ("coefficients", "A_s.11", "1"),
            ("nonlinearity", "kind", "zero"),
            ("initial", "u0", &format!("sin({PI}*x)")),
            ("initial", "u1", "0"),
            ("time", "T", "1"),
            ("time", "dt", "0.001"),
        ]),
        // smooth bump, exercises the spectral decay of the projection
        "bump1d" => put(&[
            ("domain", "dim", "1"),
            ("domain", "L1", "1"),
            ("basis", "m", "8"),
            ("coefficients", "alpha", "1"),
            ("coefficients", "rho", "1"),
            ("coefficients", "A_s.11", "1"),
            ("nonlinearity", "kind", "zero"),
            ("initial", "u0", "x*(1-x)"),
            ("initial", "u1", "0"),
            ("time", "T", "1"),
            ("time", "dt", "0.001"),
        ]),
        // the worked 1-d example: time-varying mass, graded stiffness,
        // convection, reaction and the p = 1 power nonlinearity
        "sec4_1d_p1" => put(&[
            ("domain", "dim", "1"),
            ("domain", "L1", "1"),
            ("basis", "m", "4"),
            ("coefficients", "alpha", "0.5"),
            ("coefficients", "rho", "1 + 0.5*sin(t)"),
            ("coefficients", "rho_dt", "0.5*cos(t)"),
            ("coefficients", "A_s.11", "1 + 0.25*x"),
            ("coefficients", "b.1", "0.3"),
            ("coefficients", "c", "1"),
            ("nonlinearity", "kind", "power"),
            ("nonlinearity", "p", "1"),
            ("initial", "u0", "0.1*x*(1-x)"),
            ("initial", "u1", "0"),
            ("time", "T", "1"),
            ("time", "dt", "0.001"),
        ]),
        // 2-d with an antisymmetric principal part, exercising div A_a
        "sec4_2d_antisym" => put(&[
            ("domain", "dim", "2"),
            ("domain", "L1", "1"),
            ("domain", "L2", "1"),
            ("basis", "m", "4"),
            ("coefficients", "alpha", "1"),
            ("coefficients", "rho", "1"),
            ("coefficients", "A_s.11", "1"),
            ("coefficients", "A_s.22", "1"),
            ("coefficients", "A_a.12", "0.2*x"),
            ("coefficients", "A_a.12_dx1", "0.2"),
            ("coefficients", "A_a.12_dx2", "0"),
            ("nonlinearity", "kind", "zero"),
            ("initial", "u0", "x*(1-x)*y*(1-y)"),
            ("initial", "u1", "0"),
            ("time", "T", "1"),
            ("time", "dt", "0.001"),
        ]),
        // merely continuous nonlinearity: runs through the Lipschitz
        // approximation F_k, hence approx.k ships with the preset
        "nonlipschitz_sqrt" => put(&[
            ("domain", "dim", "1"),
            ("domain", "L1", "1"),
            ("basis", "m", "8"),
            ("coefficients", "alpha", "1"),
            ("coefficients", "rho", "1"),
            ("coefficients", "A_s.11", "1"),
            ("nonlinearity", "kind", "expr"),
            ("nonlinearity", "f", "sign(z)*sqrt(abs(z))"),
            ("initial", "u0", "x*(1-x)"),
            ("initial", "u1", "0"),
            ("time", "T", "1"),
            ("time", "dt", "0.001"),
            ("approx", "k", "256"),
        ]),
        _ => {
            return Err(ConfigError::UnknownPreset(
                name.to_owned(),
                PRESETS.join(", "),
            ))
        }
    }
    Ok(c)
}

/// Run parameters extracted alongside the problem.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub m: usize,
    pub quad_order: Option<usize>,
    pub dt: f64,
    pub integrator: Integrator,
    pub newton: NewtonParams<f64>,
    pub sample_every: usize,
    pub out_dir: String,
    pub prefix: Option<String>,
    pub approx_k: Option<usize>,
    /// Sign-condition sampling range [-R, R] and count for validation.
    pub sign_range: f64,
    pub sign_samples: usize,
}

// -- schema helpers ----------------------------------------------------------

struct Reader<'c> {
    config: &'c Config,
    used: BTreeMap<String, Vec<String>>,
}

impl<'c> Reader<'c> {
    fn new(config: &'c Config) -> Self {
        Reader {
            config,
            used: BTreeMap::new(),
        }
    }

    fn mark(&mut self, section: &str, key: &str) {
        self.used
            .entry(section.to_owned())
            .or_default()
            .push(key.to_owned());
    }

    fn optional(&mut self, section: &str, key: &str) -> Option<String> {
        let v = self.config.get(section, key).map(str::to_owned);
        if v.is_some() {
            self.mark(section, key);
        }
        v
    }

    fn required(&mut self, section: &str, key: &str) -> Result<String, ConfigError> {
        self.optional(section, key)
            .ok_or_else(|| ConfigError::MissingKey {
                section: section.to_owned(),
                key: key.to_owned(),
            })
    }

    fn number(&mut self, section: &str, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.optional(section, key) {
            None => Ok(None),
            Some(v) => v
                .parse::<f64>()
                .map(Some)
                .map_err(|_| ConfigError::BadValue {
                    section: section.to_owned(),
                    key: key.to_owned(),
                    message: format!("`{v}` is not a number"),
                }),
        }
    }

    fn integer(&mut self, section: &str, key: &str) -> Result<Option<usize>, ConfigError> {
        match self.optional(section, key) {
            None => Ok(None),
            Some(v) => v
                .parse::<usize>()
                .map(Some)
                .map_err(|_| ConfigError::BadValue {
                    section: section.to_owned(),
                    key: key.to_owned(),
                    message: format!("`{v}` is not a nonnegative integer"),
                }),
        }
    }

    fn expr(
        &mut self,
        section: &str,
        key: &str,
        text: &str,
        dim: usize,
        allow_t: bool,
        nonlinearity_arg: bool,
    ) -> Result<Expr, ConfigError> {
        let expr = parse(text).map_err(|source| ConfigError::BadExpression {
            section: section.to_owned(),
            key: key.to_owned(),
            source,
        })?;
        let used = expr.vars_used();
        let bad = |message: &str| ConfigError::BadValue {
            section: section.to_owned(),
            key: key.to_owned(),
            message: message.to_owned(),
        };
        if nonlinearity_arg {
            if used[Var::T as usize] || used[Var::X as usize] || used[Var::Y as usize] {
                return Err(bad("nonlinearity expressions may only use the variable z"));
            }
        } else {
            if used[Var::T as usize] && !allow_t {
                return Err(bad("initial data must not depend on t"));
            }
            if used[Var::Y as usize] && dim < 2 {
                return Err(bad("uses y but the domain dimension is < 2"));
            }
            if used[Var::Z as usize] && dim < 3 {
                return Err(bad("uses z but the domain dimension is < 3"));
            }
        }
        Ok(expr)
    }

    fn field(
        &mut self,
        section: &str,
        key: &str,
        dim: usize,
        allow_t: bool,
    ) -> Result<Option<FieldExpr>, ConfigError> {
        let Some(text) = self.optional(section, key) else {
            return Ok(None);
        };
        let mut field = FieldExpr::new(self.expr(section, key, &text, dim, allow_t, false)?);
        let dt_key = format!("{key}_dt");
        if let Some(dt_text) = self.optional(section, &dt_key) {
            field.dt = Some(self.expr(section, &dt_key, &dt_text, dim, allow_t, false)?);
        }
        for axis in 0..dim {
            let dx_key = format!("{key}_dx{}", axis + 1);
            if let Some(dx_text) = self.optional(section, &dx_key) {
                field.dx[axis] = Some(self.expr(section, &dx_key, &dx_text, dim, allow_t, false)?);
            }
        }
        Ok(field.into())
    }

    /// After reading the schema, any untouched key is unknown.
    fn reject_unknown(&self) -> Result<(), ConfigError> {
        for (section, keys) in &self.config.sections {
            let used = self.used.get(section);
            for (key, (_, line)) in keys {
                let known = used.map(|u| u.contains(key)).unwrap_or(false);
                if !known {
                    return Err(ConfigError::UnknownKey {
                        line: *line,
                        section: section.clone(),
                        key: key.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

impl Config {
    /// Builds the problem spec and run settings, applying the approximation
    /// pipeline (`approx.k` wraps the nonlinearity in `F_k`, `approx.j` sets
    /// the initial truncation level).
    pub fn build(&self) -> Result<(ProblemSpec<f64>, RunSettings), ConfigError> {
        let mut r = Reader::new(self);

        // [domain]
        let dim_raw = r.required("domain", "dim")?;
        let dim: usize = dim_raw.parse().map_err(|_| ConfigError::BadValue {
            section: "domain".into(),
            key: "dim".into(),
            message: format!("`{dim_raw}` is not an integer"),
        })?;
        if !(1..=3).contains(&dim) {
            return Err(ConfigError::BadValue {
                section: "domain".into(),
                key: "dim".into(),
                message: "dimension must be 1, 2 or 3".into(),
            });
        }
        let mut lengths = Vec::with_capacity(dim);
        for i in 1..=dim {
            let key = format!("L{i}");
            let text = r.required("domain", &key)?;
            let v: f64 = text.parse().map_err(|_| ConfigError::BadValue {
                section: "domain".into(),
                key: key.clone(),
                message: format!("`{text}` is not a number"),
            })?;
            lengths.push(v);
        }
        let domain = BoxDomain::new(&lengths)?;

        // [basis]
        let m_raw = r.required("basis", "m")?;
        let m: usize = m_raw.parse().map_err(|_| ConfigError::BadValue {
            section: "basis".into(),
            key: "m".into(),
            message: format!("`{m_raw}` is not an integer"),
        })?;
        if m == 0 {
            return Err(ConfigError::BadValue {
                section: "basis".into(),
                key: "m".into(),
                message: "basis size must be at least 1".into(),
            });
        }
        let quad_order = r.integer("basis", "quad_order")?;

        // [coefficients]
        let alpha = r.number("coefficients", "alpha")?.unwrap_or(1.0);
        if alpha <= 0.0 {
            return Err(ConfigError::BadValue {
                section: "coefficients".into(),
                key: "alpha".into(),
                message: "the coercivity constant alpha must be positive".into(),
            });
        }
        let rho = r
            .field("coefficients", "rho", dim, true)?
            .ok_or_else(|| ConfigError::MissingKey {
                section: "coefficients".into(),
                key: "rho".into(),
            })?;
        let mut a_sym = SymmetricMatrixField::identity(dim);
        for i in 1..=dim {
            for j in 1..=dim {
                let key = format!("A_s.{i}{j}");
                if j < i {
                    if self.get("coefficients", &key).is_some() {
                        return Err(ConfigError::BadValue {
                            section: "coefficients".into(),
                            key,
                            message: "specify the upper triangle of A_s only".into(),
                        });
                    }
                    continue;
                }
                if i == j {
                    // diagonal entries are required
                    let text = r.required("coefficients", &key)?;
                    let mut f =
                        FieldExpr::new(r.expr("coefficients", &key, &text, dim, true, false)?);
                    let dt_key = format!("{key}_dt");
                    if let Some(dt_text) = r.optional("coefficients", &dt_key) {
                        f.dt =
                            Some(r.expr("coefficients", &dt_key, &dt_text, dim, true, false)?);
                    }
                    *a_sym.entry_mut(i - 1, j - 1) = f;
                } else if let Some(f) = r.field("coefficients", &key, dim, true)? {
                    *a_sym.entry_mut(i - 1, j - 1) = f;
                } else {
                    *a_sym.entry_mut(i - 1, j - 1) = FieldExpr::zero();
                }
            }
        }
        let mut a_anti = AntisymmetricMatrixField::zero(dim);
        for i in 1..=dim {
            for j in 1..=dim {
                let key = format!("A_a.{i}{j}");
                if j <= i {
                    if self.get("coefficients", &key).is_some() {
                        return Err(ConfigError::BadValue {
                            section: "coefficients".into(),
                            key,
                            message: "specify the strict upper triangle of A_a only".into(),
                        });
                    }
                    continue;
                }
                if let Some(f) = r.field("coefficients", &key, dim, true)? {
                    *a_anti.entry_mut(i - 1, j - 1) = f;
                }
            }
        }
        let mut b = VectorField::zero(dim);
        for kidx in 1..=dim {
            let key = format!("b.{kidx}");
            if let Some(f) = r.field("coefficients", &key, dim, true)? {
                b.comps[kidx - 1] = f;
            }
        }
        let c = r
            .field("coefficients", "c", dim, true)?
            .unwrap_or_else(FieldExpr::zero);

        // [nonlinearity]
        let kind = r
            .optional("nonlinearity", "kind")
            .unwrap_or_else(|| "zero".to_owned());
        let lip = r.number("nonlinearity", "lip")?;
        let sign_range = r.number("nonlinearity", "sign_range")?.unwrap_or(16.0);
        let sign_samples = r.integer("nonlinearity", "sign_samples")?.unwrap_or(10001);
        let mut nonlinearity = match kind.as_str() {
            "zero" => NonlinearitySpec::zero(),
            "power" => {
                let p = r.number("nonlinearity", "p")?.ok_or_else(|| {
                    ConfigError::MissingKey {
                        section: "nonlinearity".into(),
                        key: "p".into(),
                    }
                })?;
                if p <= 0.0 {
                    return Err(ConfigError::BadValue {
                        section: "nonlinearity".into(),
                        key: "p".into(),
                        message: "the growth exponent p must be positive".into(),
                    });
                }
                NonlinearitySpec::power(p)
            }
            "expr" => {
                let text = r.required("nonlinearity", "f")?;
                let expr = r.expr("nonlinearity", "f", &text, dim, false, true)?;
                NonlinearitySpec::formula(expr, lip)
            }
            other => {
                return Err(ConfigError::BadValue {
                    section: "nonlinearity".into(),
                    key: "kind".into(),
                    message: format!("unknown kind `{other}` (zero, power, expr)"),
                })
            }
        };
        if kind != "expr" {
            if let Some(lip) = lip {
                nonlinearity.lip = Some(lip);
            }
        }

        // [sources]
        let f_src = r
            .field("sources", "f", dim, true)?
            .unwrap_or_else(FieldExpr::zero);
        let g0 = r
            .field("sources", "g0", dim, true)?
            .unwrap_or_else(FieldExpr::zero);
        let mut gvec = VectorField::zero(dim);
        for kidx in 1..=dim {
            let key = format!("gvec.{kidx}");
            if let Some(f) = r.field("sources", &key, dim, true)? {
                gvec.comps[kidx - 1] = f;
            }
        }
        let sources = SourceSet {
            f: SourceField::Formula(f_src),
            g0,
            gvec,
        };

        // [initial]
        let u0_text = r.required("initial", "u0")?;
        let u0 = r.expr("initial", "u0", &u0_text, dim, false, false)?;
        let u1_text = r.required("initial", "u1")?;
        let u1 = r.expr("initial", "u1", &u1_text, dim, false, false)?;

        // [time]
        let horizon = r.number("time", "T")?.ok_or_else(|| ConfigError::MissingKey {
            section: "time".into(),
            key: "T".into(),
        })?;
        let dt = r.number("time", "dt")?.ok_or_else(|| ConfigError::MissingKey {
            section: "time".into(),
            key: "dt".into(),
        })?;
        if horizon <= 0.0 || dt <= 0.0 {
            return Err(ConfigError::BadValue {
                section: "time".into(),
                key: "T".into(),
                message: "the horizon T and step dt must be positive".into(),
            });
        }
        let newton_tol = r.number("time", "newton_tol")?.unwrap_or(1e-12);
        let max_iter = r.integer("time", "max_iter")?.unwrap_or(25);
        let sample_every = r.integer("time", "sample_every")?.unwrap_or(1);
        let integrator = match r.optional("time", "integrator").as_deref() {
            None | Some("midpoint") => Integrator::ImplicitMidpoint,
            Some("rk4") => Integrator::Rk4,
            Some(other) => {
                return Err(ConfigError::BadValue {
                    section: "time".into(),
                    key: "integrator".into(),
                    message: format!("unknown integrator `{other}` (midpoint, rk4)"),
                })
            }
        };

        // [output]
        let out_dir = r
            .optional("output", "dir")
            .unwrap_or_else(|| "out".to_owned());
        let prefix = r.optional("output", "prefix");

        // [approx]
        let approx_k = r.integer("approx", "k")?;
        let trunc_j = r.number("approx", "j")?;
        if let Some(j) = trunc_j {
            if j <= 0.0 {
                return Err(ConfigError::BadValue {
                    section: "approx".into(),
                    key: "j".into(),
                    message: "the truncation level j must be positive".into(),
                });
            }
        }

        r.reject_unknown()?;

        if let Some(k) = approx_k {
            nonlinearity = lipschitz_approx(&nonlinearity, k)?;
        }

        let spec = ProblemSpec {
            domain,
            coefficients: CoefficientSet {
                rho,
                a_sym,
                a_anti,
                b,
                c,
            },
            sources,
            nonlinearity,
            initial: InitialData {
                u0,
                u1,
                truncation: trunc_j,
            },
            alpha,
            horizon,
        };
        let settings = RunSettings {
            m,
            quad_order,
            dt,
            integrator,
            newton: NewtonParams {
                tol: newton_tol,
                max_iter,
            },
            sample_every,
            out_dir,
            prefix,
            approx_k,
            sign_range,
            sign_samples,
        };
        Ok((spec, settings))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
[domain]
dim = 1
L1 = 1
[basis]
m = 4
[coefficients]
rho = 1
A_s.11 = 1
[initial]
u0 = sin(3.14159265358979*x)
u1 = 0
[time]
T = 1
dt = 0.001
";

    #[test]
    fn minimal_config_builds() {
        let config = parse_config(MINIMAL).unwrap();
        let (spec, settings) = config.build().unwrap();
        assert_eq!(spec.domain.dim(), 1);
        assert_eq!(settings.m, 4);
        assert_eq!(settings.dt, 0.001);
        assert!(spec.nonlinearity.is_zero());
    }

    #[test]
    fn missing_dt_names_the_key() {
        let text = MINIMAL.replace("dt = 0.001\n", "");
        let config = parse_config(&text).unwrap();
        let err = config.build().unwrap_err();
        assert!(
            matches!(&err, ConfigError::MissingKey { section, key } if section == "time" && key == "dt"),
            "{err}"
        );
    }

    #[test]
    fn power_nonlinearity_section() {
        let text = format!("{MINIMAL}[nonlinearity]\nkind = power\np = 1\n");
        let config = parse_config(&text).unwrap();
        let (spec, _) = config.build().unwrap();
        assert!((spec.nonlinearity.eval(2.0).unwrap() - 4.0).abs() < 1e-15);
        assert_eq!(spec.nonlinearity.growth_p, Some(1.0));
    }

    #[test]
    fn duplicate_and_unknown_are_rejected() {
        let text = format!("{MINIMAL}[time]\nT = 2\n");
        assert!(matches!(
            parse_config(&text).unwrap_err(),
            ConfigError::DuplicateKey { .. }
        ));
        let text = format!("{MINIMAL}[orbit]\nx = 1\n");
        assert!(matches!(
            parse_config(&text).unwrap_err(),
            ConfigError::UnknownSection { .. }
        ));
        let text = format!("{MINIMAL}[basis]\nmm = 3\n");
        let config = parse_config(&text).unwrap();
        assert!(matches!(
            config.build().unwrap_err(),
            ConfigError::UnknownKey { .. }
        ));
    }

    #[test]
    fn lower_triangle_keys_are_rejected() {
        let text = "\
[domain]
dim = 2
L1 = 1
L2 = 1
[basis]
m = 4
[coefficients]
rho = 1
A_s.11 = 1
A_s.22 = 1
A_s.21 = 0.5
[initial]
u0 = x*(1-x)*y*(1-y)
u1 = 0
[time]
T = 1
dt = 0.01
";
        let config = parse_config(text).unwrap();
        let err = config.build().unwrap_err();
        assert!(matches!(err, ConfigError::BadValue { .. }), "{err}");
    }

    #[test]
    fn approx_k_wraps_the_nonlinearity() {
        let mut config = preset("nonlipschitz_sqrt").unwrap();
        let (spec, settings) = config.build().unwrap();
        assert_eq!(settings.approx_k, Some(256));
        assert!(spec.nonlinearity.lip.is_some());
        // without approx.k the raw expression kind remains and has no lip
        config.remove("approx", "k");
        let (spec, settings) = config.build().unwrap();
        assert_eq!(settings.approx_k, None);
        assert!(spec.nonlinearity.lip.is_none());
    }

    #[test]
    fn presets_all_build() {
        for name in PRESETS {
            let config = preset(name).unwrap();
            let built = config.build();
            assert!(built.is_ok(), "{name}: {:?}", built.err());
        }
        assert!(matches!(
            preset("nope"),
            Err(ConfigError::UnknownPreset(..))
        ));
    }

    #[test]
    fn canonical_text_is_stable() {
        let a = preset("eigenmode1d").unwrap().canonical_text();
        let b = preset("eigenmode1d").unwrap().canonical_text();
        assert_eq!(a, b);
        let reparsed = parse_config(&a).unwrap();
        assert_eq!(reparsed.canonical_text(), a);
    }
}
