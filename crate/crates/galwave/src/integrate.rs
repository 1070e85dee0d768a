//! Time integration of the first-order form of the projected system:
//! `d' = e`, `C(t) e' = v(t) - M(t) d - C'(t) e - F(d)`.
//!
//! The default integrator is the implicit midpoint rule, which conserves the
//! quadratic energy of linear constant-coefficient problems exactly and keeps
//! the energy machinery testable; classical RK4 serves as an independent
//! reference. Steps are fixed; a solve is strictly sequential and
//! bit-reproducible.

use crate::assembly::{AssemblyError, GalerkinSystem};
use crate::basis::project_h;
use crate::exprlang::Env;
use crate::problem::{truncate, Nonlinearity, ProblemError};
use crate::scalar::{eps, from_usize, lit, Scalar};
use nalgebra::{DMatrix, DVector, Dyn, LU};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("initial data evaluation failed: {0}")]
    InitialData(#[from] crate::exprlang::EvalError),
    #[error("time step {dt} does not divide the horizon {horizon} within 1e-12")]
    StepDoesNotDivide { dt: f64, horizon: f64 },
    #[error("time step must be positive")]
    NonPositiveStep,
    #[error(
        "Newton iteration did not converge at t = {t}: residual {residual} after {iters} iterations"
    )]
    NewtonDiverged {
        t: f64,
        iters: usize,
        residual: f64,
    },
    #[error(
        "the nonlinearity is an expression without a declared Lipschitz constant; \
         solving requires the Lipschitz approximation F_k (set approx.k or pass --k)"
    )]
    RequiresLipschitzApproximation,
}

/// Galerkin coefficients of `u` (d) and `u'` (e) at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct State<T> {
    pub t: T,
    pub d: DVector<T>,
    pub e: DVector<T>,
}

impl<T: Scalar> State<T> {
    pub fn size(&self) -> usize {
        self.d.len()
    }

    fn combined_norm(&self) -> T {
        let mut acc = T::zero();
        for i in 0..self.d.len() {
            acc += self.d[i] * self.d[i] + self.e[i] * self.e[i];
        }
        acc.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    ImplicitMidpoint,
    Rk4,
}

impl Integrator {
    pub fn name(self) -> &'static str {
        match self {
            Integrator::ImplicitMidpoint => "implicit-midpoint",
            Integrator::Rk4 => "rk4",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonParams<T> {
    pub tol: T,
    pub max_iter: usize,
}

impl<T: Scalar> Default for NewtonParams<T> {
    fn default() -> Self {
        NewtonParams {
            tol: lit(1e-12),
            max_iter: 25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveOptions<T> {
    pub integrator: Integrator,
    pub dt: T,
    /// Record every k-th state (the final state is always recorded).
    pub sample_every: usize,
    pub newton: NewtonParams<T>,
}

/// Integrator bookkeeping carried in a trajectory.
#[derive(Debug, Clone)]
pub struct IntegratorMeta<T> {
    pub name: &'static str,
    pub dt: T,
    pub newton_tol: T,
    pub steps: usize,
    pub newton_iterations_total: usize,
    pub newton_iterations_max: usize,
}

/// Sampled states of one solve; times are strictly increasing from 0 to the
/// horizon. Energy records are attached by the diagnostics layer.
#[derive(Debug, Clone)]
pub struct Trajectory<T> {
    pub states: Vec<State<T>>,
    pub meta: IntegratorMeta<T>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn times(&self) -> Vec<T> {
        self.states.iter().map(|s| s.t).collect()
    }

    pub fn last(&self) -> &State<T> {
        self.states.last().expect("trajectory has at least the initial state")
    }
}

/// A failed solve with the partial trajectory recorded so far.
#[derive(Debug)]
pub struct SolveFailure<T> {
    pub error: SolveError,
    pub partial: Trajectory<T>,
}

// ---------------------------------------------------------------------------
// Initial state
// ---------------------------------------------------------------------------

/// Projects the (optionally truncated) initial data onto `V_m`:
/// `d_j(0) = (xi_j u0, w_j)`, `e_j(0) = (u1, w_j)`.
///
/// `truncation` overrides the level in the problem spec when given.
pub fn initial_state<T: Scalar>(
    sys: &GalerkinSystem<T>,
    truncation: Option<T>,
) -> Result<State<T>, SolveError> {
    let dim = sys.spec().domain.dim();
    let mut u0: Vec<T> = sys
        .rule()
        .nodes()
        .iter()
        .map(|x| sys.spec().initial.u0.eval(&Env::txyz(T::zero(), &x[..dim])))
        .collect::<Result<_, _>>()?;
    if let Some(j) = truncation.or(sys.spec().initial.truncation) {
        u0 = truncate(&u0, j)?;
    }
    let u1: Vec<T> = sys
        .rule()
        .nodes()
        .iter()
        .map(|x| sys.spec().initial.u1.eval(&Env::txyz(T::zero(), &x[..dim])))
        .collect::<Result<_, _>>()?;
    let d = project_h(&u0, sys.basis(), sys.rule()).map_err(AssemblyError::Basis)?;
    let e = project_h(&u1, sys.basis(), sys.rule()).map_err(AssemblyError::Basis)?;
    Ok(State {
        t: T::zero(),
        d,
        e,
    })
}

/// H-norm distance between the initial data and its projection onto `V_m`,
/// for the (u0, u1) pair; reported as the basis-substitution diagnostic.
pub fn initial_projection_error<T: Scalar>(
    sys: &GalerkinSystem<T>,
    state: &State<T>,
) -> Result<(T, T), SolveError> {
    let dim = sys.spec().domain.dim();
    let err = |expr: &crate::exprlang::Expr, coeff: &DVector<T>| -> Result<T, SolveError> {
        let samples: Vec<T> = sys
            .rule()
            .nodes()
            .iter()
            .map(|x| expr.eval(&Env::txyz(T::zero(), &x[..dim])))
            .collect::<Result<_, _>>()?;
        let sq: Vec<T> = samples.iter().map(|&v| v * v).collect();
        let full = sys.rule().integrate(&sq).map_err(AssemblyError::Basis)?;
        let mut proj = T::zero();
        for i in 0..coeff.len() {
            proj += coeff[i] * coeff[i];
        }
        Ok((full - proj).max(T::zero()).sqrt())
    };
    Ok((
        err(&sys.spec().initial.u0, &state.d)?,
        err(&sys.spec().initial.u1, &state.e)?,
    ))
}

// ---------------------------------------------------------------------------
// Right-hand side
// ---------------------------------------------------------------------------

/// Evaluates `(d', e')` of the first-order system at `(t, state)`; the mass
/// solve uses the Cholesky factorization of `C(t)`.
pub fn rhs<T: Scalar>(
    sys: &GalerkinSystem<T>,
    t: T,
    state: &State<T>,
) -> Result<(DVector<T>, DVector<T>), SolveError> {
    let chol = sys.cholesky_c(t)?;
    let (m, _) = sys.assemble_m(t)?;
    let v = sys.assemble_load(t)?;
    let cdt = sys.assemble_c_dt(t)?;
    let fv = sys.assemble_nonlinear(&state.d)?;
    let mut e_dot = v;
    e_dot -= &m * &state.d;
    e_dot -= &cdt * &state.e;
    e_dot -= fv;
    chol.solve_mut(&mut e_dot);
    Ok((state.e.clone(), e_dot))
}

// ---------------------------------------------------------------------------
// Implicit midpoint
// ---------------------------------------------------------------------------

/// Matrices of the projected system frozen at one midpoint time.
struct MidpointData<T: Scalar> {
    c: DMatrix<T>,
    m: DMatrix<T>,
    cdt: DMatrix<T>,
    v: DVector<T>,
    jf: Option<DMatrix<T>>,
    schur: LU<T, Dyn, Dyn>,
    dt: T,
}

fn nonlinear_jacobian_fd<T: Scalar>(
    sys: &GalerkinSystem<T>,
    d: &DVector<T>,
) -> Result<DMatrix<T>, SolveError> {
    let m = d.len();
    let base = sys.assemble_nonlinear(d)?;
    let mut jf = DMatrix::zeros(m, m);
    let root_eps = eps::<T>().sqrt();
    let mut bumped = d.clone();
    for i in 0..m {
        let step = root_eps * (T::one() + d[i].abs());
        bumped[i] = d[i] + step;
        let shifted = sys.assemble_nonlinear(&bumped)?;
        for r in 0..m {
            jf[(r, i)] = (shifted[r] - base[r]) / step;
        }
        bumped[i] = d[i];
    }
    Ok(jf)
}

impl<T: Scalar> MidpointData<T> {
    fn build(
        sys: &GalerkinSystem<T>,
        t_mid: T,
        dt: T,
        d_ref: &DVector<T>,
    ) -> Result<Self, SolveError> {
        let c = sys.assemble_c(t_mid)?;
        let (m, _) = sys.assemble_m(t_mid)?;
        let cdt = sys.assemble_c_dt(t_mid)?;
        let v = sys.assemble_load(t_mid)?;
        let jf = if sys.spec().nonlinearity.is_zero() {
            None
        } else {
            Some(nonlinear_jacobian_fd(sys, d_ref)?)
        };
        let half_dt = dt * lit::<T>(0.5);
        let quarter_dt2 = dt * dt * lit::<T>(0.25);
        let mut s = c.clone();
        s += &cdt * half_dt;
        match &jf {
            Some(jf) => s += (&m + jf) * quarter_dt2,
            None => s += &m * quarter_dt2,
        }
        let schur = LU::new(s);
        Ok(MidpointData {
            c,
            m,
            cdt,
            v,
            jf,
            schur,
            dt,
        })
    }

    /// Residual of the midpoint step equations at the candidate next state.
    fn residual(
        &self,
        sys: &GalerkinSystem<T>,
        s0: &State<T>,
        d1: &DVector<T>,
        e1: &DVector<T>,
    ) -> Result<(DVector<T>, DVector<T>), SolveError> {
        let half = lit::<T>(0.5);
        let d_bar = (&s0.d + d1) * half;
        let e_bar = (&s0.e + e1) * half;
        let fv = sys.assemble_nonlinear(&d_bar)?;
        let r_d = d1 - &s0.d - &e_bar * self.dt;
        let mut r_e = &self.c * &(e1 - &s0.e);
        let mut load = self.v.clone();
        load -= &self.m * &d_bar;
        load -= &self.cdt * &e_bar;
        load -= fv;
        r_e -= load * self.dt;
        Ok((r_d, r_e))
    }

    fn m_plus_jf(&self) -> DMatrix<T> {
        match &self.jf {
            Some(jf) => &self.m + jf,
            None => self.m.clone(),
        }
    }
}

fn newton_solve<T: Scalar>(
    sys: &GalerkinSystem<T>,
    data: &MidpointData<T>,
    s0: &State<T>,
    params: &NewtonParams<T>,
) -> Result<(State<T>, usize), SolveError> {
    let half = lit::<T>(0.5);
    let mut d1 = s0.d.clone();
    let mut e1 = s0.e.clone();
    let mj = data.m_plus_jf();
    for iter in 0..=params.max_iter {
        let (r_d, r_e) = data.residual(sys, s0, &d1, &e1)?;
        let mut res_sq = T::zero();
        for i in 0..r_d.len() {
            res_sq += r_d[i] * r_d[i] + r_e[i] * r_e[i];
        }
        let res = res_sq.sqrt();
        let candidate = State {
            t: s0.t + data.dt,
            d: d1.clone(),
            e: e1.clone(),
        };
        if res <= params.tol * (T::one() + candidate.combined_norm()) {
            return Ok((candidate, iter));
        }
        if iter == params.max_iter {
            return Err(SolveError::NewtonDiverged {
                t: s0.t.to_subset().unwrap_or(f64::NAN),
                iters: iter,
                residual: res.to_subset().unwrap_or(f64::NAN),
            });
        }
        // Schur solve: [C + dt/2 C' + dt^2/4 (M + J_F)] de = -R_e + dt/2 (M+J_F) R_d
        let mut rhs_e = -r_e;
        rhs_e += &mj * &r_d * (data.dt * half);
        let de = data
            .schur
            .solve(&rhs_e)
            .ok_or(SolveError::NewtonDiverged {
                t: s0.t.to_subset().unwrap_or(f64::NAN),
                iters: iter,
                residual: res.to_subset().unwrap_or(f64::NAN),
            })?;
        let dd = &de * (data.dt * half) - r_d;
        d1 += dd;
        e1 += de;
    }
    unreachable!()
}

/// One implicit-midpoint step: solves
/// `s1 = s0 + dt rhs(t + dt/2, (s0 + s1)/2)` by Newton iteration with the
/// Jacobian frozen at the step start; converged when the residual norm drops
/// below `newton_tol (1 + |s|)`.
pub fn step_midpoint<T: Scalar>(
    sys: &GalerkinSystem<T>,
    state: &State<T>,
    dt: T,
    newton_tol: T,
    max_iter: usize,
) -> Result<State<T>, SolveError> {
    let t_mid = state.t + dt * lit::<T>(0.5);
    let data = MidpointData::build(sys, t_mid, dt, &state.d)?;
    let params = NewtonParams {
        tol: newton_tol,
        max_iter,
    };
    newton_solve(sys, &data, state, &params).map(|(s, _)| s)
}

/// The residual of the midpoint step equations, stacked as `(R_d; R_e)`;
/// exposed for the Jacobian gradient check.
pub fn midpoint_residual<T: Scalar>(
    sys: &GalerkinSystem<T>,
    s0: &State<T>,
    d1: &DVector<T>,
    e1: &DVector<T>,
    dt: T,
) -> Result<DVector<T>, SolveError> {
    let t_mid = s0.t + dt * lit::<T>(0.5);
    let data = MidpointData::build(sys, t_mid, dt, &s0.d)?;
    let (r_d, r_e) = data.residual(sys, s0, d1, e1)?;
    let m = r_d.len();
    let mut out = DVector::zeros(2 * m);
    for i in 0..m {
        out[i] = r_d[i];
        out[m + i] = r_e[i];
    }
    Ok(out)
}

/// The block Newton Jacobian of [`midpoint_residual`] with respect to
/// `(d1, e1)`, with the nonlinear block by forward differences at `d_bar`.
/// The residual is affine in `e1`, so only `d1` enters.
pub fn midpoint_jacobian<T: Scalar>(
    sys: &GalerkinSystem<T>,
    s0: &State<T>,
    d1: &DVector<T>,
    _e1: &DVector<T>,
    dt: T,
) -> Result<DMatrix<T>, SolveError> {
    let half = lit::<T>(0.5);
    let t_mid = s0.t + dt * half;
    let m = s0.d.len();
    let c = sys.assemble_c(t_mid)?;
    let (mm, _) = sys.assemble_m(t_mid)?;
    let cdt = sys.assemble_c_dt(t_mid)?;
    let d_bar = (&s0.d + d1) * half;
    let mj = if sys.spec().nonlinearity.is_zero() {
        mm
    } else {
        &mm + nonlinear_jacobian_fd(sys, &d_bar)?
    };
    let mut jac = DMatrix::zeros(2 * m, 2 * m);
    for i in 0..m {
        jac[(i, i)] = T::one();
        for j in 0..m {
            if i == j {
                jac[(i, m + j)] = -dt * half;
            }
            jac[(m + i, j)] = dt * half * mj[(i, j)];
            jac[(m + i, m + j)] = c[(i, j)] + dt * half * cdt[(i, j)];
        }
    }
    Ok(jac)
}

// ---------------------------------------------------------------------------
// RK4 reference
// ---------------------------------------------------------------------------

/// One classical Runge-Kutta step on the first-order system.
pub fn step_rk4<T: Scalar>(
    sys: &GalerkinSystem<T>,
    state: &State<T>,
    dt: T,
) -> Result<State<T>, SolveError> {
    let half = lit::<T>(0.5);
    let sixth = T::one() / lit::<T>(6.0);
    let two = lit::<T>(2.0);
    let t = state.t;
    let (k1d, k1e) = rhs(sys, t, state)?;
    let mid1 = State {
        t: t + dt * half,
        d: &state.d + &k1d * (dt * half),
        e: &state.e + &k1e * (dt * half),
    };
    let (k2d, k2e) = rhs(sys, mid1.t, &mid1)?;
    let mid2 = State {
        t: t + dt * half,
        d: &state.d + &k2d * (dt * half),
        e: &state.e + &k2e * (dt * half),
    };
    let (k3d, k3e) = rhs(sys, mid2.t, &mid2)?;
    let end = State {
        t: t + dt,
        d: &state.d + &k3d * dt,
        e: &state.e + &k3e * dt,
    };
    let (k4d, k4e) = rhs(sys, end.t, &end)?;
    Ok(State {
        t: t + dt,
        d: &state.d + (k1d + k2d * two + k3d * two + k4d) * (dt * sixth),
        e: &state.e + (k1e + k2e * two + k3e * two + k4e) * (dt * sixth),
    })
}

// ---------------------------------------------------------------------------
// Fixed-step march
// ---------------------------------------------------------------------------

/// Marches from the projected initial state to the horizon with a fixed step,
/// recording every `sample_every`-th state (and the final one). Aborts with
/// the partial trajectory on a step failure.
pub fn solve<T: Scalar>(
    sys: &GalerkinSystem<T>,
    opts: &SolveOptions<T>,
) -> Result<Trajectory<T>, Box<SolveFailure<T>>> {
    let state0 = match initial_state(sys, None) {
        Ok(s) => s,
        Err(e) => {
            return Err(Box::new(SolveFailure {
                error: e,
                partial: Trajectory {
                    states: Vec::new(),
                    meta: IntegratorMeta {
                        name: opts.integrator.name(),
                        dt: opts.dt,
                        newton_tol: opts.newton.tol,
                        steps: 0,
                        newton_iterations_total: 0,
                        newton_iterations_max: 0,
                    },
                },
            }))
        }
    };
    solve_from(sys, opts, state0)
}

/// The fixed-step march of [`solve`], starting from an explicit state at
/// `t = 0` (the uniqueness probe perturbs the projected state directly).
pub fn solve_from<T: Scalar>(
    sys: &GalerkinSystem<T>,
    opts: &SolveOptions<T>,
    state0: State<T>,
) -> Result<Trajectory<T>, Box<SolveFailure<T>>> {
    let fail = |error: SolveError, partial: Trajectory<T>| Box::new(SolveFailure { error, partial });
    let empty_meta = IntegratorMeta {
        name: opts.integrator.name(),
        dt: opts.dt,
        newton_tol: opts.newton.tol,
        steps: 0,
        newton_iterations_total: 0,
        newton_iterations_max: 0,
    };
    let empty = Trajectory {
        states: Vec::new(),
        meta: empty_meta.clone(),
    };

    if !(opts.dt > T::zero()) {
        return Err(fail(SolveError::NonPositiveStep, empty));
    }
    // refuse a raw expression nonlinearity with no declared Lipschitz constant
    if matches!(sys.spec().nonlinearity.f, Nonlinearity::Formula { .. })
        && sys.spec().nonlinearity.lip.is_none()
    {
        return Err(fail(SolveError::RequiresLipschitzApproximation, empty));
    }
    let horizon = sys.spec().horizon;
    let ratio = horizon / opts.dt;
    let n_steps_t = ratio.round();
    let rounded: Option<f64> = n_steps_t.to_subset();
    let n_steps = match rounded {
        Some(v) if v >= 1.0 => v as usize,
        _ => 0,
    };
    let divides = n_steps >= 1
        && (from_usize::<T>(n_steps) * opts.dt - horizon).abs()
            <= lit::<T>(1e-12) * T::max(T::one(), horizon);
    if !divides {
        return Err(fail(
            SolveError::StepDoesNotDivide {
                dt: opts.dt.to_subset().unwrap_or(f64::NAN),
                horizon: horizon.to_subset().unwrap_or(f64::NAN),
            },
            empty,
        ));
    }

    let mut meta = empty_meta;
    meta.steps = n_steps;
    let sample_every = opts.sample_every.max(1);
    let mut states = vec![state0.clone()];
    let mut current = state0;

    // one factorization serves every step of a linear time-invariant system
    let lti_data = if opts.integrator == Integrator::ImplicitMidpoint
        && sys.is_linear_time_invariant()
    {
        match MidpointData::build(sys, opts.dt * lit::<T>(0.5), opts.dt, &current.d) {
            Ok(d) => Some(d),
            Err(e) => {
                return Err(fail(
                    e,
                    Trajectory {
                        states,
                        meta,
                    },
                ))
            }
        }
    } else {
        None
    };

    for step_idx in 0..n_steps {
        let stepped = match opts.integrator {
            Integrator::Rk4 => step_rk4(sys, &current, opts.dt),
            Integrator::ImplicitMidpoint => {
                let result = match &lti_data {
                    Some(data) => newton_solve(sys, data, &current, &opts.newton),
                    None => {
                        let t_mid = current.t + opts.dt * lit::<T>(0.5);
                        MidpointData::build(sys, t_mid, opts.dt, &current.d)
                            .and_then(|data| newton_solve(sys, &data, &current, &opts.newton))
                    }
                };
                result.map(|(s, iters)| {
                    meta.newton_iterations_total += iters;
                    meta.newton_iterations_max = meta.newton_iterations_max.max(iters);
                    s
                })
            }
        };
        let mut next = match stepped {
            Ok(s) => s,
            Err(e) => {
                return Err(fail(
                    e,
                    Trajectory {
                        states,
                        meta,
                    },
                ))
            }
        };
        // keep times on the uniform grid, immune to accumulation
        next.t = from_usize::<T>(step_idx + 1) * opts.dt;
        let is_last = step_idx + 1 == n_steps;
        if (step_idx + 1) % sample_every == 0 || is_last {
            states.push(next.clone());
        }
        current = next;
    }

    Ok(Trajectory {
        states,
        meta,
    })
}
