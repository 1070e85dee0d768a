//! Assembly of the time-dependent Galerkin system on `V_m`: the mass matrix
//! `C(t)`, the operator matrix `M(t)` (with its antisymmetric block `Ka`),
//! the load `v(t)`, the nonlinear load `F(d)`, entrywise time-derivative
//! matrices, and the coefficient-sup operator-norm bounds feeding the energy
//! machinery.
//!
//! Matrices are dense; symmetric and antisymmetric blocks are mirrored from
//! one computed triangle, so `C = C^T` and `Ka = -Ka^T` hold exactly.
//! Quadrature sums run in a fixed order (nodes inner, modes outer) so output
//! is bit-reproducible.

use crate::basis::{
    build_basis, build_quadrature, default_quad_order, BasisError, BasisSet, QuadratureRule,
};
use crate::exprlang::EvalError;
use crate::problem::{ProblemSpec, ValidationGrid};
use crate::scalar::{from_usize, lit, Scalar};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AssemblyError {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("field `{field}`: {source}")]
    Field {
        field: &'static str,
        source: EvalError,
    },
    #[error("mass matrix C(t) is not positive definite at t = {t}")]
    MassNotSpd { t: f64 },
}

fn field_err(field: &'static str) -> impl Fn(EvalError) -> AssemblyError {
    move |source| AssemblyError::Field { field, source }
}

/// One assembled snapshot of the projected system at a fixed time.
#[derive(Debug, Clone)]
pub struct AssembledMatrices<T> {
    /// rho-weighted mass matrix, symmetric positive definite.
    pub c: DMatrix<T>,
    /// Stiffness + convection + reaction, including the antisymmetric block.
    pub m: DMatrix<T>,
    /// The antisymmetric principal sub-block, also summed into `m`.
    pub ka: DMatrix<T>,
    /// Load vector.
    pub v: DVector<T>,
}

/// Coefficient-sup upper bounds for the operator norms entering the
/// auxiliary Gronwall rate; each entry bounds the continuum norm up to the
/// sampling-grid resolution.
#[derive(Debug, Clone, Copy)]
pub struct CoefficientNormBounds<T> {
    /// `||R'(t)|| <= sup |rho_t|`.
    pub r_dt: T,
    /// `||A0'(t)|| <= sup ||(A_s)_t||_2`.
    pub a0_dt: T,
    /// `||A1(t)|| <= sup |div A_a| + sup |b| + sup |c| / sqrt(lambda_1)`.
    pub a1: T,
    /// `||f(t)||_H` by quadrature.
    pub f_h: T,
}

/// The basis, quadrature rule, cached node tables and time-independent
/// matrix caches for one problem. Immutable after construction and safe to
/// share across threads.
pub struct GalerkinSystem<T: Scalar> {
    spec: ProblemSpec<T>,
    basis: BasisSet<T>,
    rule: QuadratureRule<T>,
    /// basis values at quadrature nodes, m x n
    w_tab: DMatrix<T>,
    /// per-axis gradient values at quadrature nodes, each m x n
    grad_tab: Vec<DMatrix<T>>,
    sup_grid: Vec<Vec<T>>,
    cached_c: Option<(DMatrix<T>, Cholesky<T, Dyn>)>,
    cached_c_dt: Option<DMatrix<T>>,
    cached_ks: Option<DMatrix<T>>,
    cached_m: Option<(DMatrix<T>, DMatrix<T>)>,
    cached_v: Option<DVector<T>>,
}

impl<T: Scalar> GalerkinSystem<T> {
    /// Builds basis, quadrature and node tables for `m` modes. The quadrature
    /// order defaults to [`default_quad_order`]; `sup_resolution` is the
    /// per-dimension grid used for coefficient sup bounds.
    pub fn new(
        spec: ProblemSpec<T>,
        m: usize,
        quad_order: Option<usize>,
        sup_resolution: usize,
    ) -> Result<Self, AssemblyError> {
        let basis = build_basis(&spec.domain, m)?;
        let order = quad_order.unwrap_or_else(|| default_quad_order(&basis));
        let rule = build_quadrature(&spec.domain, order)?;
        let n = rule.len();
        let dim = spec.domain.dim();
        let mut w_tab = DMatrix::zeros(m, n);
        let mut grad_tab = vec![DMatrix::zeros(m, n); dim];
        for j in 0..m {
            for (nidx, node) in rule.nodes().iter().enumerate() {
                w_tab[(j, nidx)] = basis.eval(j, node)?;
                let g = basis.eval_grad(j, node)?;
                for (axis, tab) in grad_tab.iter_mut().enumerate() {
                    tab[(j, nidx)] = g[axis];
                }
            }
        }
        let res = sup_resolution.max(2);
        let lengths = spec.domain.lengths().to_vec();
        let mut sup_grid: Vec<Vec<T>> = Vec::new();
        let mut idx = vec![0usize; dim];
        'outer: loop {
            let pt: Vec<T> = (0..dim)
                .map(|i| (from_usize::<T>(idx[i]) + lit::<T>(0.5)) / from_usize::<T>(res) * lengths[i])
                .collect();
            sup_grid.push(pt);
            for i in (0..dim).rev() {
                idx[i] += 1;
                if idx[i] < res {
                    continue 'outer;
                }
                idx[i] = 0;
            }
            break;
        }

        let mut sys = GalerkinSystem {
            spec,
            basis,
            rule,
            w_tab,
            grad_tab,
            sup_grid,
            cached_c: None,
            cached_c_dt: None,
            cached_ks: None,
            cached_m: None,
            cached_v: None,
        };
        sys.build_caches()?;
        Ok(sys)
    }

    fn build_caches(&mut self) -> Result<(), AssemblyError> {
        let co = &self.spec.coefficients;
        if !co.rho.depends_on_t() {
            let t0 = T::zero();
            let c = self.compute_c(t0)?;
            let chol = Cholesky::new(c.clone()).ok_or(AssemblyError::MassNotSpd {
                t: 0.0,
            })?;
            self.cached_c = Some((c, chol));
            self.cached_c_dt = Some(DMatrix::zeros(self.size(), self.size()));
        }
        if !co.a_sym.depends_on_t() {
            self.cached_ks = Some(self.compute_ks(T::zero())?);
        }
        if !co.a_sym.depends_on_t()
            && !co.a_anti.depends_on_t()
            && !co.b.depends_on_t()
            && !co.c.depends_on_t()
        {
            self.cached_m = Some(self.compute_m(T::zero())?);
        }
        let so = &self.spec.sources;
        if !so.f.depends_on_t() && !so.g0.depends_on_t() && !so.gvec.depends_on_t() {
            self.cached_v = Some(self.compute_load(T::zero())?);
        }
        Ok(())
    }

    pub fn spec(&self) -> &ProblemSpec<T> {
        &self.spec
    }

    pub fn basis(&self) -> &BasisSet<T> {
        &self.basis
    }

    pub fn rule(&self) -> &QuadratureRule<T> {
        &self.rule
    }

    pub fn size(&self) -> usize {
        self.basis.size()
    }

    /// True when the projected system is linear with time-independent data,
    /// so one factorization serves every implicit step.
    pub fn is_linear_time_invariant(&self) -> bool {
        self.cached_c.is_some()
            && self.cached_m.is_some()
            && self.cached_v.is_some()
            && self.spec.nonlinearity.is_zero()
    }

    /// Samples of the expansion `u = sum_i d_i w_i` at the quadrature nodes.
    pub fn expansion_at_nodes(&self, d: &DVector<T>) -> Vec<T> {
        let n = self.rule.len();
        let m = self.size();
        let mut u = vec![T::zero(); n];
        for (nidx, slot) in u.iter_mut().enumerate() {
            let mut acc = T::zero();
            for i in 0..m {
                acc += d[i] * self.w_tab[(i, nidx)];
            }
            *slot = acc;
        }
        u
    }

    /// Samples of a space-time field at the quadrature nodes.
    pub fn field_at_nodes(
        &self,
        t: T,
        mut eval: impl FnMut(T, &[T]) -> Result<T, EvalError>,
    ) -> Result<Vec<T>, EvalError> {
        let dim = self.spec.domain.dim();
        self.rule
            .nodes()
            .iter()
            .map(|node| eval(t, &node[..dim]))
            .collect()
    }

    // -- mass ---------------------------------------------------------------

    fn weighted_mass(&self, density: &[T]) -> DMatrix<T> {
        let m = self.size();
        let n = self.rule.len();
        let weights = self.rule.weights();
        let mut wr = vec![T::zero(); n];
        for i in 0..n {
            wr[i] = weights[i] * density[i];
        }
        let mut out = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let mut acc = T::zero();
                for nidx in 0..n {
                    acc += wr[nidx] * self.w_tab[(i, nidx)] * self.w_tab[(j, nidx)];
                }
                out[(i, j)] = acc;
                out[(j, i)] = acc;
            }
        }
        out
    }

    fn compute_c(&self, t: T) -> Result<DMatrix<T>, AssemblyError> {
        let rho = self
            .field_at_nodes(t, |t, x| self.spec.coefficients.rho.eval(t, x))
            .map_err(field_err("rho"))?;
        Ok(self.weighted_mass(&rho))
    }

    /// Mass matrix `C(t)`, `C_ij = (rho(t) w_j, w_i)`; symmetric by storage.
    pub fn assemble_c(&self, t: T) -> Result<DMatrix<T>, AssemblyError> {
        if let Some((c, _)) = &self.cached_c {
            return Ok(c.clone());
        }
        self.compute_c(t)
    }

    /// Cholesky factorization of `C(t)`; fails when coercivity is lost.
    pub fn cholesky_c(&self, t: T) -> Result<Cholesky<T, Dyn>, AssemblyError> {
        if let Some((_, chol)) = &self.cached_c {
            return Ok(chol.clone());
        }
        let c = self.compute_c(t)?;
        Cholesky::new(c).ok_or(AssemblyError::MassNotSpd {
            t: t.to_subset().unwrap_or(f64::NAN),
        })
    }

    /// Entrywise time derivative `C'(t)` from `rho_dt` (explicit expression
    /// or central difference).
    pub fn assemble_c_dt(&self, t: T) -> Result<DMatrix<T>, AssemblyError> {
        if let Some(cdt) = &self.cached_c_dt {
            return Ok(cdt.clone());
        }
        let rho_dt = self
            .field_at_nodes(t, |t, x| self.spec.coefficients.rho.eval_dt(t, x))
            .map_err(field_err("rho_dt"))?;
        Ok(self.weighted_mass(&rho_dt))
    }

    // -- stiffness and lower-order terms -------------------------------------

    fn stiffness_sym_from(
        &self,
        a_at_nodes: &[[[T; 3]; 3]],
    ) -> DMatrix<T> {
        let m = self.size();
        let n = self.rule.len();
        let dim = self.spec.domain.dim();
        let weights = self.rule.weights();
        let mut out = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let mut acc = T::zero();
                for nidx in 0..n {
                    let a = &a_at_nodes[nidx];
                    let mut form = T::zero();
                    for r in 0..dim {
                        let gi = self.grad_tab[r][(i, nidx)];
                        for s in 0..dim {
                            form += a[r][s] * self.grad_tab[s][(j, nidx)] * gi;
                        }
                    }
                    acc += weights[nidx] * form;
                }
                out[(i, j)] = acc;
                out[(j, i)] = acc;
            }
        }
        out
    }

    fn compute_ks(&self, t: T) -> Result<DMatrix<T>, AssemblyError> {
        let dim = self.spec.domain.dim();
        let a_nodes: Vec<[[T; 3]; 3]> = self
            .rule
            .nodes()
            .iter()
            .map(|node| self.spec.coefficients.a_sym.eval(t, &node[..dim]))
            .collect::<Result<_, _>>()
            .map_err(field_err("A_s"))?;
        Ok(self.stiffness_sym_from(&a_nodes))
    }

    /// The symmetric principal stiffness block `K_s(t)`,
    /// `(K_s)_ij = int A_s grad w_j . grad w_i`; this is the quadratic form
    /// behind the potential energy.
    pub fn assemble_stiffness_sym(&self, t: T) -> Result<DMatrix<T>, AssemblyError> {
        if let Some(ks) = &self.cached_ks {
            return Ok(ks.clone());
        }
        self.compute_ks(t)
    }

    /// Entrywise time derivative of the symmetric stiffness block.
    pub fn assemble_ks_dt(&self, t: T) -> Result<DMatrix<T>, AssemblyError> {
        if !self.spec.coefficients.a_sym.depends_on_t() {
            return Ok(DMatrix::zeros(self.size(), self.size()));
        }
        let dim = self.spec.domain.dim();
        let a_nodes: Vec<[[T; 3]; 3]> = self
            .rule
            .nodes()
            .iter()
            .map(|node| self.spec.coefficients.a_sym.eval_dt(t, &node[..dim]))
            .collect::<Result<_, _>>()
            .map_err(field_err("A_s_dt"))?;
        Ok(self.stiffness_sym_from(&a_nodes))
    }

    /// Quadratic form `d^T K_s'(t) d` of the stiffness time derivative.
    pub fn a0_dt_quadratic(&self, t: T, d: &DVector<T>) -> Result<T, AssemblyError> {
        let ks_dt = self.assemble_ks_dt(t)?;
        Ok((d.transpose() * ks_dt * d)[(0, 0)])
    }

    fn compute_m(&self, t: T) -> Result<(DMatrix<T>, DMatrix<T>), AssemblyError> {
        let m = self.size();
        let n = self.rule.len();
        let dim = self.spec.domain.dim();
        let weights = self.rule.weights();
        let co = &self.spec.coefficients;

        let mut total = self.compute_ks(t)?;

        // antisymmetric block: computed on the strict upper triangle and
        // mirrored with a sign, so Ka = -Ka^T holds exactly
        let mut ka = DMatrix::zeros(m, m);
        if !co.a_anti.is_zero() {
            let a_nodes: Vec<[[T; 3]; 3]> = self
                .rule
                .nodes()
                .iter()
                .map(|node| co.a_anti.eval(t, &node[..dim]))
                .collect::<Result<_, _>>()
                .map_err(field_err("A_a"))?;
            for i in 0..m {
                for j in (i + 1)..m {
                    let mut acc = T::zero();
                    for nidx in 0..n {
                        let a = &a_nodes[nidx];
                        let mut form = T::zero();
                        for r in 0..dim {
                            let gi = self.grad_tab[r][(i, nidx)];
                            for s in 0..dim {
                                form += a[r][s] * self.grad_tab[s][(j, nidx)] * gi;
                            }
                        }
                        acc += weights[nidx] * form;
                    }
                    ka[(i, j)] = acc;
                    ka[(j, i)] = -acc;
                }
            }
            total += &ka;
        }

        if !co.b.is_zero() {
            let b_nodes: Vec<[T; 3]> = self
                .rule
                .nodes()
                .iter()
                .map(|node| co.b.eval(t, &node[..dim]))
                .collect::<Result<_, _>>()
                .map_err(field_err("b"))?;
            // (b . grad w_j) at every node, then mass-like contraction
            for j in 0..m {
                let mut bg = vec![T::zero(); n];
                for nidx in 0..n {
                    let mut acc = T::zero();
                    for r in 0..dim {
                        acc += b_nodes[nidx][r] * self.grad_tab[r][(j, nidx)];
                    }
                    bg[nidx] = acc;
                }
                for i in 0..m {
                    let mut acc = T::zero();
                    for nidx in 0..n {
                        acc += weights[nidx] * bg[nidx] * self.w_tab[(i, nidx)];
                    }
                    total[(i, j)] += acc;
                }
            }
        }

        if !co.c.is_zero() {
            let c_nodes = self
                .field_at_nodes(t, |t, x| co.c.eval(t, x))
                .map_err(field_err("c"))?;
            total += self.weighted_mass(&c_nodes);
        }

        Ok((total, ka))
    }

    /// Operator matrix `M(t)` and its antisymmetric block `Ka(t)`.
    ///
    /// `M_ij = int A_s grad w_j . grad w_i + int A_a grad w_j . grad w_i
    ///        + int (b . grad w_j) w_i + int c w_j w_i`.
    pub fn assemble_m(&self, t: T) -> Result<(DMatrix<T>, DMatrix<T>), AssemblyError> {
        if let Some((m, ka)) = &self.cached_m {
            return Ok((m.clone(), ka.clone()));
        }
        self.compute_m(t)
    }

    // -- loads ---------------------------------------------------------------

    fn compute_load(&self, t: T) -> Result<DVector<T>, AssemblyError> {
        let m = self.size();
        let n = self.rule.len();
        let dim = self.spec.domain.dim();
        let weights = self.rule.weights();
        let so = &self.spec.sources;
        let mut v = DVector::zeros(m);

        // H-regular part: f + g0 against w_j
        let mut h_part: Option<Vec<T>> = None;
        if !so.f.is_zero() {
            let f_nodes = self
                .field_at_nodes(t, |t, x| so.f.eval(t, x))
                .map_err(field_err("f"))?;
            h_part = Some(f_nodes);
        }
        if !so.g0.is_zero() {
            let g_nodes = self
                .field_at_nodes(t, |t, x| so.g0.eval(t, x))
                .map_err(field_err("g0"))?;
            h_part = Some(match h_part {
                None => g_nodes,
                Some(mut f_nodes) => {
                    for (a, b) in f_nodes.iter_mut().zip(&g_nodes) {
                        *a += *b;
                    }
                    f_nodes
                }
            });
        }
        if let Some(h) = h_part {
            for j in 0..m {
                let mut acc = T::zero();
                for nidx in 0..n {
                    acc += weights[nidx] * h[nidx] * self.w_tab[(j, nidx)];
                }
                v[j] += acc;
            }
        }

        // dual part: Gvec against grad w_j
        if !so.gvec.is_zero() {
            let g_nodes: Vec<[T; 3]> = self
                .rule
                .nodes()
                .iter()
                .map(|node| so.gvec.eval(t, &node[..dim]))
                .collect::<Result<_, _>>()
                .map_err(field_err("gvec"))?;
            for j in 0..m {
                let mut acc = T::zero();
                for nidx in 0..n {
                    let mut dot = T::zero();
                    for r in 0..dim {
                        dot += g_nodes[nidx][r] * self.grad_tab[r][(j, nidx)];
                    }
                    acc += weights[nidx] * dot;
                }
                v[j] += acc;
            }
        }
        Ok(v)
    }

    /// Load vector `v(t)`, `v_j = int f w_j + int g0 w_j + int Gvec . grad w_j`.
    pub fn assemble_load(&self, t: T) -> Result<DVector<T>, AssemblyError> {
        if let Some(v) = &self.cached_v {
            return Ok(v.clone());
        }
        self.compute_load(t)
    }

    /// Nonlinear load `F(d)_j = int F(sum_i d_i w_i) w_j`.
    pub fn assemble_nonlinear(&self, d: &DVector<T>) -> Result<DVector<T>, AssemblyError> {
        let m = self.size();
        let mut v = DVector::zeros(m);
        if self.spec.nonlinearity.is_zero() {
            return Ok(v);
        }
        let n = self.rule.len();
        let weights = self.rule.weights();
        let u = self.expansion_at_nodes(d);
        let mut fu = vec![T::zero(); n];
        for (slot, &ui) in fu.iter_mut().zip(&u) {
            *slot = self
                .spec
                .nonlinearity
                .eval(ui)
                .map_err(|source| AssemblyError::Field {
                    field: "F",
                    source,
                })?;
        }
        for j in 0..m {
            let mut acc = T::zero();
            for nidx in 0..n {
                acc += weights[nidx] * fu[nidx] * self.w_tab[(j, nidx)];
            }
            v[j] = acc;
        }
        Ok(v)
    }

    /// All matrices and the load at one time.
    pub fn assemble(&self, t: T) -> Result<AssembledMatrices<T>, AssemblyError> {
        let c = self.assemble_c(t)?;
        let (m, ka) = self.assemble_m(t)?;
        let v = self.assemble_load(t)?;
        Ok(AssembledMatrices { c, m, ka, v })
    }

    // -- norm surrogates ------------------------------------------------------

    fn sup_over_grid(
        &self,
        mut f: impl FnMut(&[T]) -> Result<T, EvalError>,
    ) -> Result<T, EvalError> {
        let mut sup = T::zero();
        for pt in &self.sup_grid {
            let v = f(pt)?.abs();
            if v > sup {
                sup = v;
            }
        }
        Ok(sup)
    }

    /// Discrete H norm of a space-time field at time `t` by quadrature.
    pub fn field_h_norm(
        &self,
        t: T,
        eval: impl FnMut(T, &[T]) -> Result<T, EvalError>,
    ) -> Result<T, EvalError> {
        let samples = self.field_at_nodes(t, eval)?;
        let mut acc = T::zero();
        for (w, s) in self.rule.weights().iter().zip(&samples) {
            acc += *w * *s * *s;
        }
        Ok(acc.sqrt())
    }

    /// Coefficient-sup bounds for the operator norms at time `t`.
    pub fn coefficient_norm_bounds(&self, t: T) -> Result<CoefficientNormBounds<T>, AssemblyError> {
        let co = &self.spec.coefficients;
        let dim = self.spec.domain.dim();
        let lengths = self.spec.domain.lengths().to_vec();

        let r_dt = if co.rho.depends_on_t() {
            self.sup_over_grid(|x| co.rho.eval_dt(t, x))
                .map_err(field_err("rho_dt"))?
        } else {
            T::zero()
        };

        let a0_dt = if co.a_sym.depends_on_t() {
            self.sup_over_grid(|x| {
                let a = co.a_sym.eval_dt(t, x)?;
                Ok(sym_spectral_norm(&a, dim))
            })
            .map_err(field_err("A_s_dt"))?
        } else {
            T::zero()
        };

        let div_aa = if co.a_anti.is_zero() {
            T::zero()
        } else {
            self.sup_over_grid(|x| {
                let d = co.a_anti.divergence(t, x, &lengths)?;
                let mut sq = T::zero();
                for v in d.iter().take(dim) {
                    sq += *v * *v;
                }
                Ok(sq.sqrt())
            })
            .map_err(field_err("div A_a"))?
        };
        let sup_b = if co.b.is_zero() {
            T::zero()
        } else {
            self.sup_over_grid(|x| {
                let bv = co.b.eval(t, x)?;
                let mut sq = T::zero();
                for v in bv.iter().take(dim) {
                    sq += *v * *v;
                }
                Ok(sq.sqrt())
            })
            .map_err(field_err("b"))?
        };
        let sup_c = if co.c.is_zero() {
            T::zero()
        } else {
            self.sup_over_grid(|x| co.c.eval(t, x)).map_err(field_err("c"))?
        };
        let a1 = div_aa + sup_b + sup_c / self.basis.lambda_min().sqrt();

        let f_h = if self.spec.sources.f.is_zero() {
            T::zero()
        } else {
            self.field_h_norm(t, |t, x| self.spec.sources.f.eval(t, x))
                .map_err(field_err("f"))?
        };

        Ok(CoefficientNormBounds {
            r_dt,
            a0_dt,
            a1,
            f_h,
        })
    }

    /// Upper surrogate for `||g(t)||_{V'}`:
    /// `||g0(t)||_H / sqrt(lambda_1) + ||Gvec(t)||_H`.
    pub fn g_dual_norm(&self, t: T) -> Result<T, AssemblyError> {
        self.g_dual_norm_impl(t, false)
    }

    /// Upper surrogate for `||g'(t)||_{V'}` from the `_dt` fields.
    pub fn g_dt_dual_norm(&self, t: T) -> Result<T, AssemblyError> {
        self.g_dual_norm_impl(t, true)
    }

    fn g_dual_norm_impl(&self, t: T, derivative: bool) -> Result<T, AssemblyError> {
        let so = &self.spec.sources;
        if so.g_is_zero() {
            return Ok(T::zero());
        }
        let dim = self.spec.domain.dim();
        let g0_norm = if so.g0.is_zero() {
            T::zero()
        } else if derivative {
            self.field_h_norm(t, |t, x| so.g0.eval_dt(t, x))
                .map_err(field_err("g0_dt"))?
        } else {
            self.field_h_norm(t, |t, x| so.g0.eval(t, x))
                .map_err(field_err("g0"))?
        };
        let gvec_norm = if so.gvec.is_zero() {
            T::zero()
        } else {
            let mut acc = T::zero();
            for (w, node) in self.rule.weights().iter().zip(self.rule.nodes()) {
                let mut sq = T::zero();
                for comp in &so.gvec.comps {
                    let v = if derivative {
                        comp.eval_dt(t, &node[..dim])
                    } else {
                        comp.eval(t, &node[..dim])
                    }
                    .map_err(field_err("gvec"))?;
                    sq += v * v;
                }
                acc += *w * sq;
            }
            acc.sqrt()
        };
        Ok(g0_norm / self.basis.lambda_min().sqrt() + gvec_norm)
    }

    /// The validation grid used for sup sampling, exposed for reporting.
    pub fn sup_grid_len(&self) -> usize {
        self.sup_grid.len()
    }
}

/// Spectral norm of a small symmetric matrix: `max |eigenvalue|`.
pub fn sym_spectral_norm<T: Scalar>(a: &[[T; 3]; 3], dim: usize) -> T {
    if dim == 1 {
        return a[0][0].abs();
    }
    let m = DMatrix::from_fn(dim, dim, |i, j| a[i][j]);
    let eig = m.symmetric_eigen();
    let mut hi = T::zero();
    for i in 0..dim {
        let v = eig.eigenvalues[i].abs();
        if v > hi {
            hi = v;
        }
    }
    hi
}

/// Smallest eigenvalue of a dense symmetric matrix (test and validation aid).
pub fn min_eigenvalue<T: Scalar>(m: &DMatrix<T>) -> T {
    let eig = m.clone().symmetric_eigen();
    let mut lo = eig.eigenvalues[0];
    for i in 1..eig.eigenvalues.len() {
        lo = lo.min(eig.eigenvalues[i]);
    }
    lo
}

/// Default resolution for the sup-sampling grid.
pub fn default_sup_resolution() -> usize {
    ValidationGrid::default().space
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BoxDomain;
    use crate::exprlang::parse;
    use crate::problem::{
        AntisymmetricMatrixField, CoefficientSet, FieldExpr, InitialData, NonlinearitySpec,
        SourceField, SourceSet, SymmetricMatrixField, VectorField,
    };
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn base_spec_1d() -> ProblemSpec<f64> {
        ProblemSpec {
            domain: BoxDomain::new(&[1.0]).unwrap(),
            coefficients: CoefficientSet::unit(1),
            sources: SourceSet::zero(1),
            nonlinearity: NonlinearitySpec::zero(),
            initial: InitialData {
                u0: parse("x*(1-x)").unwrap(),
                u1: parse("0").unwrap(),
                truncation: None,
            },
            alpha: 1.0,
            horizon: 1.0,
        }
    }

    fn sys_1d(spec: ProblemSpec<f64>, m: usize) -> GalerkinSystem<f64> {
        GalerkinSystem::new(spec, m, None, 16).unwrap()
    }

    #[test]
    fn unit_density_gives_identity_mass() {
        let sys = sys_1d(base_spec_1d(), 4);
        let c = sys.assemble_c(0.3).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((c[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn affine_density_mass_entries() {
        let mut spec = base_spec_1d();
        spec.coefficients.rho = FieldExpr::new(parse("1 + x").unwrap());
        let sys = sys_1d(spec, 2);
        let c = sys.assemble_c(0.0).unwrap();
        // C11 = 1 + 2*int x sin^2(pi x) = 1.5; C12 = 2*int x sin sin2 = -16/(9 pi^2)
        assert!((c[(0, 0)] - 1.5).abs() < 1e-12);
        let want = -16.0 / (9.0 * PI * PI);
        assert!((c[(0, 1)] - want).abs() < 1e-12, "{}", c[(0, 1)]);
        assert_eq!(c[(0, 1)], c[(1, 0)]);
    }

    #[test]
    fn time_scaled_density() {
        let mut spec = base_spec_1d();
        spec.coefficients.rho = FieldExpr::new(parse("1 + 0.5*sin(t)").unwrap());
        let sys = sys_1d(spec, 3);
        let c0 = sys.assemble_c(0.0).unwrap();
        let c1 = sys.assemble_c(PI / 2.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want0 = if i == j { 1.0 } else { 0.0 };
                assert!((c0[(i, j)] - want0).abs() < 1e-12);
                assert!((c1[(i, j)] - 1.5 * want0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn laplacian_block_is_diagonal_spectrum() {
        let sys = sys_1d(base_spec_1d(), 2);
        let (m, ka) = sys.assemble_m(0.0).unwrap();
        assert!((m[(0, 0)] - PI * PI).abs() < 1e-11);
        assert!((m[(1, 1)] - 4.0 * PI * PI).abs() < 1e-10);
        assert!(m[(0, 1)].abs() < 1e-11);
        assert!(ka.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reaction_adds_identity() {
        let mut spec = base_spec_1d();
        spec.coefficients.c = FieldExpr::new(parse("1").unwrap());
        let sys = sys_1d(spec, 1);
        let (m, _) = sys.assemble_m(0.0).unwrap();
        assert!((m[(0, 0)] - (PI * PI + 1.0)).abs() < 1e-11);
    }

    fn antisym_2d_spec() -> ProblemSpec<f64> {
        let mut co = CoefficientSet::unit(2);
        let mut a_anti = AntisymmetricMatrixField::zero(2);
        *a_anti.entry_mut(0, 1) = FieldExpr::new(parse("x").unwrap());
        co.a_anti = a_anti;
        ProblemSpec {
            domain: BoxDomain::new(&[1.0, 1.0]).unwrap(),
            coefficients: co,
            sources: SourceSet::zero(2),
            nonlinearity: NonlinearitySpec::zero(),
            initial: InitialData {
                u0: parse("x*(1-x)*y*(1-y)").unwrap(),
                u1: parse("0").unwrap(),
                truncation: None,
            },
            alpha: 1.0,
            horizon: 1.0,
        }
    }

    #[test]
    fn antisymmetric_block_is_exact_and_matches_fine_quadrature() {
        let spec = antisym_2d_spec();
        let sys = GalerkinSystem::new(spec.clone(), 4, None, 16).unwrap();
        let (_, ka) = sys.assemble_m(0.0).unwrap();
        for i in 0..4 {
            assert_eq!(ka[(i, i)], 0.0);
            for j in 0..4 {
                assert_eq!(ka[(i, j)], -ka[(j, i)], "exact antisymmetry");
            }
        }
        // independent order-32 tensor quadrature of the same bilinear form
        let basis = crate::basis::build_basis(&spec.domain, 4).unwrap();
        let rule = crate::basis::build_quadrature(&spec.domain, 32).unwrap();
        let mut want = 0.0;
        for (w, node) in rule.weights().iter().zip(rule.nodes()) {
            let a = node[0]; // A_a = [[0, x], [-x, 0]]
            let gi = basis.eval_grad(0, node).unwrap();
            let gj = basis.eval_grad(1, node).unwrap();
            want += w * (a * gj[1] * gi[0] - a * gj[0] * gi[1]);
        }
        assert!((ka[(0, 1)] - want).abs() < 1e-13, "{} vs {want}", ka[(0, 1)]);
    }

    #[test]
    fn antisymmetric_quadratic_form_vanishes() {
        let sys = GalerkinSystem::new(antisym_2d_spec(), 6, None, 16).unwrap();
        let (_, ka) = sys.assemble_m(0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let d = DVector::from_fn(6, |_, _| rng.gen_range(-2.0..2.0));
            let q = (d.transpose() * &ka * &d)[(0, 0)];
            assert!(q.abs() < 1e-12 * (1.0 + d.norm_squared()), "q = {q}");
        }
    }

    #[test]
    fn load_examples() {
        // constant Gvec integrates cosines to zero
        let mut spec = base_spec_1d();
        spec.sources.gvec = VectorField {
            comps: vec![FieldExpr::new(parse("1").unwrap())],
        };
        let sys = sys_1d(spec, 3);
        let v = sys.assemble_load(0.0).unwrap();
        for j in 0..3 {
            assert!(v[j].abs() < 1e-13, "v[{j}] = {}", v[j]);
        }

        // f equal to the first basis function projects to e_1
        let mut spec = base_spec_1d();
        spec.sources.f = SourceField::Formula(FieldExpr::new(
            parse("1.4142135623730951*sin(3.141592653589793*x)").unwrap(),
        ));
        let sys = sys_1d(spec, 3);
        let v = sys.assemble_load(0.0).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!(v[1].abs() < 1e-12 && v[2].abs() < 1e-12);

        // constant unit f
        let mut spec = base_spec_1d();
        spec.sources.f = SourceField::Formula(FieldExpr::new(parse("1").unwrap()));
        let sys = sys_1d(spec, 1);
        let v = sys.assemble_load(0.0).unwrap();
        assert!((v[0] - 2.0 * 2.0f64.sqrt() / PI).abs() < 1e-12);
    }

    #[test]
    fn nonlinear_load_examples() {
        let sys = sys_1d(base_spec_1d(), 2);
        let fv = sys
            .assemble_nonlinear(&DVector::from_vec(vec![1.0, -0.5]))
            .unwrap();
        assert!(fv.iter().all(|&v| v == 0.0));

        // cubic: F(a w_1) projected back onto w_1 is 1.5 a^3 via int sin^4 = 3/8
        let mut spec = base_spec_1d();
        spec.nonlinearity = NonlinearitySpec::power(2.0);
        let sys = sys_1d(spec, 2);
        for a in [1.0, 0.7, -1.3] {
            let fv = sys
                .assemble_nonlinear(&DVector::from_vec(vec![a, 0.0]))
                .unwrap();
            assert!(
                (fv[0] - 1.5 * a * a * a).abs() < 1e-12,
                "a={a}: {}",
                fv[0]
            );
        }

        // odd nonlinearity: F(-d) = -F(d)
        let mut spec = base_spec_1d();
        spec.nonlinearity = NonlinearitySpec::power(1.0);
        let sys = sys_1d(spec, 3);
        let d = DVector::from_vec(vec![0.4, -0.9, 0.25]);
        let plus = sys.assemble_nonlinear(&d).unwrap();
        let minus = sys.assemble_nonlinear(&(-d)).unwrap();
        for j in 0..3 {
            assert!((plus[j] + minus[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn mass_derivative_examples() {
        // spatially constant rho: C'(0) = 0.5 I, via the diff_t fallback
        let mut spec = base_spec_1d();
        spec.coefficients.rho = FieldExpr::new(parse("1 + 0.5*sin(t)").unwrap());
        let sys = sys_1d(spec, 2);
        let cdt = sys.assemble_c_dt(0.0).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 0.5 } else { 0.0 };
                assert!((cdt[(i, j)] - want).abs() < 1e-9);
            }
        }

        // time-constant coefficients: derivative matrices vanish
        let sys = sys_1d(base_spec_1d(), 2);
        let cdt = sys.assemble_c_dt(0.7).unwrap();
        assert!(cdt.iter().all(|&v| v.abs() < 1e-9));
        let ksdt = sys.assemble_ks_dt(0.7).unwrap();
        assert!(ksdt.iter().all(|&v| v == 0.0));

        // rho = 1 + t x: C'_11 = 2 int x sin^2(pi x) = 0.5 at every t
        let mut spec = base_spec_1d();
        spec.coefficients.rho = FieldExpr::new(parse("1 + t*x").unwrap());
        let sys = sys_1d(spec, 1);
        for t in [0.0, 0.4, 1.0] {
            let cdt = sys.assemble_c_dt(t).unwrap();
            assert!((cdt[(0, 0)] - 0.5).abs() < 1e-9, "t={t}: {}", cdt[(0, 0)]);
        }
    }

    #[test]
    fn explicit_dt_expression_is_used() {
        let mut spec = base_spec_1d();
        spec.coefficients.rho =
            FieldExpr::new(parse("1 + 0.5*sin(t)").unwrap()).with_dt(parse("0.5*cos(t)").unwrap());
        let sys = sys_1d(spec, 1);
        let cdt = sys.assemble_c_dt(0.0).unwrap();
        assert!((cdt[(0, 0)] - 0.5).abs() < 1e-13);
    }

    #[test]
    fn norm_bound_examples() {
        // all-constant coefficients, no source
        let sys = sys_1d(base_spec_1d(), 2);
        let nb = sys.coefficient_norm_bounds(0.5).unwrap();
        assert_eq!(nb.r_dt, 0.0);
        assert_eq!(nb.a0_dt, 0.0);
        assert_eq!(nb.a1, 0.0);
        assert_eq!(nb.f_h, 0.0);

        let mut spec = base_spec_1d();
        spec.coefficients.rho =
            FieldExpr::new(parse("1 + 0.5*sin(t)").unwrap()).with_dt(parse("0.5*cos(t)").unwrap());
        let sys = sys_1d(spec, 2);
        let nb = sys.coefficient_norm_bounds(0.0).unwrap();
        assert!((nb.r_dt - 0.5).abs() < 1e-13);

        let mut spec = base_spec_1d();
        spec.coefficients.b = VectorField {
            comps: vec![FieldExpr::new(parse("0.3").unwrap())],
        };
        let sys = sys_1d(spec, 2);
        let nb = sys.coefficient_norm_bounds(0.0).unwrap();
        assert!((nb.a1 - 0.3).abs() < 1e-13);
    }

    #[test]
    fn divergence_of_antisymmetric_part() {
        let sys = GalerkinSystem::new(antisym_2d_spec(), 4, None, 16).unwrap();
        // A_a = [[0, x], [-x, 0]]: div over columns = (d_y(-x), d_x(x)) = (0, 1)
        let nb = sys.coefficient_norm_bounds(0.0).unwrap();
        assert!((nb.a1 - 1.0).abs() < 1e-9, "a1 = {}", nb.a1);
    }

    #[test]
    fn mass_stays_coercive_along_time() {
        let mut spec = base_spec_1d();
        spec.coefficients.rho = FieldExpr::new(parse("1 + 0.5*sin(t)").unwrap());
        spec.alpha = 0.5;
        let sys = sys_1d(spec, 5);
        for k in 0..32 {
            let t = k as f64 / 31.0;
            let c = sys.assemble_c(t).unwrap();
            let lo = min_eigenvalue(&c);
            assert!(lo >= 0.5 * (1.0 - 1e-8), "t={t}: min eig {lo}");
        }
    }

    #[test]
    fn symmetric_operator_block_is_coercive() {
        let mut spec = base_spec_1d();
        spec.coefficients.a_sym = {
            let mut a = SymmetricMatrixField::identity(1);
            *a.entry_mut(0, 0) = FieldExpr::new(parse("1 + 0.25*x").unwrap());
            a
        };
        let sys = sys_1d(spec, 4);
        let (m, _) = sys.assemble_m(0.0).unwrap();
        let lo = min_eigenvalue(&m);
        let lambda1 = PI * PI;
        assert!(lo >= 1.0 * lambda1 * (1.0 - 1e-8), "min eig {lo}");
        // exact symmetric storage
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m[(i, j)], m[(j, i)]);
            }
        }
    }

    #[test]
    fn discrete_sign_condition_random_states() {
        let mut spec = base_spec_1d();
        spec.nonlinearity = NonlinearitySpec::power(1.0);
        let sys = sys_1d(spec, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let d = DVector::from_fn(4, |_, _| rng.gen_range(-3.0..3.0));
            let fv = sys.assemble_nonlinear(&d).unwrap();
            let dot = d.dot(&fv);
            assert!(dot >= -1e-10 * (1.0 + d.norm_squared()), "dot = {dot}");
        }
    }

    #[test]
    fn refinement_consistency() {
        let mut spec = base_spec_1d();
        spec.coefficients.rho = FieldExpr::new(parse("1 + 0.5*sin(t)").unwrap());
        spec.coefficients.a_sym = {
            let mut a = SymmetricMatrixField::identity(1);
            *a.entry_mut(0, 0) = FieldExpr::new(parse("1 + 0.25*x").unwrap());
            a
        };
        spec.coefficients.b = VectorField {
            comps: vec![FieldExpr::new(parse("0.3").unwrap())],
        };
        spec.coefficients.c = FieldExpr::new(parse("1").unwrap());
        let coarse = GalerkinSystem::new(spec.clone(), 4, None, 16).unwrap();
        let order = default_quad_order(coarse.basis());
        let fine = GalerkinSystem::new(spec, 4, Some(order * 2), 16).unwrap();
        let t = 0.37;
        let (mc, _) = coarse.assemble_m(t).unwrap();
        let (mf, _) = fine.assemble_m(t).unwrap();
        let cc = coarse.assemble_c(t).unwrap();
        let cf = fine.assemble_c(t).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let scale = mf[(i, j)].abs().max(1.0);
                assert!((mc[(i, j)] - mf[(i, j)]).abs() <= 1e-10 * scale);
                let scale = cf[(i, j)].abs().max(1.0);
                assert!((cc[(i, j)] - cf[(i, j)]).abs() <= 1e-10 * scale);
            }
        }
    }
}
