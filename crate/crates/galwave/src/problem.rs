//! Problem specification: coefficient fields, sources, initial data and the
//! nonlinearity, together with sampled validation of the structural
//! assumptions (coercivity, symmetry, sign condition, boundary data).

use crate::basis::BoxDomain;
use crate::exprlang::{diff_t, Env, EvalError, Expr, Var};
use crate::scalar::{eps, from_usize, lit, Scalar};
use nalgebra::DMatrix;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProblemError {
    #[error("validation grid too coarse: need >= 8 points per dimension and >= 16 time samples")]
    GridTooCoarse,
    #[error("field `{field}`: {source}")]
    FieldEval {
        field: String,
        source: EvalError,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("adaptive Gauss-Kronrod quadrature did not converge within depth {0}")]
    QuadratureNonConvergence(usize),
    #[error("nonlinearity does not vanish at zero: F(0) = {0}")]
    NonzeroAtOrigin(f64),
    #[error("piecewise-linear approximation level k must be at least 1")]
    BadApproximationLevel,
    #[error("truncation level j must be positive")]
    BadTruncationLevel,
}

// ---------------------------------------------------------------------------
// Expression-backed fields
// ---------------------------------------------------------------------------

/// A scalar field given by an expression, with optional explicit derivative
/// expressions in time (`_dt`) and space (`_dx1..`); central differences are
/// the fallback when a derivative expression is absent.
#[derive(Debug, Clone)]
pub struct FieldExpr {
    pub expr: Expr,
    pub dt: Option<Expr>,
    pub dx: [Option<Expr>; 3],
}

impl FieldExpr {
    pub fn new(expr: Expr) -> Self {
        FieldExpr {
            expr,
            dt: None,
            dx: [None, None, None],
        }
    }

    pub fn zero() -> Self {
        FieldExpr::new(Expr::Num(0.0))
    }

    pub fn with_dt(mut self, dt: Expr) -> Self {
        self.dt = Some(dt);
        self
    }

    pub fn is_zero(&self) -> bool {
        self.expr.is_zero_literal()
    }

    /// Whether the field value can change with time (an explicit `_dt`
    /// expression counts even if the main expression does not mention `t`).
    pub fn depends_on_t(&self) -> bool {
        self.expr.uses_t() || self.dt.as_ref().is_some_and(|d| !d.is_zero_literal())
    }

    pub fn eval<T: Scalar>(&self, t: T, x: &[T]) -> Result<T, EvalError> {
        self.expr.eval(&Env::txyz(t, x))
    }

    /// Time derivative: explicit expression when given, else central difference.
    pub fn eval_dt<T: Scalar>(&self, t: T, x: &[T]) -> Result<T, EvalError> {
        let env = Env::txyz(t, x);
        match &self.dt {
            Some(d) => d.eval(&env),
            None => {
                if self.expr.uses_t() {
                    diff_t(&self.expr, &env, None)
                } else {
                    Ok(T::zero())
                }
            }
        }
    }

    /// Spatial derivative along axis `axis`: explicit expression when given,
    /// else a central difference with step `eps^(1/3) * length`.
    pub fn eval_dx<T: Scalar>(&self, axis: usize, t: T, x: &[T], length: T) -> Result<T, EvalError> {
        if let Some(d) = &self.dx[axis] {
            return d.eval(&Env::txyz(t, x));
        }
        let h = eps::<T>().powf(lit(1.0 / 3.0)) * length;
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[axis] += h;
        xm[axis] -= h;
        let fp = self.expr.eval(&Env::txyz(t, &xp))?;
        let fm = self.expr.eval(&Env::txyz(t, &xm))?;
        Ok((fp - fm) / (h + h))
    }
}

/// Symmetric matrix field; only the upper triangle (including the diagonal)
/// is stored, so symmetry holds by construction.
#[derive(Debug, Clone)]
pub struct SymmetricMatrixField {
    dim: usize,
    entries: Vec<FieldExpr>, // row-major upper triangle
}

impl SymmetricMatrixField {
    pub fn identity(dim: usize) -> Self {
        let mut entries = Vec::new();
        for i in 0..dim {
            for j in i..dim {
                entries.push(FieldExpr::new(Expr::Num(if i == j { 1.0 } else { 0.0 })));
            }
        }
        SymmetricMatrixField { dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn index(&self, i: usize, j: usize) -> usize {
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        r * self.dim - r * (r + 1) / 2 + c
    }

    pub fn entry(&self, i: usize, j: usize) -> &FieldExpr {
        &self.entries[self.index(i, j)]
    }

    pub fn entry_mut(&mut self, i: usize, j: usize) -> &mut FieldExpr {
        let idx = self.index(i, j);
        &mut self.entries[idx]
    }

    pub fn depends_on_t(&self) -> bool {
        self.entries.iter().any(|e| e.depends_on_t())
    }

    /// Full matrix value at a point; symmetric by the storage convention.
    pub fn eval<T: Scalar>(&self, t: T, x: &[T]) -> Result<[[T; 3]; 3], EvalError> {
        let mut a = [[T::zero(); 3]; 3];
        for i in 0..self.dim {
            for j in i..self.dim {
                let v = self.entry(i, j).eval(t, x)?;
                a[i][j] = v;
                a[j][i] = v;
            }
        }
        Ok(a)
    }

    /// Matrix of entrywise time derivatives.
    pub fn eval_dt<T: Scalar>(&self, t: T, x: &[T]) -> Result<[[T; 3]; 3], EvalError> {
        let mut a = [[T::zero(); 3]; 3];
        for i in 0..self.dim {
            for j in i..self.dim {
                let v = self.entry(i, j).eval_dt(t, x)?;
                a[i][j] = v;
                a[j][i] = v;
            }
        }
        Ok(a)
    }
}

/// Antisymmetric matrix field; only the strict upper triangle is stored, the
/// diagonal is identically zero.
#[derive(Debug, Clone)]
pub struct AntisymmetricMatrixField {
    dim: usize,
    entries: Vec<FieldExpr>, // row-major strict upper triangle
}

impl AntisymmetricMatrixField {
    pub fn zero(dim: usize) -> Self {
        let n = dim * (dim - 1) / 2;
        AntisymmetricMatrixField {
            dim,
            entries: (0..n).map(|_| FieldExpr::zero()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j);
        i * self.dim - i * (i + 1) / 2 + (j - i) - 1
    }

    pub fn entry_mut(&mut self, i: usize, j: usize) -> &mut FieldExpr {
        let idx = self.index(i, j);
        &mut self.entries[idx]
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|e| e.is_zero())
    }

    pub fn depends_on_t(&self) -> bool {
        self.entries.iter().any(|e| e.depends_on_t())
    }

    /// Full matrix value; antisymmetric by the storage convention.
    pub fn eval<T: Scalar>(&self, t: T, x: &[T]) -> Result<[[T; 3]; 3], EvalError> {
        let mut a = [[T::zero(); 3]; 3];
        for i in 0..self.dim {
            for j in (i + 1)..self.dim {
                let v = self.entries[self.index(i, j)].eval(t, x)?;
                a[i][j] = v;
                a[j][i] = -v;
            }
        }
        Ok(a)
    }

    /// Column divergence vector `(div A)_j = sum_l d/dx_l A_{lj}`.
    pub fn divergence<T: Scalar>(
        &self,
        t: T,
        x: &[T],
        lengths: &[T],
    ) -> Result<[T; 3], EvalError> {
        let mut div = [T::zero(); 3];
        for j in 0..self.dim {
            let mut acc = T::zero();
            for l in 0..self.dim {
                if l == j {
                    continue;
                }
                let (entry, sign) = if l < j {
                    (&self.entries[self.index(l, j)], T::one())
                } else {
                    (&self.entries[self.index(j, l)], -T::one())
                };
                acc += sign * entry.eval_dx(l, t, x, lengths[l])?;
            }
            div[j] = acc;
        }
        Ok(div)
    }
}

/// Vector field with one expression per component.
#[derive(Debug, Clone)]
pub struct VectorField {
    pub comps: Vec<FieldExpr>,
}

impl VectorField {
    pub fn zero(dim: usize) -> Self {
        VectorField {
            comps: (0..dim).map(|_| FieldExpr::zero()).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.comps.iter().all(|c| c.is_zero())
    }

    pub fn depends_on_t(&self) -> bool {
        self.comps.iter().any(|c| c.depends_on_t())
    }

    pub fn eval<T: Scalar>(&self, t: T, x: &[T]) -> Result<[T; 3], EvalError> {
        let mut v = [T::zero(); 3];
        for (i, c) in self.comps.iter().enumerate() {
            v[i] = c.eval(t, x)?;
        }
        Ok(v)
    }
}

/// The coefficient fields of the operator: mass density, symmetric and
/// antisymmetric principal parts, convection and reaction.
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    pub rho: FieldExpr,
    pub a_sym: SymmetricMatrixField,
    pub a_anti: AntisymmetricMatrixField,
    pub b: VectorField,
    pub c: FieldExpr,
}

impl CoefficientSet {
    /// Unit mass, identity principal part, no lower-order terms.
    pub fn unit(dim: usize) -> Self {
        CoefficientSet {
            rho: FieldExpr::new(Expr::Num(1.0)),
            a_sym: SymmetricMatrixField::identity(dim),
            a_anti: AntisymmetricMatrixField::zero(dim),
            b: VectorField::zero(dim),
            c: FieldExpr::zero(),
        }
    }
}

// ---------------------------------------------------------------------------
// Nonlinearity
// ---------------------------------------------------------------------------

/// The scalar nonlinearity F. Expressions use the variable `z`.
#[derive(Debug, Clone)]
pub enum Nonlinearity<T> {
    Zero,
    /// `F(z) = z |z|^p`, `p > 0`.
    Power { p: T },
    /// F given by an expression in `z`.
    Formula { f: Expr },
    /// Piecewise-linear interpolant of `base` on the uniform grid of spacing
    /// `1/k` over `[-k, k]` with a node pinned at 0, constant outside.
    PiecewiseLinear {
        base: Box<Nonlinearity<T>>,
        level: usize,
        lip: T,
    },
}

impl<T: Scalar> Nonlinearity<T> {
    pub fn eval(&self, z: T) -> Result<T, EvalError> {
        match self {
            Nonlinearity::Zero => Ok(T::zero()),
            Nonlinearity::Power { p } => Ok(z * z.abs().powf(*p)),
            Nonlinearity::Formula { f } => f.eval(&Env::only_z(z)),
            Nonlinearity::PiecewiseLinear { base, level, .. } => {
                let k = from_usize::<T>(*level);
                let half_span = from_usize::<T>(level * level); // k^2 cells of width 1/k
                if z >= k {
                    return base.eval(k);
                }
                if z <= -k {
                    return base.eval(-k);
                }
                let scaled = z * k;
                let mut cell = scaled.floor();
                if cell >= half_span {
                    cell = half_span - T::one();
                }
                let z_lo = cell / k;
                let z_hi = (cell + T::one()) / k;
                let f_lo = base.eval(z_lo)?;
                let f_hi = base.eval(z_hi)?;
                let theta = scaled - cell;
                Ok((T::one() - theta) * f_lo + theta * f_hi)
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Nonlinearity::Zero)
    }
}

/// Nonlinearity together with its known analytic data.
#[derive(Debug, Clone)]
pub struct NonlinearitySpec<T> {
    pub f: Nonlinearity<T>,
    /// Global Lipschitz constant when known (declared, or recorded by
    /// [`lipschitz_approx`]).
    pub lip: Option<T>,
    /// Growth exponent `p` with `|F'(z)| <= C |z|^p` when known.
    pub growth_p: Option<T>,
}

impl<T: Scalar> NonlinearitySpec<T> {
    pub fn zero() -> Self {
        NonlinearitySpec {
            f: Nonlinearity::Zero,
            lip: Some(T::zero()),
            growth_p: None,
        }
    }

    pub fn power(p: T) -> Self {
        NonlinearitySpec {
            f: Nonlinearity::Power { p },
            lip: None,
            growth_p: Some(p),
        }
    }

    pub fn formula(f: Expr, lip: Option<T>) -> Self {
        NonlinearitySpec {
            f: Nonlinearity::Formula { f },
            lip,
            growth_p: None,
        }
    }

    pub fn eval(&self, z: T) -> Result<T, EvalError> {
        self.f.eval(z)
    }

    pub fn is_zero(&self) -> bool {
        self.f.is_zero()
    }

    /// A Lipschitz bound valid on `[-radius, radius]`, when one is available.
    pub fn lip_on_range(&self, radius: T) -> Option<T> {
        match &self.f {
            Nonlinearity::Zero => Some(T::zero()),
            Nonlinearity::Power { p } => Some((*p + T::one()) * radius.abs().powf(*p)),
            Nonlinearity::Formula { .. } => self.lip,
            Nonlinearity::PiecewiseLinear { lip, .. } => Some(*lip),
        }
    }

    /// The primitive `G(z) = int_0^z F(w) dw`, `G(0) = 0`.
    ///
    /// Closed form for the power kind, exact cell sums for piecewise-linear
    /// kinds, adaptive Gauss-Kronrod to relative 1e-10 otherwise.
    pub fn primitive(&self, z: T) -> Result<T, ProblemError> {
        match &self.f {
            Nonlinearity::Zero => Ok(T::zero()),
            Nonlinearity::Power { p } => {
                let exponent = *p + lit::<T>(2.0);
                Ok(z.abs().powf(exponent) / exponent)
            }
            Nonlinearity::PiecewiseLinear { .. } => self.primitive_piecewise(z),
            Nonlinearity::Formula { f } => {
                if z == T::zero() {
                    return Ok(T::zero());
                }
                let eval = |w: T| f.eval(&Env::only_z(w));
                gauss_kronrod_adaptive(&eval, T::zero(), z, lit(1e-10), 30)
            }
        }
    }

    fn primitive_piecewise(&self, z: T) -> Result<T, ProblemError> {
        let Nonlinearity::PiecewiseLinear { base, level, .. } = &self.f else {
            unreachable!()
        };
        let k = from_usize::<T>(*level);
        let cells = level * level;
        let sign = if z >= T::zero() { T::one() } else { -T::one() };
        let zmag = z.abs();
        let half = lit::<T>(0.5);
        let width = T::one() / k;
        let mut acc = T::zero();
        let mut covered = T::zero(); // distance from 0 already integrated
        let mut prev = base.eval(T::zero())?;
        for i in 0..cells {
            let hi_coord = from_usize::<T>(i + 1) / k * sign;
            let f_hi = base.eval(hi_coord)?;
            let cell_end = from_usize::<T>(i + 1) / k;
            if zmag <= cell_end {
                // partial cell: trapezoid against the interpolated endpoint
                let theta = (zmag - covered) * k;
                let f_z = (T::one() - theta) * prev + theta * f_hi;
                acc += half * (prev + f_z) * (zmag - covered);
                return Ok(sign * acc);
            }
            acc += half * (prev + f_hi) * width;
            covered = cell_end;
            prev = f_hi;
        }
        // constant extension beyond [-k, k]
        acc += prev * (zmag - covered);
        Ok(sign * acc)
    }
}

/// Returns the evaluator for the primitive `G` of a nonlinearity.
pub fn primitive_g<T: Scalar>(
    spec: &NonlinearitySpec<T>,
) -> impl Fn(T) -> Result<T, ProblemError> + '_ {
    move |z| spec.primitive(z)
}

/// Sign-preserving piecewise-linear Lipschitz approximant `F_k`.
///
/// Nodes at `i/k` for `|i| <= k^2` (0 pinned), linear in between, constant
/// outside `[-k, k]`. The returned spec records `Lip(F_k)` as the maximal
/// cell slope.
pub fn lipschitz_approx<T: Scalar>(
    spec: &NonlinearitySpec<T>,
    k: usize,
) -> Result<NonlinearitySpec<T>, ProblemError> {
    if k == 0 {
        return Err(ProblemError::BadApproximationLevel);
    }
    let f0 = spec.eval(T::zero())?;
    if f0 != T::zero() {
        return Err(ProblemError::NonzeroAtOrigin(
            f0.to_subset().unwrap_or(f64::NAN),
        ));
    }
    let kf = from_usize::<T>(k);
    let cells = (k * k) as i64;
    let mut lip = T::zero();
    let mut prev = spec.eval(-kf)?;
    for i in -cells..cells {
        let hi = from_usize::<T>((i + 1).unsigned_abs() as usize) / kf
            * if i + 1 < 0 { -T::one() } else { T::one() };
        let f_hi = spec.eval(hi)?;
        let slope = (f_hi - prev).abs() * kf;
        if slope > lip {
            lip = slope;
        }
        prev = f_hi;
    }
    Ok(NonlinearitySpec {
        f: Nonlinearity::PiecewiseLinear {
            base: Box::new(spec.f.clone()),
            level: k,
            lip,
        },
        lip: Some(lip),
        growth_p: spec.growth_p,
    })
}

// ---------------------------------------------------------------------------
// Adaptive Gauss-Kronrod (G7, K15)
// ---------------------------------------------------------------------------

const KRONROD_NODES: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144838258730,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
const KRONROD_WEIGHTS: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const GAUSS_WEIGHTS: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15<T: Scalar, E>(
    f: &impl Fn(T) -> Result<T, E>,
    a: T,
    b: T,
) -> Result<(T, T), E> {
    let half = (b - a) * lit::<T>(0.5);
    let center = (a + b) * lit::<T>(0.5);
    let mut kronrod = T::zero();
    let mut gauss = T::zero();
    for (idx, (&x, &wk)) in KRONROD_NODES.iter().zip(&KRONROD_WEIGHTS).enumerate() {
        let xt = lit::<T>(x);
        if x == 0.0 {
            let v = f(center)?;
            kronrod += lit::<T>(wk) * v;
            gauss += lit::<T>(GAUSS_WEIGHTS[3]) * v;
        } else {
            let vp = f(center + half * xt)?;
            let vm = f(center - half * xt)?;
            kronrod += lit::<T>(wk) * (vp + vm);
            // odd Kronrod indices are the embedded Gauss points
            if idx % 2 == 1 {
                gauss += lit::<T>(GAUSS_WEIGHTS[idx / 2]) * (vp + vm);
            }
        }
    }
    Ok((kronrod * half, gauss * half))
}

/// Adaptive bisection with the 15-point Kronrod / 7-point Gauss error pair.
fn gauss_kronrod_adaptive<T: Scalar>(
    f: &impl Fn(T) -> Result<T, EvalError>,
    a: T,
    b: T,
    rel_tol: T,
    max_depth: usize,
) -> Result<T, ProblemError> {
    fn recurse<T: Scalar>(
        f: &impl Fn(T) -> Result<T, EvalError>,
        a: T,
        b: T,
        rel_tol: T,
        depth: usize,
        scale: T,
    ) -> Result<T, ProblemError> {
        let (k, g) = gk15(f, a, b)?;
        let err = (k - g).abs();
        if err <= rel_tol * (k.abs() + scale) {
            return Ok(k);
        }
        if depth == 0 {
            return Err(ProblemError::QuadratureNonConvergence(30));
        }
        let mid = (a + b) * lit::<T>(0.5);
        let left = recurse(f, a, mid, rel_tol, depth - 1, scale)?;
        let right = recurse(f, mid, b, rel_tol, depth - 1, scale)?;
        Ok(left + right)
    }
    let (k0, _) = gk15(f, a, b)?;
    let scale = k0.abs() * lit::<T>(1e-4) + lit::<T>(1e-300);
    recurse(f, a, b, rel_tol, max_depth, scale)
}

// ---------------------------------------------------------------------------
// Initial data, sources, the full problem
// ---------------------------------------------------------------------------

/// Initial position and velocity fields, in the spatial variables only.
#[derive(Debug, Clone)]
pub struct InitialData<T> {
    pub u0: Expr,
    pub u1: Expr,
    /// Truncation level `j`; identity truncation when absent.
    pub truncation: Option<T>,
}

/// Manufactured source: the residual of the operator applied to a target
/// solution, evaluated by central differences (step `eps^(1/4)`, scaled by
/// the box lengths in space).
#[derive(Debug, Clone)]
pub struct MmsSource<T> {
    pub u_exact: Expr,
    pub coefficients: CoefficientSet,
    pub nonlinearity: NonlinearitySpec<T>,
    pub lengths: Vec<T>,
}

impl<T: Scalar> MmsSource<T> {
    fn u(&self, t: T, x: &[T]) -> Result<T, EvalError> {
        self.u_exact.eval(&Env::txyz(t, x))
    }

    fn u_t(&self, t: T, x: &[T], h: T) -> Result<T, EvalError> {
        Ok((self.u(t + h, x)? - self.u(t - h, x)?) / (h + h))
    }

    fn grad_u(&self, t: T, x: &[T], steps: &[T]) -> Result<[T; 3], EvalError> {
        let dim = self.lengths.len();
        let mut g = [T::zero(); 3];
        for i in 0..dim {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += steps[i];
            xm[i] -= steps[i];
            g[i] = (self.u(t, &xp)? - self.u(t, &xm)?) / (steps[i] + steps[i]);
        }
        Ok(g)
    }

    /// `f = (rho u')' - div(A grad u) + b . grad u + c u + F(u)` at `(t, x)`.
    pub fn eval(&self, t: T, x: &[T]) -> Result<T, EvalError> {
        let dim = self.lengths.len();
        let quarter = lit::<T>(0.25);
        let h_t = eps::<T>().powf(quarter);
        let steps: Vec<T> = self
            .lengths
            .iter()
            .map(|&l| eps::<T>().powf(quarter) * l)
            .collect();

        // (rho u')' by nesting two central differences
        let w = |tau: T| -> Result<T, EvalError> {
            Ok(self.coefficients.rho.eval(tau, x)? * self.u_t(tau, x, h_t)?)
        };
        let rho_term = (w(t + h_t)? - w(t - h_t)?) / (h_t + h_t);

        // div(A grad u) with A = A_s + A_a, flux differenced per axis
        let flux = |y: &[T], axis: usize| -> Result<T, EvalError> {
            let a_s = self.coefficients.a_sym.eval(t, y)?;
            let a_a = self.coefficients.a_anti.eval(t, y)?;
            let g = self.grad_u(t, y, &steps)?;
            let mut v = T::zero();
            for j in 0..dim {
                v += (a_s[axis][j] + a_a[axis][j]) * g[j];
            }
            Ok(v)
        };
        let mut div_term = T::zero();
        for i in 0..dim {
            let mut yp = x.to_vec();
            let mut ym = x.to_vec();
            yp[i] += steps[i];
            ym[i] -= steps[i];
            div_term += (flux(&yp, i)? - flux(&ym, i)?) / (steps[i] + steps[i]);
        }

        let g = self.grad_u(t, x, &steps)?;
        let bvec = self.coefficients.b.eval(t, x)?;
        let mut convection = T::zero();
        for i in 0..dim {
            convection += bvec[i] * g[i];
        }
        let u = self.u(t, x)?;
        let reaction = self.coefficients.c.eval(t, x)? * u;
        let nonlinear = self.nonlinearity.eval(u)?;

        Ok(rho_term - div_term + convection + reaction + nonlinear)
    }
}

/// The source term `f + g`, with `g = g0 - div(Gvec)` in the weak sense:
/// `<g, w> = int g0 w + int Gvec . grad w`.
#[derive(Debug, Clone)]
pub enum SourceField<T> {
    Formula(FieldExpr),
    Manufactured(Box<MmsSource<T>>),
}

impl<T: Scalar> SourceField<T> {
    pub fn eval(&self, t: T, x: &[T]) -> Result<T, EvalError> {
        match self {
            SourceField::Formula(f) => f.eval(t, x),
            SourceField::Manufactured(m) => m.eval(t, x),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, SourceField::Formula(f) if f.is_zero())
    }

    pub fn depends_on_t(&self) -> bool {
        match self {
            SourceField::Formula(f) => f.depends_on_t(),
            SourceField::Manufactured(_) => true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SourceSet<T> {
    pub f: SourceField<T>,
    pub g0: FieldExpr,
    pub gvec: VectorField,
}

impl<T: Scalar> SourceSet<T> {
    pub fn zero(dim: usize) -> Self {
        SourceSet {
            f: SourceField::Formula(FieldExpr::zero()),
            g0: FieldExpr::zero(),
            gvec: VectorField::zero(dim),
        }
    }

    pub fn g_is_zero(&self) -> bool {
        self.g0.is_zero() && self.gvec.is_zero()
    }
}

/// The full problem data.
#[derive(Debug, Clone)]
pub struct ProblemSpec<T> {
    pub domain: BoxDomain<T>,
    pub coefficients: CoefficientSet,
    pub sources: SourceSet<T>,
    pub nonlinearity: NonlinearitySpec<T>,
    pub initial: InitialData<T>,
    /// Coercivity constant: `rho >= alpha` and `A_s >= alpha I`.
    pub alpha: T,
    /// Time horizon T.
    pub horizon: T,
}

/// Pointwise clamp of initial-data samples to `[-j, j]`.
pub fn truncate<T: Scalar>(samples: &[T], j: T) -> Result<Vec<T>, ProblemError> {
    if !(j > T::zero()) {
        return Err(ProblemError::BadTruncationLevel);
    }
    Ok(samples.iter().map(|&s| xi(j, s)).collect())
}

/// The three-branch clamp to `[-j, j]`.
pub fn xi<T: Scalar>(j: T, s: T) -> T {
    if s < -j {
        -j
    } else if s > j {
        j
    } else {
        s
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Sampling resolution for structural validation.
#[derive(Debug, Clone, Copy)]
pub struct ValidationGrid {
    pub space: usize,
    pub time: usize,
    /// Symmetric range `[-R, R]` for sign-condition sampling.
    pub sign_range: f64,
    pub sign_samples: usize,
}

impl Default for ValidationGrid {
    fn default() -> Self {
        ValidationGrid {
            space: 16,
            time: 33,
            sign_range: 16.0,
            sign_samples: 10001,
        }
    }
}

/// Outcome of sampled validation of the problem assumptions.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub min_rho: Option<f64>,
    pub min_eig_a_sym: Option<f64>,
    pub sign_violation: Option<(f64, f64)>,
    pub nonlinearity_at_zero: Option<f64>,
    pub negative_primitive: Option<(f64, f64)>,
    pub boundary_max_u0: Option<f64>,
    pub field_errors: Vec<(String, String)>,
    pub assumed: Vec<String>,
    pub alpha: f64,
    pub passed: bool,
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "validation {}", if self.passed { "PASS" } else { "FAIL" })?;
        writeln!(f, "  alpha = {}", self.alpha)?;
        if let Some(v) = self.min_rho {
            writeln!(f, "  min sampled rho = {v}")?;
        }
        if let Some(v) = self.min_eig_a_sym {
            writeln!(f, "  min sampled eigenvalue of A_s = {v}")?;
        }
        match self.sign_violation {
            Some((z, zf)) => writeln!(f, "  sign condition VIOLATED at z = {z}: z*F(z) = {zf}")?,
            None => writeln!(f, "  sign condition z*F(z) >= 0: no sampled violation")?,
        }
        if let Some(v) = self.nonlinearity_at_zero {
            writeln!(f, "  F(0) = {v} (must vanish)")?;
        }
        if let Some((z, g)) = self.negative_primitive {
            writeln!(f, "  primitive G negative at z = {z}: G = {g}")?;
        }
        if let Some(v) = self.boundary_max_u0 {
            writeln!(f, "  max |u0| on boundary samples = {v}")?;
        }
        for (field, msg) in &self.field_errors {
            writeln!(f, "  field `{field}` failed to evaluate: {msg}")?;
        }
        for note in &self.assumed {
            writeln!(f, "  assumed: {note}")?;
        }
        Ok(())
    }
}

fn to_f64<T: Scalar>(v: T) -> f64 {
    v.to_subset().unwrap_or(f64::NAN)
}

/// Validates the structural assumptions by sampling: coercivity of `rho` and
/// `A_s`, the sign condition and `F(0)=0`, nonnegativity of `G`, and the
/// Dirichlet compatibility of `u0`. Expression errors are collected per
/// field, not thrown.
pub fn validate<T: Scalar>(
    spec: &ProblemSpec<T>,
    grid: &ValidationGrid,
) -> Result<ValidationReport, ProblemError> {
    if grid.space < 8 || grid.time < 16 {
        return Err(ProblemError::GridTooCoarse);
    }
    let dim = spec.domain.dim();
    let lengths = spec.domain.lengths();
    let mut report = ValidationReport {
        min_rho: None,
        min_eig_a_sym: None,
        sign_violation: None,
        nonlinearity_at_zero: None,
        negative_primitive: None,
        boundary_max_u0: None,
        field_errors: Vec::new(),
        assumed: vec![
            "G(u0) in L1(Omega): automatic for continuous u0 on a box, not checked".to_owned(),
        ],
        alpha: to_f64(spec.alpha),
        passed: true,
    };

    // variable sanity: initial data must be spatial, fields within dimension
    let mut check_vars = |name: &str, expr: &Expr, allow_t: bool| {
        let used = expr.vars_used();
        if used[Var::T as usize] && !allow_t {
            report
                .field_errors
                .push((name.to_owned(), "must not depend on t".to_owned()));
        }
        if used[Var::Y as usize] && dim < 2 {
            report
                .field_errors
                .push((name.to_owned(), "uses y but dimension < 2".to_owned()));
        }
        if used[Var::Z as usize] && dim < 3 {
            report
                .field_errors
                .push((name.to_owned(), "uses z but dimension < 3".to_owned()));
        }
    };
    check_vars("initial.u0", &spec.initial.u0, false);
    check_vars("initial.u1", &spec.initial.u1, false);

    // space-time grid of cell centers x interval endpoints
    let mut space_pts: Vec<Vec<T>> = Vec::new();
    let mut idx = vec![0usize; dim];
    'outer: loop {
        let pt: Vec<T> = (0..dim)
            .map(|i| {
                (from_usize::<T>(idx[i]) + lit::<T>(0.5)) / from_usize::<T>(grid.space)
                    * lengths[i]
            })
            .collect();
        space_pts.push(pt);
        for i in (0..dim).rev() {
            idx[i] += 1;
            if idx[i] < grid.space {
                continue 'outer;
            }
            idx[i] = 0;
        }
        break;
    }
    let times: Vec<T> = (0..grid.time)
        .map(|k| from_usize::<T>(k) / from_usize::<T>(grid.time - 1) * spec.horizon)
        .collect();

    let mut min_rho: Option<T> = None;
    let mut min_eig: Option<T> = None;
    let mut rho_failed = false;
    let mut a_failed = false;
    for &t in &times {
        for x in &space_pts {
            if !rho_failed {
                match spec.coefficients.rho.eval(t, x) {
                    Ok(v) => min_rho = Some(min_rho.map_or(v, |m: T| m.min(v))),
                    Err(e) => {
                        report.field_errors.push(("rho".to_owned(), e.to_string()));
                        rho_failed = true;
                    }
                }
            }
            if !a_failed {
                match spec.coefficients.a_sym.eval(t, x) {
                    Ok(a) => {
                        let lo = sym_min_eig(&a, dim);
                        min_eig = Some(min_eig.map_or(lo, |m: T| m.min(lo)));
                    }
                    Err(e) => {
                        report.field_errors.push(("A_s".to_owned(), e.to_string()));
                        a_failed = true;
                    }
                }
            }
        }
    }
    report.min_rho = min_rho.map(to_f64);
    report.min_eig_a_sym = min_eig.map(to_f64);

    // remaining coefficient and source fields: evaluability only
    let probe_t = times[times.len() / 2];
    let probe_x = &space_pts[space_pts.len() / 2];
    let probe = |name: &str, r: Result<T, EvalError>, errs: &mut Vec<(String, String)>| {
        if let Err(e) = r {
            errs.push((name.to_owned(), e.to_string()));
        }
    };
    {
        let errs = &mut report.field_errors;
        probe("A_a", spec.coefficients.a_anti.eval(probe_t, probe_x).map(|_| T::zero()), errs);
        probe("b", spec.coefficients.b.eval(probe_t, probe_x).map(|_| T::zero()), errs);
        probe("c", spec.coefficients.c.eval(probe_t, probe_x), errs);
        probe("sources.f", spec.sources.f.eval(probe_t, probe_x), errs);
        probe("sources.g0", spec.sources.g0.eval(probe_t, probe_x), errs);
        probe("sources.gvec", spec.sources.gvec.eval(probe_t, probe_x).map(|_| T::zero()), errs);
        probe(
            "initial.u1",
            spec.initial.u1.eval(&Env::txyz(T::zero(), probe_x)),
            errs,
        );
    }

    // sign condition and F(0)
    if !spec.nonlinearity.is_zero() {
        match spec.nonlinearity.eval(T::zero()) {
            Ok(f0) => {
                if f0 != T::zero() {
                    report.nonlinearity_at_zero = Some(to_f64(f0));
                }
            }
            Err(e) => report.field_errors.push(("F".to_owned(), e.to_string())),
        }
        let n = grid.sign_samples.max(3);
        let r = lit::<T>(grid.sign_range);
        let slack = lit::<T>(-1e-12);
        'sign: for i in 0..n {
            let z = (from_usize::<T>(i) / from_usize::<T>(n - 1) * lit::<T>(2.0) - T::one()) * r;
            match spec.nonlinearity.eval(z) {
                Ok(fz) => {
                    let zf = z * fz;
                    if zf < slack * (T::one() + z * z) {
                        report.sign_violation = Some((to_f64(z), to_f64(zf)));
                        break 'sign;
                    }
                }
                Err(e) => {
                    report.field_errors.push(("F".to_owned(), e.to_string()));
                    break 'sign;
                }
            }
        }
        // G >= 0 where no closed form guarantees it
        if matches!(
            spec.nonlinearity.f,
            Nonlinearity::Formula { .. } | Nonlinearity::PiecewiseLinear { .. }
        ) && report.sign_violation.is_none()
        {
            let coarse = 201;
            'prim: for i in 0..coarse {
                let z =
                    (from_usize::<T>(i) / from_usize::<T>(coarse - 1) * lit::<T>(2.0) - T::one()) * r;
                match spec.nonlinearity.primitive(z) {
                    Ok(g) => {
                        if g < slack * (T::one() + z * z) {
                            report.negative_primitive = Some((to_f64(z), to_f64(g)));
                            break 'prim;
                        }
                    }
                    Err(e) => {
                        report.field_errors.push(("G".to_owned(), e.to_string()));
                        break 'prim;
                    }
                }
            }
        }
    }

    // Dirichlet compatibility of u0 on the boundary faces
    let mut boundary_max = T::zero();
    let mut u0_failed = false;
    for face_dim in 0..dim {
        for &face_val in &[T::zero(), lengths[face_dim]] {
            // grid over the remaining dimensions
            let mut pts: Vec<Vec<T>> = vec![Vec::new()];
            for i in 0..dim {
                let mut next = Vec::new();
                if i == face_dim {
                    for p in &pts {
                        let mut q = p.clone();
                        q.push(face_val);
                        next.push(q);
                    }
                } else {
                    for p in &pts {
                        for k in 0..grid.space {
                            let mut q = p.clone();
                            q.push(
                                from_usize::<T>(k) / from_usize::<T>(grid.space - 1) * lengths[i],
                            );
                            next.push(q);
                        }
                    }
                }
                pts = next;
            }
            for x in &pts {
                match spec.initial.u0.eval(&Env::txyz(T::zero(), x)) {
                    Ok(v) => boundary_max = boundary_max.max(v.abs()),
                    Err(e) => {
                        if !u0_failed {
                            report.field_errors.push(("initial.u0".to_owned(), e.to_string()));
                            u0_failed = true;
                        }
                    }
                }
            }
        }
    }
    if !u0_failed {
        report.boundary_max_u0 = Some(to_f64(boundary_max));
    }

    let boundary_tol = lit::<T>(1e-8);
    report.passed = report.field_errors.is_empty()
        && report.sign_violation.is_none()
        && report.nonlinearity_at_zero.is_none()
        && report.negative_primitive.is_none()
        && min_rho.is_some_and(|v| v >= spec.alpha)
        && min_eig.is_some_and(|v| v >= spec.alpha)
        && boundary_max <= boundary_tol;
    Ok(report)
}

/// Smallest eigenvalue of a small symmetric matrix (dim <= 3).
pub fn sym_min_eig<T: Scalar>(a: &[[T; 3]; 3], dim: usize) -> T {
    match dim {
        1 => a[0][0],
        _ => {
            let m = DMatrix::from_fn(dim, dim, |i, j| a[i][j]);
            let eig = m.symmetric_eigen();
            let mut lo = eig.eigenvalues[0];
            for i in 1..dim {
                lo = lo.min(eig.eigenvalues[i]);
            }
            lo
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exprlang::parse;
    use proptest::prelude::*;

    fn sqrt_sign_spec() -> NonlinearitySpec<f64> {
        NonlinearitySpec::formula(parse("sign(z)*sqrt(abs(z))").unwrap(), None)
    }

    fn spec_1d(rho: &str, alpha: f64, horizon: f64) -> ProblemSpec<f64> {
        let domain = BoxDomain::new(&[1.0]).unwrap();
        ProblemSpec {
            domain,
            coefficients: CoefficientSet {
                rho: FieldExpr::new(parse(rho).unwrap()),
                a_sym: SymmetricMatrixField::identity(1),
                a_anti: AntisymmetricMatrixField::zero(1),
                b: VectorField::zero(1),
                c: FieldExpr::zero(),
            },
            sources: SourceSet::zero(1),
            nonlinearity: NonlinearitySpec::power(1.0),
            initial: InitialData {
                u0: parse("x*(1-x)").unwrap(),
                u1: Expr::Num(0.0),
                truncation: None,
            },
            alpha,
            horizon,
        }
    }

    #[test]
    fn validate_passes_unit_problem() {
        let spec = spec_1d("1", 1.0, 1.0);
        let report = validate(&spec, &ValidationGrid::default()).unwrap();
        assert!(report.passed, "{report}");
        assert_eq!(report.min_rho, Some(1.0));
        assert_eq!(report.min_eig_a_sym, Some(1.0));
    }

    #[test]
    fn validate_rejects_decaying_rho() {
        let spec = spec_1d("0.5 - t", 0.25, 1.0);
        let report = validate(&spec, &ValidationGrid::default()).unwrap();
        assert!(!report.passed);
        assert!(report.min_rho.unwrap() < 0.25);
    }

    #[test]
    fn validate_rejects_sign_violating_nonlinearity() {
        let mut spec = spec_1d("1", 1.0, 1.0);
        spec.nonlinearity = NonlinearitySpec::formula(parse("z^3 - z").unwrap(), None);
        let report = validate(&spec, &ValidationGrid::default()).unwrap();
        assert!(!report.passed);
        let (z, zf) = report.sign_violation.expect("violation found");
        // z*F(z) = z^4 - z^2 < 0 anywhere in (0,1); e.g. z=0.5 gives -0.375*0.5
        assert!(z.abs() < 1.0 && zf < 0.0);
    }

    #[test]
    fn validate_grid_too_coarse() {
        let spec = spec_1d("1", 1.0, 1.0);
        let grid = ValidationGrid {
            space: 4,
            ..Default::default()
        };
        assert!(matches!(
            validate(&spec, &grid),
            Err(ProblemError::GridTooCoarse)
        ));
    }

    #[test]
    fn truncation_examples() {
        assert_eq!(xi(2.0, 3.0), 2.0);
        assert_eq!(xi(2.0, -5.0), -2.0);
        assert_eq!(xi(2.0, 1.0), 1.0);
        for s in [-1.0f64, 0.0, 0.5] {
            let c = xi(0.75, s);
            assert!(c * s >= 0.0);
            assert!(c.abs() <= s.abs() + 1e-15);
        }
        // j at least the sup of u0 acts as the identity
        let samples = [0.1, -0.2, 0.24];
        let out = truncate(&samples, 0.25).unwrap();
        assert_eq!(out, samples.to_vec());
        assert!(truncate(&samples, 0.0).is_err());
    }

    #[test]
    fn lipschitz_approx_interpolates_sqrt() {
        let approx: NonlinearitySpec<f64> = lipschitz_approx(&sqrt_sign_spec(), 4).unwrap();
        // midpoint of the first cell [0, 1/4]: interpolant of F(0)=0, F(1/4)=1/2
        let v = approx.eval(0.125).unwrap();
        assert!((v - 0.25).abs() < 1e-14);
        // recorded Lipschitz constant is the first-cell slope sqrt(k)
        assert!((approx.lip.unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lipschitz_approx_reproduces_linear() {
        let linear: NonlinearitySpec<f64> = NonlinearitySpec::formula(parse("z").unwrap(), Some(1.0));
        let approx = lipschitz_approx(&linear, 3).unwrap();
        assert!((approx.eval(0.5).unwrap() - 0.5).abs() < 1e-15);
        assert!((approx.eval(2.9).unwrap() - 2.9).abs() < 1e-13);
        // constant extension outside [-k, k]
        assert!((approx.eval(5.0).unwrap() - 3.0).abs() < 1e-15);
        assert!((approx.eval(-5.0).unwrap() + 3.0).abs() < 1e-15);
    }

    #[test]
    fn lipschitz_approx_preserves_oddness() {
        let cubic = NonlinearitySpec::power(2.0f64);
        let approx = lipschitz_approx(&cubic, 2).unwrap();
        let plus = approx.eval(1.3).unwrap();
        let minus = approx.eval(-1.3).unwrap();
        assert!((plus + minus).abs() < 1e-13);
    }

    #[test]
    fn approximants_satisfy_sign_condition_exactly() {
        for k in [1usize, 4, 16] {
            let approx = lipschitz_approx(&sqrt_sign_spec(), k).unwrap();
            let n = 2000;
            for i in 0..=n {
                let z = -2.0 * (k as f64) + 4.0 * (k as f64) * (i as f64) / (n as f64);
                let fz = approx.eval(z).unwrap();
                assert!(z * fz >= 0.0, "k={k} z={z} F_k={fz}");
            }
        }
    }

    #[test]
    fn approximation_error_decreases_to_zero() {
        // sup over |z| <= 2 of |F_k - F| by dense sampling; nonincreasing in k
        // along powers of two and below 0.05 at k = 1024
        let f = sqrt_sign_spec();
        let mut prev = f64::INFINITY;
        for k in [1usize, 4, 16, 64, 256, 1024] {
            let approx = lipschitz_approx(&f, k).unwrap();
            let mut sup = 0.0f64;
            let n = 4001;
            for i in 0..n {
                let z = -2.0 + 4.0 * (i as f64) / ((n - 1) as f64);
                let d = (approx.eval(z).unwrap() - f.eval(z).unwrap()).abs();
                sup = sup.max(d);
            }
            assert!(sup <= prev + 1e-15, "sup not nonincreasing at k={k}");
            prev = sup;
        }
        assert!(prev <= 0.05, "sup at k=1024 is {prev}");
    }

    proptest! {
        #[test]
        fn approximant_is_lipschitz_with_recorded_constant(
            z1 in -6.0f64..6.0,
            z2 in -6.0f64..6.0,
        ) {
            let approx = lipschitz_approx(&sqrt_sign_spec(), 4).unwrap();
            let lip = approx.lip.unwrap();
            let d = (approx.eval(z1).unwrap() - approx.eval(z2).unwrap()).abs();
            prop_assert!(d <= lip * (z1 - z2).abs() * (1.0 + 1e-12) + 1e-15);
        }
    }

    #[test]
    fn primitive_closed_forms() {
        let power = NonlinearitySpec::power(1.0f64);
        assert!((power.primitive(2.0).unwrap() - 8.0 / 3.0).abs() < 1e-12);
        assert_eq!(power.primitive(0.0).unwrap(), 0.0);

        let cubic_expr: NonlinearitySpec<f64> = NonlinearitySpec::formula(parse("z^3").unwrap(), None);
        let got = cubic_expr.primitive(1.5).unwrap();
        assert!(
            (got - 1.265625).abs() < 1e-9 * 1.265625,
            "G(1.5) = {got}"
        );
        assert_eq!(cubic_expr.primitive(0.0).unwrap(), 0.0);
        // negative side: G(z) = z^4/4 is even
        let got = cubic_expr.primitive(-1.5).unwrap();
        assert!((got - 1.265625).abs() < 1e-9 * 1.265625);
    }

    #[test]
    fn primitive_of_approximant_matches_base_for_linear() {
        let linear = NonlinearitySpec::formula(parse("z").unwrap(), Some(1.0));
        let approx = lipschitz_approx(&linear, 8).unwrap();
        // G(z) = z^2/2 inside [-k, k]; the trapezoid cell sums are exact there
        for z in [-3.0f64, -0.4, 0.0, 0.7, 2.0] {
            let got = approx.primitive(z).unwrap();
            assert!((got - 0.5 * z * z).abs() < 1e-12, "G_k({z}) = {got}");
        }
    }

    #[test]
    fn primitive_matches_closed_form_for_sqrt_kind() {
        // F = sign(z) sqrt|z| has G(z) = (2/3)|z|^{3/2}
        let f = sqrt_sign_spec();
        for z in [0.5f64, 2.0, -1.25] {
            let got = f.primitive(z).unwrap();
            let want = 2.0 / 3.0 * z.abs().powf(1.5);
            assert!((got - want).abs() < 1e-9 * want, "G({z}) = {got} vs {want}");
        }
    }

    #[test]
    fn truncation_norm_dominance_on_samples() {
        let samples: Vec<f64> = (0..100).map(|i| (i as f64 / 9.0).sin() * 3.0).collect();
        let clamped = truncate(&samples, 1.5).unwrap();
        let norm = |v: &[f64]| v.iter().map(|s| s * s).sum::<f64>().sqrt();
        assert!(norm(&clamped) <= norm(&samples));
        for (c, s) in clamped.iter().zip(&samples) {
            assert!(c.abs() <= s.abs() && c * s >= 0.0);
        }
    }
}
