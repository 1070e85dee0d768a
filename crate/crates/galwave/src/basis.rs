//! Galerkin subspaces from Dirichlet eigenfunctions of the Laplacian on an
//! axis-aligned box, with tensor-product Gauss-Legendre quadrature.
//!
//! On the box `(0,L_1) x ... x (0,L_d)` the eigenfunctions are
//! `w_k(x) = prod_i sqrt(2/L_i) sin(k_i pi x_i / L_i)` with eigenvalues
//! `lambda_k = sum_i (k_i pi / L_i)^2`; they form an orthonormal basis of
//! L^2 and diagonalize the gradient inner product.

use crate::scalar::{from_usize, lit, Scalar};
use nalgebra::DVector;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BasisError {
    #[error("domain dimension must be 1, 2 or 3, got {0}")]
    BadDimension(usize),
    #[error("box side lengths must be positive")]
    NonPositiveLength,
    #[error("basis size m must be at least 1")]
    EmptyBasis,
    #[error("quadrature order must be at least 2, got {0}")]
    BadQuadratureOrder(usize),
    #[error("mode index {index} out of range for basis of size {size}")]
    ModeOutOfRange { index: usize, size: usize },
    #[error("sample count {got} does not match quadrature node count {expected}")]
    SampleLengthMismatch { got: usize, expected: usize },
    #[error("coefficient vector length {got} does not match basis size {expected}")]
    CoefficientLengthMismatch { got: usize, expected: usize },
}

/// Axis-aligned box `(0,L_1) x ... x (0,L_d)`, `d` in `{1,2,3}`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxDomain<T> {
    lengths: Vec<T>,
}

impl<T: Scalar> BoxDomain<T> {
    pub fn new(lengths: &[T]) -> Result<Self, BasisError> {
        if lengths.is_empty() || lengths.len() > 3 {
            return Err(BasisError::BadDimension(lengths.len()));
        }
        if lengths.iter().any(|&l| !(l > T::zero())) {
            return Err(BasisError::NonPositiveLength);
        }
        Ok(BoxDomain {
            lengths: lengths.to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.lengths.len()
    }

    pub fn lengths(&self) -> &[T] {
        &self.lengths
    }

    pub fn volume(&self) -> T {
        self.lengths.iter().fold(T::one(), |acc, &l| acc * l)
    }
}

/// A multi-index `k`; only the first `dim` entries are meaningful.
pub type MultiIndex = [usize; 3];

/// The `m` lowest Dirichlet eigenpairs of the negative Laplacian on a box.
///
/// Modes are sorted by ascending eigenvalue, ties broken lexicographically
/// on the multi-index; the ordering is deterministic across runs.
#[derive(Debug, Clone)]
pub struct BasisSet<T> {
    domain: BoxDomain<T>,
    modes: Vec<MultiIndex>,
    eigenvalues: Vec<T>,
}

fn eigenvalue_of<T: Scalar>(lengths: &[T], k: &MultiIndex) -> T {
    let mut lambda = T::zero();
    for (i, &l) in lengths.iter().enumerate() {
        let freq = from_usize::<T>(k[i]) * T::pi() / l;
        lambda += freq * freq;
    }
    lambda
}

/// Builds the basis of the `m` lowest modes.
pub fn build_basis<T: Scalar>(domain: &BoxDomain<T>, m: usize) -> Result<BasisSet<T>, BasisError> {
    if m == 0 {
        return Err(BasisError::EmptyBasis);
    }
    let dim = domain.dim();
    let lengths = domain.lengths();
    let mut per_dim = m.max(2);
    loop {
        let mut candidates: Vec<(T, MultiIndex)> = Vec::new();
        let mut k: MultiIndex = [1, 1, 1];
        'outer: loop {
            let mut stored = [0usize; 3];
            stored[..dim].copy_from_slice(&k[..dim]);
            candidates.push((eigenvalue_of(lengths, &k), stored));
            // odometer increment over [1, per_dim]^dim
            for i in 0..dim {
                if k[i] < per_dim {
                    k[i] += 1;
                    continue 'outer;
                }
                k[i] = 1;
            }
            break;
        }
        candidates.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .expect("eigenvalues are finite")
                .then_with(|| a.1[..dim].cmp(&b.1[..dim]))
        });
        if candidates.len() >= m {
            // Any excluded multi-index has some k_i >= per_dim + 1, hence an
            // eigenvalue of at least min_i ((per_dim+1) pi / L_i)^2.
            let cutoff = lengths
                .iter()
                .map(|&l| {
                    let f = from_usize::<T>(per_dim + 1) * T::pi() / l;
                    f * f
                })
                .fold(None::<T>, |acc, v| Some(acc.map_or(v, |a| a.min(v))))
                .unwrap();
            if candidates[m - 1].0 < cutoff {
                candidates.truncate(m);
                let (eigenvalues, modes) = candidates.into_iter().map(|(l, k)| (l, k)).unzip();
                return Ok(BasisSet {
                    domain: domain.clone(),
                    modes,
                    eigenvalues,
                });
            }
        }
        per_dim *= 2;
    }
}

impl<T: Scalar> BasisSet<T> {
    pub fn domain(&self) -> &BoxDomain<T> {
        &self.domain
    }

    pub fn size(&self) -> usize {
        self.modes.len()
    }

    pub fn modes(&self) -> &[MultiIndex] {
        &self.modes
    }

    pub fn eigenvalues(&self) -> &[T] {
        &self.eigenvalues
    }

    /// Smallest eigenvalue; the Poincare constant of the box is `1/sqrt(lambda_1)`.
    pub fn lambda_min(&self) -> T {
        self.eigenvalues[0]
    }

    /// Largest mode index appearing in any dimension; drives quadrature needs.
    pub fn max_mode_index(&self) -> usize {
        let dim = self.domain.dim();
        self.modes
            .iter()
            .map(|k| k[..dim].iter().copied().max().unwrap())
            .max()
            .unwrap()
    }

    fn check_mode(&self, j: usize) -> Result<(), BasisError> {
        if j >= self.size() {
            return Err(BasisError::ModeOutOfRange {
                index: j,
                size: self.size(),
            });
        }
        Ok(())
    }

    /// Value of the j-th basis function at a point of the closed box.
    pub fn eval(&self, j: usize, x: &[T]) -> Result<T, BasisError> {
        self.check_mode(j)?;
        let k = &self.modes[j];
        let mut v = T::one();
        for (i, &l) in self.domain.lengths().iter().enumerate() {
            let norm = (lit::<T>(2.0) / l).sqrt();
            v *= norm * (from_usize::<T>(k[i]) * T::pi() * x[i] / l).sin();
        }
        Ok(v)
    }

    /// Gradient of the j-th basis function; only the first `dim` entries are set.
    pub fn eval_grad(&self, j: usize, x: &[T]) -> Result<[T; 3], BasisError> {
        self.check_mode(j)?;
        let k = &self.modes[j];
        let dim = self.domain.dim();
        let mut sines = [T::one(); 3];
        let mut cosines = [T::one(); 3];
        let mut freqs = [T::zero(); 3];
        let mut norm = T::one();
        for (i, &l) in self.domain.lengths().iter().enumerate() {
            let freq = from_usize::<T>(k[i]) * T::pi() / l;
            let arg = freq * x[i];
            sines[i] = arg.sin();
            cosines[i] = arg.cos();
            freqs[i] = freq;
            norm *= (lit::<T>(2.0) / l).sqrt();
        }
        let mut grad = [T::zero(); 3];
        for l in 0..dim {
            let mut g = norm * freqs[l] * cosines[l];
            for i in 0..dim {
                if i != l {
                    g *= sines[i];
                }
            }
            grad[l] = g;
        }
        Ok(grad)
    }
}

/// Tensor-product Gauss-Legendre rule on the box.
#[derive(Debug, Clone)]
pub struct QuadratureRule<T> {
    nodes: Vec<[T; 3]>,
    weights: Vec<T>,
    points_per_dim: usize,
    dim: usize,
}

impl<T: Scalar> QuadratureRule<T> {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn nodes(&self) -> &[[T; 3]] {
        &self.nodes
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn points_per_dim(&self) -> usize {
        self.points_per_dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Integrates samples given at the quadrature nodes.
    pub fn integrate(&self, samples: &[T]) -> Result<T, BasisError> {
        if samples.len() != self.len() {
            return Err(BasisError::SampleLengthMismatch {
                got: samples.len(),
                expected: self.len(),
            });
        }
        let mut acc = T::zero();
        for (w, s) in self.weights.iter().zip(samples) {
            acc += *w * *s;
        }
        Ok(acc)
    }
}

/// Gauss-Legendre nodes and weights on (-1, 1), by Newton iteration on the
/// Legendre polynomial with the standard Chebyshev initial guesses.
fn gauss_legendre_unit<T: Scalar>(n: usize) -> (Vec<T>, Vec<T>) {
    let mut nodes = vec![T::zero(); n];
    let mut weights = vec![T::zero(); n];
    let tol = crate::scalar::eps::<T>() * lit::<T>(4.0);
    for i in 0..n {
        let guess_arg = T::pi() * (from_usize::<T>(i + 1) - lit::<T>(0.25))
            / (from_usize::<T>(n) + lit::<T>(0.5));
        let mut x = guess_arg.cos();
        for _ in 0..100 {
            // P_n(x) and P_{n-1}(x) by the three-term recurrence.
            let mut p_prev = T::one();
            let mut p = x;
            for k in 2..=n {
                let kf = from_usize::<T>(k);
                let next = ((lit::<T>(2.0) * kf - T::one()) * x * p - (kf - T::one()) * p_prev) / kf;
                p_prev = p;
                p = next;
            }
            let dp = from_usize::<T>(n) * (x * p - p_prev) / (x * x - T::one());
            let dx = p / dp;
            x -= dx;
            if dx.abs() <= tol {
                break;
            }
        }
        // one clean evaluation at the converged node for the weight
        let mut p_prev = T::one();
        let mut p = x;
        for k in 2..=n {
            let kf = from_usize::<T>(k);
            let next = ((lit::<T>(2.0) * kf - T::one()) * x * p - (kf - T::one()) * p_prev) / kf;
            p_prev = p;
            p = next;
        }
        let dp = from_usize::<T>(n) * (x * p - p_prev) / (x * x - T::one());
        nodes[i] = x;
        weights[i] = lit::<T>(2.0) / ((T::one() - x * x) * dp * dp);
    }
    // ascending node order
    let mut paired: Vec<(T, T)> = nodes.into_iter().zip(weights).collect();
    paired.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("nodes are finite"));
    paired.into_iter().unzip()
}

/// Builds the tensor rule with `order` points per dimension; exact for tensor
/// polynomials of degree `2*order - 1` per dimension.
pub fn build_quadrature<T: Scalar>(
    domain: &BoxDomain<T>,
    order: usize,
) -> Result<QuadratureRule<T>, BasisError> {
    if order < 2 {
        return Err(BasisError::BadQuadratureOrder(order));
    }
    let dim = domain.dim();
    let (xi, wi) = gauss_legendre_unit::<T>(order);
    // map (-1,1) to (0,L) per dimension
    let half = lit::<T>(0.5);
    let mapped: Vec<(Vec<T>, Vec<T>)> = domain
        .lengths()
        .iter()
        .map(|&l| {
            let nodes = xi.iter().map(|&x| (x + T::one()) * half * l).collect();
            let weights = wi.iter().map(|&w| w * half * l).collect();
            (nodes, weights)
        })
        .collect();
    let total = order.pow(dim as u32);
    let mut nodes = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    let mut idx = [0usize; 3];
    'outer: loop {
        let mut node = [T::zero(); 3];
        let mut w = T::one();
        for i in 0..dim {
            node[i] = mapped[i].0[idx[i]];
            w *= mapped[i].1[idx[i]];
        }
        nodes.push(node);
        weights.push(w);
        for i in (0..dim).rev() {
            idx[i] += 1;
            if idx[i] < order {
                continue 'outer;
            }
            idx[i] = 0;
        }
        break;
    }
    Ok(QuadratureRule {
        nodes,
        weights,
        points_per_dim: order,
        dim,
    })
}

/// Default quadrature order for a basis: `2 * max mode index + 12`.
///
/// The +12 margin brings Gauss-Legendre onto its superexponential branch for
/// products of the highest modes; +8 still leaves ~1e-11 in the Gram matrix
/// of small bases.
pub fn default_quad_order<T: Scalar>(basis: &BasisSet<T>) -> usize {
    2 * basis.max_mode_index() + 12
}

/// L^2 projection of nodal samples onto the basis: `d_j = (u, w_j)`.
///
/// Summation runs sequentially over nodes, then modes, for reproducibility.
pub fn project_h<T: Scalar>(
    samples: &[T],
    basis: &BasisSet<T>,
    rule: &QuadratureRule<T>,
) -> Result<DVector<T>, BasisError> {
    if samples.len() != rule.len() {
        return Err(BasisError::SampleLengthMismatch {
            got: samples.len(),
            expected: rule.len(),
        });
    }
    let m = basis.size();
    let mut d = DVector::zeros(m);
    for j in 0..m {
        let mut acc = T::zero();
        for (n, node) in rule.nodes().iter().enumerate() {
            acc += rule.weights()[n] * samples[n] * basis.eval(j, node)?;
        }
        d[j] = acc;
    }
    Ok(d)
}

/// Discrete H norm: the Euclidean norm of the coefficient vector.
pub fn norm_h<T: Scalar>(d: &DVector<T>) -> T {
    let mut acc = T::zero();
    for i in 0..d.len() {
        acc += d[i] * d[i];
    }
    acc.sqrt()
}

/// Discrete V norm: the gradient seminorm `sqrt(sum_j lambda_j d_j^2)`.
pub fn norm_v<T: Scalar>(d: &DVector<T>, basis: &BasisSet<T>) -> Result<T, BasisError> {
    if d.len() != basis.size() {
        return Err(BasisError::CoefficientLengthMismatch {
            got: d.len(),
            expected: basis.size(),
        });
    }
    let mut acc = T::zero();
    for (j, &lambda) in basis.eigenvalues().iter().enumerate() {
        acc += lambda * d[j] * d[j];
    }
    Ok(acc.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn unit_interval() -> BoxDomain<f64> {
        BoxDomain::new(&[1.0]).unwrap()
    }

    #[test]
    fn spectrum_1d() {
        let basis = build_basis(&unit_interval(), 2).unwrap();
        assert_eq!(basis.modes(), &[[1, 0, 0], [2, 0, 0]]);
        assert!((basis.eigenvalues()[0] - PI * PI).abs() < 1e-12);
        assert!((basis.eigenvalues()[1] - 4.0 * PI * PI).abs() < 1e-11);
    }

    #[test]
    fn spectrum_1d_stretched() {
        let domain = BoxDomain::new(&[2.0]).unwrap();
        let basis = build_basis(&domain, 1).unwrap();
        assert!((basis.eigenvalues()[0] - PI * PI / 4.0).abs() < 1e-13);
    }

    #[test]
    fn spectrum_2d_with_lexicographic_ties() {
        let domain = BoxDomain::new(&[1.0, 1.0]).unwrap();
        let basis = build_basis(&domain, 4).unwrap();
        let want = [2.0, 5.0, 5.0, 8.0].map(|c| c * PI * PI);
        for (got, want) in basis.eigenvalues().iter().zip(want) {
            assert!((got - want).abs() < 1e-11);
        }
        assert_eq!(
            basis.modes(),
            &[[1, 1, 0], [1, 2, 0], [2, 1, 0], [2, 2, 0]]
        );
    }

    #[test]
    fn ordering_is_nondecreasing_and_deterministic() {
        let domain = BoxDomain::new(&[1.3, 0.9, 1.1]).unwrap();
        let a = build_basis(&domain, 25).unwrap();
        let b = build_basis(&domain, 25).unwrap();
        assert_eq!(a.modes(), b.modes());
        for w in a.eigenvalues().windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn two_point_rule_on_unit_interval() {
        let rule = build_quadrature(&unit_interval(), 2).unwrap();
        let s = 1.0 / (2.0 * 3.0f64.sqrt());
        assert!((rule.nodes()[0][0] - (0.5 - s)).abs() < 1e-15);
        assert!((rule.nodes()[1][0] - (0.5 + s)).abs() < 1e-15);
        assert!((rule.weights()[0] - 0.5).abs() < 1e-15);
        assert!((rule.weights()[1] - 0.5).abs() < 1e-15);
        let cubes: Vec<f64> = rule.nodes().iter().map(|x| x[0].powi(3)).collect();
        assert!((rule.integrate(&cubes).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn sin_squared_integral() {
        let rule = build_quadrature(&unit_interval(), 16).unwrap();
        let samples: Vec<f64> = rule.nodes().iter().map(|x| (PI * x[0]).sin().powi(2)).collect();
        assert!((rule.integrate(&samples).unwrap() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn weights_sum_to_volume() {
        for (lengths, order) in [(vec![1.0], 7), (vec![0.7, 2.0], 5), (vec![1.0, 1.0, 1.5], 4)] {
            let domain = BoxDomain::new(&lengths).unwrap();
            let rule = build_quadrature(&domain, order).unwrap();
            let total: f64 = rule.weights().iter().sum();
            assert!(
                (total - domain.volume()).abs() <= 1e-13 * domain.volume(),
                "volume via weights: {total}"
            );
            assert!(rule.weights().iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn eval_examples() {
        let basis = build_basis(&unit_interval(), 2).unwrap();
        assert!((basis.eval(0, &[0.5]).unwrap() - 2.0f64.sqrt()).abs() < 1e-15);
        assert!(basis.eval(0, &[0.0]).unwrap().abs() < 1e-12);
        assert!(basis.eval(1, &[1.0]).unwrap().abs() < 1e-12);
        let g = basis.eval_grad(0, &[0.25]).unwrap();
        assert!((g[0] - PI).abs() < 1e-13);
        assert!(matches!(
            basis.eval(5, &[0.5]),
            Err(BasisError::ModeOutOfRange { .. })
        ));
    }

    #[test]
    fn orthonormality_and_stiffness_gram() {
        let domain = BoxDomain::new(&[1.0, 1.3]).unwrap();
        let basis = build_basis(&domain, 6).unwrap();
        let rule = build_quadrature(&domain, default_quad_order(&basis)).unwrap();
        let m = basis.size();
        for i in 0..m {
            for j in 0..m {
                let mut mass = 0.0;
                let mut stiff = 0.0f64;
                for (n, node) in rule.nodes().iter().enumerate() {
                    let w = rule.weights()[n];
                    mass += w * basis.eval(i, node).unwrap() * basis.eval(j, node).unwrap();
                    let gi = basis.eval_grad(i, node).unwrap();
                    let gj = basis.eval_grad(j, node).unwrap();
                    stiff += w * (gi[0] * gj[0] + gi[1] * gj[1]);
                }
                let want_mass = if i == j { 1.0 } else { 0.0 };
                let want_stiff = if i == j { basis.eigenvalues()[i] } else { 0.0 };
                assert!((mass - want_mass).abs() < 1e-12, "mass[{i}][{j}] = {mass}");
                assert!(
                    (stiff - want_stiff).abs() < 1e-12 * want_stiff.abs().max(1.0),
                    "stiff[{i}][{j}] = {stiff}"
                );
            }
        }
    }

    #[test]
    fn projection_examples() {
        let basis = build_basis(&unit_interval(), 3).unwrap();
        let rule = build_quadrature(&unit_interval(), 16).unwrap();
        // u = w_1
        let samples: Vec<f64> = rule
            .nodes()
            .iter()
            .map(|x| basis.eval(0, x).unwrap())
            .collect();
        let d = project_h(&samples, &basis, &rule).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-12);
        assert!(d[1].abs() < 1e-12 && d[2].abs() < 1e-12);
        // u = 0
        let zeros = vec![0.0; rule.len()];
        let d = project_h(&zeros, &basis, &rule).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
        // u = x(1-x): d_1 = 4 sqrt(2) / pi^3 by the closed-form sine integral,
        // cross-checked against an order-32 rule.
        let bump: Vec<f64> = rule.nodes().iter().map(|x| x[0] * (1.0 - x[0])).collect();
        let d = project_h(&bump, &basis, &rule).unwrap();
        let exact = 4.0 * 2.0f64.sqrt() / PI.powi(3);
        assert!((d[0] - exact).abs() < 1e-12, "{} vs {exact}", d[0]);
        let rule32 = build_quadrature(&unit_interval(), 32).unwrap();
        let bump32: Vec<f64> = rule32.nodes().iter().map(|x| x[0] * (1.0 - x[0])).collect();
        let d32 = project_h(&bump32, &basis, &rule32).unwrap();
        assert!((d[0] - d32[0]).abs() < 1e-13);
    }

    #[test]
    fn projection_roundtrip_reproduces_expansions() {
        let domain = BoxDomain::new(&[1.0, 1.0]).unwrap();
        let basis = build_basis(&domain, 5).unwrap();
        let rule = build_quadrature(&domain, default_quad_order(&basis)).unwrap();
        let coeffs = DVector::from_vec(vec![0.3, -1.2, 0.05, 2.0, -0.7]);
        let samples: Vec<f64> = rule
            .nodes()
            .iter()
            .map(|x| {
                (0..basis.size())
                    .map(|j| coeffs[j] * basis.eval(j, x).unwrap())
                    .sum()
            })
            .collect();
        let projected = project_h(&samples, &basis, &rule).unwrap();
        for j in 0..basis.size() {
            assert!((projected[j] - coeffs[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_precision_instantiation() {
        let domain = BoxDomain::<f32>::new(&[1.0f32]).unwrap();
        let basis = build_basis(&domain, 3).unwrap();
        assert!((basis.eigenvalues()[0] - (PI as f32).powi(2)).abs() < 1e-4);
        let rule = build_quadrature(&domain, 8).unwrap();
        let samples: Vec<f32> = rule
            .nodes()
            .iter()
            .map(|x| basis.eval(0, x).unwrap())
            .collect();
        let d = project_h(&samples, &basis, &rule).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn norm_examples() {
        let basis = build_basis(&unit_interval(), 2).unwrap();
        let e1 = DVector::from_vec(vec![1.0f64, 0.0]);
        assert!((norm_h(&e1) - 1.0).abs() < 1e-15);
        assert!((norm_v(&e1, &basis).unwrap() - PI).abs() < 1e-12);
        let zero = DVector::from_vec(vec![0.0f64, 0.0]);
        assert_eq!(norm_h(&zero), 0.0);
        assert_eq!(norm_v(&zero, &basis).unwrap(), 0.0);
        let ones = DVector::from_vec(vec![1.0f64, 1.0]);
        assert!((norm_v(&ones, &basis).unwrap() - PI * 5.0f64.sqrt()).abs() < 1e-11);
    }
}
