//! Finite-dimensional linear inverse problems with known singular structure.
//!
//! This is the deterministic oracle for the stochastic estimators: closed-form
//! Tikhonov and iterated-Tikhonov solutions on a matrix operator whose
//! spectrum is chosen explicitly, together with the source condition
//! `h0 = (T'T)^{beta/2} w0` that controls how fast the regularization bias
//! decays in the strength `alpha`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use nalgebra::{DMatrix, DVector};
use num_traits::Float;

use rand_chacha::ChaCha8Rng;

/// Spectrum family for synthetic operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayKind {
    /// `sigma_i = i^{-rate}`.
    Polynomial,
    /// `sigma_i = exp(-rate * i)`.
    Exponential,
}

/// Description of a strictly decreasing positive singular spectrum.
#[derive(Debug, Clone)]
pub struct SpectralDecay<S: Scalar> {
    pub kind: DecayKind,
    pub rate: S,
    pub dimension: usize,
}

impl<S: Scalar> SpectralDecay<S> {
    pub fn polynomial(rate: S, dimension: usize) -> Self {
        Self { kind: DecayKind::Polynomial, rate, dimension }
    }

    pub fn exponential(rate: S, dimension: usize) -> Self {
        Self { kind: DecayKind::Exponential, rate, dimension }
    }

    /// The singular values, strictly decreasing and positive.
    pub fn singular_values(&self) -> DVector<S> {
        DVector::from_fn(self.dimension, |i, _| {
            let idx = S::of((i + 1) as f64);
            match self.kind {
                DecayKind::Polynomial => Float::powf(idx, -self.rate),
                DecayKind::Exponential => Float::exp(-self.rate * idx),
            }
        })
    }
}

/// A linear inverse problem `T h = r0` with an explicit least-norm solution
/// `h0` generated through the source condition `h0 = (T'T)^{beta/2} w0`.
#[derive(Debug, Clone)]
pub struct LinearInverseProblem<S: Scalar> {
    operator: DMatrix<S>,
    response: DVector<S>,
    true_solution: DVector<S>,
    source_beta: S,
    source_w0: DVector<S>,
}

impl<S: Scalar> LinearInverseProblem<S> {
    /// Build directly from an operator and source parameters. The response
    /// and true solution are derived via SVD so that `T h0 = r0` exactly and
    /// `h0` has no null-space component.
    pub fn from_operator(operator: DMatrix<S>, beta: S, w0: DVector<S>) -> Result<Self> {
        if operator.ncols() != w0.len() {
            return Err(Error::DimensionMismatch(format!(
                "operator has {} columns but w0 has length {}",
                operator.ncols(),
                w0.len()
            )));
        }
        if beta < S::of(0.0) {
            return Err(Error::InvalidArgument("beta must be nonnegative".into()));
        }
        let svd = operator.clone().svd(true, true);
        let u = svd.u.as_ref().expect("svd u");
        let v_t = svd.v_t.as_ref().expect("svd v_t");
        // h0 = V diag(sigma^beta) V' w0; r0 = U diag(sigma^{beta+1}) V' w0.
        let coeffs = v_t * &w0;
        let k = svd.singular_values.len();
        let mut h_coeffs = DVector::zeros(k);
        let mut r_coeffs = DVector::zeros(k);
        for i in 0..k {
            let s = svd.singular_values[i];
            if s > S::of(0.0) {
                h_coeffs[i] = Float::powf(s, beta) * coeffs[i];
                r_coeffs[i] = Float::powf(s, beta + S::of(1.0)) * coeffs[i];
            }
        }
        let true_solution = v_t.transpose() * h_coeffs;
        let response = u * r_coeffs;
        Ok(Self { operator, response, true_solution, source_beta: beta, source_w0: w0 })
    }

    pub fn operator(&self) -> &DMatrix<S> {
        &self.operator
    }

    pub fn response(&self) -> &DVector<S> {
        &self.response
    }

    pub fn true_solution(&self) -> &DVector<S> {
        &self.true_solution
    }

    pub fn source_beta(&self) -> S {
        self.source_beta
    }

    pub fn source_w0(&self) -> &DVector<S> {
        &self.source_w0
    }

    pub fn dim_in(&self) -> usize {
        self.operator.ncols()
    }
}

/// Seeded random orthonormal matrix from QR of a Gaussian matrix, with the
/// sign convention `diag(R) > 0` so the result is deterministic.
fn random_orthonormal<S: Scalar>(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<S> {
    let g = DMatrix::from_fn(dim, dim, |_, _| S::sample_standard_normal(rng));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..dim {
        if r[(j, j)] < S::of(0.0) {
            for i in 0..dim {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// Construct a problem whose singular values follow `decay`, with random
/// orthonormal singular bases seeded by `seed`, and least-norm solution
/// `h0 = (T'T)^{beta/2} w0`.
pub fn make_problem<S: Scalar>(
    decay: &SpectralDecay<S>,
    beta: S,
    w0: &DVector<S>,
    seed: u64,
) -> Result<LinearInverseProblem<S>> {
    make_problem_impl(decay, beta, w0, seed, false)
}

/// Like [`make_problem`], but `w0` is given coordinatewise in the singular
/// basis (the source element is `V w0`). This is the form used with
/// [`source_weights`], whose per-singular-value masses would otherwise be
/// scrambled by the random basis rotation.
pub fn make_problem_spectral_source<S: Scalar>(
    decay: &SpectralDecay<S>,
    beta: S,
    w0: &DVector<S>,
    seed: u64,
) -> Result<LinearInverseProblem<S>> {
    make_problem_impl(decay, beta, w0, seed, true)
}

fn make_problem_impl<S: Scalar>(
    decay: &SpectralDecay<S>,
    beta: S,
    w0: &DVector<S>,
    seed: u64,
    spectral_basis: bool,
) -> Result<LinearInverseProblem<S>> {
    if w0.len() != decay.dimension {
        return Err(Error::DimensionMismatch(format!(
            "w0 has length {} but decay dimension is {}",
            w0.len(),
            decay.dimension
        )));
    }
    if beta < S::of(0.0) {
        return Err(Error::InvalidArgument("beta must be nonnegative".into()));
    }
    let dim = decay.dimension;
    let mut rng = crate::stream_rng(seed, 0);
    let u = random_orthonormal::<S>(dim, &mut rng);
    let v = random_orthonormal::<S>(dim, &mut rng);
    let sigma = decay.singular_values();
    let mut t = DMatrix::zeros(dim, dim);
    // T = U diag(sigma) V'
    for i in 0..dim {
        for j in 0..dim {
            let mut acc = S::of(0.0);
            for k in 0..dim {
                acc += u[(i, k)] * sigma[k] * v[(j, k)];
            }
            t[(i, j)] = acc;
        }
    }
    let w0 = if spectral_basis { &v * w0 } else { w0.clone() };
    LinearInverseProblem::from_operator(t, beta, w0)
}

/// Exact Tikhonov solution `h_* = (T'T + alpha I)^{-1} T' r0`.
pub fn tikhonov_solve<S: Scalar>(problem: &LinearInverseProblem<S>, alpha: S) -> DVector<S> {
    assert!(alpha > S::of(0.0), "alpha must be positive");
    iterated_tikhonov_solve(problem, alpha, 1)
}

/// Iterated Tikhonov: `h_k = (T'T + alpha I)^{-1} (T' r0 + alpha h_{k-1})`,
/// starting from the zero vector.
pub fn iterated_tikhonov_solve<S: Scalar>(
    problem: &LinearInverseProblem<S>,
    alpha: S,
    m: usize,
) -> DVector<S> {
    assert!(alpha > S::of(0.0), "alpha must be positive");
    assert!(m >= 1, "m must be at least 1");
    let t = &problem.operator;
    let tt = t.transpose() * t;
    let p = tt.ncols();
    let mut reg = tt;
    for i in 0..p {
        reg[(i, i)] += alpha;
    }
    let chol = reg.cholesky().expect("T'T + alpha I is positive definite");
    let tr = t.transpose() * &problem.response;
    let mut h = DVector::zeros(p);
    for _ in 0..m {
        let rhs = &tr + &h * alpha;
        h = chol.solve(&rhs);
    }
    h
}

/// Least-squares slope of `log ||h_m - h0||^2` against `log alpha`.
pub fn bias_slope<S: Scalar>(
    problem: &LinearInverseProblem<S>,
    m: usize,
    alpha_grid: &[S],
) -> Result<S> {
    validate_grid(alpha_grid)?;
    let logs: Vec<(S, S)> = alpha_grid
        .iter()
        .map(|&a| {
            let h = iterated_tikhonov_solve(problem, a, m);
            let err = (&h - &problem.true_solution).norm_squared();
            (Float::ln(a), Float::ln(err))
        })
        .collect();
    Ok(ols_slope(&logs))
}

fn validate_grid<S: Scalar>(grid: &[S]) -> Result<()> {
    if grid.len() < 4 {
        return Err(Error::DegenerateGrid("need at least 4 alpha values".into()));
    }
    let mut lo = grid[0];
    let mut hi = grid[0];
    for &a in grid {
        if !(a > S::of(0.0)) || a >= S::of(1.0) {
            return Err(Error::DegenerateGrid("alphas must lie in (0, 1)".into()));
        }
        if a < lo {
            lo = a;
        }
        if a > hi {
            hi = a;
        }
    }
    if hi / lo < S::of(100.0 * (1.0 - 1e-12)) {
        return Err(Error::DegenerateGrid("grid must span at least two decades".into()));
    }
    Ok(())
}

/// Ordinary least squares slope through points `(x, y)` with a free intercept.
pub fn ols_slope<S: Scalar>(points: &[(S, S)]) -> S {
    let n = S::of(points.len() as f64);
    let mut sx = S::of(0.0);
    let mut sy = S::of(0.0);
    for &(x, y) in points {
        sx += x;
        sy += y;
    }
    let mx = sx / n;
    let my = sy / n;
    let mut sxx = S::of(0.0);
    let mut sxy = S::of(0.0);
    for &(x, y) in points {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    sxy / sxx
}

/// Default alpha grid for bias-slope studies: 8 log-spaced points in
/// [3e-4, 3e-2]. The range keeps the study inside the asymptotic regime of a
/// dimension-200 polynomial spectrum while staying clear of its smallest
/// singular value.
pub fn default_alpha_grid<S: Scalar>() -> Vec<S> {
    log_spaced(S::of(3e-4), S::of(3e-2), 8)
}

/// `count` log-spaced points spanning `[lo, hi]` with exact endpoints.
pub fn log_spaced<S: Scalar>(lo: S, hi: S, count: usize) -> Vec<S> {
    let llo = Float::ln(lo);
    let lhi = Float::ln(hi);
    (0..count)
        .map(|i| {
            if i == 0 {
                lo
            } else if i + 1 == count {
                hi
            } else {
                let t = S::of(i as f64) / S::of((count - 1) as f64);
                Float::exp(llo + (lhi - llo) * t)
            }
        })
        .collect()
}

/// Source-condition weights making the bias exponent `min(beta, 2m)` sharp
/// for a given spectrum: each `w_i^2` carries the mass of the continuum
/// source measure `s^beta d(log s)` over the log-spectral cell around
/// `s_i = sigma_i^2`, with the last cell extended down to zero.
pub fn source_weights<S: Scalar>(decay: &SpectralDecay<S>, beta: S) -> DVector<S> {
    let sigma = decay.singular_values();
    let dim = decay.dimension;
    let ls: Vec<S> = (0..dim).map(|i| Float::ln(sigma[i] * sigma[i])).collect();
    let mut upper = vec![S::of(0.0); dim];
    let mut lower = vec![S::of(0.0); dim];
    for i in 0..dim {
        upper[i] = if i == 0 {
            ls[0] + (ls[0] - (ls[0] + ls[1]) / S::of(2.0))
        } else {
            (ls[i - 1] + ls[i]) / S::of(2.0)
        };
        lower[i] = if i + 1 == dim {
            S::of(f64::NEG_INFINITY)
        } else {
            (ls[i] + ls[i + 1]) / S::of(2.0)
        };
    }
    DVector::from_fn(dim, |i, _| {
        // integral of s^beta d(log s) over the cell = (e^{beta*up} - e^{beta*lo}) / beta
        let cell = if beta == S::of(0.0) {
            // beta = 0: the measure is d(log s); mass diverges at 0, fall back
            // to the plain cell width (last cell uses the previous width).
            if i + 1 == dim {
                upper[i] - (S::of(2.0) * ls[i] - upper[i])
            } else {
                upper[i] - lower[i]
            }
        } else {
            (Float::exp(beta * upper[i]) - Float::exp(beta * lower[i])) / beta
        };
        Float::sqrt(cell) / Float::powf(sigma[i], beta)
    })
}
