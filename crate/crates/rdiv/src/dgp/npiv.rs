//! Linear-Gaussian NPIV family wired to the deterministic inverse-problem
//! oracle.
//!
//! Z ~ N(0, I_p) and X = rho Z + sqrt(1 - rho^2) eps coordinatewise, so the
//! degree-1 polynomial features phi(x) = (1, x_1, ..., x_p) are orthonormal
//! in L2(P_X) and L2(P_Z), and the conditional-expectation operator on that
//! feature space is exactly diag(1, rho, ..., rho). Coefficient distances
//! therefore equal L2 function distances, and the population RDIV solution
//! equals the closed-form Tikhonov solution of the attached problem.

use crate::data::Dataset;
use crate::density_stage::ConditionalMixtureModel;
use crate::error::{Error, Result};
use crate::hypothesis::HypothesisSpec;
use crate::inverse_core::LinearInverseProblem;
use crate::{Mat, Scalar, Vect, F};

/// Sampled counterpart of a diagonal [`LinearInverseProblem`].
#[derive(Debug, Clone)]
pub struct LinearNpivParams {
    pub problem: LinearInverseProblem<F>,
    /// Correlation between each X and Z coordinate; the operator's repeated
    /// nontrivial singular value.
    pub rho: F,
    /// Number of raw coordinates; the feature space has dimension x_dim + 1.
    pub x_dim: usize,
    pub noise_y: F,
}

impl LinearNpivParams {
    /// Build the family with true solution `h0 = (T'T)^{beta/2} w0` on the
    /// operator diag(1, rho, ..., rho).
    pub fn new(rho: F, x_dim: usize, beta: F, w0: &Vect, noise_y: F) -> Result<Self> {
        if !(0.0 < rho && rho < 1.0) {
            return Err(Error::InvalidArgument("rho must lie in (0, 1)".into()));
        }
        if w0.len() != x_dim + 1 {
            return Err(Error::DimensionMismatch(format!(
                "w0 has length {}, expected {}",
                w0.len(),
                x_dim + 1
            )));
        }
        let mut t = Mat::zeros(x_dim + 1, x_dim + 1);
        t[(0, 0)] = 1.0;
        for i in 1..=x_dim {
            t[(i, i)] = rho;
        }
        let problem = LinearInverseProblem::from_operator(t, beta, w0.clone())?;
        Ok(Self { problem, rho, x_dim, noise_y })
    }

    /// Degree-1 polynomial sieve over the raw coordinates.
    pub fn feature_spec(&self) -> HypothesisSpec<F> {
        HypothesisSpec::poly(1, self.x_dim)
    }

    /// Exact first stage: X | Z ~ N(rho Z, (1 - rho^2) I).
    pub fn oracle_density(&self) -> ConditionalMixtureModel {
        ConditionalMixtureModel::gaussian_affine(
            &(Mat::identity(self.x_dim, self.x_dim) * self.rho),
            &Vect::zeros(self.x_dim),
            (1.0 - self.rho * self.rho).sqrt(),
        )
        .expect("valid oracle density")
    }

    /// Exact squared L2(P_X) distance of a coefficient vector from h0
    /// (features are orthonormal, so it is the coefficient distance).
    pub fn l2_error(&self, theta: &Vect) -> F {
        (theta - self.problem.true_solution()).norm_squared()
    }
}

/// Sample n rows; `Y = phi(X)' h0 + noise_y * eta`.
pub fn generate_linear_npiv(params: &LinearNpivParams, n: usize, seed: u64) -> Result<Dataset> {
    let p = params.x_dim;
    let theta0 = params.problem.true_solution();
    let mut rng = crate::stream_rng(seed, 0x171);
    let mut x = Mat::zeros(n, p);
    let mut z = Mat::zeros(n, p);
    let mut y = Vect::zeros(n);
    let rho = params.rho;
    let s = (1.0 - rho * rho).sqrt();
    for i in 0..n {
        let mut yi = theta0[0];
        for j in 0..p {
            let zj = <F as Scalar>::sample_standard_normal(&mut rng);
            let xj = rho * zj + s * <F as Scalar>::sample_standard_normal(&mut rng);
            z[(i, j)] = zj;
            x[(i, j)] = xj;
            yi += theta0[1 + j] * xj;
        }
        if params.noise_y > 0.0 {
            yi += params.noise_y * <F as Scalar>::sample_standard_normal(&mut rng);
        }
        y[i] = yi;
    }
    Dataset::unnamed(x, z, y)
}
