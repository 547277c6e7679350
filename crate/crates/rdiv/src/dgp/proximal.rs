//! Proximal-causal-inference benchmark generator.
//!
//! Latent variables (W', Q', U) are jointly Gaussian given the state S' and
//! the binary treatment A. The free blocks sigma_wq^2 and mu_a are derived so
//! that W' is independent of (A, Q') given (U, S'), the negative-control
//! prerequisite. Observables are S = g(S'), Q = g(Q'), W = g(W'_{[0:d_W]})
//! for an elementwise link g; the bridge-function input is X = (W, A, S) and
//! the instrument is Z = (Q, A, S).

use super::links::LinkFunction;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::{Mat, Scalar, Vect, F};
use rand::Rng;

/// All parameters of the benchmark family. Construct with
/// [`ProximalParams::paper_defaults`] and complete with
/// [`derive_compatibility_blocks`].
#[derive(Debug, Clone)]
pub struct ProximalParams {
    /// Latent dimension d = d_S = d_Q of S', Q', U and the untruncated W'.
    pub d: usize,
    /// Observed W keeps only the first d_w coordinates of W'.
    pub d_w: usize,
    pub mu0: Vect,
    pub alpha0: Vect,
    pub kappa0: Vect,
    pub mu_s: Mat,
    pub alpha_s: Mat,
    pub kappa_s: Mat,
    /// Coefficients of the scalar treatment in the Q' and U means.
    pub alpha_a: Vect,
    pub kappa_a: Vect,
    pub sigma_w2: Mat,
    pub sigma_q2: Mat,
    pub sigma_u2: Mat,
    pub sigma_wu2: Mat,
    pub sigma_qu2: Mat,
    /// Derived by [`derive_compatibility_blocks`].
    pub sigma_wq2: Option<Mat>,
    /// Derived by [`derive_compatibility_blocks`].
    pub mu_a: Option<Vect>,
    pub link: LinkFunction,
}

impl ProximalParams {
    /// The benchmark parameterization: constants 0.2, identity state
    /// coefficients, and 0.1(I + 11') covariance blocks.
    pub fn paper_defaults(d: usize, d_w: usize, link: LinkFunction) -> Self {
        let ones_block = Mat::from_element(d, d, 0.1);
        let spread = Mat::identity(d, d) * 0.1 + &ones_block;
        Self {
            d,
            d_w,
            mu0: Vect::from_element(d, 0.2),
            alpha0: Vect::from_element(d, 0.2),
            kappa0: Vect::from_element(d, 0.2),
            mu_s: Mat::identity(d, d),
            alpha_s: Mat::identity(d, d),
            kappa_s: Mat::identity(d, d),
            alpha_a: Vect::from_element(d, 1.0),
            kappa_a: Vect::from_element(d, 1.0),
            sigma_w2: spread.clone(),
            sigma_q2: spread.clone(),
            sigma_u2: spread,
            sigma_wu2: ones_block.clone(),
            sigma_qu2: ones_block,
            sigma_wq2: None,
            mu_a: None,
            link,
        }
    }

    fn derived(&self) -> Result<(&Mat, &Vect)> {
        match (&self.sigma_wq2, &self.mu_a) {
            (Some(wq), Some(mu_a)) => Ok((wq, mu_a)),
            _ => Err(Error::InvalidParameter(
                "params not completed by derive_compatibility_blocks".into(),
            )),
        }
    }

    /// Full 3d x 3d latent covariance in (W', Q', U) order.
    pub fn joint_covariance(&self) -> Result<Mat> {
        let (wq, _) = self.derived()?;
        let d = self.d;
        let mut cov = Mat::zeros(3 * d, 3 * d);
        let blocks = [
            (0, 0, &self.sigma_w2),
            (0, d, wq),
            (0, 2 * d, &self.sigma_wu2),
            (d, d, &self.sigma_q2),
            (d, 2 * d, &self.sigma_qu2),
            (2 * d, 2 * d, &self.sigma_u2),
        ];
        for (r, c, b) in blocks {
            for i in 0..d {
                for j in 0..d {
                    cov[(r + i, c + j)] = b[(i, j)];
                    cov[(c + j, r + i)] = b[(i, j)];
                }
            }
        }
        Ok(cov)
    }

    /// The regression coefficients of E[W' | U, S', A, Q'] on the treatment
    /// and on Q': (a_coefficient, q_coefficient_matrix). Both must vanish
    /// after derivation.
    pub fn conditional_coefficients(&self) -> Result<(Vect, Mat)> {
        let (wq, mu_a) = self.derived()?;
        let d = self.d;
        let mut sigma_qu = Mat::zeros(2 * d, 2 * d);
        let mut sigma_w_qu = Mat::zeros(d, 2 * d);
        for i in 0..d {
            for j in 0..d {
                sigma_qu[(i, j)] = self.sigma_q2[(i, j)];
                sigma_qu[(i, d + j)] = self.sigma_qu2[(i, j)];
                sigma_qu[(d + i, j)] = self.sigma_qu2[(j, i)];
                sigma_qu[(d + i, d + j)] = self.sigma_u2[(i, j)];
                sigma_w_qu[(i, j)] = wq[(i, j)];
                sigma_w_qu[(i, d + j)] = self.sigma_wu2[(i, j)];
            }
        }
        let inv = sigma_qu
            .try_inverse()
            .ok_or_else(|| Error::InvalidParameter("singular (Q', U) covariance".into()))?;
        let coef = sigma_w_qu * inv;
        let b_q = coef.columns(0, d).into_owned();
        let b_u = coef.columns(d, d).into_owned();
        let a_coef = mu_a - &b_q * &self.alpha_a - &b_u * &self.kappa_a;
        Ok((a_coef, b_q))
    }

    /// Treatment propensity as a function of 1' S'.
    pub fn propensity(s_sum: F) -> F {
        1.0 / (1.0 + (0.125 - 0.125 * s_sum).exp())
    }
}

/// Solve for sigma_wq^2 and mu_a so that E[W' | U, S', A, Q'] depends on
/// neither A nor Q'. With the (Q', U) residual regression coefficients
/// [B_q, B_u], forcing B_q = 0 gives B_u = sigma_wu^2 (sigma_u^2)^{-1},
/// sigma_wq^2 = B_u sigma_qu^2', and the net treatment coefficient
/// mu_a - B_u kappa_a = 0 pins mu_a.
pub fn derive_compatibility_blocks(mut params: ProximalParams) -> Result<ProximalParams> {
    let inv_u = params
        .sigma_u2
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidParameter("singular sigma_u^2".into()))?;
    let b_u = &params.sigma_wu2 * inv_u;
    params.sigma_wq2 = Some(&b_u * params.sigma_qu2.transpose());
    params.mu_a = Some(&b_u * &params.kappa_a);
    // the joint covariance must be positive definite for sampling
    let cov = params.joint_covariance()?;
    if cov.cholesky().is_none() {
        return Err(Error::InvalidParameter(
            "derived joint covariance is not positive definite".into(),
        ));
    }
    Ok(params)
}

struct LatentDraw {
    s_prime: Vect,
    a: F,
    w_prime: Vect,
    q_prime: Vect,
    u: Vect,
}

fn draw_latents<R: Rng + ?Sized>(
    params: &ProximalParams,
    chol: &Mat,
    rng: &mut R,
) -> LatentDraw {
    let d = params.d;
    let mu_a = params.mu_a.as_ref().expect("completed params");
    let s_prime = Vect::from_fn(d, |_, _| {
        (0.5f64).sqrt() * <F as Scalar>::sample_standard_normal(rng)
    });
    let p = ProximalParams::propensity(s_prime.sum());
    let a = if rng.gen::<F>() < p { 1.0 } else { 0.0 };
    let mut mean = Vect::zeros(3 * d);
    let m_w = &params.mu0 + mu_a * a + &params.mu_s * &s_prime;
    let m_q = &params.alpha0 + &params.alpha_a * a + &params.alpha_s * &s_prime;
    let m_u = &params.kappa0 + &params.kappa_a * a + &params.kappa_s * &s_prime;
    for i in 0..d {
        mean[i] = m_w[i];
        mean[d + i] = m_q[i];
        mean[2 * d + i] = m_u[i];
    }
    let noise = Vect::from_fn(3 * d, |_, _| <F as Scalar>::sample_standard_normal(rng));
    let joint = mean + chol * noise;
    LatentDraw {
        s_prime,
        a,
        w_prime: joint.rows(0, d).into_owned(),
        q_prime: joint.rows(d, d).into_owned(),
        u: joint.rows(2 * d, d).into_owned(),
    }
}

/// Generate n observations. X = (W, A, S) and Z = (Q, A, S) share the
/// trailing (A, S) block.
pub fn generate_proximal(params: &ProximalParams, n: usize, seed: u64) -> Result<Dataset> {
    let d = params.d;
    let chol = params
        .joint_covariance()?
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter("covariance not positive definite".into()))?
        .l();
    let mut rng = crate::stream_rng(seed, 0x9e0);
    let x_dim = params.d_w + 1 + d;
    let z_dim = d + 1 + d;
    let mut x = Mat::zeros(n, x_dim);
    let mut z = Mat::zeros(n, z_dim);
    let mut y = Vect::zeros(n);
    for i in 0..n {
        let draw = draw_latents(params, &chol, &mut rng);
        let y_mean =
            draw.a + draw.s_prime.sum() + draw.u.sum() + draw.w_prime.sum();
        y[i] = y_mean + <F as Scalar>::sample_standard_normal(&mut rng);
        for j in 0..params.d_w {
            x[(i, j)] = params.link.apply(draw.w_prime[j]);
        }
        x[(i, params.d_w)] = draw.a;
        z[(i, d)] = draw.a;
        for j in 0..d {
            let s = params.link.apply(draw.s_prime[j]);
            x[(i, params.d_w + 1 + j)] = s;
            z[(i, d + 1 + j)] = s;
            z[(i, j)] = params.link.apply(draw.q_prime[j]);
        }
    }
    let mut x_names: Vec<String> = (0..params.d_w).map(|j| format!("w_{j}")).collect();
    x_names.push("a".into());
    x_names.extend((0..d).map(|j| format!("s_{j}")));
    let mut z_names: Vec<String> = (0..d).map(|j| format!("q_{j}")).collect();
    z_names.push("a".into());
    z_names.extend((0..d).map(|j| format!("s_{j}")));
    Dataset::new(x, z, y, 1 + d, x_names, z_names)
}

/// Bridge-function inputs (W, A=1, S) sampled from the observational
/// marginal of (W, S); used to average the fitted bridge into an estimate of
/// the counterfactual mean.
pub fn sample_bridge_inputs(params: &ProximalParams, n: usize, seed: u64) -> Result<Vec<Vect>> {
    let d = params.d;
    let chol = params
        .joint_covariance()?
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter("covariance not positive definite".into()))?
        .l();
    let mut rng = crate::stream_rng(seed, 0xcf1);
    Ok((0..n)
        .map(|_| {
            let draw = draw_latents(params, &chol, &mut rng);
            let mut v = Vect::zeros(params.d_w + 1 + d);
            for j in 0..params.d_w {
                v[j] = params.link.apply(draw.w_prime[j]);
            }
            v[params.d_w] = 1.0;
            for j in 0..d {
                v[params.d_w + 1 + j] = params.link.apply(draw.s_prime[j]);
            }
            v
        })
        .collect())
}

/// OLS of each W' coordinate on (1, A, Q', U, S'), with per-coefficient
/// standard errors. Column layout of the design: intercept, A, Q' (d), U (d),
/// S' (d). Under the compatibility construction the A and Q' blocks are zero
/// in population; this is the empirical shadow of that identity.
pub struct LatentRegression {
    /// (2 + 3d) x d: regression coefficients, one column per W' coordinate.
    pub beta: Mat,
    /// Same shape: OLS standard errors.
    pub se: Mat,
}

pub fn latent_regression(params: &ProximalParams, n: usize, seed: u64) -> Result<LatentRegression> {
    let d = params.d;
    let chol = params
        .joint_covariance()?
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter("covariance not positive definite".into()))?
        .l();
    let mut rng = crate::stream_rng(seed, 0x9e0);
    let cols = 2 + 3 * d;
    let mut xtx = Mat::zeros(cols, cols);
    let mut xtw = Mat::zeros(cols, d);
    let mut wsq = Vect::zeros(d);
    let mut row = Vect::zeros(cols);
    for _ in 0..n {
        let draw = draw_latents(params, &chol, &mut rng);
        row[0] = 1.0;
        row[1] = draw.a;
        for j in 0..d {
            row[2 + j] = draw.q_prime[j];
            row[2 + d + j] = draw.u[j];
            row[2 + 2 * d + j] = draw.s_prime[j];
        }
        xtx.ger(1.0, &row, &row, 1.0);
        for t in 0..d {
            let w = draw.w_prime[t];
            for c in 0..cols {
                xtw[(c, t)] += row[c] * w;
            }
            wsq[t] += w * w;
        }
    }
    let inv = xtx
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidParameter("singular design".into()))?;
    let beta = &inv * &xtw;
    let dof = (n - cols) as F;
    let mut se = Mat::zeros(cols, d);
    for t in 0..d {
        // residual sum of squares via w'w - beta' X'w
        let rss = wsq[t] - beta.column(t).dot(&xtw.column(t));
        let s2 = (rss / dof).max(0.0);
        for c in 0..cols {
            se[(c, t)] = (s2 * inv[(c, c)]).sqrt();
        }
    }
    Ok(LatentRegression { beta, se })
}

/// Monte-Carlo estimate of E[Y(1)] with its standard error.
///
/// U is an unobserved confounder, so under do(A = 1) it keeps its
/// observational law: draw (S', A, U, W') from the observational joint and
/// evaluate the structural mean of Y with the treatment forced to 1.
pub fn counterfactual_truth(params: &ProximalParams, mc: usize, seed: u64) -> Result<(F, F)> {
    let chol = params
        .joint_covariance()?
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter("covariance not positive definite".into()))?
        .l();
    let mut rng = crate::stream_rng(seed, 0x7c1);
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..mc {
        let draw = draw_latents(params, &chol, &mut rng);
        let v = 1.0 + draw.s_prime.sum() + draw.u.sum() + draw.w_prime.sum();
        sum += v;
        sumsq += v * v;
    }
    let mean = sum / mc as F;
    let var = (sumsq / mc as F - mean * mean).max(0.0);
    Ok((mean, (var / mc as F).sqrt()))
}

/// Closed-form E[Y(1)] by linearity of the structural equation:
/// `1 + 1'E[S'] + 1'E[U] + 1'E[W']` with U and W' at their observational
/// means, which involve the average propensity E[p(S')].
pub fn counterfactual_truth_closed_form(params: &ProximalParams) -> Result<F> {
    let (_, mu_a) = params.derived()?;
    let d = params.d;
    // E[p(S')] where 1'S' ~ N(0, d/2), by quadrature
    let sd = (d as F / 2.0).sqrt();
    let quad = crate::density_stage::QuadratureSpec { lo: -10.0 * sd, hi: 10.0 * sd, points: 20001 };
    let a_bar = quad.integrate(|t| {
        let pdf = (-t * t / (2.0 * sd * sd)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
        ProximalParams::propensity(t) * pdf
    });
    Ok(1.0
        + params.kappa0.sum()
        + params.kappa_a.sum() * a_bar
        + params.mu0.sum()
        + mu_a.sum() * a_bar)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn completed(d: usize, d_w: usize, link: LinkFunction) -> ProximalParams {
        derive_compatibility_blocks(ProximalParams::paper_defaults(d, d_w, link)).unwrap()
    }

    #[test]
    fn compatibility_coefficients_vanish() {
        for (d, d_w) in [(15, 1), (20, 10)] {
            let p = completed(d, d_w, LinkFunction::Id);
            let (a_coef, q_coef) = p.conditional_coefficients().unwrap();
            assert!(a_coef.amax() <= 1e-10, "A coefficient {:e}", a_coef.amax());
            assert!(q_coef.amax() <= 1e-10, "Q' coefficient {:e}", q_coef.amax());
        }
    }

    #[test]
    fn covariance_is_positive_definite() {
        for (d, d_w) in [(15, 1), (20, 10), (3, 2)] {
            let p = completed(d, d_w, LinkFunction::Id);
            assert!(p.joint_covariance().unwrap().cholesky().is_some());
        }
    }

    #[test]
    fn derived_blocks_match_known_structure() {
        // sigma_wu^2 (sigma_u^2)^{-1} = 11'/(1+d), so mu_a = (d/(1+d)) 1.
        let d = 15;
        let p = completed(d, 1, LinkFunction::Id);
        let mu_a = p.mu_a.as_ref().unwrap();
        for i in 0..d {
            assert!((mu_a[i] - d as F / (1.0 + d as F)).abs() <= 1e-10);
        }
    }

    #[test]
    fn s_prime_mean_clt() {
        let p = completed(4, 1, LinkFunction::Id);
        let n = 100_000;
        let data = generate_proximal(&p, n, 11).unwrap();
        // with Id link the S block equals S'
        for j in 0..4 {
            let mean: F = (0..n).map(|i| data.x[(i, 2 + j)]).sum::<F>() / n as F;
            assert!(mean.abs() <= 4.0 * (0.5 / n as F).sqrt(), "coord {j}: {mean}");
        }
    }

    #[test]
    fn propensity_at_zero_state() {
        let expected = 1.0 / (1.0 + (0.125f64).exp());
        assert!((ProximalParams::propensity(0.0) - expected).abs() < 1e-12);
        assert!((expected - 0.4688).abs() < 1e-3);
        // empirical check near 1'S' = 0
        let p = completed(3, 1, LinkFunction::Id);
        let n = 200_000;
        let data = generate_proximal(&p, n, 5).unwrap();
        let mut hits = 0usize;
        let mut count = 0usize;
        for i in 0..n {
            let s_sum: F = (0..3).map(|j| data.x[(i, 2 + j)]).sum();
            if s_sum.abs() < 0.1 {
                count += 1;
                if data.x[(i, 1)] == 1.0 {
                    hits += 1;
                }
            }
        }
        let rate = hits as F / count as F;
        assert!((rate - expected).abs() < 0.015, "rate {rate} over {count} rows");
    }

    #[test]
    fn latent_regression_coefficients_near_zero() {
        // regression of each W' coordinate on (1, A, Q', U, S') recovers the
        // conditional-independence construction empirically
        let d = 4;
        let p = completed(d, d, LinkFunction::Id);
        let n = 100_000;
        // regenerate latents directly for the regression
        let chol = p.joint_covariance().unwrap().cholesky().unwrap().l();
        let mut rng = crate::stream_rng(23, 0x9e0);
        let cols = 2 + 3 * d;
        let mut xtx = Mat::zeros(cols, cols);
        let mut xtw = Mat::zeros(cols, d);
        for _ in 0..n {
            let draw = draw_latents(&p, &chol, &mut rng);
            let mut row = Vect::zeros(cols);
            row[0] = 1.0;
            row[1] = draw.a;
            for j in 0..d {
                row[2 + j] = draw.q_prime[j];
                row[2 + d + j] = draw.u[j];
                row[2 + 2 * d + j] = draw.s_prime[j];
            }
            xtx += &row * row.transpose();
            for t in 0..d {
                for c in 0..cols {
                    xtw[(c, t)] += row[c] * draw.w_prime[t];
                }
            }
        }
        let beta = xtx.clone().try_inverse().unwrap() * xtw;
        // residual variance of W'|U,S' is bounded by sigma_w2 diagonal (0.2);
        // a conservative 4-SE band per coefficient
        let se = (0.2f64 / n as F).sqrt() * 6.0;
        for t in 0..d {
            assert!(beta[(1, t)].abs() <= 4.0 * se, "A coef {}", beta[(1, t)]);
            for j in 0..d {
                assert!(beta[(2 + j, t)].abs() <= 4.0 * se, "Q' coef {}", beta[(2 + j, t)]);
            }
        }
    }

    #[test]
    fn counterfactual_truth_matches_closed_form() {
        let p = completed(15, 1, LinkFunction::Id);
        let closed = counterfactual_truth_closed_form(&p).unwrap();
        let (mc, se) = counterfactual_truth(&p, 200_000, 3).unwrap();
        assert!((mc - closed).abs() <= 4.0 * se, "mc {mc} closed {closed} se {se}");
        // the closed form itself is near the known value for d = 15
        assert!((closed - 20.65).abs() < 0.05, "closed {closed}");
    }

    #[test]
    fn doubling_mc_shrinks_se() {
        let p = completed(5, 1, LinkFunction::Id);
        let (_, se1) = counterfactual_truth(&p, 20_000, 7).unwrap();
        let (_, se4) = counterfactual_truth(&p, 80_000, 7).unwrap();
        let ratio = se1 / se4;
        assert!((1.3..=3.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn generation_is_deterministic() {
        let p = completed(3, 1, LinkFunction::Poly);
        let a = generate_proximal(&p, 50, 9).unwrap();
        let b = generate_proximal(&p, 50, 9).unwrap();
        assert_eq!(a, b);
        let (t1, _) = counterfactual_truth(&p, 1000, 4).unwrap();
        let (t2, _) = counterfactual_truth(&p, 1000, 4).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn incomplete_params_rejected() {
        let p = ProximalParams::paper_defaults(3, 1, LinkFunction::Id);
        assert!(generate_proximal(&p, 10, 0).is_err());
        assert!(counterfactual_truth_closed_form(&p).is_err());
    }
}
