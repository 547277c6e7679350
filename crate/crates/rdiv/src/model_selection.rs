//! Best-ERM and Convex-ERM over fitted candidate hypotheses on a held-out
//! validation set (Algorithm 2).
//!
//! The regularized validation loss of a simplex combination `h_theta` is a
//! quadratic in theta once the MC operator draws are frozen, so Convex-ERM
//! runs exponentiated gradient on a deterministic convex objective and its
//! loss can never exceed the best vertex by more than the solver tolerance.

use crate::data::Dataset;
use crate::density_stage::ConditionalMixtureModel;
use crate::error::{Error, Result};
use crate::hypothesis::HypothesisFunction;
use crate::rdiv::RowSampler;
use crate::{Mat, Vect, F};
use serde::{Deserialize, Serialize};

/// Candidate hypotheses sharing one first stage and one regularization level.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub candidates: Vec<HypothesisFunction<F>>,
    pub g_hat: ConditionalMixtureModel,
    pub alpha: F,
}

impl CandidateSet {
    pub fn new(
        candidates: Vec<HypothesisFunction<F>>,
        g_hat: ConditionalMixtureModel,
        alpha: F,
    ) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::InvalidArgument("need at least one candidate".into()));
        }
        if alpha < 0.0 {
            return Err(Error::InvalidArgument("alpha must be nonnegative".into()));
        }
        let x_dim = candidates[0].spec.x_dim;
        if candidates.iter().any(|c| c.spec.x_dim != x_dim) {
            return Err(Error::DimensionMismatch(
                "candidates disagree on x_dim".into(),
            ));
        }
        Ok(Self { candidates, g_hat, alpha })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// A point on the probability simplex over candidates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimplexWeights {
    pub theta: Vec<F>,
}

const SIMPLEX_TOL: F = 1e-8;

impl SimplexWeights {
    pub fn new(theta: Vec<F>) -> Result<Self> {
        let w = Self { theta };
        w.validate()?;
        Ok(w)
    }

    pub fn one_hot(m: usize, index: usize) -> Self {
        let mut theta = vec![0.0; m];
        theta[index] = 1.0;
        Self { theta }
    }

    pub fn uniform(m: usize) -> Self {
        Self { theta: vec![1.0 / m as F; m] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta.is_empty() {
            return Err(Error::InvalidArgument("empty simplex weights".into()));
        }
        if self.theta.iter().any(|&t| t < 0.0) {
            return Err(Error::InvalidParameter(
                "simplex weights must be nonnegative".into(),
            ));
        }
        let sum: F = self.theta.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidParameter(format!(
                "simplex weights sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    /// Index of the single nonzero weight, if one-hot.
    pub fn vertex_index(&self) -> Option<usize> {
        let mut idx = None;
        for (j, &t) in self.theta.iter().enumerate() {
            if t > 0.0 {
                if idx.is_some() {
                    return None;
                }
                idx = Some(j);
            }
        }
        idx
    }
}

/// Validation moments, frozen once per selection run: `t[(i, j)]` is the MC
/// operator value of candidate j at z_i (all candidates share the same
/// draws), `v[(i, j)]` its value at x_i.
struct FrozenValidation {
    t: Mat,
    v: Mat,
    y: Vect,
    alpha: F,
}

const STREAM_SELECT: u64 = 0x5e1;

impl FrozenValidation {
    fn build(set: &CandidateSet, data: &Dataset, mc_batch: usize, seed: u64) -> Result<Self> {
        if mc_batch == 0 {
            return Err(Error::InvalidArgument("mc_batch must be positive".into()));
        }
        if set.candidates[0].spec.x_dim != data.x.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "candidates expect x_dim {}, data has {}",
                set.candidates[0].spec.x_dim,
                data.x.ncols()
            )));
        }
        let sampler = RowSampler::build(data, &set.g_hat)?;
        let n = data.len();
        let m = set.len();
        let mut rng = crate::stream_rng(seed, STREAM_SELECT);
        let mut t = Mat::zeros(n, m);
        let mut v = Mat::zeros(n, m);
        for i in 0..n {
            for _ in 0..mc_batch {
                let draw = sampler.draw(i, &mut rng);
                for j in 0..m {
                    t[(i, j)] += set.candidates[j].evaluate(&draw);
                }
            }
            let x = data.x_row(i);
            for j in 0..m {
                t[(i, j)] /= mc_batch as F;
                v[(i, j)] = set.candidates[j].evaluate(&x);
            }
        }
        Ok(Self { t, v, y: data.y.clone(), alpha: set.alpha })
    }

    fn theta_vec(&self, w: &SimplexWeights) -> Result<Vect> {
        w.validate()?;
        if w.theta.len() != self.t.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} candidates",
                w.theta.len(),
                self.t.ncols()
            )));
        }
        Ok(Vect::from_column_slice(&w.theta))
    }

    fn loss(&self, theta: &Vect) -> F {
        let n = self.t.nrows() as F;
        let resid = &self.y - &self.t * theta;
        let reg = &self.v * theta;
        (resid.norm_squared() + self.alpha * reg.norm_squared()) / n
    }

    fn grad(&self, theta: &Vect) -> Vect {
        let n = self.t.nrows() as F;
        let resid = &self.t * theta - &self.y;
        let reg = &self.v * theta;
        (self.t.transpose() * resid + self.v.transpose() * reg * self.alpha) * (2.0 / n)
    }
}

/// Regularized validation loss of the combination `h_theta`; deterministic
/// given the seed, with MC draws shared across candidates.
pub fn validation_loss(
    set: &CandidateSet,
    theta: &SimplexWeights,
    data: &Dataset,
    mc_batch: usize,
    seed: u64,
) -> Result<F> {
    let frozen = FrozenValidation::build(set, data, mc_batch, seed)?;
    let th = frozen.theta_vec(theta)?;
    Ok(frozen.loss(&th))
}

/// Best-ERM: the vertex with the lowest validation loss; ties break to the
/// lowest index.
pub fn best_erm(
    set: &CandidateSet,
    data: &Dataset,
    mc_batch: usize,
    seed: u64,
) -> Result<SimplexWeights> {
    let frozen = FrozenValidation::build(set, data, mc_batch, seed)?;
    Ok(SimplexWeights::one_hot(set.len(), best_vertex(&frozen).0))
}

fn best_vertex(frozen: &FrozenValidation) -> (usize, F) {
    let m = frozen.t.ncols();
    let mut best = (0, F::INFINITY);
    for j in 0..m {
        let theta = Vect::from_fn(m, |k, _| if k == j { 1.0 } else { 0.0 });
        let loss = frozen.loss(&theta);
        if loss < best.1 {
            best = (j, loss);
        }
    }
    best
}

/// Default exponentiated-gradient step count.
pub const CONVEX_ERM_STEPS: usize = 500;

/// Convex-ERM: exponentiated gradient over the simplex on the frozen
/// quadratic objective. Returns the best point seen, so the loss never
/// exceeds the best vertex.
pub fn convex_erm(
    set: &CandidateSet,
    data: &Dataset,
    mc_batch: usize,
    seed: u64,
    steps: usize,
) -> Result<SimplexWeights> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be positive".into()));
    }
    let frozen = FrozenValidation::build(set, data, mc_batch, seed)?;
    let m = set.len();
    let mut theta = Vect::from_element(m, 1.0 / m as F);
    // Lipschitz estimate for the loss over the simplex: the largest gradient
    // component magnitude at the vertices and the center.
    let mut lipschitz: F = frozen.grad(&theta).amax();
    for j in 0..m {
        let vertex = Vect::from_fn(m, |k, _| if k == j { 1.0 } else { 0.0 });
        lipschitz = lipschitz.max(frozen.grad(&vertex).amax());
    }
    let step = 0.5 / lipschitz.max(1e-12);
    let (mut best_theta, mut best_loss) = (theta.clone(), frozen.loss(&theta));
    for _ in 0..steps {
        let g = frozen.grad(&theta);
        let mut total = 0.0;
        for j in 0..m {
            theta[j] *= (-step * g[j]).exp();
            total += theta[j];
        }
        theta /= total;
        let loss = frozen.loss(&theta);
        if loss < best_loss {
            best_loss = loss;
            best_theta = theta.clone();
        }
    }
    // the simplex contains every vertex: never return worse than Best-ERM
    let (bj, bloss) = best_vertex(&frozen);
    if bloss < best_loss {
        return Ok(SimplexWeights::one_hot(m, bj));
    }
    // exact renormalization so the invariant holds to tolerance
    let total: F = best_theta.iter().sum();
    SimplexWeights::new(best_theta.iter().map(|t| t / total).collect())
}

/// Summary of one selection run, serializable to JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionReport {
    pub per_candidate_loss: Vec<F>,
    pub best_index: usize,
    pub best_loss: F,
    pub convex_theta: Vec<F>,
    pub convex_loss: F,
    pub alpha: F,
    pub mc_batch: usize,
    pub seed: u64,
}

/// Run both selectors on one frozen sample set and report the results.
pub fn select_report(
    set: &CandidateSet,
    data: &Dataset,
    mc_batch: usize,
    seed: u64,
    steps: usize,
) -> Result<SelectionReport> {
    let frozen = FrozenValidation::build(set, data, mc_batch, seed)?;
    let m = set.len();
    let per_candidate_loss: Vec<F> = (0..m)
        .map(|j| {
            let theta = Vect::from_fn(m, |k, _| if k == j { 1.0 } else { 0.0 });
            frozen.loss(&theta)
        })
        .collect();
    let (best_index, best_loss) = best_vertex(&frozen);
    let convex = convex_erm(set, data, mc_batch, seed, steps)?;
    let convex_loss = frozen.loss(&frozen.theta_vec(&convex)?);
    Ok(SelectionReport {
        per_candidate_loss,
        best_index,
        best_loss,
        convex_theta: convex.theta,
        convex_loss,
        alpha: set.alpha,
        mc_batch,
        seed,
    })
}
