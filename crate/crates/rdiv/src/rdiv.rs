//! Regularized DeepIV: stage-2 minimization of
//! `E_n[(Y - (T h)(Z))^2] + alpha * E_n[(h(X) - h_prev(X))^2]`,
//! with the conditional-expectation operator `T` approximated by Monte-Carlo
//! draws from a fitted first-stage mixture. `iterations = 1` is the plain
//! estimator; larger m re-anchors the regularizer at the previous iterate
//! (iterated Tikhonov). `alpha = 0` reduces to DeepIV.

use crate::data::Dataset;
use crate::density_stage::{ConditionalMixtureModel, MixtureHead};
use crate::error::{Error, Result};
use crate::hypothesis::{HypothesisFunction, HypothesisSpec};
use crate::optim::{Adam, AdamConfig};
use crate::{Vect, F};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Stage-2 optimizer budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: F,
    pub epochs: usize,
    pub batch_size: usize,
    /// Decoupled weight decay passed to Adam.
    pub weight_decay: F,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: F,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 300,
            batch_size: 50,
            weight_decay: 0.0,
            lr_decay: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RdivConfig {
    /// Tikhonov strength; 0 reproduces DeepIV.
    pub alpha: F,
    /// Monte-Carlo draws per instrument value during training.
    pub mc_batch: usize,
    /// Number of anchored refits (1 = non-iterative estimator).
    pub iterations: usize,
    pub train: TrainConfig,
    pub seed: u64,
    /// Use two independent MC batches per step so the gradient of the squared
    /// residual is unbiased; a single shared batch gives a biased gradient.
    pub unbiased_grad: bool,
    /// Draw the MC sample set once and reuse it every step, making the
    /// training objective an exact (deterministic) quadratic in linear sieves.
    pub frozen_mc: bool,
    /// Monte-Carlo draws for final objective evaluation.
    pub eval_mc_batch: usize,
}

impl Default for RdivConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            mc_batch: 64,
            iterations: 1,
            train: TrainConfig::default(),
            seed: 0,
            unbiased_grad: true,
            frozen_mc: false,
            eval_mc_batch: 4096,
        }
    }
}

/// Result of [`fit`]: the final hypothesis plus every intermediate iterate
/// and its per-epoch loss trace.
#[derive(Debug, Clone)]
pub struct RdivFit {
    pub hypothesis: HypothesisFunction<F>,
    pub per_iteration: Vec<HypothesisFunction<F>>,
    pub losses: Vec<Vec<F>>,
    pub config: RdivConfig,
}

// RNG stream indices (offsets by iteration where applicable).
const STREAM_INIT: u64 = 0x2d00;
const STREAM_SHUFFLE: u64 = 0x2d20;
const STREAM_MC: u64 = 0x2d30;
const STREAM_FROZEN: u64 = 0x2d40;
const STREAM_EVAL: u64 = 0x2d50;

/// Per-row sampling state: mixture heads are evaluated once per data point,
/// and any trailing covariates shared with Z (e.g. treatment and observed
/// state in the proximal design) are appended to each stochastic draw.
pub(crate) struct RowSampler {
    heads: Vec<MixtureHead>,
    tails: Vec<Vec<F>>,
    block: usize,
    x_dim: usize,
}

impl RowSampler {
    pub(crate) fn build(data: &Dataset, g_hat: &ConditionalMixtureModel) -> Result<Self> {
        let x_dim = data.x.ncols();
        if g_hat.z_dim != data.z.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "first stage expects z_dim {}, data has {}",
                g_hat.z_dim,
                data.z.ncols()
            )));
        }
        if g_hat.x_dim > x_dim {
            return Err(Error::DimensionMismatch(format!(
                "first stage models {} covariates, data has {}",
                g_hat.x_dim, x_dim
            )));
        }
        let n = data.len();
        let mut heads = Vec::with_capacity(n);
        let mut tails = Vec::with_capacity(n);
        for i in 0..n {
            let z = data.z_row(i);
            heads.push(g_hat.head(z.as_slice()));
            tails.push(data.x_row(i).as_slice()[g_hat.x_dim..].to_vec());
        }
        Ok(Self { heads, tails, block: g_hat.x_dim, x_dim })
    }

    pub(crate) fn draw(&self, i: usize, rng: &mut ChaCha8Rng) -> Vect {
        let s = self.heads[i].sample(rng);
        if self.block == self.x_dim {
            return s;
        }
        let tail = &self.tails[i];
        Vect::from_fn(self.x_dim, |j, _| {
            if j < self.block {
                s[j]
            } else {
                tail[j - self.block]
            }
        })
    }
}

/// `T h(z)` by Monte Carlo: the mean of h over `mc_batch` draws from
/// `g_hat(. | z)`. When the first stage models only a leading block of the
/// covariates, the remaining block is read off the tail of z.
pub fn mc_conditional_expectation(
    g_hat: &ConditionalMixtureModel,
    h: &HypothesisFunction<F>,
    z: &Vect,
    mc_batch: usize,
    seed: u64,
) -> Result<F> {
    if mc_batch == 0 {
        return Err(Error::InvalidArgument("mc_batch must be positive".into()));
    }
    if z.len() != g_hat.z_dim {
        return Err(Error::DimensionMismatch(format!(
            "z has length {}, first stage expects {}",
            z.len(),
            g_hat.z_dim
        )));
    }
    let tail_len = h
        .spec
        .x_dim
        .checked_sub(g_hat.x_dim)
        .ok_or_else(|| Error::DimensionMismatch("hypothesis narrower than first stage".into()))?;
    if tail_len > z.len() {
        return Err(Error::DimensionMismatch("shared tail longer than z".into()));
    }
    let tail: Vec<F> = z.as_slice()[z.len() - tail_len..].to_vec();
    let draws = g_hat.sample(z.as_slice(), mc_batch, seed);
    let mut total = 0.0;
    let mut buf = Vect::zeros(h.spec.x_dim);
    for d in draws {
        buf.as_mut_slice()[..g_hat.x_dim].copy_from_slice(d.as_slice());
        buf.as_mut_slice()[g_hat.x_dim..].copy_from_slice(&tail);
        total += h.evaluate(&buf);
    }
    Ok(total / mc_batch as F)
}

/// Pre-drawn MC samples, stored flat: `count` draws of dimension `dim` per
/// data row.
struct FrozenDraws {
    data: Vec<F>,
    count: usize,
    dim: usize,
}

impl FrozenDraws {
    fn slice(&self, i: usize, b: usize) -> &[F] {
        let start = (i * self.count + b) * self.dim;
        &self.data[start..start + self.dim]
    }
}

fn mc_value_and_grad(
    h: &HypothesisFunction<F>,
    sampler: &RowSampler,
    frozen: Option<&FrozenDraws>,
    i: usize,
    mc_batch: usize,
    unbiased: bool,
    rng: &mut ChaCha8Rng,
    buf: &mut Vect,
) -> (F, Vect) {
    let inv = 1.0 / mc_batch as F;
    let mut value = 0.0;
    let mut grad = Vect::zeros(h.params.len());
    let load = |b: usize, buf: &mut Vect, rng: &mut ChaCha8Rng| match frozen {
        Some(fr) => buf.as_mut_slice().copy_from_slice(fr.slice(i, b)),
        None => *buf = sampler.draw(i, rng),
    };
    if unbiased {
        // batch A for the residual value, independent batch B for the
        // gradient direction
        for b in 0..mc_batch {
            load(b, buf, rng);
            value += h.evaluate(buf);
        }
        for b in 0..mc_batch {
            load(mc_batch + b, buf, rng);
            let (_, g) = h.value_and_param_grad(buf);
            grad += g;
        }
    } else {
        for b in 0..mc_batch {
            load(b, buf, rng);
            let (v, g) = h.value_and_param_grad(buf);
            value += v;
            grad += g;
        }
    }
    (value * inv, grad * inv)
}

/// One full optimizer budget over the (optionally anchored) objective.
fn run_iteration(
    h: &mut HypothesisFunction<F>,
    data: &Dataset,
    sampler: &RowSampler,
    frozen: Option<&FrozenDraws>,
    cfg: &RdivConfig,
    reg: Option<(F, &[F])>,
    iteration: usize,
) -> Result<Vec<F>> {
    let n = data.len();
    let p = h.params.len();
    let adam_cfg =
        AdamConfig::new(cfg.train.learning_rate).with_weight_decay(cfg.train.weight_decay);
    let mut opt = Adam::new(adam_cfg, p);
    let mut shuffle_rng = crate::stream_rng(cfg.seed, STREAM_SHUFFLE + iteration as u64);
    let mut mc_rng = crate::stream_rng(cfg.seed, STREAM_MC + iteration as u64);
    let mut order: Vec<usize> = (0..n).collect();
    let batch = cfg.train.batch_size.max(1);
    let mut buf = Vect::zeros(sampler.x_dim);
    let mut trace = Vec::with_capacity(cfg.train.epochs);
    for epoch in 0..cfg.train.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(batch) {
            let mut grad = Vect::zeros(p);
            let mut loss = 0.0;
            for &i in chunk {
                let (tval, tgrad) = mc_value_and_grad(
                    h,
                    sampler,
                    frozen,
                    i,
                    cfg.mc_batch,
                    cfg.unbiased_grad,
                    &mut mc_rng,
                    &mut buf,
                );
                let r = data.y[i] - tval;
                loss += r * r;
                grad.axpy(-2.0 * r, &tgrad, 1.0);
                if let Some((alpha, anchor)) = reg {
                    let (v, gx) = h.value_and_param_grad(&data.x_row(i));
                    let dv = v - anchor[i];
                    loss += alpha * dv * dv;
                    grad.axpy(2.0 * alpha * dv, &gx, 1.0);
                }
            }
            let m = chunk.len() as F;
            loss /= m;
            grad /= m;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            opt.step(&mut h.params, &grad);
            epoch_loss += loss;
            steps += 1;
        }
        trace.push(epoch_loss / steps as F);
        let lr = opt.learning_rate();
        opt.set_learning_rate(lr * cfg.train.lr_decay);
    }
    Ok(trace)
}

fn draw_frozen(sampler: &RowSampler, cfg: &RdivConfig, n: usize) -> FrozenDraws {
    let count = if cfg.unbiased_grad { 2 * cfg.mc_batch } else { cfg.mc_batch };
    let dim = sampler.x_dim;
    let mut rng = crate::stream_rng(cfg.seed, STREAM_FROZEN);
    let mut data = Vec::with_capacity(n * count * dim);
    for i in 0..n {
        for _ in 0..count {
            data.extend_from_slice(sampler.draw(i, &mut rng).as_slice());
        }
    }
    FrozenDraws { data, count, dim }
}

fn validate(data: &Dataset, spec: &HypothesisSpec<F>, cfg: &RdivConfig) -> Result<()> {
    if data.len() == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if cfg.mc_batch == 0 || cfg.iterations == 0 {
        return Err(Error::InvalidArgument(
            "mc_batch and iterations must be positive".into(),
        ));
    }
    if cfg.alpha < 0.0 {
        return Err(Error::InvalidArgument("alpha must be nonnegative".into()));
    }
    if spec.x_dim != data.x.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "hypothesis x_dim {} != data x_dim {}",
            spec.x_dim,
            data.x.ncols()
        )));
    }
    Ok(())
}

/// Algorithms 1 and 3: minimize the regularized stage-2 objective, with the
/// regularizer of iteration m anchored at the previous iterate (the zero
/// function for m = 1). Each iteration warm-starts from the previous one and
/// runs a full `TrainConfig` budget.
pub fn fit(
    data: &Dataset,
    g_hat: &ConditionalMixtureModel,
    spec: HypothesisSpec<F>,
    cfg: &RdivConfig,
) -> Result<RdivFit> {
    validate(data, &spec, cfg)?;
    let sampler = RowSampler::build(data, g_hat)?;
    let frozen = cfg.frozen_mc.then(|| draw_frozen(&sampler, cfg, data.len()));
    let mut h = HypothesisFunction::init(spec, &mut crate::stream_rng(cfg.seed, STREAM_INIT));
    let n = data.len();
    let mut anchor = vec![0.0; n];
    let mut per_iteration = Vec::with_capacity(cfg.iterations);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let reg = (cfg.alpha > 0.0).then_some((cfg.alpha, anchor.as_slice()));
        let trace = run_iteration(&mut h, data, &sampler, frozen.as_ref(), cfg, reg, it)?;
        losses.push(trace);
        per_iteration.push(h.clone());
        if it + 1 < cfg.iterations {
            for i in 0..n {
                anchor[i] = h.evaluate(&data.x_row(i));
            }
        }
    }
    Ok(RdivFit { hypothesis: h, per_iteration, losses, config: cfg.clone() })
}

/// Dedicated unregularized (DeepIV) path: the plain squared-residual
/// objective with no anchor machinery. Shares RNG streams with [`fit`], so a
/// single-threaded `fit` at `alpha = 0, iterations = 1` is bit-identical.
pub fn fit_deepiv(
    data: &Dataset,
    g_hat: &ConditionalMixtureModel,
    spec: HypothesisSpec<F>,
    cfg: &RdivConfig,
) -> Result<RdivFit> {
    let mut cfg = cfg.clone();
    cfg.alpha = 0.0;
    cfg.iterations = 1;
    validate(data, &spec, &cfg)?;
    let sampler = RowSampler::build(data, g_hat)?;
    let frozen = cfg.frozen_mc.then(|| draw_frozen(&sampler, &cfg, data.len()));
    let mut h = HypothesisFunction::init(spec, &mut crate::stream_rng(cfg.seed, STREAM_INIT));
    let trace = run_iteration(&mut h, data, &sampler, frozen.as_ref(), &cfg, None, 0)?;
    Ok(RdivFit {
        hypothesis: h.clone(),
        per_iteration: vec![h],
        losses: vec![trace],
        config: cfg,
    })
}

/// Deterministic evaluation of the empirical objective at a fixed hypothesis
/// (fresh MC draws from the given seed; anchor = zero function when absent).
pub fn empirical_objective(
    data: &Dataset,
    g_hat: &ConditionalMixtureModel,
    h: &HypothesisFunction<F>,
    alpha: F,
    anchor: Option<&HypothesisFunction<F>>,
    mc_batch: usize,
    seed: u64,
) -> Result<F> {
    if mc_batch == 0 {
        return Err(Error::InvalidArgument("mc_batch must be positive".into()));
    }
    let sampler = RowSampler::build(data, g_hat)?;
    let mut rng = crate::stream_rng(seed, STREAM_EVAL);
    let n = data.len();
    let mut obj = 0.0;
    for i in 0..n {
        let mut tval = 0.0;
        for _ in 0..mc_batch {
            tval += h.evaluate(&sampler.draw(i, &mut rng));
        }
        tval /= mc_batch as F;
        let r = data.y[i] - tval;
        obj += r * r;
        if alpha > 0.0 {
            let x = data.x_row(i);
            let a = anchor.map_or(0.0, |a| a.evaluate(&x));
            let dv = h.evaluate(&x) - a;
            obj += alpha * dv * dv;
        }
    }
    Ok(obj / n as F)
}

/// Evaluate the fitted bridge function at x.
pub fn predict(fit: &RdivFit, x: &Vect) -> Result<F> {
    if x.len() != fit.hypothesis.spec.x_dim {
        return Err(Error::DimensionMismatch(format!(
            "predict: x has length {}, hypothesis expects {}",
            x.len(),
            fit.hypothesis.spec.x_dim
        )));
    }
    Ok(fit.hypothesis.evaluate(x))
}

/// Counterfactual mean: the MC average of the fitted bridge over inputs
/// drawn by `sampler` (which must force the treatment coordinate).
pub fn counterfactual_mean<Sampler>(
    fit: &RdivFit,
    sampler: Sampler,
    mc: usize,
    seed: u64,
) -> Result<F>
where
    Sampler: Fn(usize, u64) -> Result<Vec<Vect>>,
{
    if mc == 0 {
        return Err(Error::InvalidArgument("mc must be positive".into()));
    }
    let inputs = sampler(mc, seed)?;
    let mut total = 0.0;
    for x in &inputs {
        total += predict(fit, x)?;
    }
    Ok(total / inputs.len() as F)
}

#[derive(Serialize, Deserialize)]
struct RdivFitDto {
    version: u32,
    config: RdivConfig,
    hypotheses: Vec<serde_json::Value>,
    losses: Vec<Vec<F>>,
}

impl RdivFit {
    pub fn to_json(&self) -> String {
        let hypotheses = self
            .per_iteration
            .iter()
            .map(|h| serde_json::from_str(&h.to_json()).expect("hypothesis json"))
            .collect();
        let dto = RdivFitDto {
            version: 1,
            config: self.config.clone(),
            hypotheses,
            losses: self.losses.clone(),
        };
        serde_json::to_string(&dto).expect("fit serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let dto: RdivFitDto =
            serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        if dto.hypotheses.is_empty() {
            return Err(Error::Serde("fit without hypotheses".into()));
        }
        let per_iteration: Vec<HypothesisFunction<F>> = dto
            .hypotheses
            .iter()
            .map(|v| HypothesisFunction::from_json(&v.to_string()))
            .collect::<Result<_>>()?;
        Ok(Self {
            hypothesis: per_iteration.last().expect("nonempty").clone(),
            per_iteration,
            losses: dto.losses,
            config: dto.config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::npiv::{generate_linear_npiv, LinearNpivParams};
    use crate::inverse_core::{tikhonov_solve, LinearInverseProblem};
    use crate::Mat;

    fn scalar_gaussian(slope: F, sigma: F) -> ConditionalMixtureModel {
        ConditionalMixtureModel::gaussian_affine(
            &Mat::from_element(1, 1, slope),
            &Vect::zeros(1),
            sigma,
        )
        .unwrap()
    }

    fn npiv_family() -> LinearNpivParams {
        let w0 = Vect::from_element(5, 1.0);
        LinearNpivParams::new(0.6, 4, 0.0, &w0, 0.1).unwrap()
    }

    #[test]
    fn mc_constant_is_exact() {
        let g = scalar_gaussian(1.0, 1.0);
        let h = HypothesisFunction::new(
            HypothesisSpec::poly(0, 1),
            Vect::from_element(1, 3.25),
        )
        .unwrap();
        let v =
            mc_conditional_expectation(&g, &h, &Vect::from_element(1, 0.4), 64, 9).unwrap();
        assert!((v - 3.25).abs() < 1e-12);
    }

    #[test]
    fn mc_gaussian_second_moment() {
        // g = N(z, 1), h(x) = x^2: E[h|z] = z^2 + 1, Var(h|z) = 4 z^2 + 2
        let g = scalar_gaussian(1.0, 1.0);
        let h = HypothesisFunction::new(
            HypothesisSpec::poly(2, 1),
            Vect::from_vec(vec![0.0, 0.0, 1.0]),
        )
        .unwrap();
        let z = 0.8;
        let b = 100_000;
        let v =
            mc_conditional_expectation(&g, &h, &Vect::from_element(1, z), b, 11).unwrap();
        let truth = z * z + 1.0;
        let band = 4.0 * ((4.0 * z * z + 2.0) / b as F).sqrt();
        assert!((v - truth).abs() <= band, "{v} vs {truth} (band {band})");
    }

    /// MC unbiasedness across 1000 independent seeds.
    #[test]
    fn mc_unbiased_over_seeds() {
        let g = scalar_gaussian(1.0, 1.0);
        let h = HypothesisFunction::new(
            HypothesisSpec::poly(2, 1),
            Vect::from_vec(vec![0.0, 0.0, 1.0]),
        )
        .unwrap();
        let z = Vect::from_element(1, 0.7);
        let truth = 0.7 * 0.7 + 1.0;
        let vals: Vec<F> = (0..1000)
            .map(|s| mc_conditional_expectation(&g, &h, &z, 8, s).unwrap())
            .collect();
        let mean = vals.iter().sum::<F>() / vals.len() as F;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<F>() / (vals.len() - 1) as F;
        let se = (var / vals.len() as F).sqrt();
        assert!((mean - truth).abs() <= 4.0 * se, "{mean} vs {truth}, se {se}");
    }

    #[test]
    fn mc_near_point_mass() {
        let sigma = 2e-3;
        let g = scalar_gaussian(1.0, sigma);
        // h(x) = 2x, Lipschitz constant 2
        let h = HypothesisFunction::new(
            HypothesisSpec::poly(1, 1),
            Vect::from_vec(vec![0.0, 2.0]),
        )
        .unwrap();
        let v =
            mc_conditional_expectation(&g, &h, &Vect::from_element(1, 1.3), 256, 3).unwrap();
        assert!((v - 2.6).abs() <= 2.0 * 6.0 * sigma);
    }

    fn quick_cfg(alpha: F) -> RdivConfig {
        RdivConfig {
            alpha,
            mc_batch: 16,
            iterations: 1,
            train: TrainConfig {
                learning_rate: 0.05,
                epochs: 40,
                batch_size: 100,
                weight_decay: 0.0,
                lr_decay: 0.93,
            },
            seed: 7,
            unbiased_grad: true,
            frozen_mc: false,
            eval_mc_batch: 512,
        }
    }

    #[test]
    fn objective_decreases_and_beats_zero_function() {
        let fam = npiv_family();
        let data = generate_linear_npiv(&fam, 500, 21).unwrap();
        let g = fam.oracle_density();
        let cfg = quick_cfg(0.25);
        let fit = fit(&data, &g, fam.feature_spec(), &cfg).unwrap();
        let trace = &fit.losses[0];
        assert!(trace.last().unwrap() <= trace.first().unwrap());
        let obj =
            empirical_objective(&data, &g, &fit.hypothesis, 0.25, None, 512, 5).unwrap();
        let zero = HypothesisFunction::zeros(fam.feature_spec());
        let zero_obj = empirical_objective(&data, &g, &zero, 0.25, None, 512, 5).unwrap();
        assert!(obj <= zero_obj + 1e-6, "{obj} vs zero {zero_obj}");
    }

    /// With alpha enormous the anchored refit cannot move: parameter distance
    /// between consecutive iterates shrinks as alpha grows.
    #[test]
    fn iterative_anchoring_freezes_at_large_alpha() {
        let fam = npiv_family();
        let data = generate_linear_npiv(&fam, 300, 33).unwrap();
        let g = fam.oracle_density();
        let mut dists = Vec::new();
        for alpha in [1e2, 1e4, 1e6] {
            let mut cfg = quick_cfg(alpha);
            cfg.iterations = 2;
            cfg.frozen_mc = true;
            cfg.train.epochs = 25;
            let fit = fit(&data, &g, fam.feature_spec(), &cfg).unwrap();
            let d = (&fit.per_iteration[1].params - &fit.per_iteration[0].params).norm();
            dists.push(d);
        }
        assert!(dists[1] < dists[0] && dists[2] < dists[1], "{dists:?}");
        assert!(dists[2] < 1e-3, "{dists:?}");
    }

    #[test]
    fn huge_alpha_crushes_the_norm() {
        let fam = npiv_family();
        let data = generate_linear_npiv(&fam, 300, 44).unwrap();
        let g = fam.oracle_density();
        let norm_at = |alpha: F| {
            let mut cfg = quick_cfg(alpha);
            cfg.train.epochs = 120;
            cfg.train.lr_decay = 0.95;
            let fit = fit(&data, &g, fam.feature_spec(), &cfg).unwrap();
            let n = data.len();
            let mut sq = 0.0;
            for i in 0..n {
                let v = fit.hypothesis.evaluate(&data.x_row(i));
                sq += v * v;
            }
            (sq / n as F).sqrt()
        };
        let big = norm_at(1e6);
        let small = norm_at(0.01);
        assert!(big <= 0.01 * small, "norms {big} vs {small}");
    }

    #[test]
    fn deepiv_reduction_is_bit_identical() {
        let fam = npiv_family();
        let data = generate_linear_npiv(&fam, 200, 55).unwrap();
        let g = fam.oracle_density();
        let mut cfg = quick_cfg(0.0);
        cfg.train.epochs = 10;
        let a = fit(&data, &g, fam.feature_spec(), &cfg).unwrap();
        let b = fit_deepiv(&data, &g, fam.feature_spec(), &cfg).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(
            a.hypothesis.params.as_slice(),
            b.hypothesis.params.as_slice()
        );
    }

    /// Central correctness gate: with a linear sieve, the oracle first stage
    /// and frozen MC, the trained coefficients match the closed-form Tikhonov
    /// solution on the empirically averaged feature-space operator.
    #[test]
    fn ridge_equivalence_with_closed_form() {
        let fam = npiv_family();
        let alpha = 0.25;
        let n = 120_000;
        let data = generate_linear_npiv(&fam, n, 77).unwrap();
        let g = fam.oracle_density();
        let spec = fam.feature_spec();

        // empirical feature-space operator and response
        let dim = 5;
        let mut t_hat = Mat::zeros(dim, dim);
        let mut r_hat = Vect::zeros(dim);
        for i in 0..n {
            let fz = crate::hypothesis::features(&spec, &data.z_row(i)).unwrap();
            let fx = crate::hypothesis::features(&spec, &data.x_row(i)).unwrap();
            t_hat += &fz * fx.transpose();
            r_hat.axpy(data.y[i], &fz, 1.0);
        }
        t_hat /= n as F;
        r_hat /= n as F;
        let w0 = t_hat.clone().lu().solve(&r_hat).unwrap();
        let problem = LinearInverseProblem::from_operator(t_hat, 0.0, w0).unwrap();
        let closed = tikhonov_solve(&problem, alpha);

        let cfg = RdivConfig {
            alpha,
            mc_batch: 16,
            iterations: 1,
            train: TrainConfig {
                learning_rate: 0.05,
                epochs: 18,
                batch_size: 2000,
                weight_decay: 0.0,
                lr_decay: 0.78,
            },
            seed: 7,
            unbiased_grad: true,
            frozen_mc: true,
            eval_mc_batch: 512,
        };
        let fit = fit(&data, &g, spec, &cfg).unwrap();
        let rel = (&fit.hypothesis.params - &closed).norm() / closed.norm();
        assert!(rel <= 1e-2, "relative parameter error {rel}");
    }

    #[test]
    #[ignore]
    fn ridge_diag() {
        let fam = npiv_family();
        let alpha = 0.25;
        for n in [60_000usize, 120_000] {
            let data = generate_linear_npiv(&fam, n, 77).unwrap();
            let g = fam.oracle_density();
            let spec = fam.feature_spec();
            let dim = 5;
            let mut t_hat = Mat::zeros(dim, dim);
            let mut r_hat = Vect::zeros(dim);
            for i in 0..n {
                let fz = crate::hypothesis::features(&spec, &data.z_row(i)).unwrap();
                let fx = crate::hypothesis::features(&spec, &data.x_row(i)).unwrap();
                t_hat += &fz * fx.transpose();
                r_hat.axpy(data.y[i], &fz, 1.0);
            }
            t_hat /= n as F;
            r_hat /= n as F;
            let w0 = t_hat.clone().lu().solve(&r_hat).unwrap();
            let problem = LinearInverseProblem::from_operator(t_hat, 0.0, w0).unwrap();
            let closed = tikhonov_solve(&problem, alpha);
            // population closed form
            let mut t_pop = Mat::zeros(dim, dim);
            t_pop[(0, 0)] = 1.0;
            for i in 1..dim {
                t_pop[(i, i)] = 0.6;
            }
            let theta0 = fam.problem.true_solution();
            let pop = Vect::from_fn(dim, |j, _| {
                let s2 = t_pop[(j, j)] * t_pop[(j, j)];
                s2 / (s2 + alpha) * theta0[j]
            });
            // exact stationary point of the frozen unbiased objective
            let cfg = RdivConfig {
                alpha,
                mc_batch: 16,
                iterations: 1,
                train: TrainConfig {
                    learning_rate: 0.05,
                    epochs: 18,
                    batch_size: 2000,
                    weight_decay: 0.0,
                    lr_decay: 0.78,
                },
                seed: 7,
                unbiased_grad: true,
                frozen_mc: true,
                eval_mc_batch: 512,
            };
            let sampler = RowSampler::build(&data, &g).unwrap();
            let frozen = draw_frozen(&sampler, &cfg, n);
            let b = cfg.mc_batch;
            let mut m_cross = Mat::zeros(dim, dim);
            let mut v_b = Vect::zeros(dim);
            let mut g_x = Mat::zeros(dim, dim);
            for i in 0..n {
                let mut ta = Vect::zeros(dim);
                let mut tb = Vect::zeros(dim);
                for k in 0..b {
                    ta += crate::hypothesis::features(
                        &spec,
                        &Vect::from_column_slice(frozen.slice(i, k)),
                    )
                    .unwrap();
                    tb += crate::hypothesis::features(
                        &spec,
                        &Vect::from_column_slice(frozen.slice(i, b + k)),
                    )
                    .unwrap();
                }
                ta /= b as F;
                tb /= b as F;
                m_cross += &tb * ta.transpose();
                v_b.axpy(data.y[i], &tb, 1.0);
                let fx = crate::hypothesis::features(&spec, &data.x_row(i)).unwrap();
                g_x += &fx * fx.transpose();
            }
            m_cross /= n as F;
            v_b /= n as F;
            g_x /= n as F;
            let exact = (m_cross + g_x * alpha).lu().solve(&v_b).unwrap();
            let fit_res = fit(&data, &g, spec, &cfg).unwrap();
            let theta = &fit_res.hypothesis.params;
            println!("n={n}");
            println!("  adam vs closed   {:.5}", (theta - &closed).norm() / closed.norm());
            println!("  adam vs exact    {:.5}", (theta - &exact).norm() / exact.norm());
            println!("  exact vs closed  {:.5}", (&exact - &closed).norm() / closed.norm());
            println!("  closed vs pop    {:.5}", (&closed - &pop).norm() / pop.norm());
            println!("  exact vs pop     {:.5}", (&exact - &pop).norm() / pop.norm());
        }
    }

    #[test]
    fn predict_delegates_and_checks_dims() {
        let fam = npiv_family();
        let data = generate_linear_npiv(&fam, 100, 3).unwrap();
        let g = fam.oracle_density();
        let mut cfg = quick_cfg(0.1);
        cfg.train.epochs = 3;
        let fit_res = fit(&data, &g, fam.feature_spec(), &cfg).unwrap();
        let x = data.x_row(0);
        assert_eq!(predict(&fit_res, &x).unwrap(), fit_res.hypothesis.evaluate(&x));
        assert!(predict(&fit_res, &Vect::zeros(2)).is_err());
    }

    #[test]
    fn counterfactual_mean_of_constant_is_constant() {
        let h = HypothesisFunction::new(
            HypothesisSpec::poly(0, 3),
            Vect::from_element(1, 4.5),
        )
        .unwrap();
        let fit = RdivFit {
            hypothesis: h.clone(),
            per_iteration: vec![h],
            losses: vec![vec![]],
            config: RdivConfig::default(),
        };
        let v = counterfactual_mean(
            &fit,
            |n, seed| {
                let mut rng = crate::stream_rng(seed, 1);
                Ok((0..n)
                    .map(|_| {
                        Vect::from_fn(3, |_, _| {
                            <F as crate::Scalar>::sample_standard_normal(&mut rng)
                        })
                    })
                    .collect())
            },
            500,
            2,
        )
        .unwrap();
        assert!((v - 4.5).abs() < 1e-12);
    }

    /// Plugging the true solution into the counterfactual average recovers
    /// its known population mean within MC error.
    #[test]
    fn counterfactual_matches_oracle_for_true_solution() {
        let fam = npiv_family();
        let spec = fam.feature_spec();
        let h = HypothesisFunction::new(spec, fam.problem.true_solution().clone()).unwrap();
        let fit = RdivFit {
            hypothesis: h.clone(),
            per_iteration: vec![h],
            losses: vec![vec![]],
            config: RdivConfig::default(),
        };
        let mc = 40_000;
        let v = counterfactual_mean(
            &fit,
            |n, seed| {
                let mut rng = crate::stream_rng(seed, 2);
                Ok((0..n)
                    .map(|_| {
                        Vect::from_fn(4, |_, _| {
                            <F as crate::Scalar>::sample_standard_normal(&mut rng)
                        })
                    })
                    .collect())
            },
            mc,
            8,
        )
        .unwrap();
        // E[h0(X)] = intercept coefficient; coordinate terms have mean zero
        // with variance ||theta_{1..p}||^2 = 4
        let truth = fam.problem.true_solution()[0];
        let band = 3.0 * (4.0 / mc as F).sqrt();
        assert!((v - truth).abs() <= band, "{v} vs {truth}");
    }

    #[test]
    fn fit_json_round_trip() {
        let fam = npiv_family();
        let data = generate_linear_npiv(&fam, 120, 9).unwrap();
        let g = fam.oracle_density();
        let mut cfg = quick_cfg(0.1);
        cfg.train.epochs = 3;
        cfg.iterations = 2;
        let fit_res = fit(&data, &g, fam.feature_spec(), &cfg).unwrap();
        let back = RdivFit::from_json(&fit_res.to_json()).unwrap();
        assert_eq!(
            fit_res.hypothesis.params.as_slice(),
            back.hypothesis.params.as_slice()
        );
        assert_eq!(fit_res.losses, back.losses);
        assert_eq!(back.per_iteration.len(), 2);
    }

    #[test]
    fn invalid_configs_rejected() {
        let fam = npiv_family();
        let data = generate_linear_npiv(&fam, 50, 1).unwrap();
        let g = fam.oracle_density();
        let mut cfg = quick_cfg(0.1);
        cfg.mc_batch = 0;
        assert!(fit(&data, &g, fam.feature_spec(), &cfg).is_err());
        let mut cfg = quick_cfg(-0.5);
        cfg.alpha = -0.5;
        assert!(fit(&data, &g, fam.feature_spec(), &cfg).is_err());
    }
}
