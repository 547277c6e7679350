//! First-stage conditional density estimation: conditional Gaussian mixtures
//! trained by maximum likelihood or by the chi-square objective
//! `0.5 E_n[int g^2(x|Z) dmu] - E_n[g(X|Z)]`.
//!
//! Mixture weights go through a softmax and component scales through a
//! softplus plus a floor, so the simplex and scale-floor invariants hold by
//! construction. Scales are isotropic per component. The map from the
//! instrument z to the mixture parameters is either affine or a small MLP
//! trunk (a mixture density network).

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::{Vect, F};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// How mixture parameters depend on z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parameterization {
    LinearInZ,
    Mlp { width: usize },
}

/// Training objective for [`fit_density`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Mle,
    Chi2Mle,
}

/// First-stage training settings.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub objective: Objective,
    pub learning_rate: F,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: F,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: F,
    /// Keep component scales at their initial value (gradient zeroed).
    pub freeze_scale: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Mle,
            learning_rate: 1e-4,
            epochs: 300,
            batch_size: 50,
            seed: 0,
            weight_decay: 0.0,
            lr_decay: 1.0,
            freeze_scale: false,
        }
    }
}

const TRUNK_DEPTH: usize = 3;

/// Conditional Gaussian mixture `g(x|z)`.
#[derive(Debug, Clone)]
pub struct ConditionalMixtureModel {
    pub k: usize,
    pub x_dim: usize,
    pub z_dim: usize,
    pub parameterization: Parameterization,
    /// Minimum component scale.
    pub floor_sigma: F,
    pub params: Vect,
}

/// Mixture parameters at a fixed z.
#[derive(Debug, Clone)]
pub struct MixtureHead {
    pub pi: Vec<F>,
    /// Component means, flattened component-major (k blocks of x_dim).
    pub mu: Vec<F>,
    pub sigma: Vec<F>,
    raw: Vec<F>,
}

/// Gradients of a scalar loss with respect to head quantities.
struct HeadGrad {
    dlogits: Vec<F>,
    dmu: Vec<F>,
    dsigma: Vec<F>,
}

fn softplus(x: F) -> F {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inv(y: F) -> F {
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}

fn log_sum_exp(vals: &[F]) -> F {
    let m = vals.iter().copied().fold(F::NEG_INFINITY, F::max);
    if !m.is_finite() {
        return m;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<F>().ln()
}

impl ConditionalMixtureModel {
    /// Untrained template; parameters are initialized by [`fit_density`].
    pub fn template(
        k: usize,
        x_dim: usize,
        z_dim: usize,
        parameterization: Parameterization,
    ) -> Self {
        let mut m = Self {
            k,
            x_dim,
            z_dim,
            parameterization,
            floor_sigma: 1e-3,
            params: Vect::zeros(0),
        };
        m.params = Vect::zeros(m.param_count());
        m
    }

    /// Exact single-component Gaussian `x | z ~ N(B z + c, sigma^2 I)`,
    /// used as an oracle first stage in tests and studies.
    pub fn gaussian_affine(b: &crate::Mat, c: &Vect, sigma: F) -> Result<Self> {
        let x_dim = b.nrows();
        let z_dim = b.ncols();
        if c.len() != x_dim {
            return Err(Error::DimensionMismatch("bias length != x_dim".into()));
        }
        let mut m = Self::template(1, x_dim, z_dim, Parameterization::LinearInZ);
        if sigma <= m.floor_sigma {
            return Err(Error::InvalidArgument("sigma must exceed floor_sigma".into()));
        }
        // output order: logits (k), means (k*x_dim), raw scales (k)
        let out_dim = m.out_dim();
        for j in 0..x_dim {
            for l in 0..z_dim {
                m.params[(1 + j) * z_dim + l] = b[(j, l)];
            }
            m.params[out_dim * z_dim + 1 + j] = c[j];
        }
        m.params[out_dim * z_dim + 1 + x_dim] = softplus_inv(sigma - m.floor_sigma);
        Ok(m)
    }

    fn out_dim(&self) -> usize {
        self.k * (self.x_dim + 2)
    }

    pub fn param_count(&self) -> usize {
        let out = self.out_dim();
        match self.parameterization {
            Parameterization::LinearInZ => out * self.z_dim + out,
            Parameterization::Mlp { width } => {
                width * self.z_dim
                    + width
                    + (TRUNK_DEPTH - 1) * (width * width + width)
                    + out * width
                    + out
            }
        }
    }

    /// Raw trunk outputs at z, with activation cache for backprop.
    fn trunk_forward(&self, z: &[F]) -> (Vec<F>, Vec<Vec<F>>) {
        let out_dim = self.out_dim();
        match self.parameterization {
            Parameterization::LinearInZ => {
                let mut out = vec![0.0; out_dim];
                for o in 0..out_dim {
                    let mut acc = self.params[out_dim * self.z_dim + o];
                    let row = o * self.z_dim;
                    for (l, &zl) in z.iter().enumerate() {
                        acc += self.params[row + l] * zl;
                    }
                    out[o] = acc;
                }
                (out, Vec::new())
            }
            Parameterization::Mlp { width } => {
                let mut acts: Vec<Vec<F>> = Vec::with_capacity(TRUNK_DEPTH);
                let mut prev: Vec<F> = z.to_vec();
                let mut offset = 0;
                for layer in 0..TRUNK_DEPTH {
                    let fan_in = if layer == 0 { self.z_dim } else { width };
                    let mut out = vec![0.0; width];
                    for i in 0..width {
                        let mut acc = self.params[offset + width * fan_in + i];
                        let row = offset + i * fan_in;
                        for (j, &p) in prev.iter().enumerate() {
                            acc += self.params[row + j] * p;
                        }
                        out[i] = acc.tanh();
                    }
                    offset += width * fan_in + width;
                    acts.push(out.clone());
                    prev = out;
                }
                let mut out = vec![0.0; out_dim];
                for o in 0..out_dim {
                    let mut acc = self.params[offset + out_dim * width + o];
                    let row = offset + o * width;
                    for (j, &p) in prev.iter().enumerate() {
                        acc += self.params[row + j] * p;
                    }
                    out[o] = acc;
                }
                (out, acts)
            }
        }
    }

    /// Backpropagate `dout` through the trunk, accumulating into `grad`.
    fn trunk_backward(&self, z: &[F], acts: &[Vec<F>], dout: &[F], grad: &mut Vect) {
        let out_dim = self.out_dim();
        match self.parameterization {
            Parameterization::LinearInZ => {
                for o in 0..out_dim {
                    let row = o * self.z_dim;
                    for (l, &zl) in z.iter().enumerate() {
                        grad[row + l] += dout[o] * zl;
                    }
                    grad[out_dim * self.z_dim + o] += dout[o];
                }
            }
            Parameterization::Mlp { width } => {
                let mut layer_offsets = Vec::with_capacity(TRUNK_DEPTH);
                let mut offset = 0;
                for layer in 0..TRUNK_DEPTH {
                    let fan_in = if layer == 0 { self.z_dim } else { width };
                    layer_offsets.push(offset);
                    offset += width * fan_in + width;
                }
                let readout = offset;
                let top = &acts[TRUNK_DEPTH - 1];
                let mut delta = vec![0.0; width];
                for o in 0..out_dim {
                    let row = readout + o * width;
                    for j in 0..width {
                        grad[row + j] += dout[o] * top[j];
                        delta[j] += dout[o] * self.params[row + j];
                    }
                    grad[readout + out_dim * width + o] += dout[o];
                }
                for j in 0..width {
                    delta[j] *= 1.0 - top[j] * top[j];
                }
                for layer in (0..TRUNK_DEPTH).rev() {
                    let fan_in = if layer == 0 { self.z_dim } else { width };
                    let off = layer_offsets[layer];
                    let below: &[F] = if layer == 0 { z } else { &acts[layer - 1] };
                    for i in 0..width {
                        let row = off + i * fan_in;
                        for (j, &b) in below.iter().enumerate() {
                            grad[row + j] += delta[i] * b;
                        }
                        grad[off + width * fan_in + i] += delta[i];
                    }
                    if layer > 0 {
                        let mut next = vec![0.0; width];
                        for j in 0..width {
                            let mut acc = 0.0;
                            for i in 0..width {
                                acc += delta[i] * self.params[off + i * fan_in + j];
                            }
                            next[j] = acc * (1.0 - acts[layer - 1][j] * acts[layer - 1][j]);
                        }
                        delta = next;
                    }
                }
            }
        }
    }

    fn head_from_out(&self, out: &[F]) -> MixtureHead {
        let k = self.k;
        let logits = &out[..k];
        let m = logits.iter().copied().fold(F::NEG_INFINITY, F::max);
        let exps: Vec<F> = logits.iter().map(|l| (l - m).exp()).collect();
        let total: F = exps.iter().sum();
        let pi: Vec<F> = exps.iter().map(|e| e / total).collect();
        let mu = out[k..k + k * self.x_dim].to_vec();
        let raw = out[k + k * self.x_dim..].to_vec();
        let sigma = raw.iter().map(|&r| self.floor_sigma + softplus(r)).collect();
        MixtureHead { pi, mu, sigma, raw }
    }

    /// Mixture parameters at z.
    pub fn head(&self, z: &[F]) -> MixtureHead {
        let (out, _) = self.trunk_forward(z);
        self.head_from_out(&out)
    }

    /// Map head gradients back to trunk-output gradients (softmax and
    /// softplus chain rules).
    fn head_backward(&self, head: &MixtureHead, hg: &HeadGrad) -> Vec<F> {
        let k = self.k;
        let mut dout = vec![0.0; self.out_dim()];
        dout[..k].copy_from_slice(&hg.dlogits);
        dout[k..k + k * self.x_dim].copy_from_slice(&hg.dmu);
        for a in 0..k {
            let sig = 1.0 / (1.0 + (-head.raw[a]).exp());
            dout[k + k * self.x_dim + a] = hg.dsigma[a] * sig;
        }
        dout
    }

    /// Mixture density at (x, z).
    pub fn density(&self, x: &[F], z: &[F]) -> Result<F> {
        if x.len() != self.x_dim || z.len() != self.z_dim {
            return Err(Error::DimensionMismatch(format!(
                "density: got x len {}, z len {}, expected ({}, {})",
                x.len(),
                z.len(),
                self.x_dim,
                self.z_dim
            )));
        }
        Ok(self.head(z).log_density(x).exp())
    }

    /// Draw `count` i.i.d. samples from g(.|z); deterministic given seed.
    pub fn sample(&self, z: &[F], count: usize, seed: u64) -> Vec<Vect> {
        let head = self.head(z);
        let mut rng = crate::stream_rng(seed, 0x5a4d);
        (0..count).map(|_| head.sample(&mut rng)).collect()
    }

    /// Closed-form `int g(x|z)^2 dmu(x)` via pairwise Gaussian products.
    pub fn chi2_pairwise_integral(&self, z: &[F]) -> F {
        self.head(z).chi2_integral(self.x_dim)
    }

    pub fn to_json(&self) -> String {
        let dto = MixtureDto {
            version: 1,
            k: self.k,
            x_dim: self.x_dim,
            z_dim: self.z_dim,
            parameterization: self.parameterization,
            floor_sigma: self.floor_sigma,
            params: self.params.iter().copied().collect(),
        };
        serde_json::to_string(&dto).expect("mixture serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let dto: MixtureDto =
            serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        let m = Self {
            k: dto.k,
            x_dim: dto.x_dim,
            z_dim: dto.z_dim,
            parameterization: dto.parameterization,
            floor_sigma: dto.floor_sigma,
            params: Vect::from_vec(dto.params),
        };
        if m.params.len() != m.param_count() {
            return Err(Error::Serde("parameter count mismatch".into()));
        }
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
struct MixtureDto {
    version: u32,
    k: usize,
    x_dim: usize,
    z_dim: usize,
    parameterization: Parameterization,
    floor_sigma: F,
    params: Vec<F>,
}

impl MixtureHead {
    fn component_log_pdf(&self, a: usize, x: &[F]) -> F {
        let d = x.len();
        let sigma = self.sigma[a];
        let mut sq = 0.0;
        for (j, &xj) in x.iter().enumerate() {
            let diff = xj - self.mu[a * d + j];
            sq += diff * diff;
        }
        -(d as F) * 0.5 * (2.0 * std::f64::consts::PI).ln() - (d as F) * sigma.ln()
            - sq / (2.0 * sigma * sigma)
    }

    pub fn log_density(&self, x: &[F]) -> F {
        let terms: Vec<F> = (0..self.pi.len())
            .map(|a| self.pi[a].ln() + self.component_log_pdf(a, x))
            .collect();
        log_sum_exp(&terms)
    }

    /// One draw: categorical component choice, then an isotropic Gaussian.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vect {
        let d = self.mu.len() / self.pi.len();
        let u: F = rng.gen();
        let mut acc = 0.0;
        let mut comp = self.pi.len() - 1;
        for (a, &p) in self.pi.iter().enumerate() {
            acc += p;
            if u <= acc {
                comp = a;
                break;
            }
        }
        Vect::from_fn(d, |j, _| {
            self.mu[comp * d + j]
                + self.sigma[comp] * <F as crate::Scalar>::sample_standard_normal(rng)
        })
    }

    /// `int g^2` for this head: sum over component pairs of
    /// `pi_j pi_k N(mu_j; mu_k, (sigma_j^2+sigma_k^2) I)`.
    pub fn chi2_integral(&self, d: usize) -> F {
        let k = self.pi.len();
        let mut total = 0.0;
        for a in 0..k {
            for b in 0..k {
                total += self.pi[a] * self.pi[b] * self.pair_pdf(a, b, d);
            }
        }
        total
    }

    fn pair_pdf(&self, a: usize, b: usize, d: usize) -> F {
        let s = self.sigma[a] * self.sigma[a] + self.sigma[b] * self.sigma[b];
        let mut sq = 0.0;
        for j in 0..d {
            let diff = self.mu[a * d + j] - self.mu[b * d + j];
            sq += diff * diff;
        }
        (2.0 * std::f64::consts::PI * s).powf(-(d as F) / 2.0) * (-sq / (2.0 * s)).exp()
    }
}

/// Negative log-likelihood and its head gradients at one observation.
fn nll_and_grads(head: &MixtureHead, x: &[F]) -> (F, HeadGrad) {
    let k = head.pi.len();
    let d = x.len();
    let terms: Vec<F> = (0..k)
        .map(|a| head.pi[a].ln() + head.component_log_pdf(a, x))
        .collect();
    let lse = log_sum_exp(&terms);
    let resp: Vec<F> = terms.iter().map(|t| (t - lse).exp()).collect();
    let mut dmu = vec![0.0; k * d];
    let mut dsigma = vec![0.0; k];
    let mut dlogits = vec![0.0; k];
    for a in 0..k {
        dlogits[a] = head.pi[a] - resp[a];
        let sigma = head.sigma[a];
        let mut sq = 0.0;
        for j in 0..d {
            let diff = x[j] - head.mu[a * d + j];
            sq += diff * diff;
            dmu[a * d + j] = -resp[a] * diff / (sigma * sigma);
        }
        dsigma[a] = -resp[a] * (sq / (sigma * sigma * sigma) - (d as F) / sigma);
    }
    (-lse, HeadGrad { dlogits, dmu, dsigma })
}

/// Chi-square loss `0.5 int g^2 - g(x|z)` and its head gradients.
fn chi2_and_grads(head: &MixtureHead, x: &[F]) -> (F, HeadGrad) {
    let k = head.pi.len();
    let d = x.len();
    let integral = head.chi2_integral(d);
    let g = head.log_density(x).exp();
    let loss = 0.5 * integral - g;
    let mut dpi = vec![0.0; k];
    let mut dmu = vec![0.0; k * d];
    let mut dsigma = vec![0.0; k];
    for a in 0..k {
        let sa = head.sigma[a];
        // integral part
        for b in 0..k {
            let c = head.pair_pdf(a, b, d);
            let s = sa * sa + head.sigma[b] * head.sigma[b];
            dpi[a] += 0.5 * 2.0 * head.pi[b] * c;
            let mut sq = 0.0;
            for j in 0..d {
                let diff = head.mu[a * d + j] - head.mu[b * d + j];
                sq += diff * diff;
                dmu[a * d + j] += 0.5 * 2.0 * head.pi[a] * head.pi[b] * c * (-diff / s);
            }
            let dc_ds = c * (-(d as F) / (2.0 * s) + sq / (2.0 * s * s));
            dsigma[a] += 0.5 * 2.0 * head.pi[a] * head.pi[b] * dc_ds * 2.0 * sa;
        }
        // -g part
        let na = head.component_log_pdf(a, x).exp();
        dpi[a] -= na;
        let mut sq = 0.0;
        for j in 0..d {
            let diff = x[j] - head.mu[a * d + j];
            sq += diff * diff;
            dmu[a * d + j] -= head.pi[a] * na * diff / (sa * sa);
        }
        dsigma[a] -= head.pi[a] * na * (sq / (sa * sa * sa) - (d as F) / sa);
    }
    // softmax chain: dlogits_j = pi_j (dpi_j - sum_a pi_a dpi_a)
    let inner: F = (0..k).map(|a| head.pi[a] * dpi[a]).sum();
    let dlogits = (0..k).map(|a| head.pi[a] * (dpi[a] - inner)).collect();
    (loss, HeadGrad { dlogits, dmu, dsigma })
}

fn per_sample_loss(head: &MixtureHead, x: &[F], objective: Objective) -> (F, HeadGrad) {
    match objective {
        Objective::Mle => nll_and_grads(head, x),
        Objective::Chi2Mle => chi2_and_grads(head, x),
    }
}

/// Mean objective over a dataset (no gradients).
pub fn objective_value(
    model: &ConditionalMixtureModel,
    data: &Dataset,
    objective: Objective,
) -> F {
    let d = model.x_dim;
    let mut total = 0.0;
    let mut xbuf = vec![0.0; d];
    let mut zbuf = vec![0.0; model.z_dim];
    for i in 0..data.len() {
        for j in 0..d {
            xbuf[j] = data.x[(i, j)];
        }
        for j in 0..model.z_dim {
            zbuf[j] = data.z[(i, j)];
        }
        let head = model.head(&zbuf);
        total += match objective {
            Objective::Mle => -head.log_density(&xbuf),
            Objective::Chi2Mle => 0.5 * head.chi2_integral(d) - head.log_density(&xbuf).exp(),
        };
    }
    total / data.len() as F
}

/// Fit the mixture by mini-batch Adam on the chosen objective. The model
/// conditions on all of `data.z` and explains the first `template.x_dim`
/// columns of `data.x` (the stochastic block when x and z share a suffix).
pub fn fit_density(
    data: &Dataset,
    template: &ConditionalMixtureModel,
    cfg: &TrainConfig,
) -> Result<ConditionalMixtureModel> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if cfg.epochs == 0 {
        return Err(Error::InvalidArgument("epochs must be at least 1".into()));
    }
    if cfg.batch_size == 0 || cfg.batch_size > data.len() {
        return Err(Error::InvalidArgument(format!(
            "batch_size {} must be in 1..={}",
            cfg.batch_size,
            data.len()
        )));
    }
    if template.z_dim != data.z_dim() || template.x_dim > data.x_dim() {
        return Err(Error::DimensionMismatch(format!(
            "model dims ({}, {}) incompatible with data dims ({}, {})",
            template.x_dim,
            template.z_dim,
            data.x_dim(),
            data.z_dim()
        )));
    }
    let mut model = template.clone();
    let mut rng = crate::stream_rng(cfg.seed, 0xd51);
    initialize(&mut model, data, &mut rng);

    let n = data.len();
    let d = model.x_dim;
    let raw_lo = model.k * (model.x_dim + 1); // start of raw scales in trunk out
    let mut opt = Adam::new(
        AdamConfig::new(cfg.learning_rate).with_weight_decay(cfg.weight_decay),
        model.params.len(),
    );
    let mut idx: Vec<usize> = (0..n).collect();
    let mut grad = Vect::zeros(model.params.len());
    let mut xbuf = vec![0.0; d];
    let mut zbuf = vec![0.0; model.z_dim];
    for epoch in 0..cfg.epochs {
        idx.shuffle(&mut rng);
        for batch in idx.chunks(cfg.batch_size) {
            grad.fill(0.0);
            let mut loss = 0.0;
            for &i in batch {
                for j in 0..d {
                    xbuf[j] = data.x[(i, j)];
                }
                for j in 0..model.z_dim {
                    zbuf[j] = data.z[(i, j)];
                }
                let (out, acts) = model.trunk_forward(&zbuf);
                let head = model.head_from_out(&out);
                let (l, hg) = per_sample_loss(&head, &xbuf, cfg.objective);
                loss += l;
                let mut dout = model.head_backward(&head, &hg);
                if cfg.freeze_scale {
                    for o in raw_lo..model.out_dim() {
                        dout[o] = 0.0;
                    }
                }
                let scale = 1.0 / batch.len() as F;
                for v in dout.iter_mut() {
                    *v *= scale;
                }
                model.trunk_backward(&zbuf, &acts, &dout, &mut grad);
            }
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            opt.step(&mut model.params, &grad);
        }
        if cfg.lr_decay != 1.0 {
            let lr = opt.learning_rate();
            opt.set_learning_rate(lr * cfg.lr_decay);
        }
    }
    Ok(model)
}

/// Data-driven initialization: means around the marginal mean of x with
/// jitter, uniform weights, scales near the pooled marginal std.
fn initialize<R: Rng + ?Sized>(model: &mut ConditionalMixtureModel, data: &Dataset, rng: &mut R) {
    let d = model.x_dim;
    let n = data.len() as F;
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for j in 0..d {
        for i in 0..data.len() {
            mean[j] += data.x[(i, j)];
        }
        mean[j] /= n;
        for i in 0..data.len() {
            let diff = data.x[(i, j)] - mean[j];
            var[j] += diff * diff;
        }
        var[j] /= n.max(2.0) - 1.0;
    }
    let pooled_std = (var.iter().sum::<F>() / d as F).sqrt().max(10.0 * model.floor_sigma);
    let out_dim = model.out_dim();
    let mut out_bias = vec![0.0; out_dim];
    for a in 0..model.k {
        // logits stay zero (uniform weights)
        for j in 0..d {
            let jitter = if model.k == 1 {
                0.0
            } else {
                0.5 * var[j].sqrt() * <F as crate::Scalar>::sample_standard_normal(rng)
            };
            out_bias[model.k + a * d + j] = mean[j] + jitter;
        }
        out_bias[model.k * (d + 1) + a] = softplus_inv(pooled_std);
    }
    match model.parameterization {
        Parameterization::LinearInZ => {
            model.params.fill(0.0);
            for o in 0..out_dim {
                model.params[out_dim * model.z_dim + o] = out_bias[o];
            }
        }
        Parameterization::Mlp { width } => {
            let trunk_len = width * model.z_dim
                + width
                + (TRUNK_DEPTH - 1) * (width * width + width);
            let mut offset = 0;
            for layer in 0..TRUNK_DEPTH {
                let fan_in = if layer == 0 { model.z_dim } else { width };
                let scale = 1.0 / (fan_in as F).sqrt();
                for p in 0..width * fan_in {
                    model.params[offset + p] =
                        scale * <F as crate::Scalar>::sample_standard_normal(rng);
                }
                for p in 0..width {
                    model.params[offset + width * fan_in + p] = 0.0;
                }
                offset += width * fan_in + width;
            }
            debug_assert_eq!(offset, trunk_len);
            for p in 0..out_dim * width {
                model.params[trunk_len + p] =
                    0.01 * <F as crate::Scalar>::sample_standard_normal(rng);
            }
            for o in 0..out_dim {
                model.params[trunk_len + out_dim * width + o] = out_bias[o];
            }
        }
    }
}

/// 1-D trapezoid quadrature specification.
#[derive(Debug, Clone, Copy)]
pub struct QuadratureSpec {
    pub lo: F,
    pub hi: F,
    pub points: usize,
}

impl QuadratureSpec {
    pub fn integrate(&self, mut f: impl FnMut(F) -> F) -> F {
        let h = (self.hi - self.lo) / (self.points - 1) as F;
        let mut total = 0.5 * (f(self.lo) + f(self.hi));
        for i in 1..self.points - 1 {
            total += f(self.lo + h * i as F);
        }
        total * h
    }
}

/// Monte-Carlo-over-z, quadrature-over-x estimate of the averaged squared
/// Hellinger distance between two 1-D conditional densities.
pub fn hellinger_estimate(
    model: &ConditionalMixtureModel,
    truth: &ConditionalMixtureModel,
    z_samples: &[Vect],
    quad: QuadratureSpec,
) -> Result<F> {
    if model.x_dim != 1 || truth.x_dim != 1 {
        return Err(Error::UnsupportedDimension(
            "hellinger_estimate requires x_dim = 1".into(),
        ));
    }
    let mut total = 0.0;
    for z in z_samples {
        let zs: Vec<F> = z.iter().copied().collect();
        let hm = model.head(&zs);
        let ht = truth.head(&zs);
        total += quad.integrate(|x| {
            let p = hm.log_density(&[x]).exp();
            let q = ht.log_density(&[x]).exp();
            let diff = p.sqrt() - q.sqrt();
            diff * diff
        });
    }
    Ok(total / z_samples.len() as F)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Mat;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn const_gaussian(mean: F, sigma: F) -> ConditionalMixtureModel {
        ConditionalMixtureModel::gaussian_affine(
            &Mat::zeros(1, 1),
            &Vect::from_row_slice(&[mean]),
            sigma,
        )
        .unwrap()
    }

    fn random_model(k: usize, seed: u64) -> ConditionalMixtureModel {
        let mut m = ConditionalMixtureModel::template(k, 1, 1, Parameterization::LinearInZ);
        let mut rng = crate::stream_rng(seed, 77);
        for i in 0..m.params.len() {
            m.params[i] = <F as crate::Scalar>::sample_standard_normal(&mut rng);
        }
        m
    }

    fn linear_dgp(n: usize, slope: F, sigma: F, seed: u64) -> Dataset {
        let mut rng = crate::stream_rng(seed, 3);
        let z = Mat::from_fn(n, 1, |_, _| <F as crate::Scalar>::sample_standard_normal(&mut rng));
        let x = Mat::from_fn(n, 1, |i, _| {
            slope * z[(i, 0)] + sigma * <F as crate::Scalar>::sample_standard_normal(&mut rng)
        });
        let y = Vect::zeros(n);
        Dataset::unnamed(x, z, y).unwrap()
    }

    #[test]
    fn density_standard_normal_at_zero() {
        let m = const_gaussian(0.0, 1.0);
        let v = m.density(&[0.0], &[0.0]).unwrap();
        assert_relative_eq!(v, 1.0 / (2.0 * std::f64::consts::PI).sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn density_symmetric_two_component() {
        let mut m = ConditionalMixtureModel::template(2, 1, 1, Parameterization::LinearInZ);
        // biases only: logits equal, means +/- 1.5, sigma raw 0
        let out_dim = m.out_dim();
        m.params[out_dim + 2] = 1.5;
        m.params[out_dim + 3] = -1.5;
        let a = m.density(&[0.7], &[0.0]).unwrap();
        let b = m.density(&[-0.7], &[0.0]).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn density_integrates_to_one() {
        for seed in 0..5 {
            let m = random_model(3, seed);
            let quad = QuadratureSpec { lo: -40.0, hi: 40.0, points: 40001 };
            let total = quad.integrate(|x| m.density(&[x], &[0.3]).unwrap());
            assert_relative_eq!(total, 1.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn sample_near_point_mass() {
        let m = ConditionalMixtureModel::gaussian_affine(
            &Mat::identity(1, 1),
            &Vect::zeros(1),
            2e-3,
        )
        .unwrap();
        for s in m.sample(&[1.7], 500, 4) {
            assert!((s[0] - 1.7).abs() <= 6.0 * 2e-3);
        }
    }

    #[test]
    fn sample_mean_clt() {
        let m = const_gaussian(0.8, 1.0);
        let n = 100_000;
        let samples = m.sample(&[0.0], n, 9);
        let mean: F = samples.iter().map(|s| s[0]).sum::<F>() / n as F;
        assert!((mean - 0.8).abs() <= 4.0 / (n as F).sqrt());
    }

    #[test]
    fn sample_deterministic() {
        let m = random_model(4, 2);
        let a = m.sample(&[0.5], 32, 11);
        let b = m.sample(&[0.5], 32, 11);
        assert_eq!(a, b);
    }

    #[test]
    fn chi2_single_standard_gaussian() {
        let m = const_gaussian(0.0, 1.0);
        let v = m.chi2_pairwise_integral(&[0.0]);
        assert_relative_eq!(v, 1.0 / (2.0 * std::f64::consts::PI.sqrt()), epsilon = 1e-9);
    }

    #[test]
    fn chi2_far_separated_components() {
        let mut m = ConditionalMixtureModel::template(2, 1, 1, Parameterization::LinearInZ);
        let out_dim = m.out_dim();
        m.params[out_dim + 2] = 50.0;
        m.params[out_dim + 3] = -50.0;
        let head = m.head(&[0.0]);
        let v = head.chi2_integral(1);
        let i11 = head.pair_pdf(0, 0, 1);
        let i22 = head.pair_pdf(1, 1, 1);
        assert_relative_eq!(v, 0.25 * (i11 + i22), epsilon = 1e-12);
    }

    #[test]
    fn chi2_matches_quadrature() {
        let quad = QuadratureSpec { lo: -60.0, hi: 60.0, points: 120_001 };
        for seed in 0..20 {
            let m = random_model(3, 100 + seed);
            let closed = m.chi2_pairwise_integral(&[0.1]);
            let numeric = quad.integrate(|x| {
                let g = m.density(&[x], &[0.1]).unwrap();
                g * g
            });
            assert_relative_eq!(closed, numeric, epsilon = 1e-6);
        }
    }

    #[test]
    fn hellinger_identical_is_zero() {
        let m = random_model(2, 5);
        let zs = vec![Vect::from_row_slice(&[0.0]), Vect::from_row_slice(&[1.0])];
        let quad = QuadratureSpec { lo: -40.0, hi: 40.0, points: 20001 };
        let h = hellinger_estimate(&m, &m, &zs, quad).unwrap();
        assert!(h.abs() < 1e-6);
    }

    #[test]
    fn hellinger_shifted_gaussians_closed_form() {
        let p = const_gaussian(0.0, 1.0);
        let q = const_gaussian(1.0, 1.0);
        let zs = vec![Vect::from_row_slice(&[0.0])];
        let quad = QuadratureSpec { lo: -30.0, hi: 30.0, points: 60001 };
        let h = hellinger_estimate(&p, &q, &zs, quad).unwrap();
        let expected = 2.0 * (1.0 - (-1.0f64 / 8.0).exp());
        assert_relative_eq!(h, expected, epsilon = 1e-6);
    }

    #[test]
    fn mle_recovers_linear_gaussian() {
        let data = linear_dgp(5000, 2.0, 0.5, 42);
        let template = ConditionalMixtureModel::template(1, 1, 1, Parameterization::LinearInZ);
        let cfg = TrainConfig {
            learning_rate: 0.02,
            epochs: 60,
            batch_size: 100,
            seed: 1,
            ..TrainConfig::default()
        };
        let fit = fit_density(&data, &template, &cfg).unwrap();
        // slope is the single mean weight; sigma from the head at any z
        let slope = fit.params[fit.z_dim];
        let sigma = fit.head(&[0.0]).sigma[0];
        assert!((1.9..=2.1).contains(&slope), "slope {slope}");
        assert!((0.45..=0.55).contains(&sigma), "sigma {sigma}");
    }

    #[test]
    fn frozen_scale_mle_matches_least_squares() {
        let data = linear_dgp(2000, 1.3, 0.4, 7);
        let template = ConditionalMixtureModel::template(1, 1, 1, Parameterization::LinearInZ);
        let cfg = TrainConfig {
            learning_rate: 0.02,
            epochs: 200,
            batch_size: 200,
            seed: 2,
            lr_decay: 0.96,
            freeze_scale: true,
            ..TrainConfig::default()
        };
        let fit = fit_density(&data, &template, &cfg).unwrap();
        // closed-form least squares of x on (1, z)
        let n = data.len() as F;
        let mz: F = data.z.column(0).sum() / n;
        let mx: F = data.x.column(0).sum() / n;
        let mut szz = 0.0;
        let mut szx = 0.0;
        for i in 0..data.len() {
            szz += (data.z[(i, 0)] - mz) * (data.z[(i, 0)] - mz);
            szx += (data.z[(i, 0)] - mz) * (data.x[(i, 0)] - mx);
        }
        let slope_ls = szx / szz;
        let bias_ls = mx - slope_ls * mz;
        let slope = fit.params[fit.z_dim];
        let out_dim = fit.out_dim();
        let bias = fit.params[out_dim * fit.z_dim + 1];
        assert!((slope - slope_ls).abs() <= 1e-3, "{slope} vs {slope_ls}");
        assert!((bias - bias_ls).abs() <= 1e-3, "{bias} vs {bias_ls}");
    }

    #[test]
    fn zero_epochs_rejected() {
        let data = linear_dgp(10, 1.0, 0.5, 1);
        let template = ConditionalMixtureModel::template(1, 1, 1, Parameterization::LinearInZ);
        let cfg = TrainConfig { epochs: 0, batch_size: 5, ..TrainConfig::default() };
        assert!(fit_density(&data, &template, &cfg).is_err());
    }

    #[test]
    fn training_decreases_objective() {
        for objective in [Objective::Mle, Objective::Chi2Mle] {
            let data = linear_dgp(600, 1.0, 0.6, 13);
            let template =
                ConditionalMixtureModel::template(2, 1, 1, Parameterization::Mlp { width: 8 });
            let cfg = TrainConfig {
                objective,
                learning_rate: 5e-3,
                epochs: 30,
                batch_size: 50,
                seed: 3,
                ..TrainConfig::default()
            };
            // initial objective from a freshly initialized (untrained) model
            let mut init = template.clone();
            initialize(&mut init, &data, &mut crate::stream_rng(cfg.seed, 0xd51));
            let before = objective_value(&init, &data, objective);
            let fit = fit_density(&data, &template, &cfg).unwrap();
            let after = objective_value(&fit, &data, objective);
            assert!(after <= before, "{objective:?}: {after} > {before}");
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let data = linear_dgp(300, 1.0, 0.5, 21);
        let template =
            ConditionalMixtureModel::template(2, 1, 1, Parameterization::Mlp { width: 4 });
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            epochs: 5,
            batch_size: 50,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = fit_density(&data, &template, &cfg).unwrap();
        let b = fit_density(&data, &template, &cfg).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn hellinger_decreases_with_more_data() {
        let truth = ConditionalMixtureModel::gaussian_affine(
            &Mat::from_row_slice(1, 1, &[1.5]),
            &Vect::zeros(1),
            0.5,
        )
        .unwrap();
        let quad = QuadratureSpec { lo: -20.0, hi: 20.0, points: 4001 };
        let zs: Vec<Vect> = {
            let mut rng = crate::stream_rng(55, 0);
            (0..50)
                .map(|_| Vect::from_fn(1, |_, _| <F as crate::Scalar>::sample_standard_normal(&mut rng)))
                .collect()
        };
        let template = ConditionalMixtureModel::template(1, 1, 1, Parameterization::LinearInZ);
        let mut small = Vec::new();
        let mut large = Vec::new();
        for seed in 0..10u64 {
            for (n, out) in [(200, &mut small), (800, &mut large)] {
                let data = linear_dgp(n, 1.5, 0.5, 1000 + seed);
                let cfg = TrainConfig {
                    learning_rate: 0.02,
                    epochs: 25,
                    batch_size: 50,
                    seed,
                    ..TrainConfig::default()
                };
                let fit = fit_density(&data, &template, &cfg).unwrap();
                out.push(hellinger_estimate(&fit, &truth, &zs, quad).unwrap());
            }
        }
        let med = |v: &mut Vec<F>| {
            v.sort_by(F::total_cmp);
            v[v.len() / 2]
        };
        assert!(med(&mut large) < med(&mut small));
    }

    #[test]
    fn mle_error_halves_when_n_quadruples() {
        let mut ratios = Vec::new();
        for seed in 0..20u64 {
            let mut errs = Vec::new();
            for n in [800usize, 3200] {
                let data = linear_dgp(n, 2.0, 0.5, 500 + seed);
                let template =
                    ConditionalMixtureModel::template(1, 1, 1, Parameterization::LinearInZ);
                // equal optimizer budget per n: batch scales with n
                let cfg = TrainConfig {
                    learning_rate: 0.02,
                    epochs: 120,
                    batch_size: n / 16,
                    seed,
                    lr_decay: 0.95,
                    ..TrainConfig::default()
                };
                let fit = fit_density(&data, &template, &cfg).unwrap();
                let slope = fit.params[fit.z_dim];
                let bias = fit.params[fit.out_dim() * fit.z_dim + 1];
                let sigma = fit.head(&[0.0]).sigma[0];
                let err = ((slope - 2.0).powi(2) + bias.powi(2) + (sigma - 0.5).powi(2)).sqrt();
                errs.push(err);
            }
            ratios.push(errs[0] / errs[1]);
        }
        ratios.sort_by(F::total_cmp);
        let median = ratios[ratios.len() / 2];
        assert!((1.3..=3.0).contains(&median), "median ratio {median}");
    }

    /// Finite-difference check of the full parameter gradient for both
    /// objectives and both parameterizations.
    #[test]
    fn objective_gradient_matches_finite_differences() {
        for parameterization in
            [Parameterization::LinearInZ, Parameterization::Mlp { width: 3 }]
        {
            for objective in [Objective::Mle, Objective::Chi2Mle] {
                let mut m = ConditionalMixtureModel::template(2, 1, 2, parameterization);
                let mut rng = crate::stream_rng(31, 0);
                for i in 0..m.params.len() {
                    m.params[i] = 0.5 * <F as crate::Scalar>::sample_standard_normal(&mut rng);
                }
                let x = [0.4];
                let z = [0.2, -0.7];
                let (out, acts) = m.trunk_forward(&z);
                let head = m.head_from_out(&out);
                let (_, hg) = per_sample_loss(&head, &x, objective);
                let dout = m.head_backward(&head, &hg);
                let mut grad = Vect::zeros(m.params.len());
                m.trunk_backward(&z, &acts, &dout, &mut grad);
                let eps = 1e-6;
                for i in 0..m.params.len() {
                    let base = m.params[i];
                    m.params[i] = base + eps;
                    let up = per_sample_loss(&m.head(&z), &x, objective).0;
                    m.params[i] = base - eps;
                    let dn = per_sample_loss(&m.head(&z), &x, objective).0;
                    m.params[i] = base;
                    let fd = (up - dn) / (2.0 * eps);
                    assert!(
                        (grad[i] - fd).abs() <= 1e-5 * (1.0 + fd.abs()),
                        "{parameterization:?} {objective:?} param {i}: {} vs {fd}",
                        grad[i]
                    );
                }
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let m = random_model(3, 8);
        let back = ConditionalMixtureModel::from_json(&m.to_json()).unwrap();
        assert_eq!(m.params, back.params);
        assert_eq!(m.k, back.k);
        assert_eq!(
            m.density(&[0.3], &[0.4]).unwrap(),
            back.density(&[0.3], &[0.4]).unwrap()
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn simplex_and_floor_invariants(seed in 0u64..500, z in -5.0f64..5.0) {
            let m = random_model(4, seed);
            let head = m.head(&[z]);
            let total: F = head.pi.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-8);
            for &p in &head.pi {
                prop_assert!(p > 0.0);
            }
            for &s in &head.sigma {
                prop_assert!(s >= m.floor_sigma);
            }
        }
    }

    #[test]
    fn simplex_invariant_thousand_points() {
        let m = random_model(5, 123);
        let mut rng = crate::stream_rng(9, 0);
        for _ in 0..1000 {
            let z = [3.0 * <F as crate::Scalar>::sample_standard_normal(&mut rng)];
            let head = m.head(&z);
            assert!((head.pi.iter().sum::<F>() - 1.0).abs() <= 1e-8);
            assert!(head.sigma.iter().all(|&s| s >= m.floor_sigma));
        }
    }
}
