//! Proximal-benchmark reproduction: per link and alpha, fit both stages on
//! standardized data and estimate the counterfactual mean E[Y(1)].

use super::preprocess::Gaussianizer;
use super::{
    mean_and_2sd, mix_seed, normalized_mse, ExperimentConfig, ResultRow, Standardizer,
};
use crate::density_stage::{
    fit_density, ConditionalMixtureModel, Objective, Parameterization,
    TrainConfig as DensityTrainConfig,
};
use crate::dgp::proximal::derive_compatibility_blocks;
use crate::dgp::{generate_proximal, sample_bridge_inputs, LinkFunction, ProximalParams};
use crate::error::{Error, Result};
use crate::rdiv::{counterfactual_mean, fit, fit_deepiv, RdivConfig, TrainConfig};
use crate::{HypothesisSpec, F};
use rayon::prelude::*;
use std::time::Instant;

pub(super) fn parse_objective(name: &str) -> Result<Objective> {
    match name {
        "mle" => Ok(Objective::Mle),
        "chi2-mle" => Ok(Objective::Chi2Mle),
        other => Err(Error::InvalidParameter(format!("unknown objective \"{other}\""))),
    }
}

pub(super) fn parse_parameterization(name: &str, width: usize) -> Result<Parameterization> {
    match name {
        "linear" => Ok(Parameterization::LinearInZ),
        "mlp" => Ok(Parameterization::Mlp { width }),
        other => Err(Error::InvalidParameter(format!(
            "unknown parameterization \"{other}\""
        ))),
    }
}

pub(super) fn hypothesis_spec(cfg: &ExperimentConfig, x_dim: usize) -> Result<HypothesisSpec> {
    let w = cfg.estimator.width_or_degree;
    match cfg.estimator.hypothesis.as_str() {
        "mlp" => Ok(HypothesisSpec::mlp(w, x_dim)),
        "poly" => Ok(HypothesisSpec::poly(w, x_dim)),
        "fourier" => Ok(HypothesisSpec::fourier(w, x_dim, cfg.seed)),
        other => Err(Error::InvalidParameter(format!("unknown hypothesis \"{other}\""))),
    }
}

pub(super) fn density_train_config(cfg: &ExperimentConfig, n: usize, seed: u64) -> Result<DensityTrainConfig> {
    Ok(DensityTrainConfig {
        objective: parse_objective(&cfg.stage1.objective)?,
        learning_rate: cfg.stage1.learning_rate,
        epochs: cfg.stage1.epochs,
        batch_size: cfg.stage1.batch_size.min(n).max(1),
        seed,
        weight_decay: cfg.stage1.weight_decay,
        lr_decay: cfg.stage1.lr_decay,
        freeze_scale: false,
    })
}

pub(super) fn stage2_config(cfg: &ExperimentConfig, alpha: F, n: usize, seed: u64) -> RdivConfig {
    RdivConfig {
        alpha,
        mc_batch: cfg.estimator.mc_batch,
        iterations: cfg.estimator.iterations,
        train: TrainConfig {
            learning_rate: cfg.stage2.learning_rate,
            epochs: cfg.stage2.epochs,
            batch_size: cfg.stage2.batch_size.min(n).max(1),
            weight_decay: cfg.stage2.weight_decay,
            lr_decay: cfg.stage2.lr_decay,
        },
        seed,
        unbiased_grad: cfg.estimator.unbiased_grad,
        frozen_mc: cfg.estimator.frozen_mc,
        eval_mc_batch: cfg.estimator.eval_mc_batch,
    }
}

pub(super) fn completed_params(cfg: &ExperimentConfig, link: LinkFunction) -> Result<ProximalParams> {
    derive_compatibility_blocks(ProximalParams::paper_defaults(cfg.dgp.d, cfg.dgp.d_w, link))
}

/// Average the fitted bridge over standardized (W, A=1, S) draws from the
/// observational marginal, then map back to the original Y scale.
pub(super) fn counterfactual_estimate(
    fit: &crate::rdiv::RdivFit,
    params: &ProximalParams,
    gauss: Option<&Gaussianizer>,
    standardizer: &Standardizer,
    mc: usize,
    seed: u64,
) -> Result<F> {
    let mean = counterfactual_mean(
        fit,
        |count, s| {
            let raw = sample_bridge_inputs(params, count, s)?;
            Ok(raw
                .iter()
                .map(|v| {
                    let v = match gauss {
                        Some(g) => g.transform_x(v),
                        None => v.clone(),
                    };
                    standardizer.standardize_x(&v)
                })
                .collect())
        },
        mc,
        seed,
    )?;
    Ok(standardizer.destandardize_y(mean))
}

fn run_item(
    cfg: &ExperimentConfig,
    link: LinkFunction,
    link_idx: u64,
    rep: usize,
    truth: F,
) -> Result<Vec<ResultRow>> {
    let params = completed_params(cfg, link)?;
    let data_seed = mix_seed(cfg.seed, &[20, link_idx, rep as u64]);
    let raw = generate_proximal(&params, cfg.dgp.n, data_seed)?;
    let gauss = cfg.dgp.gaussianize.then(|| Gaussianizer::fit(&raw));
    let raw = match &gauss {
        Some(g) => g.apply(&raw),
        None => raw,
    };
    let standardizer = Standardizer::fit(&raw);
    let data = standardizer.apply(&raw);

    // Stage 1 models the stochastic W block given Z; the shared (A, S) tail
    // is copied deterministically by the sampler. One fit serves all alphas.
    let template = ConditionalMixtureModel::template(
        cfg.stage1.k,
        cfg.dgp.d_w,
        data.z_dim(),
        parse_parameterization(&cfg.stage1.parameterization, cfg.stage1.trunk_width)?,
    );
    let s1_cfg = density_train_config(cfg, data.len(), mix_seed(cfg.seed, &[21, link_idx, rep as u64]))?;
    let g_hat = fit_density(&data, &template, &s1_cfg)?;
    let spec = hypothesis_spec(cfg, data.x_dim())?;
    let cf_seed = mix_seed(cfg.seed, &[23, link_idx, rep as u64]);

    let mut rows = Vec::with_capacity(cfg.estimator.alphas.len());
    for (ai, &alpha) in cfg.estimator.alphas.iter().enumerate() {
        let start = Instant::now();
        let s2_seed = mix_seed(cfg.seed, &[22, link_idx, rep as u64, ai as u64]);
        let rcfg = stage2_config(cfg, alpha, data.len(), s2_seed);
        let fitted = if alpha > 0.0 {
            fit(&data, &g_hat, spec.clone(), &rcfg)
        } else {
            fit_deepiv(&data, &g_hat, spec.clone(), &rcfg)
        };
        let m = if alpha > 0.0 { cfg.estimator.iterations } else { 1 };
        let (estimate, status) = match fitted {
            Ok(f) => (
                counterfactual_estimate(&f, &params, gauss.as_ref(), &standardizer, cfg.estimator.counterfactual_mc, cf_seed)?,
                "ok".to_string(),
            ),
            Err(Error::TrainingDiverged { .. }) => (0.0, "diverged".to_string()),
            Err(e) => return Err(e),
        };
        let sq = (estimate - truth) * (estimate - truth);
        rows.push(ResultRow {
            experiment: "bench".into(),
            case: link.name().to_string(),
            n: cfg.dgp.n as u64,
            alpha,
            m: m as u64,
            replication: rep as i64,
            estimate,
            truth,
            squared_error: sq,
            normalized_mse: normalized_mse(sq, truth, cfg.normalization),
            wall_time_ms: start.elapsed().as_millis() as u64,
            seed: data_seed,
            status,
            ci_2sd: 0.0,
        });
    }
    Ok(rows)
}

/// Exact W | (Q, A, S) conditional for the Id link on the standardized
/// scale: the latents are jointly Gaussian with means linear in (A, S').
#[cfg_attr(not(test), allow(dead_code))]
pub(super) fn oracle_density_id(
    params: &ProximalParams,
    standardizer: &Standardizer,
) -> Result<ConditionalMixtureModel> {
    let d = params.d;
    let d_w = params.d_w;
    let mu_a = params
        .mu_a
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("params not completed".into()))?;
    let wq = params
        .sigma_wq2
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("params not completed".into()))?;
    let m = wq
        * params
            .sigma_q2
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidParameter("singular sigma_q2".into()))?;
    // raw-scale affine map over z = (Q, A, S)
    let mut b = crate::Mat::zeros(d_w, 2 * d + 1);
    let mut c = crate::Vect::zeros(d_w);
    let ba = mu_a - &m * &params.alpha_a;
    let bs = &params.mu_s - &m * &params.alpha_s;
    let b0 = &params.mu0 - &m * &params.alpha0;
    for j in 0..d_w {
        for l in 0..d {
            b[(j, l)] = m[(j, l)];
            b[(j, d + 1 + l)] = bs[(j, l)];
        }
        b[(j, d)] = ba[j];
        c[j] = b0[j];
    }
    let cond_cov = &params.sigma_w2 - &m * wq.transpose();
    let sigma = cond_cov[(0, 0)].sqrt();
    // restandardize: W_std = (W - m_w)/s_w, z_std = (z - m_z)/s_z
    let mut b_std = crate::Mat::zeros(d_w, 2 * d + 1);
    let mut c_std = crate::Vect::zeros(d_w);
    for j in 0..d_w {
        let mut shift = c[j] - standardizer.x_mean[j];
        for l in 0..2 * d + 1 {
            b_std[(j, l)] = b[(j, l)] * standardizer.z_std[l] / standardizer.x_std[j];
            shift += b[(j, l)] * standardizer.z_mean[l];
        }
        c_std[j] = shift / standardizer.x_std[j];
    }
    ConditionalMixtureModel::gaussian_affine(&b_std, &c_std, sigma / standardizer.x_std[0])
}

pub fn run_bench(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let links: Vec<LinkFunction> = cfg
        .dgp
        .links
        .iter()
        .map(|name| {
            LinkFunction::from_name(name)
                .ok_or_else(|| Error::InvalidParameter(format!("unknown link \"{name}\"")))
        })
        .collect::<Result<_>>()?;
    let truths: Vec<F> = links
        .iter()
        .map(|&link| {
            crate::dgp::proximal::counterfactual_truth_closed_form(&completed_params(cfg, link)?)
        })
        .collect::<Result<_>>()?;

    let items: Vec<(usize, usize)> = (0..links.len())
        .flat_map(|li| (0..cfg.replications).map(move |rep| (li, rep)))
        .collect();
    let mut rows: Vec<ResultRow> = items
        .par_iter()
        .map(|&(li, rep)| run_item(cfg, links[li], li as u64, rep, truths[li]))
        .collect::<Result<Vec<Vec<_>>>>()?
        .into_iter()
        .flatten()
        .collect();

    // Aggregate rows: mean estimate and mean normalized MSE per link x alpha,
    // with a 2-SD band across replications.
    let mut aggregates = Vec::new();
    for (li, link) in links.iter().enumerate() {
        for &alpha in &cfg.estimator.alphas {
            let cell: Vec<&ResultRow> = rows
                .iter()
                .filter(|r| r.case == link.name() && r.alpha == alpha && r.status == "ok")
                .collect();
            if cell.is_empty() {
                continue;
            }
            let estimates: Vec<F> = cell.iter().map(|r| r.estimate).collect();
            let nmses: Vec<F> = cell.iter().map(|r| r.normalized_mse).collect();
            let (est_mean, _) = mean_and_2sd(&estimates);
            let (nmse_mean, nmse_ci) = mean_and_2sd(&nmses);
            let sq_mean = cell.iter().map(|r| r.squared_error).sum::<F>() / cell.len() as F;
            aggregates.push(ResultRow {
                experiment: "bench".into(),
                case: link.name().to_string(),
                n: cfg.dgp.n as u64,
                alpha,
                m: cfg.estimator.iterations as u64,
                replication: -1,
                estimate: est_mean,
                truth: truths[li],
                squared_error: sq_mean,
                normalized_mse: nmse_mean,
                wall_time_ms: 0,
                seed: cfg.seed,
                status: "aggregate".into(),
                ci_2sd: nmse_ci,
            });
        }
    }
    rows.extend(aggregates);
    Ok(rows)
}
