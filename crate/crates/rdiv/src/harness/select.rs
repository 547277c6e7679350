//! Two-stage Best-ERM model selection over the hyperparameter grid: first
//! pick the density model by held-out likelihood, then pick the second-stage
//! fit by the frozen validation objective, and report test errors for every
//! candidate.

use super::bench::{
    completed_params, counterfactual_estimate, density_train_config, hypothesis_spec,
    parse_parameterization, stage2_config,
};
use super::preprocess::Gaussianizer;
use super::{mix_seed, normalized_mse, ExperimentConfig, ResultRow, Standardizer};
use crate::data::Dataset;
use crate::density_stage::{fit_density, objective_value, ConditionalMixtureModel};
use crate::dgp::{generate_proximal, LinkFunction};
use crate::error::{Error, Result};
use crate::model_selection::{select_report, CandidateSet};
use crate::rdiv::{fit, RdivFit};
use crate::F;
use rayon::prelude::*;
use std::time::Instant;

fn scaled(v: usize, scale: F) -> usize {
    ((v as F * scale).round() as usize).max(1)
}

struct Stage2Candidate {
    epochs: usize,
    batch: usize,
    lr: F,
    label: String,
}

fn stage2_grid(cfg: &ExperimentConfig) -> Vec<Stage2Candidate> {
    let mut grid = Vec::new();
    for &epochs in &cfg.select.epochs_grid {
        for &batch in &cfg.select.stage2_batch_grid {
            for &lr in &cfg.select.learning_rate_grid {
                let e = scaled(epochs, cfg.select.scale);
                grid.push(Stage2Candidate {
                    epochs: e,
                    batch,
                    lr,
                    label: format!("e{e}-b{batch}-lr{lr}"),
                });
            }
        }
    }
    grid
}

/// Best-ERM over the density grid: lowest held-out stage-1 objective.
fn select_stage1(
    cfg: &ExperimentConfig,
    train: &Dataset,
    val: &Dataset,
    rep: u64,
) -> Result<(ConditionalMixtureModel, Vec<(String, F)>)> {
    let mut candidates = Vec::new();
    for &k in &cfg.select.k_grid {
        for &batch in &cfg.select.stage1_batch_grid {
            candidates.push((scaled(k, cfg.select.scale), batch));
        }
    }
    let fits: Vec<(String, F, ConditionalMixtureModel)> = candidates
        .par_iter()
        .enumerate()
        .map(|(ci, &(k, batch))| {
            let template = ConditionalMixtureModel::template(
                k,
                cfg.dgp.d_w,
                train.z_dim(),
                parse_parameterization(&cfg.stage1.parameterization, cfg.stage1.trunk_width)?,
            );
            let mut s1 = density_train_config(cfg, train.len(), mix_seed(cfg.seed, &[31, rep, ci as u64]))?;
            s1.batch_size = batch.min(train.len()).max(1);
            s1.epochs = scaled(cfg.stage1.epochs, cfg.select.scale);
            let g = fit_density(train, &template, &s1)?;
            let score = objective_value(&g, val, s1.objective);
            Ok((format!("k{k}-b{batch}"), score, g))
        })
        .collect::<Result<_>>()?;
    let best = fits
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::InvalidParameter("empty stage-1 grid".into()))?;
    let losses = fits.iter().map(|(l, s, _)| (l.clone(), *s)).collect();
    Ok((fits.into_iter().nth(best).unwrap().2, losses))
}

fn run_replication(cfg: &ExperimentConfig, rep: usize, truth: F) -> Result<Vec<ResultRow>> {
    let start = Instant::now();
    let link = cfg
        .dgp
        .links
        .first()
        .and_then(|n| LinkFunction::from_name(n))
        .unwrap_or(LinkFunction::Id);
    let params = completed_params(cfg, link)?;
    let data_seed = mix_seed(cfg.seed, &[30, rep as u64]);
    let raw = generate_proximal(&params, cfg.dgp.n, data_seed)?;
    let gauss = cfg.dgp.gaussianize.then(|| Gaussianizer::fit(&raw));
    let raw = match &gauss {
        Some(g) => g.apply(&raw),
        None => raw,
    };
    let standardizer = Standardizer::fit(&raw);
    let data = standardizer.apply(&raw);
    let (train, val) =
        data.split(1.0 - cfg.select.val_frac, mix_seed(cfg.seed, &[32, rep as u64]))?;

    let (g_hat, stage1_losses) = select_stage1(cfg, &train, &val, rep as u64)?;
    let spec = hypothesis_spec(cfg, data.x_dim())?;

    let grid = stage2_grid(cfg);
    let fits: Vec<RdivFit> = grid
        .par_iter()
        .enumerate()
        .map(|(ci, cand)| {
            let mut rcfg = stage2_config(
                cfg,
                cfg.select.alpha,
                train.len(),
                mix_seed(cfg.seed, &[34, rep as u64, ci as u64]),
            );
            rcfg.train.epochs = cand.epochs;
            rcfg.train.batch_size = cand.batch.min(train.len()).max(1);
            rcfg.train.learning_rate = cand.lr;
            fit(&train, &g_hat, spec.clone(), &rcfg)
        })
        .collect::<Result<_>>()?;

    let set = CandidateSet::new(
        fits.iter().map(|f| f.hypothesis.clone()).collect(),
        g_hat,
        cfg.select.alpha,
    )?;
    let report = select_report(
        &set,
        &val,
        cfg.estimator.mc_batch,
        mix_seed(cfg.seed, &[35, rep as u64]),
        500,
    )?;

    // Counterfactual test error of every candidate; the Best-ERM pick is the
    // "selected" row.
    let cf_seed = mix_seed(cfg.seed, &[36, rep as u64]);
    let wall = start.elapsed().as_millis() as u64;
    let mut rows = Vec::new();
    let best_val = report.best_loss;
    for (ci, (label, loss)) in stage1_losses.iter().enumerate() {
        let best = stage1_losses
            .iter()
            .map(|(_, l)| *l)
            .fold(F::INFINITY, F::min);
        let sq = (loss - best) * (loss - best);
        rows.push(ResultRow {
            experiment: "select".into(),
            case: format!("stage1-{label}"),
            n: cfg.dgp.n as u64,
            alpha: cfg.select.alpha,
            m: ci as u64,
            replication: rep as i64,
            estimate: *loss,
            truth: best,
            squared_error: sq,
            normalized_mse: normalized_mse(sq, best, cfg.normalization),
            wall_time_ms: 0,
            seed: data_seed,
            status: "stage1".into(),
            ci_2sd: 0.0,
        });
    }
    for (ci, cand) in grid.iter().enumerate() {
        let estimate = counterfactual_estimate(
            &fits[ci],
            &params,
            gauss.as_ref(),
            &standardizer,
            cfg.estimator.counterfactual_mc,
            cf_seed,
        )?;
        let sq = (estimate - truth) * (estimate - truth);
        let status = if ci == report.best_index { "selected" } else { "candidate" };
        rows.push(ResultRow {
            experiment: "select".into(),
            case: cand.label.clone(),
            n: cfg.dgp.n as u64,
            alpha: cfg.select.alpha,
            m: ci as u64,
            replication: rep as i64,
            estimate,
            truth,
            squared_error: sq,
            normalized_mse: normalized_mse(sq, truth, cfg.normalization),
            wall_time_ms: wall,
            seed: data_seed,
            status: status.into(),
            ci_2sd: 0.0,
        });
        let vloss = report.per_candidate_loss[ci];
        let vsq = (vloss - best_val) * (vloss - best_val);
        rows.push(ResultRow {
            experiment: "select".into(),
            case: cand.label.clone(),
            n: cfg.dgp.n as u64,
            alpha: cfg.select.alpha,
            m: ci as u64,
            replication: rep as i64,
            estimate: vloss,
            truth: best_val,
            squared_error: vsq,
            normalized_mse: normalized_mse(vsq, best_val, cfg.normalization),
            wall_time_ms: 0,
            seed: data_seed,
            status: "validation".into(),
            ci_2sd: 0.0,
        });
    }
    Ok(rows)
}

pub fn run_select(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let link = cfg
        .dgp
        .links
        .first()
        .and_then(|n| LinkFunction::from_name(n))
        .unwrap_or(LinkFunction::Id);
    let truth =
        crate::dgp::proximal::counterfactual_truth_closed_form(&completed_params(cfg, link)?)?;
    let rows: Vec<Vec<ResultRow>> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| run_replication(cfg, rep, truth))
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().collect())
}
