//! Experiment orchestration: config parsing, seeded replication management,
//! the four experiment runners and CSV/JSON reporting.

pub mod bench;
pub mod bias;
pub mod preprocess;
pub mod rate;
pub mod select;

use crate::error::{Error, Result};
use crate::{Vect, F};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub use bench::run_bench;
pub use bias::run_bias_study;
pub use rate::run_rate_study;
pub use select::run_select;

/// Which experiment a config drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Bench,
    BiasStudy,
    RateStudy,
    Select,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Bench => "bench",
            ExperimentKind::BiasStudy => "bias-study",
            ExperimentKind::RateStudy => "rate-study",
            ExperimentKind::Select => "select",
        }
    }
}

/// How `normalized_mse` divides the squared error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// squared_error / truth^2
    #[default]
    Squared,
    /// squared_error / |truth|
    Linear,
}

fn default_replications() -> usize {
    20
}
fn default_threads() -> usize {
    1
}

/// Proximal benchmark settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgpConfig {
    /// Latent dimension d_S = d_Q.
    pub d: usize,
    pub d_w: usize,
    pub n: usize,
    pub links: Vec<String>,
    /// Probit-of-ranks transform of continuous columns before standardizing;
    /// undoes monotone link warps so both stages see near-Gaussian inputs.
    pub gaussianize: bool,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            d: 15,
            d_w: 1,
            n: 500,
            links: ["id", "log-sigmoid", "piecewise", "sigmoid", "cubic-root"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            gaussianize: true,
        }
    }
}

/// Linear-Gaussian NPIV settings (rate study).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NpivConfig {
    pub rho: F,
    pub x_dim: usize,
    pub beta: F,
    pub noise_y: F,
    pub n_grid: Vec<usize>,
    /// Optional extra "n -> infinity" proxy sample size.
    pub large_n: Option<usize>,
    pub large_n_replications: usize,
    /// Tuning grid for alpha (held-out error minimum per n).
    pub alpha_grid: Vec<F>,
    /// Approximate optimizer step budget per fit (epochs adapt to n).
    pub step_budget: usize,
    /// Total learning-rate decay over a fit, spread across epochs.
    pub lr_total_decay: F,
    pub val_frac: F,
}

impl Default for NpivConfig {
    fn default() -> Self {
        Self {
            rho: 0.5,
            x_dim: 8,
            beta: 2.0,
            noise_y: 0.1,
            n_grid: vec![250, 1000, 4000, 16000],
            large_n: None,
            large_n_replications: 3,
            alpha_grid: crate::inverse_core::log_spaced(0.05, 0.8, 8),
            step_budget: 2500,
            lr_total_decay: 0.02,
            val_frac: 0.2,
        }
    }
}

/// Deterministic bias-study settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiasConfig {
    pub dim: usize,
    /// Polynomial spectral decay rate: sigma_i = i^{-rate}.
    pub rate: F,
    pub betas: Vec<F>,
    pub ms: Vec<usize>,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self { dim: 200, rate: 1.0, betas: vec![0.5, 1.0, 2.0, 4.0], ms: vec![1, 2, 3] }
    }
}

/// Second-stage estimator settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub alphas: Vec<F>,
    pub iterations: usize,
    pub mc_batch: usize,
    pub eval_mc_batch: usize,
    /// "mlp", "poly" or "fourier".
    pub hypothesis: String,
    pub width_or_degree: usize,
    pub unbiased_grad: bool,
    pub frozen_mc: bool,
    /// Draws for the counterfactual-mean average.
    pub counterfactual_mc: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.1, 0.0],
            iterations: 1,
            mc_batch: 32,
            eval_mc_batch: 2048,
            hypothesis: "mlp".into(),
            width_or_degree: 32,
            unbiased_grad: true,
            frozen_mc: false,
            counterfactual_mc: 20_000,
        }
    }
}

/// First-stage density training settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub k: usize,
    /// "linear" or "mlp".
    pub parameterization: String,
    pub trunk_width: usize,
    /// "mle" or "chi2-mle".
    pub objective: String,
    pub learning_rate: F,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_decay: F,
    pub weight_decay: F,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            k: 20,
            parameterization: "mlp".into(),
            trunk_width: 32,
            objective: "mle".into(),
            learning_rate: 1e-3,
            epochs: 60,
            batch_size: 50,
            lr_decay: 1.0,
            weight_decay: 0.0,
        }
    }
}

/// Second-stage optimizer settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub learning_rate: F,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: F,
    pub lr_decay: F,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 50,
            weight_decay: 0.0,
            lr_decay: 1.0,
        }
    }
}

/// Hyperparameter-grid selection settings; the grid budgets are scaled by
/// `scale` for desk-scale runtime.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectConfig {
    pub scale: F,
    pub epochs_grid: Vec<usize>,
    pub stage1_batch_grid: Vec<usize>,
    pub stage2_batch_grid: Vec<usize>,
    pub learning_rate_grid: Vec<F>,
    pub k_grid: Vec<usize>,
    pub alpha: F,
    pub val_frac: F,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            scale: 0.1,
            epochs_grid: vec![300, 400],
            stage1_batch_grid: vec![30, 50],
            stage2_batch_grid: vec![50, 60, 100],
            learning_rate_grid: vec![1e-4, 1e-3],
            k_grid: vec![40, 50, 60],
            alpha: 0.1,
            val_frac: 0.25,
        }
    }
}

/// Complete experiment description, parsed strictly from TOML.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub output_path: Option<PathBuf>,
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub dgp: DgpConfig,
    #[serde(default)]
    pub npiv: NpivConfig,
    #[serde(default)]
    pub bias: BiasConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub stage1: Stage1Config,
    #[serde(default)]
    pub stage2: Stage2Config,
    #[serde(default)]
    pub select: SelectConfig,
}

impl ExperimentConfig {
    pub fn minimal(experiment: ExperimentKind) -> Self {
        let text = format!("experiment = \"{}\"", experiment.name());
        parse_config_str(&text).expect("minimal config")
    }

    fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidParameter("replications must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::InvalidParameter("threads must be at least 1".into()));
        }
        if self.experiment == ExperimentKind::Bench && self.estimator.alphas.is_empty() {
            return Err(Error::InvalidParameter(
                "bench requires a nonempty alpha list".into(),
            ));
        }
        for link in &self.dgp.links {
            if crate::dgp::LinkFunction::from_name(link).is_none() {
                return Err(Error::InvalidParameter(format!("unknown link \"{link}\"")));
            }
        }
        if self.estimator.alphas.iter().any(|&a| a < 0.0) {
            return Err(Error::InvalidParameter("alphas must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Strict TOML parse: unknown keys are rejected by name; invariant
/// violations surface as invalid-parameter errors.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let msg = e.to_string();
        if let Some(pos) = msg.find("unknown field `") {
            let rest = &msg[pos + "unknown field `".len()..];
            if let Some(end) = rest.find('`') {
                return Error::UnknownKey(format!("`{}` ({})", &rest[..end], msg.trim()));
            }
        }
        Error::Config(msg.trim().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

/// One experiment measurement. `replication = -1` marks aggregate rows; the
/// `status` column records divergences so no attempt is dropped silently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    /// Link name, beta label, or other case identifier.
    pub case: String,
    pub n: u64,
    pub alpha: F,
    pub m: u64,
    pub replication: i64,
    pub estimate: F,
    pub truth: F,
    pub squared_error: F,
    pub normalized_mse: F,
    pub wall_time_ms: u64,
    pub seed: u64,
    pub status: String,
    /// 2 x standard deviation across replications (aggregate rows only).
    pub ci_2sd: F,
}

impl ResultRow {
    fn sort_key(&self) -> (String, String, u64, u64, u64, i64, String) {
        (
            self.experiment.clone(),
            self.case.clone(),
            self.n,
            self.alpha.to_bits(),
            self.m,
            self.replication,
            self.status.clone(),
        )
    }
}

/// Normalized MSE under the configured normalization.
pub fn normalized_mse(squared_error: F, truth: F, norm: Normalization) -> F {
    match norm {
        Normalization::Squared => squared_error / (truth * truth),
        Normalization::Linear => squared_error / truth.abs(),
    }
}

/// Deterministic per-work-item seed from the master seed and item indices
/// (splitmix64 chain).
pub fn mix_seed(master: u64, parts: &[u64]) -> u64 {
    fn splitmix64(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    let mut h = splitmix64(master);
    for &p in parts {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x1234_5678_9abc_def1)));
    }
    h
}

/// Column-wise affine standardization of a dataset, remembering the moments
/// so predictions can be mapped back to the original scale.
#[derive(Debug, Clone)]
pub struct Standardizer {
    pub x_mean: Vect,
    pub x_std: Vect,
    pub z_mean: Vect,
    pub z_std: Vect,
    pub y_mean: F,
    pub y_std: F,
}

const STD_FLOOR: F = 1e-9;

impl Standardizer {
    pub fn fit(data: &crate::data::Dataset) -> Self {
        let col_stats = |m: &crate::Mat| {
            let n = m.nrows() as F;
            let mean = Vect::from_fn(m.ncols(), |j, _| m.column(j).sum() / n);
            let std = Vect::from_fn(m.ncols(), |j, _| {
                let mu = mean[j];
                let v = m.column(j).iter().map(|x| (x - mu) * (x - mu)).sum::<F>() / n;
                v.sqrt().max(STD_FLOOR)
            });
            (mean, std)
        };
        let (x_mean, x_std) = col_stats(&data.x);
        let (z_mean, z_std) = col_stats(&data.z);
        let n = data.len() as F;
        let y_mean = data.y.sum() / n;
        let y_var = data.y.iter().map(|y| (y - y_mean) * (y - y_mean)).sum::<F>() / n;
        let y_std = y_var.sqrt().max(STD_FLOOR);
        Self { x_mean, x_std, z_mean, z_std, y_mean, y_std }
    }

    pub fn apply(&self, data: &crate::data::Dataset) -> crate::data::Dataset {
        let x = crate::Mat::from_fn(data.x.nrows(), data.x.ncols(), |i, j| {
            (data.x[(i, j)] - self.x_mean[j]) / self.x_std[j]
        });
        let z = crate::Mat::from_fn(data.z.nrows(), data.z.ncols(), |i, j| {
            (data.z[(i, j)] - self.z_mean[j]) / self.z_std[j]
        });
        let y = Vect::from_fn(data.y.len(), |i, _| (data.y[i] - self.y_mean) / self.y_std);
        crate::data::Dataset {
            x,
            z,
            y,
            shared_tail: data.shared_tail,
            x_names: data.x_names.clone(),
            z_names: data.z_names.clone(),
        }
    }

    pub fn standardize_x(&self, x: &Vect) -> Vect {
        Vect::from_fn(x.len(), |j, _| (x[j] - self.x_mean[j]) / self.x_std[j])
    }

    pub fn destandardize_y(&self, y: F) -> F {
        self.y_mean + self.y_std * y
    }
}

/// Dispatch to the experiment runner. Rows come back sorted by a stable key,
/// so the CSV is byte-identical across thread counts.
pub fn run(cfg: &ExperimentConfig, threads: usize) -> Result<Vec<ResultRow>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut rows = pool.install(|| match cfg.experiment {
        ExperimentKind::Bench => run_bench(cfg),
        ExperimentKind::BiasStudy => run_bias_study(cfg),
        ExperimentKind::RateStudy => run_rate_study(cfg),
        ExperimentKind::Select => run_select(cfg),
    })?;
    rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    Ok(rows)
}

pub fn write_rows_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a ExperimentConfig,
    git: String,
    wall_time_ms: u64,
    rows: usize,
    csv: String,
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// Write the CSV and its JSON manifest (config echo, git revision, timing).
pub fn write_outputs(
    cfg: &ExperimentConfig,
    rows: &[ResultRow],
    csv_path: &Path,
    wall_time_ms: u64,
) -> Result<()> {
    write_rows_csv(rows, csv_path)?;
    let manifest = Manifest {
        config: cfg,
        git: git_describe(),
        wall_time_ms,
        rows: rows.len(),
        csv: csv_path.display().to_string(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(csv_path.with_extension("manifest.json"), text)?;
    Ok(())
}

/// Mean and twice the standard deviation of a sample.
pub(crate) fn mean_and_2sd(vals: &[F]) -> (F, F) {
    let n = vals.len() as F;
    let mean = vals.iter().sum::<F>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<F>() / (n - 1.0);
    (mean, 2.0 * var.sqrt())
}

pub(crate) fn median(vals: &mut [F]) -> F {
    vals.sort_by(F::total_cmp);
    let k = vals.len();
    if k % 2 == 1 {
        vals[k / 2]
    } else {
        0.5 * (vals[k / 2 - 1] + vals[k / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_populates_defaults() {
        let cfg = parse_config_str("experiment = \"bench\"").unwrap();
        assert_eq!(cfg.experiment, ExperimentKind::Bench);
        assert_eq!(cfg.replications, 20);
        assert_eq!(cfg.dgp.d, 15);
        assert_eq!(cfg.estimator.alphas, vec![0.1, 0.0]);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config_str("experiment = \"bench\"\n[estimator]\nalpah = [0.1]")
            .unwrap_err();
        match err {
            Error::UnknownKey(msg) => assert!(msg.contains("`alpah`"), "{msg}"),
            other => panic!("wrong error kind: {other:?}"),
        }
    }

    #[test]
    fn invariant_violations_are_distinct_errors() {
        let err =
            parse_config_str("experiment = \"bench\"\nreplications = 0").unwrap_err();
        assert_eq!(err.category(), "invalid-parameter");
        let err = parse_config_str("experiment = ").unwrap_err();
        assert_eq!(err.category(), "config");
        let err = parse_config(Path::new("/nonexistent/x.toml")).unwrap_err();
        assert_eq!(err.category(), "io");
    }

    #[test]
    fn bad_link_rejected() {
        let err = parse_config_str(
            "experiment = \"bench\"\n[dgp]\nlinks = [\"id\", \"quadratic\"]",
        )
        .unwrap_err();
        assert_eq!(err.category(), "invalid-parameter");
    }

    #[test]
    fn mix_seed_distinct_streams() {
        let a = mix_seed(1, &[0, 0]);
        let b = mix_seed(1, &[0, 1]);
        let c = mix_seed(2, &[0, 0]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, mix_seed(1, &[0, 0]));
    }

    #[test]
    fn standardizer_round_trip() {
        let fam = {
            let w0 = Vect::from_element(3, 1.0);
            crate::dgp::LinearNpivParams::new(0.5, 2, 0.0, &w0, 0.3).unwrap()
        };
        let data = crate::dgp::generate_linear_npiv(&fam, 400, 5).unwrap();
        let s = Standardizer::fit(&data);
        let std = s.apply(&data);
        let n = std.len() as F;
        let my = std.y.sum() / n;
        assert!(my.abs() < 1e-10);
        for j in 0..std.x.ncols() {
            let col_mean = std.x.column(j).sum() / n;
            assert!(col_mean.abs() < 1e-10);
        }
        assert!((s.destandardize_y(std.y[3]) - data.y[3]).abs() < 1e-10);
    }

    fn tiny_bench_config() -> ExperimentConfig {
        parse_config_str(
            r#"
experiment = "bench"
seed = 3
replications = 1

[dgp]
d = 3
d_w = 1
n = 60
links = ["id"]

[estimator]
alphas = [0.1, 0.0]
mc_batch = 4
counterfactual_mc = 200
width_or_degree = 4

[stage1]
k = 2
epochs = 3
batch_size = 20
trunk_width = 4

[stage2]
epochs = 3
batch_size = 20
"#,
        )
        .unwrap()
    }

    #[test]
    fn bench_replications_1_row_count_and_no_silent_drops() {
        let cfg = tiny_bench_config();
        let rows = run(&cfg, 1).unwrap();
        // links x alphas per-replication rows, plus one aggregate per cell.
        let per_rep = rows.iter().filter(|r| r.replication >= 0).count();
        let agg = rows.iter().filter(|r| r.replication == -1).count();
        assert_eq!(per_rep, 2);
        assert_eq!(agg, 2);
        assert!(rows.iter().all(|r| {
            r.estimate.is_finite() && r.normalized_mse.is_finite() && !r.status.is_empty()
        }));
    }

    #[test]
    fn csv_is_byte_identical_across_runs_and_thread_counts() {
        let mut cfg = ExperimentConfig::minimal(ExperimentKind::BiasStudy);
        cfg.bias.dim = 40;
        cfg.bias.betas = vec![0.5, 2.0];
        cfg.bias.ms = vec![1, 2];
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for (i, threads) in [1usize, 1, 2].iter().enumerate() {
            let mut rows = run(&cfg, *threads).unwrap();
            // wall time is the one legitimately nondeterministic column
            for r in &mut rows {
                r.wall_time_ms = 0;
            }
            let path = dir.path().join(format!("run{i}.csv"));
            write_rows_csv(&rows, &path).unwrap();
            bytes.push(std::fs::read(&path).unwrap());
        }
        assert_eq!(bytes[0], bytes[1]);
        assert_eq!(bytes[0], bytes[2]);
    }

    #[test]
    fn bench_parallel_matches_single_threaded() {
        let cfg = tiny_bench_config();
        let mut a = run(&cfg, 1).unwrap();
        let mut b = run(&cfg, 3).unwrap();
        for r in a.iter_mut().chain(b.iter_mut()) {
            r.wall_time_ms = 0;
        }
        assert_eq!(a, b);
    }

    #[test]
    fn rows_csv_round_trip_exact() {
        let rows = vec![ResultRow {
            experiment: "bench".into(),
            case: "id".into(),
            n: 500,
            alpha: 0.1,
            m: 1,
            replication: 0,
            estimate: 20.123456789012345,
            truth: std::f64::consts::PI * 6.0,
            squared_error: 1e-7,
            normalized_mse: 2.5e-10,
            wall_time_ms: 1234,
            seed: 42,
            status: "ok".into(),
            ci_2sd: 0.0,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.csv");
        write_rows_csv(&rows, &path).unwrap();
        let back = read_rows_csv(&path).unwrap();
        assert_eq!(rows, back);
    }
}
