//! Rank-based Gaussianization of continuous columns.
//!
//! The proximal benchmark observes monotone links of jointly Gaussian
//! latents; mapping each continuous column through the probit of its
//! empirical CDF approximately restores the latent (Gaussian) scale, where
//! the first stage's linear-in-z mixture and a low-degree bridge sieve are
//! well specified. Binary columns (the treatment) are left untouched.

use crate::data::Dataset;
use crate::{Mat, Vect, F};

/// Monotone per-column transport to approximately standard-normal scores.
#[derive(Debug, Clone)]
pub struct QuantileMap {
    sorted: Vec<F>,
}

impl QuantileMap {
    fn fit(values: &[F]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(F::total_cmp);
        Self { sorted }
    }

    /// Empirical CDF with mid-rank ties, clamped away from {0, 1}.
    fn cdf(&self, x: F) -> F {
        let n = self.sorted.len();
        let below = self.sorted.partition_point(|v| *v < x);
        let not_above = self.sorted.partition_point(|v| *v <= x);
        let u = (below as F + 0.5 * (not_above - below) as F + 0.5) / (n as F + 1.0);
        u.clamp(0.5 / (n as F + 1.0), 1.0 - 0.5 / (n as F + 1.0))
    }

    pub fn apply(&self, x: F) -> F {
        probit(self.cdf(x))
    }
}

/// Inverse standard-normal CDF (Acklam's rational approximation, |e| < 1e-9).
pub fn probit(p: F) -> F {
    const A: [F; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [F; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [F; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [F; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: F = 0.02425;
    debug_assert!(p > 0.0 && p < 1.0);
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -probit(1.0 - p)
    }
}

fn is_binary(values: &[F]) -> bool {
    let mut distinct: Vec<F> = Vec::with_capacity(3);
    for &v in values {
        if !distinct.iter().any(|d| *d == v) {
            distinct.push(v);
            if distinct.len() > 2 {
                return false;
            }
        }
    }
    true
}

/// Per-column Gaussianizer for a dataset; binary columns get `None`.
#[derive(Debug, Clone)]
pub struct Gaussianizer {
    x_maps: Vec<Option<QuantileMap>>,
    z_maps: Vec<Option<QuantileMap>>,
}

impl Gaussianizer {
    pub fn fit(data: &Dataset) -> Self {
        let fit_cols = |m: &Mat| {
            (0..m.ncols())
                .map(|j| {
                    let col: Vec<F> = m.column(j).iter().copied().collect();
                    (!is_binary(&col)).then(|| QuantileMap::fit(&col))
                })
                .collect()
        };
        Self { x_maps: fit_cols(&data.x), z_maps: fit_cols(&data.z) }
    }

    pub fn apply(&self, data: &Dataset) -> Dataset {
        let map_mat = |m: &Mat, maps: &[Option<QuantileMap>]| {
            Mat::from_fn(m.nrows(), m.ncols(), |i, j| match &maps[j] {
                Some(q) => q.apply(m[(i, j)]),
                None => m[(i, j)],
            })
        };
        Dataset {
            x: map_mat(&data.x, &self.x_maps),
            z: map_mat(&data.z, &self.z_maps),
            y: data.y.clone(),
            shared_tail: data.shared_tail,
            x_names: data.x_names.clone(),
            z_names: data.z_names.clone(),
        }
    }

    pub fn transform_x(&self, x: &Vect) -> Vect {
        Vect::from_fn(x.len(), |j, _| match &self.x_maps[j] {
            Some(q) => q.apply(x[j]),
            None => x[j],
        })
    }
}
