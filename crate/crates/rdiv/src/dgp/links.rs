//! Elementwise link functions applied to the latent variables of the
//! proximal benchmark.

use crate::F;
use serde::{Deserialize, Serialize};

/// Invertible (on the sampled range) elementwise links.
///
/// `Piecewise` is undefined as printed on part of its domain: `log(8x-8)`
/// diverges as x -> 1+, so the implementation clamps the log argument at
/// 1e-8. `LogSigmoid` takes the sign of its shifted argument 16x-8, the
/// only reading under which the map is invertible as required; signing by
/// x itself would fold (0, 1/2) onto (1/2, 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkFunction {
    Id,
    Poly,
    LogSigmoid,
    Piecewise,
    Sigmoid,
    CubicRoot,
}

impl LinkFunction {
    pub const ALL: [LinkFunction; 6] = [
        LinkFunction::Id,
        LinkFunction::Poly,
        LinkFunction::LogSigmoid,
        LinkFunction::Piecewise,
        LinkFunction::Sigmoid,
        LinkFunction::CubicRoot,
    ];

    pub fn apply(self, x: F) -> F {
        match self {
            LinkFunction::Id => x,
            LinkFunction::Poly => x * x * x,
            LinkFunction::LogSigmoid => {
                let u = 16.0 * x - 8.0;
                (1.0 + u.abs()).ln() * u.signum()
            }
            LinkFunction::Piecewise => {
                if x <= 1.0 {
                    3.0 * (x - 2.0)
                } else {
                    (8.0 * x - 8.0).max(1e-8).ln()
                }
            }
            LinkFunction::Sigmoid => 5.0 / (1.0 + (-0.1 * x).exp()),
            LinkFunction::CubicRoot => x.cbrt(),
        }
    }

    /// Right inverse: `apply(invert(t)) = t` for every t in the attained
    /// range of `apply` over the sampled domain.
    pub fn invert(self, t: F) -> F {
        match self {
            LinkFunction::Id => t,
            LinkFunction::Poly => t.cbrt(),
            LinkFunction::LogSigmoid => {
                let u = t.signum() * (t.abs().exp() - 1.0);
                (u + 8.0) / 16.0
            }
            LinkFunction::Piecewise => {
                if t <= -3.0 {
                    t / 3.0 + 2.0
                } else {
                    (t.exp() + 8.0) / 8.0
                }
            }
            LinkFunction::Sigmoid => -10.0 * (5.0 / t - 1.0).ln(),
            LinkFunction::CubicRoot => t * t * t,
        }
    }

    pub fn apply_slice(self, xs: &mut [F]) {
        for v in xs.iter_mut() {
            *v = self.apply(*v);
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LinkFunction::Id => "id",
            LinkFunction::Poly => "poly",
            LinkFunction::LogSigmoid => "log-sigmoid",
            LinkFunction::Piecewise => "piecewise",
            LinkFunction::Sigmoid => "sigmoid",
            LinkFunction::CubicRoot => "cubic-root",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|l| l.name() == name)
    }
}
