//! Hypothesis classes for the second stage: linear sieves (polynomial and
//! random Fourier features) and a small multilayer perceptron.
//!
//! Sieve functions are linear in their parameters, which makes the
//! regularized least-squares stage verifiable against the closed-form
//! inverse-problem oracle. All functions clamp their output to
//! `[-clip, clip]`, a safety net implementing the uniform-boundedness
//! assumption on the class; the clamp gradient is zero outside the band.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use nalgebra::DVector;
use num_traits::Float;
use serde::{Deserialize, Serialize};

/// Kind of hypothesis class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HypothesisKind {
    PolySieve,
    FourierSieve,
    Mlp,
}

/// Static description of a hypothesis class.
#[derive(Debug, Clone)]
pub struct HypothesisSpec<S: Scalar> {
    pub kind: HypothesisKind,
    /// Polynomial total degree, number of Fourier features, or MLP width.
    pub degree_or_width: usize,
    pub x_dim: usize,
    /// Output clamp bound.
    pub clip: S,
    /// Seed for the random Fourier frequencies (ignored by other kinds).
    pub feature_seed: u64,
}

/// Number of MLP hidden layers; the paper-style "three-layer" network.
const MLP_DEPTH: usize = 3;

impl<S: Scalar> HypothesisSpec<S> {
    pub fn poly(degree: usize, x_dim: usize) -> Self {
        Self { kind: HypothesisKind::PolySieve, degree_or_width: degree, x_dim, clip: S::of(50.0), feature_seed: 0 }
    }

    pub fn fourier(width: usize, x_dim: usize, feature_seed: u64) -> Self {
        Self { kind: HypothesisKind::FourierSieve, degree_or_width: width, x_dim, clip: S::of(50.0), feature_seed }
    }

    pub fn mlp(width: usize, x_dim: usize) -> Self {
        Self { kind: HypothesisKind::Mlp, degree_or_width: width, x_dim, clip: S::of(50.0), feature_seed: 0 }
    }

    pub fn with_clip(mut self, clip: S) -> Self {
        self.clip = clip;
        self
    }

    /// Length of the parameter vector.
    pub fn param_count(&self) -> usize {
        match self.kind {
            HypothesisKind::PolySieve => multi_indices(self.x_dim, self.degree_or_width).len(),
            HypothesisKind::FourierSieve => self.degree_or_width,
            HypothesisKind::Mlp => {
                let w = self.degree_or_width;
                let d = self.x_dim;
                // input layer + (depth-1) hidden-to-hidden + linear readout
                w * d + w + (MLP_DEPTH - 1) * (w * w + w) + w + 1
            }
        }
    }

    /// Frequencies for the Fourier sieve, seeded standard Gaussian rows.
    fn fourier_frequencies(&self) -> Vec<DVector<S>> {
        let mut rng = crate::stream_rng(self.feature_seed, 0x0f0f);
        (0..self.degree_or_width)
            .map(|_| DVector::from_fn(self.x_dim, |_, _| S::sample_standard_normal(&mut rng)))
            .collect()
    }
}

/// Exponent tuples of total degree at most `degree`, graded lexicographic,
/// starting with the intercept. Cached per (dim, degree): feature evaluation
/// sits in the training inner loop.
fn multi_indices(dim: usize, degree: usize) -> std::rc::Rc<Vec<Vec<u32>>> {
    thread_local! {
        static CACHE: std::cell::RefCell<std::collections::HashMap<(usize, usize), std::rc::Rc<Vec<Vec<u32>>>>> =
            std::cell::RefCell::new(std::collections::HashMap::new());
    }
    CACHE.with(|c| {
        c.borrow_mut()
            .entry((dim, degree))
            .or_insert_with(|| {
                let mut out = Vec::new();
                for total in 0..=degree as u32 {
                    let mut current = vec![0u32; dim];
                    fill_indices(&mut out, &mut current, 0, total);
                }
                std::rc::Rc::new(out)
            })
            .clone()
    })
}

/// Sparse form of the exponent tuples (nonzero entries only); the feature
/// map touches only the participating coordinates.
fn sparse_indices(dim: usize, degree: usize) -> std::rc::Rc<Vec<Vec<(usize, u32)>>> {
    thread_local! {
        static CACHE: std::cell::RefCell<std::collections::HashMap<(usize, usize), std::rc::Rc<Vec<Vec<(usize, u32)>>>>> =
            std::cell::RefCell::new(std::collections::HashMap::new());
    }
    CACHE.with(|c| {
        c.borrow_mut()
            .entry((dim, degree))
            .or_insert_with(|| {
                let dense = multi_indices(dim, degree);
                std::rc::Rc::new(
                    dense
                        .iter()
                        .map(|e| {
                            e.iter()
                                .enumerate()
                                .filter(|(_, &p)| p > 0)
                                .map(|(j, &p)| (j, p))
                                .collect()
                        })
                        .collect(),
                )
            })
            .clone()
    })
}

fn fill_indices(out: &mut Vec<Vec<u32>>, current: &mut Vec<u32>, pos: usize, remaining: u32) {
    if pos + 1 == current.len() {
        current[pos] = remaining;
        out.push(current.clone());
        current[pos] = 0;
        return;
    }
    for e in (0..=remaining).rev() {
        current[pos] = e;
        fill_indices(out, current, pos + 1, remaining - e);
        current[pos] = 0;
    }
}

/// Sieve feature map. Errors for the MLP kind, which has no linear features.
pub fn features<S: Scalar>(spec: &HypothesisSpec<S>, x: &DVector<S>) -> Result<DVector<S>> {
    if x.len() != spec.x_dim {
        return Err(Error::DimensionMismatch(format!(
            "x has length {} but spec.x_dim is {}",
            x.len(),
            spec.x_dim
        )));
    }
    match spec.kind {
        HypothesisKind::PolySieve => {
            let idx = sparse_indices(spec.x_dim, spec.degree_or_width);
            Ok(DVector::from_iterator(
                idx.len(),
                idx.iter().map(|e| {
                    let mut v = S::of(1.0);
                    for &(j, p) in e {
                        v *= Float::powi(x[j], p as i32);
                    }
                    v
                }),
            ))
        }
        HypothesisKind::FourierSieve => {
            let freqs = spec.fourier_frequencies();
            Ok(DVector::from_iterator(
                freqs.len(),
                freqs.iter().enumerate().map(|(j, w)| {
                    let t = w.dot(x);
                    if j % 2 == 0 {
                        Float::cos(t)
                    } else {
                        Float::sin(t)
                    }
                }),
            ))
        }
        HypothesisKind::Mlp => Err(Error::InvalidArgument(
            "MLP hypotheses have no linear feature map".into(),
        )),
    }
}

/// A fitted member of a hypothesis class.
#[derive(Debug, Clone)]
pub struct HypothesisFunction<S: Scalar> {
    pub spec: HypothesisSpec<S>,
    pub params: DVector<S>,
}

impl<S: Scalar> HypothesisFunction<S> {
    /// The zero function of the class.
    pub fn zeros(spec: HypothesisSpec<S>) -> Self {
        let n = spec.param_count();
        Self { spec, params: DVector::zeros(n) }
    }

    pub fn new(spec: HypothesisSpec<S>, params: DVector<S>) -> Result<Self> {
        if params.len() != spec.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} params, got {}",
                spec.param_count(),
                params.len()
            )));
        }
        Ok(Self { spec, params })
    }

    /// Small random initialization suitable for training.
    pub fn init<R: rand::Rng + ?Sized>(spec: HypothesisSpec<S>, rng: &mut R) -> Self {
        let n = spec.param_count();
        let scale = match spec.kind {
            HypothesisKind::Mlp => {
                S::of(1.0) / Float::sqrt(S::of(spec.degree_or_width as f64))
            }
            _ => S::of(0.01),
        };
        let params = DVector::from_fn(n, |_, _| S::sample_standard_normal(rng) * scale);
        Self { spec, params }
    }

    /// Evaluate at `x`, clamped to `[-clip, clip]`.
    pub fn evaluate(&self, x: &DVector<S>) -> S {
        self.value_and_grad_impl(x, false).0
    }

    /// Evaluate together with the gradient with respect to the parameters.
    /// The gradient is zero whenever the clamp is active.
    pub fn value_and_param_grad(&self, x: &DVector<S>) -> (S, DVector<S>) {
        let (v, g) = self.value_and_grad_impl(x, true);
        (v, g.expect("gradient requested"))
    }

    fn value_and_grad_impl(&self, x: &DVector<S>, want_grad: bool) -> (S, Option<DVector<S>>) {
        debug_assert_eq!(x.len(), self.spec.x_dim);
        let clip = self.spec.clip;
        let (raw, grad) = match self.spec.kind {
            HypothesisKind::Mlp => self.mlp_forward(x, want_grad),
            _ => {
                let phi = features(&self.spec, x).expect("sieve features");
                let v = self.params.dot(&phi);
                (v, if want_grad { Some(phi) } else { None })
            }
        };
        if raw > clip {
            (clip, grad.map(|g| g * S::of(0.0)))
        } else if raw < -clip {
            (-clip, grad.map(|g| g * S::of(0.0)))
        } else {
            (raw, grad)
        }
    }

    fn mlp_forward(&self, x: &DVector<S>, want_grad: bool) -> (S, Option<DVector<S>>) {
        let w = self.spec.degree_or_width;
        let d = self.spec.x_dim;
        let p = &self.params;
        // activations per layer, pre-activation kept implicitly via tanh'
        let mut acts: Vec<Vec<S>> = Vec::with_capacity(MLP_DEPTH);
        let mut offset = 0;
        let mut prev: Vec<S> = (0..d).map(|i| x[i]).collect();
        let mut layer_offsets = Vec::with_capacity(MLP_DEPTH);
        for layer in 0..MLP_DEPTH {
            let fan_in = if layer == 0 { d } else { w };
            layer_offsets.push(offset);
            let mut out = vec![S::of(0.0); w];
            for i in 0..w {
                let row = offset + i * fan_in;
                let mut acc = p[offset + w * fan_in + i]; // bias
                for j in 0..fan_in {
                    acc += p[row + j] * prev[j];
                }
                out[i] = Float::tanh(acc);
            }
            offset += w * fan_in + w;
            acts.push(out.clone());
            prev = out;
        }
        let readout = offset;
        let mut val = p[readout + w]; // output bias
        for i in 0..w {
            val += p[readout + i] * prev[i];
        }
        if !want_grad {
            return (val, None);
        }
        let mut grad = DVector::zeros(p.len());
        grad[readout + w] = S::of(1.0);
        // delta at the top hidden layer
        let mut delta: Vec<S> = (0..w)
            .map(|i| {
                grad[readout + i] = acts[MLP_DEPTH - 1][i];
                p[readout + i] * (S::of(1.0) - acts[MLP_DEPTH - 1][i] * acts[MLP_DEPTH - 1][i])
            })
            .collect();
        for layer in (0..MLP_DEPTH).rev() {
            let fan_in = if layer == 0 { d } else { w };
            let off = layer_offsets[layer];
            let below: Vec<S> = if layer == 0 {
                (0..d).map(|i| x[i]).collect()
            } else {
                acts[layer - 1].clone()
            };
            for i in 0..w {
                let row = off + i * fan_in;
                for j in 0..fan_in {
                    grad[row + j] = delta[i] * below[j];
                }
                grad[off + w * fan_in + i] = delta[i];
            }
            if layer > 0 {
                let mut next = vec![S::of(0.0); w];
                for j in 0..w {
                    let mut acc = S::of(0.0);
                    for i in 0..w {
                        acc += delta[i] * p[off + i * fan_in + j];
                    }
                    next[j] = acc * (S::of(1.0) - acts[layer - 1][j] * acts[layer - 1][j]);
                }
                delta = next;
            }
        }
        (val, Some(grad))
    }

    pub fn to_json(&self) -> String {
        let dto = HypothesisDto {
            version: 1,
            kind: self.spec.kind,
            degree_or_width: self.spec.degree_or_width,
            x_dim: self.spec.x_dim,
            clip: self.spec.clip.as_f64(),
            feature_seed: self.spec.feature_seed,
            params: self.params.iter().map(|v| v.as_f64()).collect(),
        };
        serde_json::to_string(&dto).expect("hypothesis serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let dto: HypothesisDto =
            serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        let spec = HypothesisSpec {
            kind: dto.kind,
            degree_or_width: dto.degree_or_width,
            x_dim: dto.x_dim,
            clip: S::of(dto.clip),
            feature_seed: dto.feature_seed,
        };
        Self::new(spec, DVector::from_iterator(dto.params.len(), dto.params.iter().map(|&v| S::of(v))))
    }
}

#[derive(Serialize, Deserialize)]
struct HypothesisDto {
    version: u32,
    kind: HypothesisKind,
    degree_or_width: usize,
    x_dim: usize,
    clip: f64,
    feature_seed: u64,
    params: Vec<f64>,
}

/// Maximum absolute discrepancy between the analytic parameter gradient and
/// a central finite difference with step `eps`. `x` must be strictly inside
/// the unclamped region.
pub fn grad_check<S: Scalar>(h: &HypothesisFunction<S>, x: &DVector<S>, eps: S) -> S {
    let (_, analytic) = h.value_and_param_grad(x);
    let mut worst = S::of(0.0);
    let mut probe = h.clone();
    for i in 0..h.params.len() {
        let base = h.params[i];
        probe.params[i] = base + eps;
        let plus = probe.evaluate(x);
        probe.params[i] = base - eps;
        let minus = probe.evaluate(x);
        probe.params[i] = base;
        let fd = (plus - minus) / (S::of(2.0) * eps);
        let d = Float::abs(analytic[i] - fd);
        if d > worst {
            worst = d;
        }
    }
    worst
}
