//! Forward (noising) and reverse (denoising) transition distributions for
//! the three channels — amino-acid type, position, orientation — with exact
//! log-densities for flow computation.
//!
//! Conventions: timesteps are one-based (t = 1..T); ᾱ⁰ ≡ 1. Degenerate
//! parameters (ᾱ = 1, β = 0) yield point masses whose `log_prob` is defined
//! only at the support point; callers branch on `is_degenerate`.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schedules::NoiseSchedule;
use crate::so3::{geodesic_scale, IgSo3Params, Rotation};
use crate::NUM_AA;

/// Probabilities below this are floored before any log, keeping Eq-style
/// flow products finite for near-deterministic categoricals.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("category index {0} out of range (expected < {1})")]
    CategoryOutOfRange(usize, usize),
    #[error("probabilities must be nonnegative and sum to 1 within 1e-9, got sum {0}")]
    NotNormalized(f64),
    #[error("parameter {name} = {value} outside {expected}")]
    BadParameter {
        name: &'static str,
        value: f64,
        expected: &'static str,
    },
    #[error("log_prob of a point mass away from its support")]
    OffSupport,
}

/// One residue: categorical type, position (Å) and orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidueState {
    pub dtype: usize,
    pub pos: Vector3<f64>,
    pub ori: Rotation,
}

impl ResidueState {
    pub fn validate(&self) -> Result<(), KernelError> {
        if self.dtype >= NUM_AA {
            return Err(KernelError::CategoryOutOfRange(self.dtype, NUM_AA));
        }
        if !self.pos.iter().all(|v| v.is_finite()) {
            return Err(KernelError::BadParameter {
                name: "pos",
                value: f64::NAN,
                expected: "finite coordinates",
            });
        }
        Ok(())
    }
}

/// The m CDR residues at a shared timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct CdrState {
    pub t: usize,
    pub residues: Vec<ResidueState>,
}

impl CdrState {
    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residues.is_empty()
    }

    pub fn sequence(&self) -> String {
        self.residues.iter().map(|r| crate::aa_char(r.dtype)).collect()
    }
}

/// Frozen non-CDR residues conditioning generation. `cdr_span = (l, m)`
/// marks the gap: the CDR occupies 0-based complex indices l..l+m, context
/// residues fill the rest in complex order.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexContext {
    pub residues: Vec<ResidueState>,
    pub cdr_span: (usize, usize),
}

/// A categorical distribution over amino-acid types (or over K tabular
/// categories).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalDist {
    probs: Vec<f64>,
}

impl CategoricalDist {
    pub fn new(probs: Vec<f64>) -> Result<Self, KernelError> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| *p < 0.0 || !p.is_finite()) || (sum - 1.0).abs() > 1e-9 {
            return Err(KernelError::NotNormalized(sum));
        }
        Ok(CategoricalDist { probs })
    }

    pub fn uniform(k: usize) -> Self {
        CategoricalDist {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, idx: usize) -> f64 {
        self.probs[idx]
    }

    /// log prob with the 1e-12 floor applied.
    pub fn log_prob(&self, idx: usize) -> f64 {
        self.probs[idx].max(PROB_FLOOR).ln()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }

    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
            .map(|(i, _)| i)
            .expect("nonempty")
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

/// Single noising step for the type channel over `k` categories:
/// `(1-β)·onehot(d_prev) + (β/k)·1`.
pub fn type_forward_step_k(d_prev: usize, beta_t: f64, k: usize) -> CategoricalDist {
    assert!((0.0..=1.0).contains(&beta_t), "beta_t out of [0,1]");
    assert!(d_prev < k, "category out of range");
    let mut probs = vec![beta_t / k as f64; k];
    probs[d_prev] += 1.0 - beta_t;
    CategoricalDist { probs }
}

/// Closed-form t-step type marginal over `k` categories:
/// `ᾱ·onehot(d0) + ((1-ᾱ)/k)·1`.
pub fn type_marginal_k(d0: usize, alpha_bar_t: f64, k: usize) -> CategoricalDist {
    assert!(
        alpha_bar_t > 0.0 && alpha_bar_t <= 1.0,
        "alpha_bar out of (0,1]"
    );
    assert!(d0 < k, "category out of range");
    let mut probs = vec![(1.0 - alpha_bar_t) / k as f64; k];
    probs[d0] += alpha_bar_t;
    CategoricalDist { probs }
}

/// Bayes posterior q(d^{t-1} | d^t, d^0) over `k` categories: the product of
/// the step likelihood into `d_t` and the (t-1)-marginal prior, normalized.
pub fn type_posterior_k(
    d_t: usize,
    d0: usize,
    beta_t: f64,
    alpha_bar_prev: f64,
    k: usize,
) -> CategoricalDist {
    let prior = type_marginal_k(d0, alpha_bar_prev, k);
    let mut probs: Vec<f64> = (0..k)
        .map(|d_prev| type_forward_step_k(d_prev, beta_t, k).prob(d_t) * prior.prob(d_prev))
        .collect();
    let z: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= z;
    }
    CategoricalDist { probs }
}

/// 20-way type noising step (Eq-style `(1-β)·onehot + β/20`).
pub fn type_forward_step(d_prev: usize, beta_t: f64) -> CategoricalDist {
    type_forward_step_k(d_prev, beta_t, NUM_AA)
}

/// 20-way closed-form type marginal.
pub fn type_marginal(d0: usize, alpha_bar_t: f64) -> CategoricalDist {
    type_marginal_k(d0, alpha_bar_t, NUM_AA)
}

/// 20-way type posterior at timestep t under a schedule (ᾱ⁰ ≡ 1).
pub fn type_posterior(d_t: usize, d0: usize, t: usize, sched: &NoiseSchedule) -> CategoricalDist {
    type_posterior_k(d_t, d0, sched.beta(t), sched.alpha_bar(t - 1), NUM_AA)
}

/// Isotropic Gaussian on ℝ³ with scalar covariance `var·I`; `var = 0` is a
/// point mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsoGaussian3 {
    pub mean: Vector3<f64>,
    pub var: f64,
}

impl IsoGaussian3 {
    pub fn new(mean: Vector3<f64>, var: f64) -> Result<Self, KernelError> {
        if !(var.is_finite() && var >= 0.0) {
            return Err(KernelError::BadParameter {
                name: "var",
                value: var,
                expected: "a nonnegative finite value",
            });
        }
        Ok(IsoGaussian3 { mean, var })
    }

    pub fn is_degenerate(&self) -> bool {
        self.var == 0.0
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vector3<f64> {
        if self.is_degenerate() {
            return self.mean;
        }
        let sd = self.var.sqrt();
        Vector3::new(
            self.mean.x + sd * rng.sample::<f64, _>(StandardNormal),
            self.mean.y + sd * rng.sample::<f64, _>(StandardNormal),
            self.mean.z + sd * rng.sample::<f64, _>(StandardNormal),
        )
    }

    pub fn log_prob(&self, x: &Vector3<f64>) -> Result<f64, KernelError> {
        if self.is_degenerate() {
            return if x == &self.mean {
                Ok(0.0)
            } else {
                Err(KernelError::OffSupport)
            };
        }
        let d2 = (x - self.mean).norm_squared();
        Ok(-0.5 * d2 / self.var
            - 1.5 * (2.0 * std::f64::consts::PI * self.var).ln())
    }

    pub fn entropy(&self) -> f64 {
        1.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * self.var).ln()
    }
}

/// Position noising step: N(√(1-β)·x_prev, β·I).
pub fn pos_forward_step(x_prev: &Vector3<f64>, beta_t: f64) -> Result<IsoGaussian3, KernelError> {
    if !(beta_t > 0.0 && beta_t < 1.0) {
        return Err(KernelError::BadParameter {
            name: "beta_t",
            value: beta_t,
            expected: "(0, 1)",
        });
    }
    IsoGaussian3::new(x_prev * (1.0 - beta_t).sqrt(), beta_t)
}

/// Closed-form t-step position marginal: N(√ᾱ·x0, (1-ᾱ)·I); ᾱ = 1 is the
/// degenerate point mass at x0.
pub fn pos_marginal(x0: &Vector3<f64>, alpha_bar_t: f64) -> Result<IsoGaussian3, KernelError> {
    if !(alpha_bar_t > 0.0 && alpha_bar_t <= 1.0) {
        return Err(KernelError::BadParameter {
            name: "alpha_bar_t",
            value: alpha_bar_t,
            expected: "(0, 1]",
        });
    }
    IsoGaussian3::new(x0 * alpha_bar_t.sqrt(), 1.0 - alpha_bar_t)
}

/// Reparameterized reverse mean for one residue:
/// `(x_t - β/√(1-ᾱ)·ε̂) / √(1-β)`. The reverse transition is Gaussian with
/// this mean and covariance β·I.
pub fn pos_reverse_mean(
    x_t: &Vector3<f64>,
    eps_hat: &Vector3<f64>,
    t: usize,
    sched: &NoiseSchedule,
) -> Vector3<f64> {
    let beta = sched.beta(t);
    let alpha_bar = sched.alpha_bar(t);
    (x_t - eps_hat * (beta / (1.0 - alpha_bar).sqrt())) / (1.0 - beta).sqrt()
}

/// Full reverse position distribution at timestep t.
pub fn pos_reverse_dist(
    x_t: &Vector3<f64>,
    eps_hat: &Vector3<f64>,
    t: usize,
    sched: &NoiseSchedule,
) -> IsoGaussian3 {
    IsoGaussian3 {
        mean: pos_reverse_mean(x_t, eps_hat, t, sched),
        var: sched.beta(t),
    }
}

/// Forward orientation marginal: IGSO(3) with mean λ(√ᾱ, O0) and variance
/// 1-ᾱ. Returns `None` for the degenerate ᾱ = 1 (point mass at O0).
pub fn ori_forward_marginal(
    o0: &Rotation,
    t: usize,
    sched: &NoiseSchedule,
) -> Option<IgSo3Params> {
    let alpha_bar = sched.alpha_bar(t);
    if alpha_bar >= 1.0 {
        return None;
    }
    let mean = geodesic_scale(alpha_bar.sqrt(), o0).expect("ᾱ in (0,1)");
    Some(IgSo3Params::new(mean, 1.0 - alpha_bar).expect("variance in (0,1)"))
}

/// Single-step orientation kernel: IGSO(3) with mean λ(√(1-β), O_prev) and
/// variance β, the rotation analogue of the Gaussian step. Returns `None`
/// for β = 0 (point mass at O_prev).
pub fn ori_forward_step(o_prev: &Rotation, beta_t: f64) -> Option<IgSo3Params> {
    if beta_t <= 0.0 {
        return None;
    }
    let mean = geodesic_scale((1.0 - beta_t).sqrt(), o_prev).expect("β in (0,1]");
    Some(IgSo3Params::new(mean, beta_t).expect("positive variance"))
}

/// Reverse orientation distribution: IGSO(3) centered at the denoiser's
/// orientation output with variance β^t.
pub fn ori_reverse_dist(h_out: &Rotation, t: usize, sched: &NoiseSchedule) -> IgSo3Params {
    IgSo3Params::new(*h_out, sched.beta(t)).expect("positive schedule variance")
}
