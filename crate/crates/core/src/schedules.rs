//! Variance schedules β^t and cumulative products ᾱ^t for the three
//! diffusion channels (amino-acid type, position, orientation).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("step count must be at least 1")]
    EmptySchedule,
    #[error("beta bounds must satisfy 0 < beta_min <= beta_max < 1, got [{0}, {1}]")]
    InvalidBounds(f64, f64),
}

/// Which diffusion channel a schedule drives. For the type channel β is the
/// per-step uniform-resample probability; for positions and orientations it
/// is the per-step variance increment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Type,
    Pos,
    Ori,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(format!("unknown schedule kind {other:?}")),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScheduleKind::Linear => write!(f, "linear"),
            ScheduleKind::Cosine => write!(f, "cosine"),
        }
    }
}

/// β^1..β^T and precomputed ᾱ^t = Π_{τ≤t}(1-β^τ). One-based timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub channel: Channel,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// β at timestep t ∈ [1, T].
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// ᾱ at timestep t ∈ [0, T]; ᾱ⁰ ≡ 1 by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }
}

/// The three per-channel schedules of one diffusion process; equal lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedules {
    pub dtype: NoiseSchedule,
    pub pos: NoiseSchedule,
    pub ori: NoiseSchedule,
}

impl DiffusionSchedules {
    pub fn new(
        dtype: NoiseSchedule,
        pos: NoiseSchedule,
        ori: NoiseSchedule,
    ) -> Result<Self, ScheduleError> {
        if dtype.len() != pos.len() || pos.len() != ori.len() || dtype.is_empty() {
            return Err(ScheduleError::EmptySchedule);
        }
        Ok(DiffusionSchedules { dtype, pos, ori })
    }

    pub fn t_total(&self) -> usize {
        self.dtype.len()
    }

    /// Hex digest of all β sequences; stored in checkpoints so a stale
    /// schedule is detectable.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for sched in [&self.dtype, &self.pos, &self.ori] {
            for b in sched.betas() {
                h.update(b.to_le_bytes());
            }
            h.update([0xff]);
        }
        let d = h.finalize();
        d[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Build a schedule of the requested shape with precomputed ᾱ.
///
/// `linear` interpolates β from `beta_min` to `beta_max`. `cosine` follows
/// the squared-cosine ᾱ profile with the per-step β clamped into
/// `[beta_min, beta_max]`.
pub fn make_schedule(
    channel: Channel,
    kind: ScheduleKind,
    t_steps: usize,
    beta_min: f64,
    beta_max: f64,
) -> Result<NoiseSchedule, ScheduleError> {
    if t_steps == 0 {
        return Err(ScheduleError::EmptySchedule);
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(ScheduleError::InvalidBounds(beta_min, beta_max));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..t_steps)
            .map(|i| {
                if t_steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (t_steps - 1) as f64
                }
            })
            .collect(),
        ScheduleKind::Cosine => {
            let alpha_profile = |u: f64| {
                ((u + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2)
                    .cos()
                    .powi(2)
            };
            (0..t_steps)
                .map(|i| {
                    let u0 = i as f64 / t_steps as f64;
                    let u1 = (i + 1) as f64 / t_steps as f64;
                    (1.0 - alpha_profile(u1) / alpha_profile(u0)).clamp(beta_min, beta_max)
                })
                .collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(t_steps);
    let mut acc = 1.0f64;
    for &b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        channel,
        beta,
        alpha_bar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_step_degenerate_bounds() {
        let s = make_schedule(Channel::Pos, ScheduleKind::Linear, 1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn linear_alpha_bar_matches_independent_product() {
        let s = make_schedule(Channel::Pos, ScheduleKind::Linear, 100, 1e-4, 0.05).unwrap();
        let mut product = 1.0f64;
        for t in 1..=100 {
            product *= 1.0 - s.beta(t);
            assert!((s.alpha_bar(t) - product).abs() < 1e-12, "t = {t}");
        }
    }

    #[test]
    fn cosine_schedule_decays_below_one_percent() {
        let s = make_schedule(Channel::Pos, ScheduleKind::Cosine, 100, 1e-5, 0.999).unwrap();
        for t in 2..=100 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(100) < 0.01, "alpha_bar = {}", s.alpha_bar(100));
    }

    #[test]
    fn rejects_invalid_bounds() {
        assert!(make_schedule(Channel::Pos, ScheduleKind::Linear, 10, 0.0, 0.5).is_err());
        assert!(make_schedule(Channel::Pos, ScheduleKind::Linear, 10, 0.5, 0.2).is_err());
        assert!(make_schedule(Channel::Pos, ScheduleKind::Linear, 10, 0.1, 1.0).is_err());
        assert!(make_schedule(Channel::Pos, ScheduleKind::Linear, 0, 0.1, 0.2).is_err());
    }

    proptest! {
        #[test]
        fn alpha_bar_recomputation_and_monotonicity(
            t_steps in 1usize..200,
            lo in 1e-6f64..0.3,
            span in 0.0f64..0.5,
            kind in prop_oneof![Just(ScheduleKind::Linear), Just(ScheduleKind::Cosine)],
        ) {
            let hi = (lo + span).min(0.999);
            let s = make_schedule(Channel::Type, kind, t_steps, lo, hi).unwrap();
            let mut acc = 1.0f64;
            for t in 1..=t_steps {
                let b = s.beta(t);
                prop_assert!(b > 0.0 && b < 1.0);
                acc *= 1.0 - b;
                prop_assert!((s.alpha_bar(t) - acc).abs() < 1e-12);
                prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
    }
}
