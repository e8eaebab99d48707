//! Rotation-group geometry and the isotropic Gaussian distribution on SO(3).
//!
//! Rotations are stored as 3×3 matrices with quaternion and axis-angle
//! conversions; `exp_map`/`log_map` use numerically stable branches at angles
//! 0 and π. The isotropic Gaussian IGSO(3) is evaluated through the character
//! expansion
//!
//! ```text
//! f(ω) = Σ_{l≥0} (2l+1) · exp(-l(l+1)·ε²/2) · sin((l+½)ω) / sin(ω/2)
//! ```
//!
//! truncated adaptively (term bound below 1e-10, capped at l = 2000), with a
//! Gaussian-on-angle fallback for ε² < 1e-3 where the series needs thousands
//! of terms. `f` is the density of a rotation at angle ω from the mean with
//! respect to the normalized Haar measure; the angle itself has density
//! `(1-cos ω)/π · f(ω)` on [0, π]. Sampling inverts a precomputed 8192-point
//! CDF grid per distinct ε², cached behind a lock (build once, read many).
//!
//! The variance convention `exp(-l(l+1)·ε²/2)` makes ε² the per-axis variance
//! of the tangent-space Gaussian in the small-ε² limit. Codebases using
//! `exp(-l(l+1)·ε²)` need a variance rescale when cross-checking.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use std::collections::HashMap;
use std::sync::{Arc, RwLock};
use thiserror::Error;

use crate::stats::simpson;

/// Below this variance the character series is replaced by the
/// Gaussian-on-angle (Maxwell) approximation.
pub const SMALL_VARIANCE_SWITCH: f64 = 1e-3;

/// Default adaptive series truncation: stop once a term bound drops below
/// this magnitude.
pub const SERIES_TERM_TOL: f64 = 1e-10;

/// Hard cap on the series index l.
pub const SERIES_MAX_TERMS: usize = 2000;

/// Grid size of the cached inverse-CDF table used for sampling.
pub const INV_CDF_GRID: usize = 8192;

#[derive(Debug, Error, PartialEq)]
pub enum So3Error {
    #[error("geodesic scale factor {0} outside [0, 1]")]
    InvalidGamma(f64),
    #[error("IGSO(3) variance must be positive, got {0}")]
    InvalidVariance(f64),
    #[error("matrix is not a rotation: {0}")]
    NotARotation(String),
}

/// A rotation in SO(3), stored as an orthogonal 3×3 matrix with det +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wrap a matrix after checking orthogonality and determinant to 1e-9.
    pub fn try_from_matrix(m: Matrix3<f64>) -> Result<Self, So3Error> {
        let gram = m.transpose() * m;
        let ortho_err = (gram - Matrix3::identity()).abs().max();
        if ortho_err > 1e-9 {
            return Err(So3Error::NotARotation(format!(
                "RᵀR deviates from I by {ortho_err:.3e}"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(So3Error::NotARotation(format!("det = {det}")));
        }
        Ok(Rotation(m))
    }

    /// Wrap a matrix that is known to be a rotation (e.g. a product of
    /// rotations).
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Unit quaternion (w, x, y, z) with w ≥ 0; when w = 0 the first nonzero
    /// vector component is made positive, removing the double-cover
    /// ambiguity.
    pub fn quaternion(&self) -> [f64; 4] {
        let m = &self.0;
        let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        // Shepperd's method: branch on the largest of w², x², y², z².
        let (mut w, mut x, mut y, mut z);
        if tr > m[(0, 0)] && tr > m[(1, 1)] && tr > m[(2, 2)] {
            let s = (tr + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (m[(2, 1)] - m[(1, 2)]) / s;
            y = (m[(0, 2)] - m[(2, 0)]) / s;
            z = (m[(1, 0)] - m[(0, 1)]) / s;
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(2, 1)] - m[(1, 2)]) / s;
            x = 0.25 * s;
            y = (m[(0, 1)] + m[(1, 0)]) / s;
            z = (m[(0, 2)] + m[(2, 0)]) / s;
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(0, 2)] - m[(2, 0)]) / s;
            x = (m[(0, 1)] + m[(1, 0)]) / s;
            y = 0.25 * s;
            z = (m[(1, 2)] + m[(2, 1)]) / s;
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            w = (m[(1, 0)] - m[(0, 1)]) / s;
            x = (m[(0, 2)] + m[(2, 0)]) / s;
            y = (m[(1, 2)] + m[(2, 1)]) / s;
            z = 0.25 * s;
        }
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        w /= norm;
        x /= norm;
        y /= norm;
        z /= norm;
        let flip = if w != 0.0 {
            w < 0.0
        } else if x != 0.0 {
            x < 0.0
        } else if y != 0.0 {
            y < 0.0
        } else {
            z < 0.0
        };
        if flip {
            [-w, -x, -y, -z]
        } else {
            [w, x, y, z]
        }
    }

    /// Build from a quaternion (w, x, y, z); the input is normalized.
    pub fn from_quaternion(q: [f64; 4]) -> Result<Self, So3Error> {
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Err(So3Error::NotARotation(format!("quaternion norm {n}")));
        }
        let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
        let m = Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        );
        Ok(Rotation(m))
    }

    /// Rotation angle in [0, π].
    pub fn angle(&self) -> f64 {
        let c = ((self.0.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues rotation about `v/‖v‖` by angle `‖v‖`; `exp_map(0) = I`.
pub fn exp_map(v: &Vector3<f64>) -> Rotation {
    let theta2 = v.norm_squared();
    let theta = theta2.sqrt();
    // sin θ / θ and (1 - cos θ) / θ² with series fallbacks near zero.
    let (a, b) = if theta < 1e-4 {
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
        )
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = skew(v);
    Rotation(Matrix3::identity() + k * a + k * k * b)
}

/// Principal logarithm with angle in [0, π].
///
/// Three branches: series near θ = 0, largest-diagonal axis extraction near
/// θ = π, and the closed form θ/(2 sin θ)·(R - Rᵀ) in between.
pub fn log_map(r: &Rotation) -> Vector3<f64> {
    let m = r.matrix();
    let c = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = c.acos();
    let w = vee(&(m - m.transpose())) / 2.0; // = sin θ · axis

    if theta < 1e-4 {
        // θ/sin θ = 1 + θ²/6 + 7θ⁴/360 + O(θ⁶)
        let t2 = theta * theta;
        return w * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0);
    }
    if theta < std::f64::consts::PI - 1e-5 {
        return w * (theta / theta.sin());
    }

    // Near π: R ≈ 2nnᵀ - I. Extract the axis from the largest diagonal.
    let d = [m[(0, 0)], m[(1, 1)], m[(2, 2)]];
    let i = if d[0] >= d[1] && d[0] >= d[2] {
        0
    } else if d[1] >= d[2] {
        1
    } else {
        2
    };
    let (j, k) = ((i + 1) % 3, (i + 2) % 3);
    let ni = ((d[i] + 1.0).max(0.0) / 2.0).sqrt();
    let mut n = Vector3::zeros();
    n[i] = ni;
    n[j] = (m[(i, j)] + m[(j, i)]) / (4.0 * ni);
    n[k] = (m[(i, k)] + m[(k, i)]) / (4.0 * ni);
    n /= n.norm();

    // Recover θ from |w| = sin θ (θ = π - asin|w|) and align the axis sign
    // with w when it is distinguishable; otherwise canonicalize.
    let s = w.norm();
    let theta = std::f64::consts::PI - s.clamp(0.0, 1.0).asin();
    if s > 1e-10 {
        if n.dot(&w) < 0.0 {
            n = -n;
        }
    } else {
        let flip = if n.x != 0.0 {
            n.x < 0.0
        } else if n.y != 0.0 {
            n.y < 0.0
        } else {
            n.z < 0.0
        };
        if flip {
            n = -n;
        }
    }
    n * theta
}

/// Geodesic scaling toward the identity: `exp(γ·log R)` for γ in [0, 1].
pub fn geodesic_scale(gamma: f64, r: &Rotation) -> Result<Rotation, So3Error> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(So3Error::InvalidGamma(gamma));
    }
    Ok(exp_map(&(log_map(r) * gamma)))
}

/// Geodesic angular distance ‖log(AᵀB)‖ in [0, π].
pub fn rotation_distance(a: &Rotation, b: &Rotation) -> f64 {
    log_map(&a.transpose().compose(b)).norm()
}

/// Haar-uniform rotation via a normalized 4D Gaussian quaternion.
pub fn sample_uniform<R: Rng>(rng: &mut R) -> Rotation {
    loop {
        let q: [f64; 4] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n2 = q.iter().map(|x| x * x).sum::<f64>();
        if n2 > 1e-12 {
            return Rotation::from_quaternion(q).expect("nonzero quaternion");
        }
    }
}

/// Uniform direction on the unit sphere.
pub fn sample_unit_vector<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// Angle density of the normalized Haar measure: (1 - cos ω)/π on [0, π].
pub fn haar_angle_density(omega: f64) -> f64 {
    (1.0 - omega.cos()) / std::f64::consts::PI
}

/// Parameters of an isotropic Gaussian on SO(3).
#[derive(Debug, Clone, Copy)]
pub struct IgSo3Params {
    pub mean: Rotation,
    /// Concentration parameter ε² (per-axis tangent variance in the small-ε²
    /// limit).
    pub variance: f64,
    pub truncation: Truncation,
}

/// Series truncation policy.
#[derive(Debug, Clone, Copy)]
pub struct Truncation {
    /// Stop once the term bound falls below this.
    pub tol: f64,
    /// Hard cap on the series index.
    pub max_terms: usize,
}

impl Default for Truncation {
    fn default() -> Self {
        Truncation {
            tol: SERIES_TERM_TOL,
            max_terms: SERIES_MAX_TERMS,
        }
    }
}

impl IgSo3Params {
    pub fn new(mean: Rotation, variance: f64) -> Result<Self, So3Error> {
        if !(variance.is_finite() && variance > 0.0) {
            return Err(So3Error::InvalidVariance(variance));
        }
        Ok(IgSo3Params {
            mean,
            variance,
            truncation: Truncation::default(),
        })
    }
}

/// Unnormalized Haar-relative density f(ω) and its ω-derivative from the
/// truncated character series.
///
/// Uses the Dirichlet-kernel identity sin((l+½)ω)/sin(ω/2) = 1 + 2Σ_{k≤l}
/// cos kω, accumulating the cosine/sine partial sums with a Chebyshev
/// recurrence; this is exact at ω = 0 and π and costs O(l_max) total.
fn series_f_and_deriv(omega: f64, eps2: f64, trunc: Truncation) -> (f64, f64) {
    let (mut f, mut df) = (0.0f64, 0.0f64);
    let (cos1, sin1) = (omega.cos(), omega.sin());
    // cos(kω), sin(kω) for the current k, advanced by recurrence.
    let (mut ck, mut sk) = (1.0f64, 0.0f64);
    let mut sum_cos = 0.0f64; // Σ_{k=1..l} cos kω
    let mut sum_ksin = 0.0f64; // Σ_{k=1..l} k sin kω
    for l in 0..=trunc.max_terms {
        if l > 0 {
            let c_next = ck * cos1 - sk * sin1;
            let s_next = sk * cos1 + ck * sin1;
            ck = c_next;
            sk = s_next;
            sum_cos += ck;
            sum_ksin += l as f64 * sk;
        }
        let lf = l as f64;
        let a = (2.0 * lf + 1.0) * (-lf * (lf + 1.0) * eps2 / 2.0).exp();
        f += a * (1.0 + 2.0 * sum_cos);
        df += a * (-2.0 * sum_ksin);
        // |u_l| ≤ 2l+1 and |u_l'| ≤ l(l+1) bound the next term sizes.
        let bound = a * ((2.0 * lf + 1.0).max(lf * (lf + 1.0)));
        if l >= 2 && bound < trunc.tol {
            break;
        }
    }
    (f, df)
}

/// log of the Gaussian-on-angle (Maxwell) shape ω²·exp(-ω²/2ε²) relative to
/// the Haar angle factor, i.e. log of the unnormalized Haar-relative density,
/// plus its derivative. Stable at ω → 0.
fn maxwell_log_f_and_deriv(omega: f64, eps2: f64) -> (f64, f64) {
    // f(ω) ∝ ω² e^{-ω²/2ε²} / (1 - cos ω) = (ω/sin(ω/2))²/2 · e^{-ω²/2ε²}
    let half = omega / 2.0;
    let ratio = if omega < 1e-12 { 2.0 } else { omega / half.sin() };
    let logf = (ratio * ratio / 2.0).ln() - omega * omega / (2.0 * eps2);
    // d/dω [2 ln(ω) - ln(1-cos ω)] = 2/ω - cot(ω/2), series near zero.
    let corr = if omega < 0.5 {
        omega / 6.0 + omega.powi(3) / 360.0 + omega.powi(5) / 15120.0
    } else {
        2.0 / omega - half.cos() / half.sin()
    };
    (logf, -omega / eps2 + corr)
}

/// Unnormalized Haar-relative density and derivative, branch-selected.
fn raw_f_and_deriv(omega: f64, eps2: f64, trunc: Truncation) -> (f64, f64) {
    if eps2 < SMALL_VARIANCE_SWITCH {
        let (logf, dlogf) = maxwell_log_f_and_deriv(omega, eps2);
        let f = logf.exp();
        (f, f * dlogf)
    } else {
        series_f_and_deriv(omega, eps2, trunc)
    }
}

/// Cached per-ε² data: normalizer and the CDF grid used for inverse-CDF
/// sampling.
pub struct IgSo3Table {
    pub eps2: f64,
    /// Normalizer Z = ∫ haar(ω)·f_raw(ω) dω; the normalized Haar-relative
    /// density is f_raw/Z.
    pub norm: f64,
    /// Upper end of the tabulated angle range (π, shrunk for tiny ε²).
    pub omega_max: f64,
    /// CDF of the angle density at INV_CDF_GRID uniformly spaced angles.
    cdf: Vec<f64>,
    trunc: Truncation,
}

impl IgSo3Table {
    fn build(eps2: f64, trunc: Truncation) -> IgSo3Table {
        // For concentrated distributions, restrict the grid to where the
        // mass lives; beyond 30σ the density is below 1e-195.
        let omega_max = if eps2 < SMALL_VARIANCE_SWITCH {
            (30.0 * eps2.sqrt()).min(std::f64::consts::PI)
        } else {
            std::f64::consts::PI
        };
        let angle_density_raw =
            |w: f64| haar_angle_density(w) * raw_f_and_deriv(w, eps2, trunc).0;
        let norm = simpson(angle_density_raw, 0.0, omega_max, 1 << 16);

        let n = INV_CDF_GRID;
        let h = omega_max / (n - 1) as f64;
        let mut cdf = Vec::with_capacity(n);
        let mut acc = 0.0f64;
        let mut prev = angle_density_raw(0.0);
        cdf.push(0.0);
        for i in 1..n {
            let w = h * i as f64;
            let cur = angle_density_raw(w);
            acc += 0.5 * (prev + cur) * h;
            prev = cur;
            cdf.push(acc / norm);
        }
        // Guard against the trapezoid sum drifting past 1.
        let last = *cdf.last().expect("nonempty");
        for v in &mut cdf {
            *v = (*v / last.max(1.0)).min(1.0);
        }
        IgSo3Table {
            eps2,
            norm,
            omega_max,
            cdf,
            trunc,
        }
    }

    /// Normalized angle density (includes the Haar factor); integrates to 1
    /// over [0, π].
    pub fn angle_density(&self, omega: f64) -> f64 {
        if !(0.0..=std::f64::consts::PI).contains(&omega) {
            return 0.0;
        }
        haar_angle_density(omega) * raw_f_and_deriv(omega, self.eps2, self.trunc).0 / self.norm
    }

    /// log of the normalized Haar-relative density at angle ω, and its
    /// ω-derivative.
    pub fn log_f_and_deriv(&self, omega: f64) -> (f64, f64) {
        if self.eps2 < SMALL_VARIANCE_SWITCH {
            let (logf, dlogf) = maxwell_log_f_and_deriv(omega, self.eps2);
            (logf - self.norm.ln(), dlogf)
        } else {
            let (f, df) = series_f_and_deriv(omega, self.eps2, self.trunc);
            let f = f.max(1e-300);
            (f.ln() - self.norm.ln(), df / f)
        }
    }

    /// Draw an angle by inverse-CDF with linear interpolation on the grid.
    pub fn sample_angle<R: Rng>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        let idx = self.cdf.partition_point(|&c| c < u);
        let h = self.omega_max / (INV_CDF_GRID - 1) as f64;
        if idx == 0 {
            return 0.0;
        }
        if idx >= self.cdf.len() {
            return self.omega_max;
        }
        let (c0, c1) = (self.cdf[idx - 1], self.cdf[idx]);
        let frac = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
        h * ((idx - 1) as f64 + frac)
    }

    /// CDF of the angle distribution, interpolated from the grid.
    pub fn angle_cdf(&self, omega: f64) -> f64 {
        if omega <= 0.0 {
            return 0.0;
        }
        if omega >= self.omega_max {
            return 1.0;
        }
        let h = self.omega_max / (INV_CDF_GRID - 1) as f64;
        let pos = omega / h;
        let idx = (pos.floor() as usize).min(INV_CDF_GRID - 2);
        let frac = pos - idx as f64;
        self.cdf[idx] * (1.0 - frac) + self.cdf[idx + 1] * frac
    }
}

static TABLE_CACHE: RwLock<Option<HashMap<u64, Arc<IgSo3Table>>>> = RwLock::new(None);

/// Fetch (building on first use) the cached table for a given ε².
pub fn igso3_table(eps2: f64) -> Result<Arc<IgSo3Table>, So3Error> {
    if !(eps2.is_finite() && eps2 > 0.0) {
        return Err(So3Error::InvalidVariance(eps2));
    }
    let key = eps2.to_bits();
    {
        let guard = TABLE_CACHE.read().expect("table cache poisoned");
        if let Some(map) = guard.as_ref() {
            if let Some(t) = map.get(&key) {
                return Ok(Arc::clone(t));
            }
        }
    }
    let table = Arc::new(IgSo3Table::build(eps2, Truncation::default()));
    let mut guard = TABLE_CACHE.write().expect("table cache poisoned");
    let map = guard.get_or_insert_with(HashMap::new);
    Ok(Arc::clone(map.entry(key).or_insert(table)))
}

/// Normalized density of the rotation angle under IGSO(3), including the
/// Haar factor; integrates to 1 on [0, π].
pub fn igso3_angle_density(omega: f64, eps2: f64) -> Result<f64, So3Error> {
    Ok(igso3_table(eps2)?.angle_density(omega))
}

/// Draw a rotation: `mean · exp(ω·û)` with ω from the inverse CDF of the
/// angle density and û uniform on S².
pub fn igso3_sample<R: Rng>(params: &IgSo3Params, rng: &mut R) -> Rotation {
    let table = igso3_table(params.variance).expect("validated variance");
    let omega = table.sample_angle(rng);
    let axis = sample_unit_vector(rng);
    params.mean.compose(&exp_map(&(axis * omega)))
}

/// Log density of `r` under IGSO(3) with respect to the normalized Haar
/// measure.
pub fn igso3_log_prob(r: &Rotation, params: &IgSo3Params) -> Result<f64, So3Error> {
    let table = igso3_table(params.variance)?;
    let omega = rotation_distance(&params.mean, r);
    Ok(table.log_f_and_deriv(omega).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::derive_rng;
    use crate::stats::{ks_statistic, ks_two_sample};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn random_rotation(seed: u64) -> Rotation {
        let mut rng = derive_rng(seed, "so3-test", 0);
        sample_uniform(&mut rng)
    }

    #[test]
    fn exp_map_of_zero_is_identity() {
        let r = exp_map(&Vector3::zeros());
        assert_eq!(r.matrix(), &Matrix3::identity());
    }

    #[test]
    fn exp_map_quarter_turn_about_z_maps_x_to_y() {
        let r = exp_map(&Vector3::new(0.0, 0.0, PI / 2.0));
        let y = r.rotate(&Vector3::x());
        assert!((y - Vector3::y()).norm() < 1e-12);
    }

    #[test]
    fn log_map_of_identity_is_zero() {
        assert_eq!(log_map(&Rotation::identity()), Vector3::zeros());
    }

    #[test]
    fn log_map_of_half_turn_about_z() {
        let r = exp_map(&Vector3::new(0.0, 0.0, PI));
        let v = log_map(&r);
        assert!((v - Vector3::new(0.0, 0.0, PI)).norm() < 1e-9, "v = {v:?}");
    }

    #[test]
    fn round_trip_log_exp_over_seeded_samples() {
        let mut rng = derive_rng(11, "so3-roundtrip", 0);
        for _ in 0..1000 {
            let axis = sample_unit_vector(&mut rng);
            let angle: f64 = rand::Rng::gen_range(&mut rng, 0.0..PI - 1e-9);
            let v = axis * angle;
            let w = log_map(&exp_map(&v));
            assert!((w - v).norm() < 1e-9, "v = {v:?}, w = {w:?}");
        }
    }

    #[test]
    fn round_trip_exp_log_over_uniform_rotations() {
        let mut rng = derive_rng(12, "so3-roundtrip", 1);
        for _ in 0..1000 {
            let r = sample_uniform(&mut rng);
            let r2 = exp_map(&log_map(&r));
            assert!((r2.matrix() - r.matrix()).abs().max() < 1e-9);
        }
    }

    #[test]
    fn round_trip_is_stable_at_branch_points() {
        for &angle in &[1e-9, 1e-7, 1e-6, 1e-4, PI - 1e-4, PI - 1e-6, PI - 1e-8, PI] {
            let mut rng = derive_rng(13, "so3-branch", angle.to_bits());
            for _ in 0..50 {
                let v = sample_unit_vector(&mut rng) * angle;
                let r = exp_map(&v);
                let back = exp_map(&log_map(&r));
                assert!(
                    (back.matrix() - r.matrix()).abs().max() < 1e-6,
                    "angle {angle}"
                );
                if angle < PI - 1e-8 {
                    assert!((log_map(&r) - v).norm() < 1e-6, "angle {angle}");
                }
            }
        }
    }

    #[test]
    fn geodesic_scale_endpoints_and_half() {
        let r = random_rotation(3);
        let one = geodesic_scale(1.0, &r).unwrap();
        assert!((one.matrix() - r.matrix()).abs().max() < 1e-12);
        let zero = geodesic_scale(0.0, &r).unwrap();
        assert!((zero.matrix() - Matrix3::identity()).abs().max() < 1e-12);

        let theta = 1.3;
        let rz = exp_map(&Vector3::new(0.0, 0.0, theta));
        let half = geodesic_scale(0.5, &rz).unwrap();
        let expect = exp_map(&Vector3::new(0.0, 0.0, theta / 2.0));
        assert!((half.matrix() - expect.matrix()).abs().max() < 1e-12);
    }

    #[test]
    fn geodesic_scale_rejects_out_of_range() {
        let r = random_rotation(4);
        assert!(matches!(
            geodesic_scale(-0.1, &r),
            Err(So3Error::InvalidGamma(_))
        ));
        assert!(matches!(
            geodesic_scale(1.1, &r),
            Err(So3Error::InvalidGamma(_))
        ));
    }

    proptest! {
        #[test]
        fn geodesic_scale_composes_multiplicatively(seed in 0u64..5000, g1 in 0.0f64..=1.0, g2 in 0.0f64..=1.0) {
            let r = random_rotation(seed);
            let a = geodesic_scale(g1, &geodesic_scale(g2, &r).unwrap()).unwrap();
            let b = geodesic_scale(g1 * g2, &r).unwrap();
            prop_assert!((a.matrix() - b.matrix()).abs().max() < 1e-9);
        }

        #[test]
        fn quaternion_round_trip_and_canonical_w(seed in 0u64..5000) {
            let r = random_rotation(seed);
            let q = r.quaternion();
            prop_assert!(q[0] >= 0.0);
            let n: f64 = q.iter().map(|x| x * x).sum::<f64>();
            prop_assert!((n - 1.0).abs() < 1e-9);
            let r2 = Rotation::from_quaternion(q).unwrap();
            prop_assert!((r2.matrix() - r.matrix()).abs().max() < 1e-9);
        }

        #[test]
        fn rotation_distance_symmetry(sa in 0u64..3000, sb in 3000u64..6000) {
            let a = random_rotation(sa);
            let b = random_rotation(sb);
            prop_assert!((rotation_distance(&a, &b) - rotation_distance(&b, &a)).abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_distance_basics() {
        let r = random_rotation(5);
        assert!(rotation_distance(&r, &r).abs() < 1e-12);
        for &theta in &[0.3f64, 1.0, 2.5] {
            let mut rng = derive_rng(6, "so3-dist", theta.to_bits());
            let axis = sample_unit_vector(&mut rng);
            let d = rotation_distance(&Rotation::identity(), &exp_map(&(axis * theta)));
            assert!((d - theta).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_samples_have_zero_mean_matrix() {
        let mut rng = derive_rng(7, "so3-uniform", 0);
        let n = 100_000;
        let mut acc = Matrix3::<f64>::zeros();
        for _ in 0..n {
            acc += sample_uniform(&mut rng).matrix();
        }
        acc /= n as f64;
        assert!(acc.abs().max() < 0.02, "mean = {acc}");
    }

    #[test]
    fn uniform_angle_histogram_matches_haar_density() {
        let mut rng = derive_rng(8, "so3-uniform", 1);
        let n = 100_000;
        let mut angles: Vec<f64> = (0..n).map(|_| sample_uniform(&mut rng).angle()).collect();
        // Haar angle CDF: (ω - sin ω)/π.
        let ks = ks_statistic(&mut angles, |w| (w - w.sin()) / PI);
        assert!(ks < 0.01, "ks = {ks}");
    }

    #[test]
    fn uniform_sampling_is_seeded() {
        let mut a = derive_rng(9, "so3-seed", 0);
        let mut b = derive_rng(9, "so3-seed", 0);
        let mut c = derive_rng(10, "so3-seed", 0);
        let ra = sample_uniform(&mut a);
        assert_eq!(ra.matrix(), sample_uniform(&mut b).matrix());
        assert_ne!(ra.matrix(), sample_uniform(&mut c).matrix());
    }

    #[test]
    fn angle_density_normalizes_for_spot_variances() {
        for &eps2 in &[0.01, 0.1, 1.0] {
            let z = simpson(
                |w| igso3_angle_density(w, eps2).unwrap(),
                0.0,
                PI,
                400_000,
            );
            assert!((z - 1.0).abs() < 1e-6, "eps2 = {eps2}: z = {z}");
        }
    }

    #[test]
    fn tiny_variance_concentrates_angle_mass() {
        let eps2 = 0.001;
        let tail = simpson(
            |w| igso3_angle_density(w, eps2).unwrap(),
            0.5,
            PI,
            200_000,
        );
        assert!(tail < 1e-3, "tail mass = {tail}");
    }

    #[test]
    fn large_variance_approaches_haar_pointwise() {
        let eps2 = 100.0;
        for i in 0..=200 {
            let w = PI * i as f64 / 200.0;
            let d = igso3_angle_density(w, eps2).unwrap();
            assert!((d - haar_angle_density(w)).abs() < 1e-3, "w = {w}");
        }
    }

    #[test]
    fn angle_density_rejects_nonpositive_variance() {
        assert!(igso3_angle_density(0.3, 0.0).is_err());
        assert!(igso3_angle_density(0.3, -1.0).is_err());
        assert!(IgSo3Params::new(Rotation::identity(), 0.0).is_err());
    }

    #[test]
    fn samples_concentrate_for_tiny_variance() {
        let mean = random_rotation(20);
        let params = IgSo3Params::new(mean, 1e-8).unwrap();
        let mut rng = derive_rng(21, "igso3", 0);
        for _ in 0..1000 {
            let s = igso3_sample(&params, &mut rng);
            assert!(rotation_distance(&s, &mean) < 1e-2);
        }
    }

    #[test]
    fn sample_angles_match_density_ks() {
        for &eps2 in &[0.05, 0.5] {
            let params = IgSo3Params::new(Rotation::identity(), eps2).unwrap();
            let mut rng = derive_rng(22, "igso3-ks", eps2.to_bits());
            let n = 100_000;
            let mut angles: Vec<f64> = (0..n)
                .map(|_| igso3_sample(&params, &mut rng).angle())
                .collect();
            let table = igso3_table(eps2).unwrap();
            let ks = ks_statistic(&mut angles, |w| table.angle_cdf(w));
            assert!(ks < 0.02, "eps2 = {eps2}: ks = {ks}");
        }
    }

    #[test]
    fn sampling_is_left_invariant() {
        let eps2 = 0.2;
        let mean = random_rotation(23);
        let pm = IgSo3Params::new(mean, eps2).unwrap();
        let pi_ = IgSo3Params::new(Rotation::identity(), eps2).unwrap();
        let n = 100_000;
        let mut rng_a = derive_rng(24, "igso3-inv", 0);
        let mut rng_b = derive_rng(24, "igso3-inv", 1);
        let mut a: Vec<f64> = (0..n)
            .map(|_| rotation_distance(&mean, &igso3_sample(&pm, &mut rng_a)))
            .collect();
        let mut b: Vec<f64> = (0..n)
            .map(|_| {
                rotation_distance(
                    &Rotation::identity(),
                    &mean.compose(&igso3_sample(&pi_, &mut rng_b)).compose(
                        &mean.transpose(),
                    ),
                )
            })
            .collect();
        let ks = ks_two_sample(&mut a, &mut b);
        assert!(ks < 0.02, "ks = {ks}");
    }

    #[test]
    fn log_prob_is_maximal_at_the_mean() {
        let mean = random_rotation(25);
        let params = IgSo3Params::new(mean, 0.1).unwrap();
        let at_mean = igso3_log_prob(&mean, &params).unwrap();
        let mut rng = derive_rng(26, "igso3-max", 0);
        for _ in 0..100 {
            let perturb =
                exp_map(&(sample_unit_vector(&mut rng) * rand::Rng::gen_range(&mut rng, 0.05..PI)));
            let lp = igso3_log_prob(&mean.compose(&perturb), &params).unwrap();
            assert!(lp < at_mean);
        }
    }

    #[test]
    fn monte_carlo_entropy_matches_quadrature() {
        let eps2 = 0.3;
        let params = IgSo3Params::new(Rotation::identity(), eps2).unwrap();
        let table = igso3_table(eps2).unwrap();
        // E[log f] by quadrature of angle_density · log f.
        let expect = simpson(
            |w| table.angle_density(w) * table.log_f_and_deriv(w).0,
            0.0,
            PI,
            200_000,
        );
        let mut rng = derive_rng(31, "igso3-ent", 0);
        let n = 100_000;
        let mc: f64 = (0..n)
            .map(|_| igso3_log_prob(&igso3_sample(&params, &mut rng), &params).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mc - expect).abs() < 0.01, "mc = {mc}, quad = {expect}");
    }

    #[test]
    fn log_prob_left_invariance_is_exact() {
        let mean = random_rotation(28);
        let r = random_rotation(29);
        let pm = IgSo3Params::new(mean, 0.7).unwrap();
        let pi_ = IgSo3Params::new(Rotation::identity(), 0.7).unwrap();
        let a = igso3_log_prob(&r, &pm).unwrap();
        let b = igso3_log_prob(&mean.transpose().compose(&r), &pi_).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn igso3_sampling_is_reproducible() {
        let params = IgSo3Params::new(random_rotation(30), 0.4).unwrap();
        let mut a = derive_rng(31, "igso3-repro", 0);
        let mut b = derive_rng(31, "igso3-repro", 0);
        for _ in 0..32 {
            assert_eq!(
                igso3_sample(&params, &mut a).matrix(),
                igso3_sample(&params, &mut b).matrix()
            );
        }
    }

    #[test]
    fn series_derivative_matches_finite_differences() {
        // Probe angles within the distribution's support; far tail values
        // sit at densities ~e^-25 where the oscillating series cancels and
        // neither side of the comparison is meaningful.
        let cases: &[(f64, &[f64])] = &[
            (0.01, &[0.05, 0.15, 0.3]),
            (0.2, &[0.1, 0.7, 1.4]),
            (2.0, &[0.1, 0.7, 1.9, 3.0]),
        ];
        for &(eps2, angles) in cases {
            let table = igso3_table(eps2).unwrap();
            for &w in angles {
                let h = 1e-6;
                let (_, d) = table.log_f_and_deriv(w);
                let fd =
                    (table.log_f_and_deriv(w + h).0 - table.log_f_and_deriv(w - h).0) / (2.0 * h);
                let rel = (d - fd).abs() / d.abs().max(1.0);
                assert!(rel < 1e-4, "eps2 = {eps2}, w = {w}: {d} vs {fd}");
            }
        }
    }
}
