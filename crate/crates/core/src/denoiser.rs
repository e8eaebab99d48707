//! The learnable denoising network: a per-residue perceptron trunk over
//! geometric features with a pooled context summary, and four heads —
//! type probabilities, noise prediction, an orientation update applied to
//! O_j^t through the exponential map, and a scalar log flow-scale used by
//! the detailed-balance objective. log Z lives in the same parameter vector
//! as a named scalar.
//!
//! `predict` is pure and deterministic; the same forward code runs on a
//! recording tape for gradient steps and on a pass-through tape for
//! sampling.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sum, Gradients, Tape, Var};
use crate::kernels::{CategoricalDist, CdrState, ComplexContext};
use crate::seeding::derive_rng;
use crate::so3::Rotation;
use crate::NUM_AA;

/// Positions enter the feature vector scaled by this factor so that
/// Å-magnitude coordinates don't swamp the other features.
pub const POS_SCALE: f64 = 0.1;

/// Parameter layout version; bumped whenever segment offsets change.
pub const LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum DenoiserError {
    #[error("parameter vector has {got} entries but arch {arch:?} needs {want}")]
    DimensionMismatch {
        got: usize,
        want: usize,
        arch: ArchConfig,
    },
}

/// Architecture hyperparameters. The trunk is three tanh layers of
/// `hidden_dim`; `context_k` nearest context residues are mean-pooled into
/// the features; `time_embed_dim` sinusoidal features encode t/T.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub hidden_dim: usize,
    pub context_k: usize,
    pub time_embed_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            hidden_dim: 32,
            context_k: 8,
            time_embed_dim: 8,
        }
    }
}

impl ArchConfig {
    /// Per-residue input feature count.
    pub fn feature_dim(&self) -> usize {
        // onehot(20) + pos(3) + ori(9) + time embed + context pool(33)
        NUM_AA + 3 + 9 + self.time_embed_dim + (NUM_AA + 3 + 1 + 9)
    }

    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("arch serializes"));
        h.update(LAYOUT_VERSION.to_le_bytes());
        hex_prefix(&h.finalize())
    }
}

fn hex_prefix(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Offsets of the named segments inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub w1: std::ops::Range<usize>,
    pub b1: std::ops::Range<usize>,
    pub w2: std::ops::Range<usize>,
    pub b2: std::ops::Range<usize>,
    pub w3: std::ops::Range<usize>,
    pub b3: std::ops::Range<usize>,
    pub type_w: std::ops::Range<usize>,
    pub type_b: std::ops::Range<usize>,
    pub eps_w: std::ops::Range<usize>,
    pub eps_b: std::ops::Range<usize>,
    pub ori_w: std::ops::Range<usize>,
    pub ori_b: std::ops::Range<usize>,
    pub flow_w: std::ops::Range<usize>,
    pub flow_b: usize,
    pub log_z: usize,
    pub total: usize,
}

impl Layout {
    pub fn of(arch: &ArchConfig) -> Layout {
        let f = arch.feature_dim();
        let h = arch.hidden_dim;
        let mut at = 0usize;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let w1 = take(h * f);
        let b1 = take(h);
        let w2 = take(h * h);
        let b2 = take(h);
        let w3 = take(h * h);
        let b3 = take(h);
        let type_w = take(NUM_AA * h);
        let type_b = take(NUM_AA);
        let eps_w = take(3 * h);
        let eps_b = take(3);
        let ori_w = take(3 * h);
        let ori_b = take(3);
        let flow_w = take(h);
        let flow_b = take(1).start;
        let log_z = take(1).start;
        Layout {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            type_w,
            type_b,
            eps_w,
            eps_b,
            ori_w,
            ori_b,
            flow_w,
            flow_b,
            log_z,
            total: at,
        }
    }
}

/// Flat parameter vector with named segments (see [`Layout`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub arch: ArchConfig,
    pub data: Vec<f64>,
}

impl ParamVector {
    pub fn layout(&self) -> Layout {
        Layout::of(&self.arch)
    }

    pub fn log_z(&self) -> f64 {
        self.data[self.layout().log_z]
    }

    pub fn set_log_z(&mut self, v: f64) {
        let idx = self.layout().log_z;
        self.data[idx] = v;
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        let want = self.layout().total;
        if self.data.len() != want {
            return Err(DenoiserError::DimensionMismatch {
                got: self.data.len(),
                want,
                arch: self.arch,
            });
        }
        Ok(())
    }

    /// Bind every parameter as a leaf on `tape`, in layout order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            vars: self.data.iter().map(|&v| tape.leaf(v)).collect(),
            layout: self.layout(),
            arch: self.arch,
        }
    }
}

/// Deterministic initialization: trunk weights uniform with std 1/√fan_in,
/// trunk biases and all heads zero, log_Z = 0. Zero heads make the untrained
/// model the identity-ish denoiser (uniform types, zero noise, unchanged
/// orientations).
pub fn init_params(seed: u64, arch: &ArchConfig) -> ParamVector {
    let layout = Layout::of(arch);
    let mut data = vec![0.0f64; layout.total];
    let mut rng = derive_rng(seed, "denoiser-init", 0);
    let f = arch.feature_dim();
    let h = arch.hidden_dim;
    for (range, fan_in) in [(&layout.w1, f), (&layout.w2, h), (&layout.w3, h)] {
        let a = (3.0 / fan_in as f64).sqrt();
        for i in range.clone() {
            data[i] = rng.gen_range(-a..a);
        }
    }
    ParamVector { arch: *arch, data }
}

/// Parameters bound to a tape as leaves.
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
    pub layout: Layout,
    pub arch: ArchConfig,
}

impl<'t> BoundParams<'t> {
    pub fn log_z(&self) -> Var<'t> {
        self.vars[self.layout.log_z]
    }

    pub fn var(&self, idx: usize) -> Var<'t> {
        self.vars[idx]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    fn seg(&self, r: &std::ops::Range<usize>) -> &[Var<'t>] {
        &self.vars[r.clone()]
    }
}

/// Everything `predict` needs.
pub struct DenoiserInput<'a> {
    pub s_t: &'a CdrState,
    pub ctx: &'a ComplexContext,
    pub t: usize,
    pub t_total: usize,
}

/// Per-residue head outputs on the tape, plus the state-level flow scale.
pub struct DenoiserOutput<'t> {
    pub residues: Vec<ResidueHeads<'t>>,
    /// log F̃_φ(S^t): scalar head over the mean-pooled trunk output.
    pub log_flow_scale: Var<'t>,
}

pub struct ResidueHeads<'t> {
    /// Softmax type probabilities (F head).
    pub type_probs: Vec<Var<'t>>,
    /// Predicted standard Gaussian noise (G head).
    pub eps_hat: [Var<'t>; 3],
    /// Orientation update vector; the H head output is O_j^t · exp(u).
    pub ori_update: [Var<'t>; 3],
    /// exp(u) as a 3×3 on the tape.
    pub ori_update_matrix: [[Var<'t>; 3]; 3],
    /// Value-level H head output O_j^t · exp(u).
    pub ori_hat: Rotation,
}

/// Value-level outputs for sampling paths.
#[derive(Debug, Clone)]
pub struct DenoiserValues {
    pub type_probs: Vec<CategoricalDist>,
    pub eps_hat: Vec<Vector3<f64>>,
    pub ori_hat: Vec<Rotation>,
    pub log_flow_scale: f64,
}

/// Per-residue feature vector: [onehot(d) ‖ x·s ‖ O ‖ time embed ‖ pooled
/// k-nearest context summary].
fn features(input: &DenoiserInput<'_>, arch: &ArchConfig) -> Vec<Vec<f64>> {
    let m = input.s_t.len();
    let mut out = Vec::with_capacity(m);
    for res in &input.s_t.residues {
        let mut f = Vec::with_capacity(arch.feature_dim());
        let mut onehot = vec![0.0; NUM_AA];
        onehot[res.dtype] = 1.0;
        f.extend_from_slice(&onehot);
        f.extend_from_slice(&[
            res.pos.x * POS_SCALE,
            res.pos.y * POS_SCALE,
            res.pos.z * POS_SCALE,
        ]);
        f.extend(res.ori.matrix().iter());

        let t_frac = input.t as f64 / input.t_total.max(1) as f64;
        for i in 0..arch.time_embed_dim / 2 {
            let angle = std::f64::consts::PI * t_frac * (1 << i) as f64;
            f.push(angle.sin());
            f.push(angle.cos());
        }

        // k nearest context residues by distance; summed in ascending
        // distance order so the pool is independent of context ordering.
        let mut by_dist: Vec<(f64, usize)> = input
            .ctx
            .residues
            .iter()
            .enumerate()
            .map(|(i, c)| ((c.pos - res.pos).norm(), i))
            .collect();
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0));
        let k = arch.context_k.min(by_dist.len());
        let mut pool = vec![0.0f64; NUM_AA + 3 + 1 + 9];
        for &(dist, ci) in by_dist.iter().take(k) {
            let c = &input.ctx.residues[ci];
            pool[c.dtype] += 1.0;
            let rel = (c.pos - res.pos) * POS_SCALE;
            pool[NUM_AA] += rel.x;
            pool[NUM_AA + 1] += rel.y;
            pool[NUM_AA + 2] += rel.z;
            pool[NUM_AA + 3] += dist * POS_SCALE;
            for (slot, v) in pool[NUM_AA + 4..].iter_mut().zip(c.ori.matrix().iter()) {
                *slot += v;
            }
        }
        if k > 0 {
            for v in &mut pool {
                *v /= k as f64;
            }
        }
        f.extend_from_slice(&pool);
        debug_assert_eq!(f.len(), arch.feature_dim());
        out.push(f);
    }
    out
}

fn affine_from_consts<'t>(
    w: &[Var<'t>],
    b: &[Var<'t>],
    x: &[f64],
    out_dim: usize,
) -> Vec<Var<'t>> {
    let in_dim = x.len();
    (0..out_dim)
        .map(|j| {
            let mut acc = b[j];
            for (i, &xi) in x.iter().enumerate() {
                if xi != 0.0 {
                    acc = acc + w[j * in_dim + i] * xi;
                }
            }
            acc
        })
        .collect()
}

fn affine<'t>(w: &[Var<'t>], b: &[Var<'t>], x: &[Var<'t>], out_dim: usize) -> Vec<Var<'t>> {
    let in_dim = x.len();
    (0..out_dim)
        .map(|j| {
            let mut acc = b[j];
            for (i, &xi) in x.iter().enumerate() {
                acc = acc + w[j * in_dim + i] * xi;
            }
            acc
        })
        .collect()
}

/// Rodrigues formula on the tape: exp(skew(u)) as a 3×3 of tape scalars.
/// Smooth through u = 0 (the series branch is polynomial in ‖u‖²).
pub fn rodrigues<'t>(u: [Var<'t>; 3]) -> [[Var<'t>; 3]; 3] {
    let s = u[0].square() + u[1].square() + u[2].square(); // θ²
    let (a, b) = if s.value() < 1e-6 {
        // sin θ/θ and (1-cos θ)/θ² as series in θ².
        (
            1.0 - s / 6.0 + s.square() / 120.0,
            0.5 - s / 24.0 + s.square() / 720.0,
        )
    } else {
        let theta = s.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / s)
    };
    let mut out: Vec<Vec<Var<'t>>> = Vec::with_capacity(3);
    for i in 0..3 {
        let mut row = Vec::with_capacity(3);
        for j in 0..3 {
            // δ_ij + A·K_ij + B·(u_i u_j - θ²·δ_ij), K = skew(u).
            let kij = match (i, j) {
                (0, 1) => -u[2],
                (0, 2) => u[1],
                (1, 0) => u[2],
                (1, 2) => -u[0],
                (2, 0) => -u[1],
                (2, 1) => u[0],
                _ => u[0] * 0.0,
            };
            let mut e = a * kij + b * (u[i] * u[j]);
            if i == j {
                e = e + 1.0 - b * s;
            }
            row.push(e);
        }
        out.push(row);
    }
    [
        [out[0][0], out[0][1], out[0][2]],
        [out[1][0], out[1][1], out[1][2]],
        [out[2][0], out[2][1], out[2][2]],
    ]
}

/// Deterministic forward pass. Output invariants: type probabilities are a
/// softmax (uniform at zero-initialized heads), `ori_hat` is always a valid
/// rotation via the exponential-map head.
pub fn predict<'t>(input: &DenoiserInput<'_>, params: &BoundParams<'t>) -> DenoiserOutput<'t> {
    let arch = &params.arch;
    let lay = &params.layout;
    let h = arch.hidden_dim;
    let feats = features(input, arch);

    let mut residues = Vec::with_capacity(feats.len());
    let mut pooled: Option<Vec<Var<'t>>> = None;
    for (res, f) in input.s_t.residues.iter().zip(&feats) {
        let h1: Vec<Var> = affine_from_consts(params.seg(&lay.w1), params.seg(&lay.b1), f, h)
            .into_iter()
            .map(|v| v.tanh())
            .collect();
        let h2: Vec<Var> = affine(params.seg(&lay.w2), params.seg(&lay.b2), &h1, h)
            .into_iter()
            .map(|v| v.tanh())
            .collect();
        let h3: Vec<Var> = affine(params.seg(&lay.w3), params.seg(&lay.b3), &h2, h)
            .into_iter()
            .map(|v| v.tanh())
            .collect();

        // Type head: softmax with a value-level max shift.
        let logits = affine(params.seg(&lay.type_w), params.seg(&lay.type_b), &h3, NUM_AA);
        let max_logit = logits
            .iter()
            .map(|v| v.value())
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<Var> = logits.iter().map(|&l| (l - max_logit).exp()).collect();
        let z = sum(&exps);
        let type_probs: Vec<Var> = exps.iter().map(|&e| e / z).collect();

        let eps = affine(params.seg(&lay.eps_w), params.seg(&lay.eps_b), &h3, 3);
        let ori = affine(params.seg(&lay.ori_w), params.seg(&lay.ori_b), &h3, 3);
        let ori_update = [ori[0], ori[1], ori[2]];
        let ori_update_matrix = rodrigues(ori_update);

        let upd = Matrix3::from_fn(|i, j| ori_update_matrix[i][j].value());
        let ori_hat = Rotation::from_matrix_unchecked(res.ori.matrix() * upd);

        // Accumulate h3 for the state-level flow head.
        match &mut pooled {
            None => pooled = Some(h3.clone()),
            Some(p) => {
                for (pi, hi) in p.iter_mut().zip(&h3) {
                    *pi = *pi + *hi;
                }
            }
        }

        residues.push(ResidueHeads {
            type_probs,
            eps_hat: [eps[0], eps[1], eps[2]],
            ori_update,
            ori_update_matrix,
            ori_hat,
        });
    }

    let m = input.s_t.len().max(1) as f64;
    let pooled = pooled.expect("CDR state has at least one residue");
    let mut flow = params.var(lay.flow_b);
    for (i, p) in pooled.iter().enumerate() {
        flow = flow + params.seg(&lay.flow_w)[i] * (*p / m);
    }

    DenoiserOutput {
        residues,
        log_flow_scale: flow,
    }
}

/// Value-level forward pass for sampling; runs on a pass-through tape.
pub fn predict_values(input: &DenoiserInput<'_>, params: &ParamVector) -> DenoiserValues {
    let tape = Tape::evaluation_only();
    let bound = params.bind(&tape);
    let out = predict(input, &bound);
    DenoiserValues {
        type_probs: out
            .residues
            .iter()
            .map(|r| {
                let probs: Vec<f64> = r.type_probs.iter().map(|v| v.value()).collect();
                CategoricalDist::new(probs).expect("softmax normalizes")
            })
            .collect(),
        eps_hat: out
            .residues
            .iter()
            .map(|r| Vector3::new(r.eps_hat[0].value(), r.eps_hat[1].value(), r.eps_hat[2].value()))
            .collect(),
        ori_hat: out.residues.iter().map(|r| r.ori_hat).collect(),
        log_flow_scale: out.log_flow_scale.value(),
    }
}

/// Exact reverse-mode gradient of `loss` with respect to every parameter,
/// aligned with the [`ParamVector`] layout (log_Z included).
pub fn backprop(
    tape: &Tape,
    loss: Var<'_>,
    params: &BoundParams<'_>,
) -> Result<Vec<f64>, crate::autodiff::AutodiffError> {
    let grads: Gradients = tape.backward(loss)?;
    Ok((0..params.len()).map(|i| grads.get(params.var(i))).collect())
}
