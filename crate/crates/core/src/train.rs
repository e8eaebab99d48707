//! Optimizers and the two-phase training loop (diffusion-only warmup, then
//! the weighted trajectory-balance phase).
//!
//! Every random stream is derived statelessly from `(seed, purpose, step)`,
//! so a run resumed from a checkpoint reproduces the next step's batch,
//! noise and trajectories exactly, and a `w = 0` baseline sees bit-identical
//! data to a TB run.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::autodiff::{sum, Tape};
use crate::config::RunConfig;
use crate::dataio::{
    save_checkpoint, CheckpointMeta, ComplexRecord, DataError, RewardRecord,
};
use crate::denoiser::{init_params, predict, DenoiserInput, ParamVector};
use crate::kernels::{ori_forward_marginal, type_marginal, CdrState, ComplexContext, ResidueState};
use crate::objectives::{
    diffusion_losses_on_tape, sample_trajectory, tb_loss_on_tape, ObjectiveError, RewardValue,
};
use crate::schedules::DiffusionSchedules;
use crate::seeding::derive_rng;
use crate::so3::igso3_sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer {other:?}")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OptimizerKind::Sgd => write!(f, "sgd"),
            OptimizerKind::Adam => write!(f, "adam"),
        }
    }
}

/// Plain SGD or Adam with standard defaults (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, dim: usize) -> Optimizer {
        Optimizer {
            kind,
            lr,
            step: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }

    pub fn apply(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
                let bc1 = 1.0 - b1.powi(self.step as i32);
                let bc2 = 1.0 - b2.powi(self.step as i32);
                for i in 0..params.len() {
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    params[i] -= self.lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step} (l_type {l_type}, l_pos {l_pos}, l_ori {l_ori}, l_tb {l_tb:?})")]
    NonFiniteLoss {
        step: u64,
        l_type: f64,
        l_pos: f64,
        l_ori: f64,
        l_tb: Option<f64>,
    },
    #[error("gradient failure at step {step}: {source}")]
    Gradient {
        step: u64,
        source: crate::autodiff::AutodiffError,
    },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("no trainable (complex, region) pairs: dataset and reward cache do not overlap")]
    EmptyPool,
}

/// One structured training-log line (batch means).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogLine {
    pub step: u64,
    pub l_type: f64,
    pub l_pos: f64,
    pub l_ori: f64,
    pub l_tb: Option<f64>,
    pub log_z: f64,
    pub combined: f64,
}

pub struct TrainOutcome {
    pub params: ParamVector,
    pub meta: CheckpointMeta,
    pub log: Vec<TrainLogLine>,
}

struct PoolEntry {
    ctx: ComplexContext,
    reference: CdrState,
    reward: RewardValue,
}

/// Noise the reference to timestep t through the closed-form marginals,
/// recording the position noise used.
fn noise_to_t<R: Rng>(
    s0: &CdrState,
    t: usize,
    scheds: &DiffusionSchedules,
    rng: &mut R,
) -> (CdrState, Vec<Vector3<f64>>) {
    let mut eps = Vec::with_capacity(s0.len());
    let mut residues = Vec::with_capacity(s0.len());
    for r in &s0.residues {
        let dtype = type_marginal(r.dtype, scheds.dtype.alpha_bar(t)).sample(rng);
        let e = Vector3::new(
            rng.sample::<f64, _>(rand_distr::StandardNormal),
            rng.sample::<f64, _>(rand_distr::StandardNormal),
            rng.sample::<f64, _>(rand_distr::StandardNormal),
        );
        let abar = scheds.pos.alpha_bar(t);
        let pos = r.pos * abar.sqrt() + e * (1.0 - abar).sqrt();
        let ori = igso3_sample(
            &ori_forward_marginal(&r.ori, t, &scheds.ori).expect("t >= 1"),
            rng,
        );
        eps.push(e);
        residues.push(ResidueState { dtype, pos, ori });
    }
    (CdrState { t, residues }, eps)
}

/// The two-phase loop. Steps `0..warm_steps` minimize the diffusion losses;
/// the remaining `tb_steps` add `w·L_TB` (trajectory sampling is skipped
/// entirely when `w = 0`, giving the matched diffusion-only baseline).
/// Checkpoints are written under `checkpoint_dir` when given.
pub fn train_loop(
    cfg: &RunConfig,
    records: &[ComplexRecord],
    reward_rows: &[RewardRecord],
    resume: Option<(ParamVector, CheckpointMeta)>,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    let scheds = cfg.schedules().expect("validated schedule config");
    let t_total = scheds.t_total();

    // Deterministic training pool: reward-carrying (complex, region) pairs
    // with usable anchors, sorted by (id, region).
    let mut pool: Vec<PoolEntry> = Vec::new();
    let mut rows: Vec<&RewardRecord> = reward_rows.iter().collect();
    rows.sort_by(|a, b| (&a.id, &a.region).cmp(&(&b.id, &b.region)));
    for row in rows {
        let Some(rec) = records.iter().find(|r| r.id == row.id) else {
            continue;
        };
        if rec.region_anchors(&row.region).is_none() {
            continue;
        }
        let Some((ctx, reference)) = rec.split_region(&row.region) else {
            continue;
        };
        pool.push(PoolEntry {
            ctx,
            reference,
            reward: RewardValue::from_energy(row.energy, cfg.alpha),
        });
    }
    if pool.is_empty() {
        return Err(TrainError::EmptyPool);
    }

    let (mut params, start_step) = match resume {
        Some((p, meta)) => (p, meta.next_step),
        None => (init_params(cfg.seed, &cfg.arch), 0),
    };
    let total_steps = cfg.warm_steps + cfg.tb_steps;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, params.data.len());
    let mut log = Vec::with_capacity((total_steps - start_step) as usize);

    for step in start_step..total_steps {
        let tb_phase = step >= cfg.warm_steps && cfg.w > 0.0;
        let mut batch_rng = derive_rng(cfg.seed, "train-batch", step);
        let b = cfg.batch_size;

        let tape = Tape::new();
        let bound = params.bind(&tape);
        let mut type_terms = Vec::with_capacity(b);
        let mut pos_terms = Vec::with_capacity(b);
        let mut ori_terms = Vec::with_capacity(b);
        let mut tb_terms = Vec::with_capacity(b);
        for i in 0..b {
            let entry = &pool[batch_rng.gen_range(0..pool.len())];
            let mut noise_rng = derive_rng(cfg.seed, "train-noise", step * b as u64 + i as u64);
            let t = noise_rng.gen_range(1..=t_total);
            let (s_t, eps_true) = noise_to_t(&entry.reference, t, &scheds, &mut noise_rng);
            let out = predict(
                &DenoiserInput {
                    s_t: &s_t,
                    ctx: &entry.ctx,
                    t,
                    t_total,
                },
                &bound,
            );
            let (lt, lp, lo) =
                diffusion_losses_on_tape(&out, &s_t, &entry.reference, &eps_true, t, &scheds);
            type_terms.push(lt);
            pos_terms.push(lp);
            ori_terms.push(lo);

            if tb_phase {
                let mut traj_rng =
                    derive_rng(cfg.seed, "train-traj", step * b as u64 + i as u64);
                let grad_step = traj_rng.gen_range(1..=t_total);
                let traj = sample_trajectory(
                    &entry.ctx,
                    &entry.reference,
                    &params,
                    &scheds,
                    &mut traj_rng,
                    grad_step,
                )?;
                tb_terms.push(tb_loss_on_tape(
                    &traj,
                    &entry.reward,
                    &entry.ctx,
                    &scheds,
                    &bound,
                )?);
            }
        }

        let bf = b as f64;
        let l_type = sum(&type_terms) / bf;
        let l_pos = sum(&pos_terms) / bf;
        let l_ori = sum(&ori_terms) / bf;
        let mut loss = l_type + l_pos + l_ori;
        let l_tb = if tb_phase {
            let tb_mean = sum(&tb_terms) / bf;
            loss = loss + tb_mean * cfg.w;
            Some(tb_mean.value())
        } else {
            None
        };

        let line = TrainLogLine {
            step,
            l_type: l_type.value(),
            l_pos: l_pos.value(),
            l_ori: l_ori.value(),
            l_tb,
            log_z: params.log_z(),
            combined: loss.value(),
        };
        if !line.combined.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step,
                l_type: line.l_type,
                l_pos: line.l_pos,
                l_ori: line.l_ori,
                l_tb: line.l_tb,
            });
        }

        let grad = crate::denoiser::backprop(&tape, loss, &bound)
            .map_err(|source| TrainError::Gradient { step, source })?;
        opt.apply(&mut params.data, &grad);
        log.push(line);

        let done = step + 1;
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < total_steps {
                let meta = CheckpointMeta {
                    arch: cfg.arch,
                    t_total,
                    schedule_digest: scheds.digest(),
                    next_step: done,
                    tb_steps_done: done.saturating_sub(cfg.warm_steps),
                };
                save_checkpoint(&dir.join(format!("checkpoint_{done:07}.bin")), &params, &meta)?;
            }
        }
    }

    let meta = CheckpointMeta {
        arch: cfg.arch,
        t_total,
        schedule_digest: scheds.digest(),
        next_step: total_steps,
        tb_steps_done: cfg.tb_steps,
    };
    if let Some(dir) = checkpoint_dir {
        save_checkpoint(&dir.join("checkpoint_final.bin"), &params, &meta)?;
    }
    Ok(TrainOutcome { params, meta, log })
}
