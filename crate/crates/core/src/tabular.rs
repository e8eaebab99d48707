//! Discrete flow-matching validation harness.
//!
//! A miniature denoising chain over K-ary type vectors of length m with T
//! steps and no positions/orientations; the denoiser is replaced by full
//! probability tables (one learned source row over states at T plus one
//! learned row per (t, state)). Training drives the trajectory-balance or
//! detailed-balance residuals to zero, and at the fixed point the terminal
//! distribution is proportional to the rewards with Z = ΣR.
//!
//! Unlike the neural path, the source row here is learned and its
//! log-probability enters the generative product, which is what makes
//! Z = ΣR the exact optimum (with a fixed source distribution the
//! realizable optimum shifts by the source mismatch).

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::derive_rng;
use crate::train::{Optimizer, OptimizerKind};

#[derive(Debug, Error, PartialEq)]
pub enum TabularError {
    #[error("tabular spec out of range: {0}")]
    BadSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TabularObjective {
    Tb,
    Db,
}

impl std::str::FromStr for TabularObjective {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tb" => Ok(TabularObjective::Tb),
            "db" => Ok(TabularObjective::Db),
            other => Err(format!("unknown tabular objective {other:?}")),
        }
    }
}

/// A small discrete MDP: m K-ary residues, T steps, per-step resample
/// probability β, one reward per terminal state.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularSpec {
    pub m: usize,
    pub k: usize,
    pub t_total: usize,
    /// Per-step uniform-resample probability, length `t_total`.
    pub beta: Vec<f64>,
    /// Reward per terminal state, length k^m, indexed by base-K digits.
    pub rewards: Vec<f64>,
    pub objective: TabularObjective,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl TabularSpec {
    pub fn n_states(&self) -> usize {
        self.k.pow(self.m as u32)
    }

    pub fn validate(&self) -> Result<(), TabularError> {
        if self.m == 0 || self.m > 3 {
            return Err(TabularError::BadSpec(format!("m = {} not in [1,3]", self.m)));
        }
        if self.k < 2 || self.k > 4 {
            return Err(TabularError::BadSpec(format!("k = {} not in [2,4]", self.k)));
        }
        if self.t_total == 0 || self.t_total > 3 {
            return Err(TabularError::BadSpec(format!(
                "t = {} not in [1,3]",
                self.t_total
            )));
        }
        if self.beta.len() != self.t_total {
            return Err(TabularError::BadSpec("beta length != t".into()));
        }
        if self.beta.iter().any(|b| !(*b > 0.0 && *b <= 1.0)) {
            return Err(TabularError::BadSpec("beta outside (0,1]".into()));
        }
        if self.rewards.len() != self.n_states() {
            return Err(TabularError::BadSpec(format!(
                "rewards length {} != k^m = {}",
                self.rewards.len(),
                self.n_states()
            )));
        }
        if self.rewards.iter().any(|r| !(*r > 0.0)) {
            return Err(TabularError::BadSpec("rewards must be positive".into()));
        }
        Ok(())
    }
}

/// Diagnostics from a trained tabular run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularReport {
    pub objective: TabularObjective,
    pub terminal_probs: Vec<f64>,
    /// L1 distance between the terminal distribution and R/ΣR.
    pub reward_l1: f64,
    pub log_z: f64,
    /// |log Z - log ΣR|.
    pub log_z_error: f64,
    /// max over interior states of |forward flow - backward flow|.
    pub max_flow_residual: f64,
    pub final_loss: f64,
}

/// Fixed backward (noising) transition probability between whole states:
/// Π_j [(1-β)·1[same] + β/K].
fn q_prob(spec: &TabularSpec, from: usize, to: usize, t: usize) -> f64 {
    let beta = spec.beta[t - 1];
    let mut p = 1.0;
    let (mut a, mut b) = (from, to);
    for _ in 0..spec.m {
        let (da, db) = (a % spec.k, b % spec.k);
        a /= spec.k;
        b /= spec.k;
        let stay = if da == db { 1.0 - beta } else { 0.0 };
        p *= stay + beta / spec.k as f64;
    }
    p
}

/// Parameter block: [log_z | init logits (S) | transition logits (T·S·S) |
/// interior log-flows (T·S, DB only)].
struct Tables {
    s: usize,
    t_total: usize,
}

impl Tables {
    fn log_z(&self) -> usize {
        0
    }
    fn init(&self, state: usize) -> usize {
        1 + state
    }
    fn trans(&self, t: usize, from: usize, to: usize) -> usize {
        1 + self.s + (t - 1) * self.s * self.s + from * self.s + to
    }
    fn flow(&self, t: usize, state: usize) -> usize {
        1 + self.s + self.t_total * self.s * self.s + (t - 1) * self.s + state
    }
    fn len(&self) -> usize {
        1 + self.s + self.t_total * self.s * self.s + self.t_total * self.s
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|l| l - lse).collect()
}

struct Model<'a> {
    spec: &'a TabularSpec,
    tables: Tables,
    params: Vec<f64>,
}

impl<'a> Model<'a> {
    fn new(spec: &'a TabularSpec) -> Model<'a> {
        let tables = Tables {
            s: spec.n_states(),
            t_total: spec.t_total,
        };
        let params = vec![0.0; tables.len()];
        Model {
            spec,
            tables,
            params,
        }
    }

    fn init_log_probs(&self) -> Vec<f64> {
        log_softmax(&self.params[1..1 + self.tables.s])
    }

    fn trans_log_probs(&self, t: usize, from: usize) -> Vec<f64> {
        let base = self.tables.trans(t, from, 0);
        log_softmax(&self.params[base..base + self.tables.s])
    }

    /// Terminal distribution under the learned generative chain.
    fn terminal_distribution(&self) -> Vec<f64> {
        let s = self.tables.s;
        let mut prob: Vec<f64> = self.init_log_probs().iter().map(|l| l.exp()).collect();
        for t in (1..=self.spec.t_total).rev() {
            let mut next = vec![0.0f64; s];
            for from in 0..s {
                if prob[from] == 0.0 {
                    continue;
                }
                let row = self.trans_log_probs(t, from);
                for to in 0..s {
                    next[to] += prob[from] * row[to].exp();
                }
            }
            prob = next;
        }
        prob
    }

    /// max |forward flow - backward flow| over interior states (levels T..1).
    ///
    /// Forward flows propagate down from the source (flow Z through the
    /// learned chain); backward flows climb from the rewards through the
    /// fixed noising kernel, which is symmetric in its two states.
    fn flow_residual(&self) -> f64 {
        let s = self.tables.s;
        let z = self.params[self.tables.log_z()].exp();

        // bwd[t] = backward flows at level t, built upward from R at level 0.
        let mut bwd: Vec<Vec<f64>> = vec![self.spec.rewards.clone()];
        for t in 1..=self.spec.t_total {
            let mut up = vec![0.0f64; s];
            for state_t in 0..s {
                for state_tm1 in 0..s {
                    up[state_t] += bwd[t - 1][state_tm1] * q_prob(self.spec, state_tm1, state_t, t);
                }
            }
            bwd.push(up);
        }

        let mut fwd: Vec<f64> = self.init_log_probs().iter().map(|l| z * l.exp()).collect();
        let mut max_resid = 0.0f64;
        for t in (1..=self.spec.t_total).rev() {
            for state in 0..s {
                max_resid = max_resid.max((fwd[state] - bwd[t][state]).abs());
            }
            let mut next = vec![0.0f64; s];
            for from in 0..s {
                let row = self.trans_log_probs(t, from);
                for to in 0..s {
                    next[to] += fwd[from] * row[to].exp();
                }
            }
            fwd = next;
        }
        max_resid
    }
}

/// Enumerate every trajectory (S levels, T+1 states each); feasible for the
/// validated spec sizes.
fn enumerate_trajectories(s: usize, t_total: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = (0..s).map(|i| vec![i]).collect();
    for _ in 0..t_total {
        let mut next = Vec::with_capacity(out.len() * s);
        for traj in &out {
            for i in 0..s {
                let mut t2 = traj.clone();
                t2.push(i);
                next.push(t2);
            }
        }
        out = next;
    }
    out
}

/// Train with the requested objective and report diagnostics.
pub fn tabular_mode(spec: &TabularSpec) -> Result<TabularReport, TabularError> {
    spec.validate()?;
    let s = spec.n_states();
    let mut model = Model::new(spec);
    // Break symmetry deterministically per seed.
    let mut rng = derive_rng(spec.seed, "tabular-init", 0);
    for p in &mut model.params {
        *p = 0.01 * (rng.gen::<f64>() - 0.5);
    }
    model.params[0] = 0.0; // log_z starts at zero

    let mut opt = Optimizer::new(OptimizerKind::Adam, spec.lr, model.params.len());
    let mut final_loss = 0.0;
    match spec.objective {
        TabularObjective::Tb => {
            // Trajectories listed source-first: [sT, ..., s0].
            let trajectories = enumerate_trajectories(s, spec.t_total);
            let n = trajectories.len() as f64;
            for _ in 0..spec.steps {
                let mut grad = vec![0.0f64; model.params.len()];
                let mut loss = 0.0f64;
                for traj in &trajectories {
                    let s_top = traj[0];
                    let s_term = traj[spec.t_total];
                    let init_lp = model.init_log_probs();
                    let mut delta =
                        model.params[model.tables.log_z()] + init_lp[s_top];
                    // generative product and backward product along the path
                    for step in 0..spec.t_total {
                        let t = spec.t_total - step; // timestep of the source half
                        let from = traj[step];
                        let to = traj[step + 1];
                        delta += model.trans_log_probs(t, from)[to];
                        delta -= q_prob(spec, from, to, t).ln();
                    }
                    delta -= spec.rewards[s_term].ln();
                    loss += delta * delta;

                    let coeff = 2.0 * delta / n;
                    grad[model.tables.log_z()] += coeff;
                    for k in 0..s {
                        grad[model.tables.init(k)] +=
                            coeff * (f64::from(u8::from(k == s_top)) - init_lp[k].exp());
                    }
                    for step in 0..spec.t_total {
                        let t = spec.t_total - step;
                        let from = traj[step];
                        let to = traj[step + 1];
                        let row = model.trans_log_probs(t, from);
                        for k in 0..s {
                            grad[model.tables.trans(t, from, k)] +=
                                coeff * (f64::from(u8::from(k == to)) - row[k].exp());
                        }
                    }
                }
                final_loss = loss / n;
                opt.apply(&mut model.params, &grad);
            }
        }
        TabularObjective::Db => {
            for _ in 0..spec.steps {
                let mut grad = vec![0.0f64; model.params.len()];
                let mut loss = 0.0f64;
                let mut n_edges = 0usize;
                let init_lp = model.init_log_probs();
                // Source edges: log F_src + log p_init(s) = log F_T(s).
                for state in 0..s {
                    let delta = model.params[model.tables.log_z()] + init_lp[state]
                        - model.params[model.tables.flow(spec.t_total, state)];
                    loss += delta * delta;
                    n_edges += 1;
                    let coeff = 2.0 * delta;
                    grad[model.tables.log_z()] += coeff;
                    for k in 0..s {
                        grad[model.tables.init(k)] +=
                            coeff * (f64::from(u8::from(k == state)) - init_lp[k].exp());
                    }
                    grad[model.tables.flow(spec.t_total, state)] -= coeff;
                }
                // Interior and terminal edges.
                for t in (1..=spec.t_total).rev() {
                    for from in 0..s {
                        let row = model.trans_log_probs(t, from);
                        for to in 0..s {
                            let log_f_from = model.params[model.tables.flow(t, from)];
                            let log_f_to = if t == 1 {
                                spec.rewards[to].ln()
                            } else {
                                model.params[model.tables.flow(t - 1, to)]
                            };
                            let delta = log_f_from + row[to]
                                - log_f_to
                                - q_prob(spec, from, to, t).ln();
                            loss += delta * delta;
                            n_edges += 1;
                            let coeff = 2.0 * delta;
                            grad[model.tables.flow(t, from)] += coeff;
                            if t > 1 {
                                grad[model.tables.flow(t - 1, to)] -= coeff;
                            }
                            for k in 0..s {
                                grad[model.tables.trans(t, from, k)] +=
                                    coeff * (f64::from(u8::from(k == to)) - row[k].exp());
                            }
                        }
                    }
                }
                let n = n_edges as f64;
                for g in &mut grad {
                    *g /= n;
                }
                final_loss = loss / n;
                opt.apply(&mut model.params, &grad);
            }
        }
    }

    let terminal_probs = model.terminal_distribution();
    let z_target: f64 = spec.rewards.iter().sum();
    let reward_l1: f64 = terminal_probs
        .iter()
        .zip(&spec.rewards)
        .map(|(p, r)| (p - r / z_target).abs())
        .sum();
    let log_z = model.params[model.tables.log_z()];
    Ok(TabularReport {
        objective: spec.objective,
        terminal_probs,
        reward_l1,
        log_z,
        log_z_error: (log_z - z_target.ln()).abs(),
        max_flow_residual: model.flow_residual(),
        final_loss,
    })
}

/// The two-terminal acceptance toy: rewards (1, 3), K = 2, m = 1, T = 2.
pub fn two_state_spec(seed: u64, objective: TabularObjective) -> TabularSpec {
    TabularSpec {
        m: 1,
        k: 2,
        t_total: 2,
        beta: vec![0.5, 0.5],
        rewards: vec![1.0, 3.0],
        objective,
        steps: 4000,
        lr: 0.05,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tb_reaches_the_analytic_fixed_point() {
        for seed in 0..5 {
            let spec = two_state_spec(seed, TabularObjective::Tb);
            let report = tabular_mode(&spec).unwrap();
            assert!(
                report.reward_l1 <= 0.02,
                "seed {seed}: L1 = {}",
                report.reward_l1
            );
            assert!(
                report.log_z_error <= 0.1,
                "seed {seed}: |logZ - log4| = {}",
                report.log_z_error
            );
            assert!(
                report.max_flow_residual < 1e-2,
                "seed {seed}: residual = {}",
                report.max_flow_residual
            );
        }
    }

    #[test]
    fn uniform_rewards_give_uniform_terminal() {
        let spec = TabularSpec {
            m: 2,
            k: 2,
            t_total: 2,
            beta: vec![0.4, 0.6],
            rewards: vec![2.0; 4],
            objective: TabularObjective::Tb,
            steps: 4000,
            lr: 0.05,
            seed: 7,
        };
        let report = tabular_mode(&spec).unwrap();
        assert!(report.reward_l1 <= 0.02, "L1 = {}", report.reward_l1);
    }

    #[test]
    fn db_and_tb_agree_on_terminal_distribution() {
        let tb = tabular_mode(&two_state_spec(3, TabularObjective::Tb)).unwrap();
        let db = tabular_mode(&two_state_spec(3, TabularObjective::Db)).unwrap();
        let l1: f64 = tb
            .terminal_probs
            .iter()
            .zip(&db.terminal_probs)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(l1 <= 0.05, "L1 between DB and TB terminals = {l1}");
        assert!(db.reward_l1 <= 0.05, "DB reward L1 = {}", db.reward_l1);
    }

    #[test]
    fn spec_validation_rejects_out_of_range() {
        let mut spec = two_state_spec(0, TabularObjective::Tb);
        spec.k = 9;
        assert!(spec.validate().is_err());
        let mut spec = two_state_spec(0, TabularObjective::Tb);
        spec.rewards = vec![1.0, 0.0];
        assert!(spec.validate().is_err());
        let mut spec = two_state_spec(0, TabularObjective::Tb);
        spec.t_total = 5;
        assert!(spec.validate().is_err());
    }
}
