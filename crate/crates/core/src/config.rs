//! Run configuration: a flat dotted-key text format (`key = value`, `#`
//! comments). Unknown keys are hard errors — a silently ignored typo in a
//! hyperparameter name is the main operational hazard. The effective config
//! (defaults filled) serializes deterministically and reloads to an
//! identical run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::denoiser::ArchConfig;
use crate::reward::EnergyModel;
use crate::schedules::{make_schedule, Channel, DiffusionSchedules, ScheduleKind};
use crate::tabular::{TabularObjective, TabularSpec};
use crate::train::OptimizerKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("line {0}: expected `key = value`, got {1:?}")]
    Syntax(usize, String),
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("key {key}: cannot parse {value:?} as {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("key {key}: {msg}")]
    Invalid { key: String, msg: String },
    #[error("duplicate key {0:?}")]
    DuplicateKey(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelScheduleConfig {
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
}

/// Everything a run needs; see `RunConfig::default` for the defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Denoising step count T.
    pub t_total: usize,
    pub sched_type: ChannelScheduleConfig,
    pub sched_pos: ChannelScheduleConfig,
    pub sched_ori: ChannelScheduleConfig,
    pub arch: ArchConfig,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub warm_steps: u64,
    pub tb_steps: u64,
    pub batch_size: usize,
    pub checkpoint_every: u64,
    /// TB loss weight w.
    pub w: f64,
    /// Reward temperature α.
    pub alpha: f64,
    pub reward_eps_well: f64,
    pub reward_r_contact: f64,
    pub reward_r_clash: f64,
    pub reward_kappa: f64,
    pub reward_affinity_seed: u64,
    pub dataset_path: PathBuf,
    pub rewards_path: PathBuf,
    pub n_complexes: usize,
    pub sample_n: usize,
    pub sample_region: String,
    pub tabular_m: usize,
    pub tabular_k: usize,
    pub tabular_t: usize,
    pub tabular_beta: Vec<f64>,
    pub tabular_rewards: Vec<f64>,
    pub tabular_objective: TabularObjective,
    pub tabular_steps: usize,
    pub tabular_lr: f64,
    pub tabular_tol_l1: f64,
    pub tabular_tol_log_z: f64,
    pub tabular_tol_residual: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: "out".into(),
            t_total: 100,
            sched_type: ChannelScheduleConfig {
                kind: ScheduleKind::Linear,
                beta_min: 1e-4,
                beta_max: 0.1,
            },
            sched_pos: ChannelScheduleConfig {
                kind: ScheduleKind::Linear,
                beta_min: 1e-4,
                beta_max: 0.05,
            },
            sched_ori: ChannelScheduleConfig {
                kind: ScheduleKind::Linear,
                beta_min: 1e-4,
                beta_max: 0.05,
            },
            arch: ArchConfig::default(),
            optimizer: OptimizerKind::Sgd,
            lr: 1e-6,
            warm_steps: 2000,
            tb_steps: 200,
            batch_size: 8,
            checkpoint_every: 500,
            w: 5e-6,
            alpha: 0.1,
            reward_eps_well: 1.0,
            reward_r_contact: 8.0,
            reward_r_clash: 3.0,
            reward_kappa: 10.0,
            reward_affinity_seed: 0,
            dataset_path: "out/dataset.jsonl".into(),
            rewards_path: "out/rewards.jsonl".into(),
            n_complexes: 64,
            sample_n: 100,
            sample_region: "H3".into(),
            tabular_m: 1,
            tabular_k: 2,
            tabular_t: 2,
            tabular_beta: vec![0.5, 0.5],
            tabular_rewards: vec![1.0, 3.0],
            tabular_objective: TabularObjective::Tb,
            tabular_steps: 4000,
            tabular_lr: 0.05,
            tabular_tol_l1: 0.02,
            tabular_tol_log_z: 0.1,
            tabular_tol_residual: 1e-2,
        }
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn fmt_f64_list(vs: &[f64]) -> String {
    vs.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Deterministic flat-key serialization, sorted by key.
    pub fn to_text(&self) -> String {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            kv.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("out_dir", self.out_dir.display().to_string());
        put("diffusion.t", self.t_total.to_string());
        for (prefix, s) in [
            ("schedule.type", &self.sched_type),
            ("schedule.pos", &self.sched_pos),
            ("schedule.ori", &self.sched_ori),
        ] {
            put(&format!("{prefix}.kind"), s.kind.to_string());
            put(&format!("{prefix}.beta_min"), fmt_f64(s.beta_min));
            put(&format!("{prefix}.beta_max"), fmt_f64(s.beta_max));
        }
        put("arch.hidden_dim", self.arch.hidden_dim.to_string());
        put("arch.context_k", self.arch.context_k.to_string());
        put("arch.time_embed_dim", self.arch.time_embed_dim.to_string());
        put("optimizer.kind", self.optimizer.to_string());
        put("optimizer.lr", fmt_f64(self.lr));
        put("train.warm_steps", self.warm_steps.to_string());
        put("train.tb_steps", self.tb_steps.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("train.checkpoint_every", self.checkpoint_every.to_string());
        put("loss.w", fmt_f64(self.w));
        put("reward.alpha", fmt_f64(self.alpha));
        put("reward.eps_well", fmt_f64(self.reward_eps_well));
        put("reward.r_contact", fmt_f64(self.reward_r_contact));
        put("reward.r_clash", fmt_f64(self.reward_r_clash));
        put("reward.kappa", fmt_f64(self.reward_kappa));
        put("reward.affinity_seed", self.reward_affinity_seed.to_string());
        put("data.dataset", self.dataset_path.display().to_string());
        put("data.rewards", self.rewards_path.display().to_string());
        put("data.n_complexes", self.n_complexes.to_string());
        put("sample.n", self.sample_n.to_string());
        put("sample.region", self.sample_region.clone());
        put("tabular.m", self.tabular_m.to_string());
        put("tabular.k", self.tabular_k.to_string());
        put("tabular.t", self.tabular_t.to_string());
        put("tabular.beta", fmt_f64_list(&self.tabular_beta));
        put("tabular.rewards", fmt_f64_list(&self.tabular_rewards));
        put("tabular.objective", match self.tabular_objective {
                TabularObjective::Tb => "tb".into(),
                TabularObjective::Db => "db".into(),
            });
        put("tabular.steps", self.tabular_steps.to_string());
        put("tabular.lr", fmt_f64(self.tabular_lr));
        put("tabular.tol_l1", fmt_f64(self.tabular_tol_l1));
        put("tabular.tol_log_z", fmt_f64(self.tabular_tol_log_z));
        put("tabular.tol_residual", fmt_f64(self.tabular_tol_residual));

        let mut out = String::new();
        for (k, v) in kv {
            out.push_str(&k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Parse a config text over the defaults; every key must be known.
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen: BTreeMap<String, ()> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax(idx + 1, raw.to_string()));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if seen.insert(key.clone(), ()).is_some() {
                return Err(ConfigError::DuplicateKey(key));
            }
            cfg.apply(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse_as<T: std::str::FromStr>(
            key: &str,
            value: &str,
            expected: &'static str,
        ) -> Result<T, ConfigError> {
            value.parse::<T>().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                expected,
            })
        }
        fn parse_list(key: &str, value: &str) -> Result<Vec<f64>, ConfigError> {
            value
                .split(',')
                .map(|v| parse_as::<f64>(key, v.trim(), "a float list"))
                .collect()
        }
        match key {
            "seed" => self.seed = parse_as(key, value, "an unsigned integer")?,
            "out_dir" => self.out_dir = value.into(),
            "diffusion.t" => self.t_total = parse_as(key, value, "a step count")?,
            "schedule.type.kind" => self.sched_type.kind = parse_as(key, value, "linear|cosine")?,
            "schedule.type.beta_min" => self.sched_type.beta_min = parse_as(key, value, "a float")?,
            "schedule.type.beta_max" => self.sched_type.beta_max = parse_as(key, value, "a float")?,
            "schedule.pos.kind" => self.sched_pos.kind = parse_as(key, value, "linear|cosine")?,
            "schedule.pos.beta_min" => self.sched_pos.beta_min = parse_as(key, value, "a float")?,
            "schedule.pos.beta_max" => self.sched_pos.beta_max = parse_as(key, value, "a float")?,
            "schedule.ori.kind" => self.sched_ori.kind = parse_as(key, value, "linear|cosine")?,
            "schedule.ori.beta_min" => self.sched_ori.beta_min = parse_as(key, value, "a float")?,
            "schedule.ori.beta_max" => self.sched_ori.beta_max = parse_as(key, value, "a float")?,
            "arch.hidden_dim" => self.arch.hidden_dim = parse_as(key, value, "a dimension")?,
            "arch.context_k" => self.arch.context_k = parse_as(key, value, "a count")?,
            "arch.time_embed_dim" => {
                self.arch.time_embed_dim = parse_as(key, value, "an even dimension")?
            }
            "optimizer.kind" => self.optimizer = parse_as(key, value, "sgd|adam")?,
            "optimizer.lr" => self.lr = parse_as(key, value, "a float")?,
            "train.warm_steps" => self.warm_steps = parse_as(key, value, "a step count")?,
            "train.tb_steps" => self.tb_steps = parse_as(key, value, "a step count")?,
            "train.batch_size" => self.batch_size = parse_as(key, value, "a count")?,
            "train.checkpoint_every" => {
                self.checkpoint_every = parse_as(key, value, "a step count")?
            }
            "loss.w" => self.w = parse_as(key, value, "a nonnegative float")?,
            "reward.alpha" => self.alpha = parse_as(key, value, "a positive float")?,
            "reward.eps_well" => self.reward_eps_well = parse_as(key, value, "a float")?,
            "reward.r_contact" => self.reward_r_contact = parse_as(key, value, "a float")?,
            "reward.r_clash" => self.reward_r_clash = parse_as(key, value, "a float")?,
            "reward.kappa" => self.reward_kappa = parse_as(key, value, "a float")?,
            "reward.affinity_seed" => {
                self.reward_affinity_seed = parse_as(key, value, "an unsigned integer")?
            }
            "data.dataset" => self.dataset_path = value.into(),
            "data.rewards" => self.rewards_path = value.into(),
            "data.n_complexes" => self.n_complexes = parse_as(key, value, "a count")?,
            "sample.n" => self.sample_n = parse_as(key, value, "a count")?,
            "sample.region" => self.sample_region = value.to_string(),
            "tabular.m" => self.tabular_m = parse_as(key, value, "a count")?,
            "tabular.k" => self.tabular_k = parse_as(key, value, "a count")?,
            "tabular.t" => self.tabular_t = parse_as(key, value, "a count")?,
            "tabular.beta" => self.tabular_beta = parse_list(key, value)?,
            "tabular.rewards" => self.tabular_rewards = parse_list(key, value)?,
            "tabular.objective" => self.tabular_objective = parse_as(key, value, "tb|db")?,
            "tabular.steps" => self.tabular_steps = parse_as(key, value, "a count")?,
            "tabular.lr" => self.tabular_lr = parse_as(key, value, "a float")?,
            "tabular.tol_l1" => self.tabular_tol_l1 = parse_as(key, value, "a float")?,
            "tabular.tol_log_z" => self.tabular_tol_log_z = parse_as(key, value, "a float")?,
            "tabular.tol_residual" => {
                self.tabular_tol_residual = parse_as(key, value, "a float")?
            }
            unknown => return Err(ConfigError::UnknownKey(unknown.to_string())),
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, msg: &str| ConfigError::Invalid {
            key: key.to_string(),
            msg: msg.to_string(),
        };
        if self.t_total == 0 {
            return Err(invalid("diffusion.t", "must be at least 1"));
        }
        if self.w < 0.0 {
            return Err(invalid("loss.w", "must be nonnegative"));
        }
        if !(self.alpha > 0.0) {
            return Err(invalid("reward.alpha", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("train.batch_size", "must be at least 1"));
        }
        if self.sample_n == 0 {
            return Err(invalid("sample.n", "must be at least 1"));
        }
        if self.arch.time_embed_dim % 2 != 0 {
            return Err(invalid("arch.time_embed_dim", "must be even"));
        }
        if !(self.reward_r_clash < self.reward_r_contact) {
            return Err(invalid(
                "reward.r_clash",
                "must be below reward.r_contact",
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
        Self::parse(&text)
    }

    /// Build the three schedules.
    pub fn schedules(&self) -> Result<DiffusionSchedules, crate::schedules::ScheduleError> {
        DiffusionSchedules::new(
            make_schedule(
                Channel::Type,
                self.sched_type.kind,
                self.t_total,
                self.sched_type.beta_min,
                self.sched_type.beta_max,
            )?,
            make_schedule(
                Channel::Pos,
                self.sched_pos.kind,
                self.t_total,
                self.sched_pos.beta_min,
                self.sched_pos.beta_max,
            )?,
            make_schedule(
                Channel::Ori,
                self.sched_ori.kind,
                self.t_total,
                self.sched_ori.beta_min,
                self.sched_ori.beta_max,
            )?,
        )
    }

    pub fn energy_model(&self) -> EnergyModel {
        EnergyModel::with_seeded_affinity(
            self.reward_eps_well,
            self.reward_r_contact,
            self.reward_r_clash,
            self.reward_kappa,
            self.reward_affinity_seed,
        )
    }

    pub fn tabular_spec(&self) -> TabularSpec {
        TabularSpec {
            m: self.tabular_m,
            k: self.tabular_k,
            t_total: self.tabular_t,
            beta: self.tabular_beta.clone(),
            rewards: self.tabular_rewards.clone(),
            objective: self.tabular_objective,
            steps: self.tabular_steps,
            lr: self.tabular_lr,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_exactly() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        let parsed = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, parsed);
        assert_eq!(text, parsed.to_text());
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let err = RunConfig::parse("train.warmsteps = 100\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(k) if k == "train.warmsteps"));
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let err = RunConfig::parse("seed = 1\nseed = 2\n").unwrap_err();
        assert!(matches!(err, ConfigError::DuplicateKey(_)));
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = RunConfig::parse("# a comment\n\nseed = 9\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn bad_values_name_the_key() {
        let err = RunConfig::parse("optimizer.lr = fast\n").unwrap_err();
        assert!(matches!(err, ConfigError::BadValue { key, .. } if key == "optimizer.lr"));
    }

    #[test]
    fn semantic_validation_runs() {
        assert!(RunConfig::parse("reward.alpha = 0\n").is_err());
        assert!(RunConfig::parse("diffusion.t = 0\n").is_err());
        assert!(RunConfig::parse("arch.time_embed_dim = 7\n").is_err());
    }

    #[test]
    fn modified_config_round_trips() {
        let text = "seed = 3\ndiffusion.t = 20\noptimizer.kind = adam\noptimizer.lr = 0.001\ntabular.rewards = 1,3\nloss.w = 0.0001\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.t_total, 20);
        assert_eq!(cfg.optimizer, OptimizerKind::Adam);
        let parsed = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, parsed);
    }
}
