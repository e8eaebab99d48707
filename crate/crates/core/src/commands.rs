//! Command implementations behind the CLI: toy-data generation, reward
//! precomputation, two-phase training, batch sampling, evaluation and the
//! tabular flow-matching check. Each command is deterministic given its
//! effective config, which is written next to the outputs.

use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::dataio::{
    load_checkpoint, parse_dataset, read_container, write_atomic, write_container,
    write_dataset, ContainerHeader, DataError, SampleRecord, EVAL_SCHEMA, SAMPLES_SCHEMA,
};
use crate::metrics::{evaluate_samples, format_report, MetricsError};
use crate::objectives::ObjectiveError;
use crate::reward::{load_rewards, precompute_rewards};
use crate::sampler::{generate_batch, SampleRequest, SamplerError};
use crate::schedules::ScheduleError;
use crate::seeding::derive_rng;
use crate::tabular::{tabular_mode, TabularError, TabularReport};
use crate::toydata::{generate, ToyDataConfig};
use crate::train::{train_loop, TrainError};

/// Exit codes: 0 success, 1 usage, 2 validation, 3 numeric failure.
#[derive(Debug, Error)]
pub enum CmdError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numeric(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Usage(_) => 1,
            CmdError::Validation(_) => 2,
            CmdError::Numeric(_) => 3,
        }
    }
}

impl From<ConfigError> for CmdError {
    fn from(e: ConfigError) -> Self {
        CmdError::Validation(e.to_string())
    }
}

impl From<DataError> for CmdError {
    fn from(e: DataError) -> Self {
        CmdError::Validation(e.to_string())
    }
}

impl From<ScheduleError> for CmdError {
    fn from(e: ScheduleError) -> Self {
        CmdError::Validation(e.to_string())
    }
}

impl From<MetricsError> for CmdError {
    fn from(e: MetricsError) -> Self {
        CmdError::Validation(e.to_string())
    }
}

impl From<TabularError> for CmdError {
    fn from(e: TabularError) -> Self {
        CmdError::Validation(e.to_string())
    }
}

impl From<SamplerError> for CmdError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::NonFiniteState { .. } => CmdError::Numeric(e.to_string()),
            other => CmdError::Validation(other.to_string()),
        }
    }
}

impl From<TrainError> for CmdError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } | TrainError::Gradient { .. } => {
                CmdError::Numeric(e.to_string())
            }
            TrainError::Objective(ObjectiveError::NonFiniteLogDensity { .. }) => {
                CmdError::Numeric(e.to_string())
            }
            other => CmdError::Validation(other.to_string()),
        }
    }
}

/// CLI flag overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub n_samples: Option<usize>,
    pub region: Option<String>,
}

/// Load the config (or defaults), apply overrides.
pub fn effective_config(
    config_path: Option<&Path>,
    overrides: &Overrides,
) -> Result<RunConfig, CmdError> {
    let mut cfg = match config_path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &overrides.out {
        cfg.out_dir = out.clone();
    }
    if let Some(n) = overrides.n_samples {
        cfg.sample_n = n;
    }
    if let Some(region) = &overrides.region {
        cfg.sample_region = region.clone();
    }
    Ok(cfg)
}

fn write_effective_config(cfg: &RunConfig) -> Result<(), CmdError> {
    write_atomic(
        &cfg.out_dir.join("effective_config.txt"),
        cfg.to_text().as_bytes(),
    )?;
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<(), CmdError> {
    if !path.is_file() {
        return Err(CmdError::Validation(format!(
            "{what} not found at {}",
            path.display()
        )));
    }
    Ok(())
}

/// Generate the procedural dataset at `data.dataset`.
pub fn cmd_gen_toy_data(cfg: &RunConfig) -> Result<(), CmdError> {
    write_effective_config(cfg)?;
    let records = generate(&ToyDataConfig {
        n_complexes: cfg.n_complexes,
        seed: cfg.seed,
        model: cfg.energy_model(),
        ..Default::default()
    });
    write_dataset(&cfg.dataset_path, &records)?;
    println!(
        "wrote {} complexes to {}",
        records.len(),
        cfg.dataset_path.display()
    );
    Ok(())
}

/// Precompute rewards for every region of every complex into `data.rewards`.
pub fn cmd_precompute_rewards(cfg: &RunConfig) -> Result<(), CmdError> {
    write_effective_config(cfg)?;
    require_file(&cfg.dataset_path, "dataset")?;
    let records = parse_dataset(&cfg.dataset_path)?;
    let model = cfg.energy_model();
    let regions: Vec<&str> = crate::dataio::REGIONS.to_vec();
    let summary = precompute_rewards(&cfg.rewards_path, &records, &regions, &model, cfg.alpha)?;
    if summary.skipped > 0 {
        eprintln!(
            "warning: skipped {} (complex, region) pairs without that region",
            summary.skipped
        );
    }
    println!(
        "wrote {} reward records to {}",
        summary.written,
        cfg.rewards_path.display()
    );
    Ok(())
}

/// Two-phase training; writes checkpoints and the structured training log.
pub fn cmd_train(cfg: &RunConfig, resume_from: Option<&Path>) -> Result<(), CmdError> {
    write_effective_config(cfg)?;
    require_file(&cfg.dataset_path, "dataset")?;
    require_file(&cfg.rewards_path, "reward cache")?;
    let records = parse_dataset(&cfg.dataset_path)?;
    let model = cfg.energy_model();
    let rows = load_rewards(&cfg.rewards_path, &model, cfg.alpha)?;

    let resume = match resume_from {
        Some(path) => Some(load_checkpoint(path, &cfg.arch)?),
        None => None,
    };

    let outcome = match train_loop(&cfg.clone(), &records, &rows, resume, Some(&cfg.out_dir)) {
        Ok(outcome) => outcome,
        Err(TrainError::NonFiniteLoss {
            step,
            l_type,
            l_pos,
            l_ori,
            l_tb,
        }) => {
            // Diagnostic snapshot before aborting.
            let snapshot = serde_json::json!({
                "step": step,
                "l_type": l_type,
                "l_pos": l_pos,
                "l_ori": l_ori,
                "l_tb": l_tb,
            });
            let _ = write_atomic(
                &cfg.out_dir.join("nan_snapshot.json"),
                snapshot.to_string().as_bytes(),
            );
            return Err(TrainError::NonFiniteLoss {
                step,
                l_type,
                l_pos,
                l_ori,
                l_tb,
            }
            .into());
        }
        Err(other) => return Err(other.into()),
    };

    let mut log_text = String::new();
    for line in &outcome.log {
        log_text.push_str(&serde_json::to_string(line).expect("log line serializes"));
        log_text.push('\n');
    }
    write_atomic(&cfg.out_dir.join("train_log.jsonl"), log_text.as_bytes())?;
    println!(
        "trained {} steps ({} with TB); final log_Z = {}",
        outcome.log.last().map(|l| l.step + 1).unwrap_or(0),
        outcome.meta.tb_steps_done,
        outcome.params.log_z()
    );
    Ok(())
}

/// Sample `sample.n` CDRs for every complex carrying `sample.region`;
/// complexes without the region are reported and skipped.
pub fn cmd_sample(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(), CmdError> {
    write_effective_config(cfg)?;
    require_file(&cfg.dataset_path, "dataset")?;
    let default_ckpt = cfg.out_dir.join("checkpoint_final.bin");
    let ckpt_path = checkpoint.unwrap_or(&default_ckpt);
    require_file(ckpt_path, "checkpoint")?;
    let (params, meta) = load_checkpoint(ckpt_path, &cfg.arch)?;
    let scheds = cfg.schedules()?;
    if meta.schedule_digest != scheds.digest() {
        return Err(CmdError::Validation(format!(
            "checkpoint {} was trained with schedule digest {}, config gives {}",
            ckpt_path.display(),
            meta.schedule_digest,
            scheds.digest()
        )));
    }
    let records = parse_dataset(&cfg.dataset_path)?;
    let model = cfg.energy_model();

    let mut samples: Vec<SampleRecord> = Vec::new();
    let mut skipped = 0usize;
    for (i, rec) in records.iter().enumerate() {
        if !rec.cdr_regions.contains_key(&cfg.sample_region) {
            eprintln!(
                "warning: complex {} has no region {}; skipped",
                rec.id, cfg.sample_region
            );
            skipped += 1;
            continue;
        }
        let mut seed_rng = derive_rng(cfg.seed, "sample-base", i as u64);
        let base_seed = rand::Rng::gen::<u64>(&mut seed_rng) >> 1;
        let req = SampleRequest {
            id: rec.id.clone(),
            region: cfg.sample_region.clone(),
            count: cfg.sample_n,
            base_seed,
        };
        samples.extend(generate_batch(
            &req, rec, &params, &scheds, &model, cfg.alpha,
        )?);
    }
    let header = ContainerHeader::new(SAMPLES_SCHEMA)
        .with("region", &cfg.sample_region)
        .with("n_per_complex", cfg.sample_n)
        .with("model_digest", model.digest());
    let out_path = cfg.out_dir.join("samples.jsonl");
    write_container(&out_path, &header, &samples)?;
    println!(
        "wrote {} samples to {} ({} complexes skipped)",
        samples.len(),
        out_path.display(),
        skipped
    );
    Ok(())
}

/// Evaluate a sample file against the dataset; writes the structured report
/// and prints the summary table.
pub fn cmd_eval(cfg: &RunConfig, samples_path: Option<&Path>) -> Result<(), CmdError> {
    write_effective_config(cfg)?;
    require_file(&cfg.dataset_path, "dataset")?;
    let default_samples = cfg.out_dir.join("samples.jsonl");
    let samples_path = samples_path.unwrap_or(&default_samples);
    require_file(samples_path, "sample file")?;
    let records = parse_dataset(&cfg.dataset_path)?;
    let (_, samples): (_, Vec<SampleRecord>) = read_container(samples_path, SAMPLES_SCHEMA)?;
    let model = cfg.energy_model();
    let report = evaluate_samples(&records, &samples, &model)?;

    let header = ContainerHeader::new(EVAL_SCHEMA)
        .with("mean_aar", report.mean_aar)
        .with("mean_rmsd", report.mean_rmsd)
        .with("mean_imp", report.mean_imp)
        .with("mean_top1_e_total", report.mean_top1_e_total)
        .with("mean_top1_dg", report.mean_top1_dg);
    write_container(&cfg.out_dir.join("eval.jsonl"), &header, &report.entries)?;
    print!("{}", format_report(&report));
    Ok(())
}

/// Run the tabular flow-matching check; nonzero exit when the configured
/// tolerances are violated.
pub fn cmd_tabular(cfg: &RunConfig) -> Result<TabularReport, CmdError> {
    write_effective_config(cfg)?;
    let spec = cfg.tabular_spec();
    let report = tabular_mode(&spec)?;
    write_atomic(
        &cfg.out_dir.join("tabular_report.json"),
        serde_json::to_string_pretty(&report)
            .expect("report serializes")
            .as_bytes(),
    )?;
    println!(
        "terminal = {:?}\nreward L1 = {}\nlog_Z = {} (|err| = {})\nmax flow residual = {}",
        report.terminal_probs,
        report.reward_l1,
        report.log_z,
        report.log_z_error,
        report.max_flow_residual
    );
    if report.reward_l1 > cfg.tabular_tol_l1 {
        return Err(CmdError::Numeric(format!(
            "terminal distribution L1 {} exceeds tolerance {}",
            report.reward_l1, cfg.tabular_tol_l1
        )));
    }
    if report.log_z_error > cfg.tabular_tol_log_z {
        return Err(CmdError::Numeric(format!(
            "log_Z error {} exceeds tolerance {}",
            report.log_z_error, cfg.tabular_tol_log_z
        )));
    }
    if report.max_flow_residual > cfg.tabular_tol_residual {
        return Err(CmdError::Numeric(format!(
            "flow residual {} exceeds tolerance {}",
            report.max_flow_residual, cfg.tabular_tol_residual
        )));
    }
    Ok(report)
}
