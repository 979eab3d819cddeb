//! `sweep`: one run per axis value per seed, plus a merged comparison CSV
//! keyed by the axis value.

use crate::commands::run::cmd_run;
use crate::config::{ExperimentConfig, TaskSection};
use crate::CliError;
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[clap(rename_all = "snake_case")]
pub enum SweepAxis {
    Gamma,
    LocalEpochs,
    Tau,
    Lambda,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Gamma => "gamma",
            SweepAxis::LocalEpochs => "local_epochs",
            SweepAxis::Tau => "tau",
            SweepAxis::Lambda => "lambda",
        }
    }
}

pub struct SweepOutcome {
    pub sweep_dir: PathBuf,
    pub merged_csv: PathBuf,
    pub value_dirs: Vec<PathBuf>,
}

fn axis_values(config: &ExperimentConfig, axis: SweepAxis) -> Result<Vec<f64>, CliError> {
    let sweep = config
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::user("config has no [sweep] section"))?;
    let values: Vec<f64> = match axis {
        SweepAxis::Gamma => sweep.gamma.clone(),
        SweepAxis::LocalEpochs => sweep.local_epochs.iter().map(|&e| e as f64).collect(),
        SweepAxis::Tau => sweep.tau.clone(),
        SweepAxis::Lambda => sweep.lambda.clone(),
    };
    if values.is_empty() {
        return Err(CliError::user(format!(
            "sweep axis '{}' lists no values in the config",
            axis.name()
        )));
    }
    Ok(values)
}

fn with_axis_value(
    base: &ExperimentConfig,
    axis: SweepAxis,
    value: f64,
) -> Result<ExperimentConfig, CliError> {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::Gamma => cfg.train.gamma = Some(value),
        SweepAxis::LocalEpochs => cfg.train.local_epochs = Some(value as usize),
        SweepAxis::Tau => cfg.train.temperature = Some(value),
        SweepAxis::Lambda => match &mut cfg.task {
            TaskSection::Sequence { heterogeneity, .. } => *heterogeneity = value,
            TaskSection::Classify { .. } => {
                return Err(CliError::user(
                    "the lambda axis applies only to sequence tasks",
                ))
            }
        },
    }
    Ok(cfg)
}

pub fn cmd_sweep(base: &ExperimentConfig, axis: SweepAxis) -> Result<SweepOutcome, CliError> {
    base.validate()?;
    let values = axis_values(base, axis)?;
    let sweep_dir = base.resolved_output_dir();
    std::fs::create_dir_all(&sweep_dir)?;

    let mut value_dirs = Vec::new();
    for &value in &values {
        let mut sub = with_axis_value(base, axis, value)?;
        sub.output_dir = sweep_dir.join(format!("{}_{}", axis.name(), value));
        sub.sweep = None;
        let outcome = cmd_run(&sub)?;
        value_dirs.push(outcome.run_dir);
    }

    // merge the per-run metric series keyed by axis value
    let merged_csv = sweep_dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&merged_csv)?;
    w.write_record([
        "axis",
        "value",
        "round",
        "seed",
        "variant",
        "clients",
        "total_instances",
        "accuracy",
        "soft_accuracy",
        "mean_r_global",
    ])?;
    for (dir, &value) in value_dirs.iter().zip(&values) {
        for &seed in &base.seeds {
            let metrics = dir.join(format!("seed_{seed}")).join("metrics.csv");
            let mut r = csv::Reader::from_path(&metrics)?;
            for record in r.records() {
                let record = record?;
                let mut row = vec![axis.name().to_string(), value.to_string()];
                row.extend(record.iter().map(|s| s.to_string()));
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(SweepOutcome {
        sweep_dir,
        merged_csv,
        value_dirs,
    })
}
