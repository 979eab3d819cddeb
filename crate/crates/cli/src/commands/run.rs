//! `run`: execute the configured training for every seed and persist the run
//! directory: manifest, per-round records, metric series, final checkpoint,
//! and the final detailed evaluation.

use crate::commands::eval::build_eval_report;
use crate::config::ExperimentConfig;
use crate::manifest::{now_unix, RunManifest};
use crate::CliError;
use fedroute_core::model::{checkpoint, GlobalModel};
use fedroute_core::rng::{self, tag};
use fedroute_core::server::{run_training, RoundReport};
use std::io::Write;
use std::path::{Path, PathBuf};

pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub seed_dirs: Vec<PathBuf>,
}

pub fn cmd_run(config: &ExperimentConfig) -> Result<RunOutcome, CliError> {
    config.validate()?;
    let run_dir = config.resolved_output_dir();
    std::fs::create_dir_all(&run_dir)?;
    let snapshot = toml::to_string_pretty(config)
        .map_err(|e| CliError::internal(format!("cannot serialize config: {e}")))?;
    std::fs::write(run_dir.join("config.toml"), snapshot)?;

    let mut seed_dirs = Vec::new();
    for &seed in &config.seeds {
        seed_dirs.push(run_seed(config, seed, &run_dir)?);
    }
    Ok(RunOutcome { run_dir, seed_dirs })
}

pub fn run_seed(
    config: &ExperimentConfig,
    seed: u64,
    run_dir: &Path,
) -> Result<PathBuf, CliError> {
    let dir = run_dir.join(format!("seed_{seed}"));
    std::fs::create_dir_all(&dir)?;

    let fed = config.federation(seed)?;
    let model_cfg = config.model_config()?;
    let hyper = config.hyper();
    let fcfg = config.federation.to_federation_config(seed);
    let mut init_rng = rng::stream(seed, &[tag::MODEL_INIT]);
    let init = GlobalModel::init(model_cfg, &mut init_rng)?;

    log::info!(
        "seed {seed}: {} rounds over {} clients (variant {:?})",
        fcfg.rounds,
        fed.clients.len(),
        config.variant
    );
    let run = run_training(
        init,
        &fed.clients,
        &hyper,
        &fcfg,
        config.variant,
        config.soft_inference,
    )?;

    let rounds_file = dir.join("rounds.jsonl");
    write_rounds(&run.reports, &rounds_file)?;
    let metrics_file = dir.join("metrics.csv");
    write_metrics(config, seed, &run.reports, &metrics_file)?;
    let checkpoint_file = dir.join("checkpoint_final.json");
    checkpoint::save(&run.model, &checkpoint_file)?;

    let eval_file = dir.join("eval.json");
    let report = build_eval_report(
        &run.model,
        &fed,
        &hyper,
        &fcfg,
        config.variant,
        config.soft_inference,
        fcfg.rounds,
        seed,
    )?;
    std::fs::write(&eval_file, serde_json::to_string_pretty(&report)?)?;

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        variant: config.variant,
        config: config.clone(),
        hyper,
        rounds_file: rounds_file.clone(),
        metrics_file,
        checkpoint_file,
        eval_file,
        sampled_per_round: run.reports.iter().map(|r| r.sampled.clone()).collect(),
        finished_at: now_unix(),
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(dir)
}

fn write_rounds(reports: &[RoundReport], path: &Path) -> Result<(), CliError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for report in reports {
        writeln!(w, "{}", serde_json::to_string(report)?)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-round metric series. Deterministic for a fixed config and seed: no
/// wall-clock columns, floats in shortest round-trip form.
fn write_metrics(
    config: &ExperimentConfig,
    seed: u64,
    reports: &[RoundReport],
    path: &Path,
) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "round",
        "seed",
        "variant",
        "clients",
        "total_instances",
        "accuracy",
        "soft_accuracy",
        "mean_r_global",
    ])?;
    let variant = variant_name(config.variant);
    for r in reports {
        let total_n: u64 = r.aggregated.iter().map(|(_, n)| n).sum();
        let (acc, soft, r1) = match &r.eval {
            Some(e) => (
                e.accuracy.to_string(),
                e.soft_accuracy.map(|v| v.to_string()).unwrap_or_default(),
                e.mean_r_global.map(|v| v.to_string()).unwrap_or_default(),
            ),
            None => (String::new(), String::new(), String::new()),
        };
        w.write_record([
            r.round.to_string(),
            seed.to_string(),
            variant.to_string(),
            r.aggregated.len().to_string(),
            total_n.to_string(),
            acc,
            soft,
            r1,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn variant_name(v: fedroute_core::server::Variant) -> &'static str {
    use fedroute_core::server::Variant::*;
    match v {
        Flow => "flow",
        GlobalOnly => "global_only",
        LocalOnly => "local_only",
        FedavgPlain => "fedavg_plain",
    }
}
