//! `eval`: pre-inference plus hard inference on sampled evaluation clients,
//! emitting accuracy, the heterogeneity estimate, routing statistics and the
//! comparison table as JSON.

use crate::config::ExperimentConfig;
use crate::CliError;
use fedroute_core::dataset::Federation;
use fedroute_core::client::TrainHyper;
use fedroute_core::metrics::{
    comparison_stats, divergence_routing_correlation, kl_routing_correlation, ClientEval,
    ComparisonStats, PersonalizedMode,
};
use fedroute_core::model::{checkpoint, GlobalModel};
use fedroute_core::server::{run_eval, EvalSummary, FederationConfig, Variant};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// One evaluated client together with its generator ground truth.
#[derive(Debug, Serialize, Deserialize)]
pub struct ClientRecord {
    pub true_divergence: Option<f64>,
    #[serde(flatten)]
    pub eval: ClientEval,
}

/// The `eval.json` schema.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub variant: Variant,
    pub round: u64,
    pub summary: EvalSummary,
    /// Learned routing vs the pure local model.
    pub comparison_routed: Option<ComparisonStats>,
    /// Global-route-only vs the pure local model.
    pub comparison_global_only: Option<ComparisonStats>,
    /// Spearman rank correlation of the model-based heterogeneity estimate
    /// with the locally-routed fraction; absent when undefined.
    pub kl_vs_local_fraction: Option<f64>,
    /// Spearman rank correlation of generator ground-truth divergence with
    /// the locally-routed fraction.
    pub truth_vs_local_fraction: Option<f64>,
    pub clients: Vec<ClientRecord>,
}

#[allow(clippy::too_many_arguments)]
pub fn build_eval_report(
    model: &GlobalModel,
    fed: &Federation,
    hyper: &TrainHyper,
    fcfg: &FederationConfig,
    variant: Variant,
    soft_inference: bool,
    round: u64,
    seed: u64,
) -> Result<EvalReport, CliError> {
    let (summary, evals) = run_eval(
        model,
        &fed.clients,
        hyper,
        fcfg,
        variant,
        soft_inference,
        round,
    )?;
    let (comparison_routed, comparison_global_only, kl_corr, truth_corr) = if evals.is_empty() {
        (None, None, None, None)
    } else {
        let truths: Vec<f64> = evals
            .iter()
            .map(|e| fed.true_client_divergence(e.client_id).unwrap_or(f64::NAN))
            .collect();
        let truth_corr = if truths.iter().all(|d| d.is_finite()) {
            divergence_routing_correlation(&evals, &truths)
        } else {
            None
        };
        (
            Some(comparison_stats(&evals, PersonalizedMode::Routed)),
            Some(comparison_stats(&evals, PersonalizedMode::GlobalOnly)),
            kl_routing_correlation(&evals),
            truth_corr,
        )
    };
    let clients = evals
        .into_iter()
        .map(|eval| ClientRecord {
            true_divergence: fed.true_client_divergence(eval.client_id).ok(),
            eval,
        })
        .collect();
    Ok(EvalReport {
        seed,
        variant,
        round,
        summary,
        comparison_routed,
        comparison_global_only,
        kl_vs_local_fraction: kl_corr,
        truth_vs_local_fraction: truth_corr,
        clients,
    })
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub seed: Option<u64>,
    pub soft: bool,
    pub out: Option<PathBuf>,
}

/// Evaluate a checkpoint under an experiment config. The checkpoint's model
/// schema must match the config's model section.
pub fn cmd_eval(config: &ExperimentConfig, args: &EvalArgs) -> Result<EvalReport, CliError> {
    config.validate()?;
    let model = checkpoint::load(&args.checkpoint)?;
    let expect = config.model_config()?;
    if model.config != expect {
        return Err(CliError::user(format!(
            "checkpoint {} does not match the configured model (checkpoint {:?}, config {:?})",
            args.checkpoint.display(),
            model.config,
            expect
        )));
    }
    let seed = args.seed.unwrap_or(config.seeds[0]);
    let fed = config.federation(seed)?;
    let hyper = config.hyper();
    let fcfg = config.federation.to_federation_config(seed);
    let report = build_eval_report(
        &model,
        &fed,
        &hyper,
        &fcfg,
        config.variant,
        args.soft || config.soft_inference,
        fcfg.rounds,
        seed,
    )?;
    if let Some(out) = &args.out {
        write_report(&report, out)?;
    }
    Ok(report)
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}
