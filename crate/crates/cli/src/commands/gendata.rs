//! `gen-data`: materialize a synthetic federation to a newline-delimited
//! JSON file for reuse across runs.

use crate::config::ExperimentConfig;
use crate::CliError;
use fedroute_core::dataset::save_federation;
use std::path::Path;

pub fn cmd_gen_data(config: &ExperimentConfig, seed: u64, out: &Path) -> Result<usize, CliError> {
    let fed = config.task.generate(seed)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_federation(&fed, out)?;
    Ok(fed.clients.len())
}
