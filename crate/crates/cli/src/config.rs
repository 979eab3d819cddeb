//! Experiment configuration: a human-editable TOML file with structured
//! sections, schema-validated before any compute. Unknown keys are rejected;
//! command-line `--set key.path=value` overrides are applied to the parsed
//! document before deserialization, so flags always win over file values.

use crate::CliError;
use fedroute_core::client::TrainHyper;
use fedroute_core::dataset::{Federation, TaskKind};
use fedroute_core::model::{ArchKind, CellKind, ModelConfig};
use fedroute_core::server::{FailurePolicy, FederationConfig, Variant};
use fedroute_core::synth::{ClassifyTaskSpec, SequenceTaskSpec};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable that re-roots relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "FEDROUTE_OUT";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSection {
    Sequence {
        vocab_size: usize,
        min_seq_len: usize,
        max_seq_len: usize,
        num_clients: usize,
        instances_min: usize,
        instances_max: usize,
        /// Heterogeneity dial lambda in [0, 1].
        heterogeneity: f64,
    },
    Classify {
        input_dim: usize,
        num_classes: usize,
        num_clients: usize,
        instances_min: usize,
        instances_max: usize,
        label_alpha: f64,
        shift_min: f64,
        shift_max: f64,
        noise_std: f64,
    },
}

impl TaskSection {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskSection::Sequence { .. } => TaskKind::Sequence,
            TaskSection::Classify { .. } => TaskKind::Classify,
        }
    }

    /// Build the generator spec for one run seed.
    pub fn generate(&self, seed: u64) -> Result<Federation, CliError> {
        match self {
            TaskSection::Sequence {
                vocab_size,
                min_seq_len,
                max_seq_len,
                num_clients,
                instances_min,
                instances_max,
                heterogeneity,
            } => {
                let spec = SequenceTaskSpec {
                    vocab_size: *vocab_size,
                    min_seq_len: *min_seq_len,
                    max_seq_len: *max_seq_len,
                    num_clients: *num_clients,
                    instances_per_client: (*instances_min, *instances_max),
                    heterogeneity: *heterogeneity,
                    seed,
                };
                Ok(fedroute_core::synth::generate_sequence_federation(&spec)?)
            }
            TaskSection::Classify {
                input_dim,
                num_classes,
                num_clients,
                instances_min,
                instances_max,
                label_alpha,
                shift_min,
                shift_max,
                noise_std,
            } => {
                let spec = ClassifyTaskSpec {
                    input_dim: *input_dim,
                    num_classes: *num_classes,
                    num_clients: *num_clients,
                    instances_per_client: (*instances_min, *instances_max),
                    label_alpha: *label_alpha,
                    feature_shift: (*shift_min, *shift_max),
                    noise_std: *noise_std,
                    seed,
                };
                Ok(fedroute_core::synth::generate_classify_federation(&spec)?)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dim: usize,
    /// Embedding dimension; sequence tasks only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
    /// Recurrent cell variant; sequence tasks only.
    #[serde(default)]
    pub cell: CellKind,
    /// Hidden widths of the feed-forward encoder; classify tasks only.
    #[serde(default)]
    pub encoder_hidden: Vec<usize>,
    #[serde(default)]
    pub decoder_hidden: Vec<usize>,
}

impl ModelSection {
    pub fn to_model_config(&self, task: &TaskSection) -> Result<ModelConfig, CliError> {
        let cfg = match task {
            TaskSection::Sequence { vocab_size, .. } => {
                let embed_dim = self.embed_dim.ok_or_else(|| {
                    CliError::user("sequence tasks require model.embed_dim")
                })?;
                ModelConfig {
                    arch: ArchKind::Recurrent {
                        vocab_size: *vocab_size,
                        embed_dim,
                        cell: self.cell,
                    },
                    hidden_dim: self.hidden_dim,
                    num_classes: *vocab_size,
                    decoder_hidden: self.decoder_hidden.clone(),
                }
            }
            TaskSection::Classify {
                input_dim,
                num_classes,
                ..
            } => ModelConfig {
                arch: ArchKind::FeedForward {
                    input_dim: *input_dim,
                    hidden: self.encoder_hidden.clone(),
                },
                hidden_dim: self.hidden_dim,
                num_classes: *num_classes,
                decoder_hidden: self.decoder_hidden.clone(),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Training hyperparameters; unset fields resolve to the task-kind defaults
/// and the resolved values are what the manifest records.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub local_epochs: Option<usize>,
    pub global_epochs: Option<usize>,
    pub local_lr: Option<f64>,
    pub global_lr: Option<f64>,
    pub temperature: Option<f64>,
    pub gamma: Option<f64>,
    pub batch_size: Option<usize>,
    pub grad_clip: Option<f64>,
}

impl TrainSection {
    pub fn resolve(&self, kind: TaskKind) -> TrainHyper {
        let base = match kind {
            TaskKind::Sequence => TrainHyper::sequence_defaults(),
            TaskKind::Classify => TrainHyper::classify_defaults(),
        };
        TrainHyper {
            local_epochs: self.local_epochs.unwrap_or(base.local_epochs),
            global_epochs: self.global_epochs.unwrap_or(base.global_epochs),
            local_lr: self.local_lr.unwrap_or(base.local_lr),
            global_lr: self.global_lr.unwrap_or(base.global_lr),
            temperature: self.temperature.unwrap_or(base.temperature),
            gamma: self.gamma.unwrap_or(base.gamma),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            grad_clip: self.grad_clip.or(base.grad_clip),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    pub rounds: u64,
    pub clients_per_round: usize,
    pub eval_clients: usize,
    pub eval_every: u64,
    #[serde(default = "default_parallel")]
    pub parallel: bool,
    #[serde(default)]
    pub failure_policy: FailurePolicy,
}

fn default_parallel() -> bool {
    true
}

impl FederationSection {
    pub fn to_federation_config(&self, seed: u64) -> FederationConfig {
        FederationConfig {
            rounds: self.rounds,
            clients_per_round: self.clients_per_round,
            eval_clients: self.eval_clients,
            eval_every: self.eval_every,
            seed,
            parallel: self.parallel,
            failure_policy: self.failure_policy,
        }
    }
}

/// Ablation axes a sweep may iterate; each axis lists its values here.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub gamma: Vec<f64>,
    #[serde(default)]
    pub local_epochs: Vec<usize>,
    #[serde(default)]
    pub tau: Vec<f64>,
    #[serde(default)]
    pub lambda: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub soft_inference: bool,
    /// Load a federation file instead of generating synthetic data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_path: Option<PathBuf>,
    pub task: TaskSection,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    pub federation: FederationSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::user("seeds must list at least one seed"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(CliError::user("seeds must be distinct"));
        }
        self.model.to_model_config(&self.task)?;
        self.train.resolve(self.task.kind()).validate()?;
        if self.federation.rounds > 0 && self.federation.clients_per_round == 0 {
            return Err(CliError::user("federation.clients_per_round must be positive"));
        }
        Ok(())
    }

    pub fn hyper(&self) -> TrainHyper {
        self.train.resolve(self.task.kind())
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        self.model.to_model_config(&self.task)
    }

    /// Federation data for one run seed: loaded from `data_path` when set,
    /// generated from the task spec otherwise.
    pub fn federation(&self, seed: u64) -> Result<Federation, CliError> {
        match &self.data_path {
            Some(path) => {
                let fed = fedroute_core::dataset::load_federation(path)?;
                if fed.task != self.task.kind() {
                    return Err(CliError::user(format!(
                        "data file {} holds a {:?} task but the config describes {:?}",
                        path.display(),
                        fed.task,
                        self.task.kind()
                    )));
                }
                Ok(fed)
            }
            None => self.task.generate(seed),
        }
    }

    /// Output directory with the optional environment root applied.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output_dir(&self.output_dir)
    }
}

pub fn resolve_output_dir(dir: &Path) -> PathBuf {
    if dir.is_absolute() {
        return dir.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(dir),
        None => dir.to_path_buf(),
    }
}

/// Parse a config file and apply `--set key.path=value` overrides.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::user(format!("cannot read config {}: {e}", path.display())))?;
    let mut doc: toml::Value = toml::from_str(&text)
        .map_err(|e| CliError::user(format!("invalid config {}: {e}", path.display())))?;
    for raw in overrides {
        apply_override(&mut doc, raw)?;
    }
    let config: ExperimentConfig = doc
        .try_into()
        .map_err(|e| CliError::user(format!("invalid config {}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

/// Apply one `key.path=value` override to a parsed TOML document. The value
/// is parsed as TOML; anything that does not parse becomes a string.
pub fn apply_override(doc: &mut toml::Value, raw: &str) -> Result<(), CliError> {
    let (path, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::user(format!("override '{raw}' must look like key.path=value")))?;
    let parsed: toml::Value = match toml::from_str::<toml::Value>(&format!("v = {value}")) {
        Ok(toml::Value::Table(t)) => t.get("v").cloned().unwrap(),
        _ => toml::Value::String(value.to_string()),
    };
    let mut cur = doc;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| CliError::user(format!("override path '{path}' crosses a non-table")))?;
        if i + 1 == segments.len() {
            table.insert(seg.to_string(), parsed);
            return Ok(());
        }
        cur = table
            .entry(seg.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    unreachable!("override paths have at least one segment")
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMOKE: &str = r#"
seeds = [1]
output_dir = "runs/smoke"

[task]
kind = "sequence"
vocab_size = 8
min_seq_len = 4
max_seq_len = 8
num_clients = 4
instances_min = 10
instances_max = 14
heterogeneity = 0.5

[model]
hidden_dim = 6
embed_dim = 4

[federation]
rounds = 2
clients_per_round = 2
eval_clients = 2
eval_every = 1
"#;

    #[test]
    fn parses_and_resolves_defaults() {
        let doc: toml::Value = toml::from_str(SMOKE).unwrap();
        let cfg: ExperimentConfig = doc.try_into().unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.variant, Variant::Flow);
        let hyper = cfg.hyper();
        assert_eq!(hyper.local_epochs, 1);
        assert!((hyper.temperature - 0.75).abs() < 1e-12);
        assert!((hyper.gamma - 1e-2).abs() < 1e-12);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = SMOKE.replace("[model]", "[model]\nbogus_key = 3\n");
        let doc: toml::Value = toml::from_str(&text).unwrap();
        let parsed: Result<ExperimentConfig, _> = doc.try_into();
        assert!(parsed.is_err());
    }

    #[test]
    fn overrides_win_over_file_values() {
        let mut doc: toml::Value = toml::from_str(SMOKE).unwrap();
        apply_override(&mut doc, "train.gamma=0.0").unwrap();
        apply_override(&mut doc, "variant=local_only").unwrap();
        apply_override(&mut doc, "seeds=[4, 5]").unwrap();
        let cfg: ExperimentConfig = doc.try_into().unwrap();
        assert_eq!(cfg.hyper().gamma, 0.0);
        assert_eq!(cfg.variant, Variant::LocalOnly);
        assert_eq!(cfg.seeds, vec![4, 5]);
    }
}
