//! `export-plots`: tidy long-format CSVs for plotting, from a run directory
//! or a sweep directory.
//!
//! - `accuracy_long.csv`: `(round, seed, variant, metric, value)` rows, one
//!   per evaluated metric per eval round (sweeps prepend `axis, axis_value`).
//! - `routing_timesteps.csv`: `(seed, timestep, client_id, mean_r_local,
//!   std_r_local)` from each run's final evaluation.

use crate::commands::eval::EvalReport;
use crate::CliError;
use std::path::{Path, PathBuf};

pub struct ExportOutcome {
    pub export_dir: PathBuf,
    pub accuracy_csv: PathBuf,
    pub routing_csv: PathBuf,
    pub skipped: Vec<String>,
}

struct SourceRun {
    axis: Option<(String, String)>,
    seed_dir: PathBuf,
}

fn collect_seed_dirs(run_dir: &Path) -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(run_dir)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("seed_"))
        })
        .collect();
    dirs.sort();
    dirs
}

fn discover(dir: &Path) -> Result<Vec<SourceRun>, CliError> {
    let mut sources = Vec::new();
    if dir.join("sweep.csv").exists() {
        // sweep layout: <axis>_<value>/seed_*/
        let mut value_dirs: Vec<PathBuf> = std::fs::read_dir(dir)?
            .flatten()
            .map(|e| e.path())
            .filter(|p| p.is_dir() && collect_seed_dirs(p).iter().count() > 0)
            .collect();
        value_dirs.sort();
        for vdir in value_dirs {
            let name = vdir.file_name().unwrap().to_string_lossy().to_string();
            let (axis, value) = name
                .rsplit_once('_')
                .map(|(a, v)| (a.to_string(), v.to_string()))
                .unwrap_or((name.clone(), String::new()));
            for seed_dir in collect_seed_dirs(&vdir) {
                sources.push(SourceRun {
                    axis: Some((axis.clone(), value.clone())),
                    seed_dir,
                });
            }
        }
    } else {
        for seed_dir in collect_seed_dirs(dir) {
            sources.push(SourceRun {
                axis: None,
                seed_dir,
            });
        }
    }
    if sources.is_empty() {
        return Err(CliError::user(format!(
            "{} contains no run manifests to export",
            dir.display()
        )));
    }
    Ok(sources)
}

pub fn cmd_export_plots(dir: &Path) -> Result<ExportOutcome, CliError> {
    let sources = discover(dir)?;
    let is_sweep = sources.iter().any(|s| s.axis.is_some());
    let export_dir = dir.join("export");
    std::fs::create_dir_all(&export_dir)?;
    let mut skipped = Vec::new();

    // accuracy series
    let accuracy_csv = export_dir.join("accuracy_long.csv");
    let mut wrote_accuracy = false;
    {
        let mut w = csv::Writer::from_path(&accuracy_csv)?;
        let mut header = vec![];
        if is_sweep {
            header.extend(["axis", "axis_value"]);
        }
        header.extend(["round", "seed", "variant", "metric", "value"]);
        w.write_record(&header)?;
        for src in &sources {
            let metrics = src.seed_dir.join("metrics.csv");
            if !metrics.exists() {
                skipped.push(metrics.display().to_string());
                continue;
            }
            let mut r = csv::Reader::from_path(&metrics)?;
            for record in r.records() {
                let record = record?;
                let round = &record[0];
                let seed = &record[1];
                let variant = &record[2];
                for (idx, metric) in [(5, "accuracy"), (6, "soft_accuracy"), (7, "mean_r_global")] {
                    let value = &record[idx];
                    if value.is_empty() {
                        continue;
                    }
                    let mut row: Vec<String> = Vec::new();
                    if is_sweep {
                        let (a, v) = src.axis.clone().unwrap_or_default();
                        row.push(a);
                        row.push(v);
                    }
                    row.extend(
                        [round, seed, variant, metric, value]
                            .iter()
                            .map(|s| s.to_string()),
                    );
                    w.write_record(&row)?;
                    wrote_accuracy = true;
                }
            }
        }
        w.flush()?;
    }

    // routing distributions from the final evaluations
    let routing_csv = export_dir.join("routing_timesteps.csv");
    let mut wrote_routing = false;
    {
        let mut w = csv::Writer::from_path(&routing_csv)?;
        let mut header = vec![];
        if is_sweep {
            header.extend(["axis", "axis_value"]);
        }
        header.extend(["seed", "timestep", "client_id", "mean_r_local", "std_r_local"]);
        w.write_record(&header)?;
        for src in &sources {
            let eval_path = src.seed_dir.join("eval.json");
            if !eval_path.exists() {
                skipped.push(eval_path.display().to_string());
                continue;
            }
            let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(&eval_path)?)?;
            for client in &report.clients {
                let stats = &client.eval.routing;
                for (t, (&mean, &std)) in stats
                    .per_step_mean_local
                    .iter()
                    .zip(&stats.per_step_std_local)
                    .enumerate()
                {
                    let mut row: Vec<String> = Vec::new();
                    if is_sweep {
                        let (a, v) = src.axis.clone().unwrap_or_default();
                        row.push(a);
                        row.push(v);
                    }
                    row.extend([
                        report.seed.to_string(),
                        t.to_string(),
                        client.eval.client_id.to_string(),
                        mean.to_string(),
                        std.to_string(),
                    ]);
                    w.write_record(&row)?;
                    wrote_routing = true;
                }
            }
        }
        w.flush()?;
    }

    for s in &skipped {
        log::warn!("export: skipped missing {s}");
    }
    if !wrote_accuracy && !wrote_routing {
        return Err(CliError::user(format!(
            "nothing exported from {}: all source files missing",
            dir.display()
        )));
    }
    Ok(ExportOutcome {
        export_dir,
        accuracy_csv,
        routing_csv,
        skipped,
    })
}
