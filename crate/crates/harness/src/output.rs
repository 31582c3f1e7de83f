//! Content-addressed run directories, their manifests, and the metric CSVs
//! written into them.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pcnet::metrics::{Aggregator, Grouping, Metric, SummaryRow};
use pcnet::stimuli::{StimulusClass, StimulusClass as C};
use serde::{Deserialize, Serialize};

use crate::config::{hash_value, ExperimentConfig};

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub pcnet: String,
    pub harness: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub versions: Versions,
    pub complete: bool,
    /// Checkpoints the run read or produced.
    pub checkpoints: Vec<PathBuf>,
    /// Files written, relative to the run directory.
    pub outputs: Vec<String>,
}

pub enum RunStatus {
    New(RunDir),
    /// A finished run with this command and config already exists.
    Complete(PathBuf),
}

pub struct RunDir {
    pub path: PathBuf,
    manifest: RunManifest,
}

/// `<out_dir>/<command>-<hash>` for this command and config.
pub fn run_path(cfg: &ExperimentConfig, command: &str) -> PathBuf {
    cfg.out_dir.join(format!("{command}-{}", run_hash(cfg, command)))
}

fn run_hash(cfg: &ExperimentConfig, command: &str) -> String {
    hash_value(&serde_json::json!({"command": command, "config": cfg.hash()}))
}

pub fn read_run_manifest(dir: &Path) -> Result<RunManifest> {
    let p = dir.join(RUN_MANIFEST);
    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Claims the run directory. An existing complete run is returned as such;
/// an existing incomplete one is an error rather than being overwritten.
pub fn open_run(cfg: &ExperimentConfig, command: &str) -> Result<RunStatus> {
    let path = run_path(cfg, command);
    if path.exists() {
        return match read_run_manifest(&path) {
            Ok(m) if m.complete => Ok(RunStatus::Complete(path)),
            _ => bail!(
                "{} exists but did not finish; remove it to rerun (trained checkpoints are kept separately)",
                path.display()
            ),
        };
    }
    fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
    let run = RunDir {
        manifest: RunManifest {
            command: command.to_string(),
            config_hash: cfg.hash(),
            config: cfg.clone(),
            versions: Versions {
                pcnet: pcnet::VERSION.to_string(),
                harness: env!("CARGO_PKG_VERSION").to_string(),
            },
            complete: false,
            checkpoints: Vec::new(),
            outputs: Vec::new(),
        },
        path,
    };
    run.write_manifest()?;
    Ok(RunStatus::New(run))
}

impl RunDir {
    fn write_manifest(&self) -> Result<()> {
        let p = self.path.join(RUN_MANIFEST);
        fs::write(&p, serde_json::to_vec_pretty(&self.manifest)?).with_context(|| format!("writing {}", p.display()))
    }

    pub fn record_checkpoints<'a>(&mut self, paths: impl IntoIterator<Item = &'a PathBuf>) {
        for p in paths {
            if !self.manifest.checkpoints.contains(p) {
                self.manifest.checkpoints.push(p.clone());
            }
        }
    }

    /// Path for an output file, recorded in the manifest.
    pub fn output(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.path.join(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        self.manifest.outputs.push(rel.to_string());
        Ok(p)
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.manifest.complete = true;
        self.write_manifest()?;
        Ok(self.path)
    }
}

/// Writes the per-network CSVs (`decisions.csv`, `fg.csv`,
/// `reconstruction.csv`) and their pooled `*_all.csv` counterparts under
/// `prefix`, for every metric the records carry. Row counts of the
/// per-network files are networks × classes × noise levels × timesteps.
pub fn write_metric_csvs(
    run: &mut RunDir,
    prefix: &str,
    agg: &Aggregator,
    noise_levels: &[f32],
    timesteps: usize,
    tag: Option<&str>,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (metric, name) in [
        (Metric::PSquare, "decisions"),
        (Metric::Fg, "fg"),
        (Metric::Reconstruction, "reconstruction"),
    ] {
        if agg.summarize(metric, Grouping::AcrossNetworks).iter().all(|r| r.mean.is_none()) {
            continue;
        }
        for (grouping, suffix) in [(Grouping::PerNetwork, ""), (Grouping::AcrossNetworks, "_all")] {
            let rows = agg.dense(metric, grouping, &StimulusClass::ALL, noise_levels, 1..=timesteps);
            let p = run.output(&format!("{prefix}{name}{suffix}.csv"))?;
            pcnet::metrics::write_summary_csv(&p, metric, &rows, tag)?;
            written.push(p);
        }
    }
    Ok(written)
}

/// Reads a CSV written by [`write_metric_csvs`] back into rows; `n` is not
/// stored and comes back as 0.
pub fn read_metric_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let parse_opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            Ok(Some(s.parse()?))
        }
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() < 6 {
            bail!("{}: short row {:?}", path.display(), rec);
        }
        out.push(SummaryRow {
            network_id: rec[0].to_string(),
            class: rec[1].parse()?,
            noise_sigma: rec[2].parse()?,
            timestep: rec[3].parse()?,
            mean: parse_opt(&rec[4])?,
            sem: parse_opt(&rec[5])?,
            n: 0,
        });
    }
    Ok(out)
}

/// Mean at one cell of a set of rows.
pub fn cell(rows: &[SummaryRow], network: &str, class: C, noise: f32, t: usize) -> Option<f64> {
    rows.iter()
        .find(|r| r.network_id == network && r.class == class && r.noise_sigma == noise && r.timestep == t)
        .and_then(|r| r.mean)
}
