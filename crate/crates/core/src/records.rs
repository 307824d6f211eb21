//! Persisted experiment output: a manifest with the config and its hash, a
//! CSV of per-trial cells, a CSV of named series, and a JSON-lines summary.
//! Reading is the exact inverse of writing; floats are written in shortest
//! round-trip form, so numeric payloads survive bitwise.

use crate::config::{ExperimentConfig, ARTIFACT_VERSION};
use crate::error::{Error, Result};
use crate::stats::WilsonInterval;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

/// One sweep cell: a single trial at a single scale ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub epsilon: f64,
    pub trial: usize,
    /// Slow-noise stream (shared with the averaged twin under common-noise
    /// coupling).
    pub stream_q1: u64,
    /// Fast-noise stream.
    pub stream_q2: u64,
    /// sup over the macro grid of the sup-norm gap |u_eps - u_bar|.
    pub sup_gap: f64,
    /// Trial aborted by the blow-up guard; recorded as an exceedance.
    pub blown_up: bool,
}

/// Per-epsilon summary of the convergence experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsSummary {
    pub epsilon: f64,
    pub trials: usize,
    pub exceedances: usize,
    pub wilson: WilsonInterval,
    pub gap_q10: f64,
    pub gap_median: f64,
    pub gap_q90: f64,
}

/// A named numeric series attached to a run (deviations, remainders, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub kind: String,
    pub epsilon: f64,
    pub index: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub artifact_version: String,
    /// Exceedance threshold actually used (pilot-derived when the config
    /// leaves it unset).
    pub eta: Option<f64>,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub manifest: Manifest,
    pub cells: Vec<SweepCell>,
    pub summaries: Vec<EpsSummary>,
    pub series: Vec<SeriesRow>,
}

impl RunRecord {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        Ok(RunRecord {
            manifest: Manifest {
                config: config.clone(),
                config_hash: config.hash()?,
                artifact_version: ARTIFACT_VERSION.to_string(),
                eta: None,
                wall_clock_seconds: 0.0,
            },
            cells: Vec::new(),
            summaries: Vec::new(),
            series: Vec::new(),
        })
    }

    /// Equality of everything except the wall clock.
    pub fn payload_equals(&self, other: &RunRecord) -> bool {
        self.manifest.config == other.manifest.config
            && self.manifest.config_hash == other.manifest.config_hash
            && self.manifest.eta == other.manifest.eta
            && self.cells == other.cells
            && self.summaries == other.summaries
            && self.series == other.series
    }
}

/// Write a run record into `dir` (created if missing): manifest.json,
/// cells.csv, series.csv, summary.jsonl.
pub fn write_run_record(record: &RunRecord, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest_json = serde_json::to_string_pretty(&record.manifest)?;
    fs::write(dir.join("manifest.json"), manifest_json)?;

    let mut cells = String::from("epsilon,trial,stream_q1,stream_q2,sup_gap,blown_up\n");
    for c in &record.cells {
        cells.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.epsilon, c.trial, c.stream_q1, c.stream_q2, c.sup_gap, c.blown_up
        ));
    }
    fs::write(dir.join("cells.csv"), cells)?;

    let mut series = String::from("kind,epsilon,index,value\n");
    for s in &record.series {
        series.push_str(&format!("{},{},{},{}\n", s.kind, s.epsilon, s.index, s.value));
    }
    fs::write(dir.join("series.csv"), series)?;

    let mut summary = fs::File::create(dir.join("summary.jsonl"))?;
    for s in &record.summaries {
        writeln!(summary, "{}", serde_json::to_string(s)?)?;
    }
    Ok(())
}

/// Read a run record back, verifying the stored config hash.
pub fn read_run_record(dir: &Path) -> Result<RunRecord> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let recomputed = manifest.config.hash()?;
    if recomputed != manifest.config_hash {
        return Err(Error::Corrupt(format!(
            "config hash mismatch: stored {}, recomputed {}",
            manifest.config_hash, recomputed
        )));
    }
    let mut cells = Vec::new();
    for (ln, line) in fs::read_to_string(dir.join("cells.csv"))?
        .lines()
        .enumerate()
        .skip(1)
    {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(Error::Corrupt(format!("cells.csv line {}", ln + 1)));
        }
        cells.push(SweepCell {
            epsilon: parse_f64(parts[0], "cells.csv epsilon")?,
            trial: parse_usize(parts[1], "cells.csv trial")?,
            stream_q1: parse_u64(parts[2], "cells.csv stream_q1")?,
            stream_q2: parse_u64(parts[3], "cells.csv stream_q2")?,
            sup_gap: parse_f64(parts[4], "cells.csv sup_gap")?,
            blown_up: parts[5] == "true",
        });
    }
    let mut series = Vec::new();
    for (ln, line) in fs::read_to_string(dir.join("series.csv"))?
        .lines()
        .enumerate()
        .skip(1)
    {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Corrupt(format!("series.csv line {}", ln + 1)));
        }
        series.push(SeriesRow {
            kind: parts[0].to_string(),
            epsilon: parse_f64(parts[1], "series.csv epsilon")?,
            index: parse_usize(parts[2], "series.csv index")?,
            value: parse_f64(parts[3], "series.csv value")?,
        });
    }
    let mut summaries = Vec::new();
    for line in fs::read_to_string(dir.join("summary.jsonl"))?.lines() {
        if line.trim().is_empty() {
            continue;
        }
        summaries.push(serde_json::from_str(line)?);
    }
    Ok(RunRecord {
        manifest,
        cells,
        summaries,
        series,
    })
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::Corrupt(format!("{what}: bad float {s:?}")))
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Corrupt(format!("{what}: bad integer {s:?}")))
}

fn parse_u64(s: &str, what: &str) -> Result<u64> {
    s.parse()
        .map_err(|_| Error::Corrupt(format!("{what}: bad integer {s:?}")))
}

/// Export a trajectory as CSV: time, then one column per slow mode and one
/// per fast mode (whichever are present).
pub fn trajectory_to_csv(rec: &crate::integrators::TrajectoryRecord) -> String {
    let k_slow = rec.slow_modes.first().map_or(0, |m| m.len());
    let k_fast = rec.fast_modes.first().map_or(0, |m| m.len());
    let mut header = String::from("time");
    for k in 0..k_slow {
        header.push_str(&format!(",u_{}", k + 1));
    }
    for k in 0..k_fast {
        header.push_str(&format!(",v_{}", k + 1));
    }
    header.push('\n');
    let mut out = header;
    for (i, t) in rec.times.iter().enumerate() {
        out.push_str(&format!("{t}"));
        if k_slow > 0 {
            for v in &rec.slow_modes[i] {
                out.push_str(&format!(",{v}"));
            }
        }
        if k_fast > 0 {
            for v in &rec.fast_modes[i] {
                out.push_str(&format!(",{v}"));
            }
        }
        out.push('\n');
    }
    out
}

/// JSON-lines summary of a trajectory: per sample time, the recorded norms.
pub fn trajectory_summary_jsonl(rec: &crate::integrators::TrajectoryRecord) -> String {
    let mut out = String::new();
    for (i, t) in rec.times.iter().enumerate() {
        let slow = rec.slow_sup.get(i);
        let fast = rec.fast_sup.get(i);
        let mut obj = serde_json::Map::new();
        obj.insert("time".into(), serde_json::json!(t));
        if let Some(s) = slow {
            obj.insert("slow_sup".into(), serde_json::json!(s));
        }
        if let Some(f) = fast {
            obj.insert("fast_sup".into(), serde_json::json!(f));
        }
        out.push_str(&serde_json::Value::Object(obj).to_string());
        out.push('\n');
    }
    out
}

/// Persist an empirical measure: member-by-mode coefficient matrix plus a
/// JSON metadata side file.
pub fn write_measure_csv(
    measure: &mut crate::measures::EmpiricalMeasure,
    model: &crate::spectral::SpectralModel,
    dir: &Path,
    name: &str,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let k = model.k_modes();
    let mut csv = String::from("member");
    for kk in 0..k {
        csv.push_str(&format!(",c_{}", kk + 1));
    }
    csv.push('\n');
    for (i, member) in measure.members.iter_mut().enumerate() {
        csv.push_str(&format!("{i}"));
        for c in member.modes(model) {
            csv.push_str(&format!(",{c}"));
        }
        csv.push('\n');
    }
    fs::write(dir.join(format!("{name}.csv")), csv)?;
    let meta = serde_json::json!({
        "t": measure.t,
        "t_burn": measure.t_burn,
        "stream_base": measure.stream_base,
        "members": measure.members.len(),
    });
    fs::write(
        dir.join(format!("{name}.meta.json")),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(())
}
