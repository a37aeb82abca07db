//! Run records and the combined report built from them.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use snnq::alloc::{model_size, param_counts, SizeReport};
use snnq::hessian::LayerTrace;
use snnq::net::EpochReport;
use snnq::quant::LayerBits;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Everything one command produced. Re-running the command with `config`
/// (and the same input checkpoint) reproduces every field but `wall_time_s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config: RunConfig,
    /// SHA-256 of the input checkpoint, if any.
    #[serde(default)]
    pub checkpoint_sha256: Option<String>,
    /// Per-layer widths; absent for full precision.
    #[serde(default)]
    pub bits: Option<Vec<LayerBits>>,
    #[serde(default)]
    pub epochs: Vec<EpochReport>,
    #[serde(default)]
    pub traces: Option<Vec<LayerTrace>>,
    pub size: SizeReport,
    /// Per-layer test accuracy before fine-tuning.
    #[serde(default)]
    pub accuracies_before: Option<Vec<f64>>,
    /// Per-layer test accuracy at the end of the command.
    pub accuracies: Vec<f64>,
    pub wall_time_s: f64,
}

impl RunRecord {
    /// Equal in everything but wall time.
    pub fn same_metrics(&self, other: &Self) -> bool {
        Self {
            wall_time_s: 0.0,
            ..self.clone()
        } == Self {
            wall_time_s: 0.0,
            ..other.clone()
        }
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.accuracies.last().copied()
    }

    pub fn weight_bits(&self) -> Option<Vec<u32>> {
        self.bits.as_ref().map(|b| b.iter().map(|l| l.weight_bits).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| CliError::Other(e.to_string()))?;
        fs::write(path, json).map_err(CliError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: not a run record: {e}", path.display())))
    }
}

/// Row of the accuracy-versus-bits table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitsRow {
    /// `FP32` or the weight widths, space separated.
    pub label: String,
    pub bits: Vec<u32>,
    pub accuracy: f64,
    pub size_mb: f64,
}

/// Row of the trace table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceTableRow {
    pub layer: usize,
    pub trace: f64,
    pub std_err: f64,
    pub local_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub n_records: usize,
    pub bits_table: Vec<BitsRow>,
    pub trace_table: Vec<TraceTableRow>,
}

/// Combines records that share one architecture.
pub fn build_report(records: &[RunRecord]) -> Result<Report> {
    let first = records
        .first()
        .ok_or_else(|| CliError::Config("report needs at least one run record".into()))?;
    let counts = counts_of(first)?;
    let mut bits_table = Vec::new();
    let mut trace_table = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        if counts_of(rec)? != counts {
            return Err(CliError::Config(format!(
                "record {i} ({}) has a different architecture from record 0",
                rec.command
            )));
        }
        if let Some(traces) = &rec.traces {
            if traces.len() != counts.len() || rec.accuracies.len() != counts.len() {
                return Err(CliError::Config(format!("record {i} has a malformed trace table")));
            }
            for t in traces {
                trace_table.push(TraceTableRow {
                    layer: t.layer + 1,
                    trace: t.estimate.mean,
                    std_err: t.estimate.std_err,
                    local_accuracy: rec.accuracies[t.layer],
                });
            }
            continue;
        }
        let (label, bits) = match rec.weight_bits() {
            None => ("FP32".to_string(), vec![32; counts.len()]),
            Some(b) => (b.iter().map(u32::to_string).collect::<Vec<_>>().join(" "), b),
        };
        let size = model_size(&counts, &bits)?;
        bits_table.push(BitsRow {
            label,
            bits,
            accuracy: rec.final_accuracy().unwrap_or(f64::NAN),
            size_mb: size.display_mb(),
        });
    }
    Ok(Report {
        n_records: records.len(),
        bits_table,
        trace_table,
    })
}

fn counts_of(rec: &RunRecord) -> Result<Vec<u64>> {
    let specs = rec.config.arch.resolve()?;
    Ok(param_counts(&specs))
}

/// `label,l1_bits,...,accuracy,size_mb`.
pub fn write_bits_csv<W: Write>(mut out: W, rows: &[BitsRow]) -> std::io::Result<()> {
    let n = rows.first().map_or(0, |r| r.bits.len());
    let mut header = vec!["label".to_string()];
    header.extend((1..=n).map(|l| format!("l{l}_bits")));
    header.push("accuracy".into());
    header.push("size_mb".into());
    writeln!(out, "{}", header.join(","))?;
    for r in rows {
        let bits: Vec<String> = r.bits.iter().map(u32::to_string).collect();
        writeln!(out, "{},{},{},{:.2}", r.label, bits.join(","), r.accuracy, r.size_mb)?;
    }
    Ok(())
}

/// `layer,trace,trace_stderr,local_accuracy`.
pub fn write_trace_table_csv<W: Write>(mut out: W, rows: &[TraceTableRow]) -> std::io::Result<()> {
    writeln!(out, "layer,trace,trace_stderr,local_accuracy")?;
    for r in rows {
        writeln!(out, "L{},{:e},{:e},{}", r.layer, r.trace, r.std_err, r.local_accuracy)?;
    }
    Ok(())
}
