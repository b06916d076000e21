use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of the metrics file. Training fields are means over the steps
/// since the previous record; `val_*` fields come from the held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: u64,
    pub beta: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub train_reward: f64,
    pub encoder_loss: f64,
    pub decoder_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ess_ratio: Option<f64>,
    pub val_reward: f64,
    pub val_elbo: f64,
    pub val_kl: f64,
    pub val_entropy: f64,
    pub val_l2: f64,
    pub val_nll_per_dim: f64,
    /// Per-bit accuracy of greedy reconstructions; Bernoulli data only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_s: Option<f64>,
}

pub const PLOT_HEADER: &str = "step,reward,elbo,entropy,eta,ess_ratio";

impl MetricsRecord {
    pub fn plot_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.val_reward,
            self.val_elbo,
            self.val_entropy,
            opt(self.eta),
            opt(self.ess_ratio)
        )
    }
}

/// Appends JSON lines to a metrics file.
#[derive(Debug)]
pub struct MetricsWriter {
    file: File,
}

impl MetricsWriter {
    /// Truncates, or appends when resuming.
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self { file })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::Invalid(e.to_string()))?;
        writeln!(self.file, "{line}").map_err(|e| Error::Invalid(e.to_string()))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes the plot CSV for a JSONL metrics file.
pub fn export_plots(metrics: &Path, out: &Path) -> Result<usize> {
    let records = read_metrics(metrics)?;
    let mut text = String::from(PLOT_HEADER);
    text.push('\n');
    for r in &records {
        text.push_str(&r.plot_row());
        text.push('\n');
    }
    fs::write(out, text).map_err(|e| Error::io(out, e))?;
    Ok(records.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(step: u64) -> MetricsRecord {
        MetricsRecord {
            step,
            beta: 0.5,
            lr: 3e-4,
            eta: Some(1.25),
            tau: None,
            train_reward: -3.0,
            encoder_loss: 1.0,
            decoder_loss: 3.0,
            eta_loss: Some(0.01),
            ess_ratio: Some(0.5),
            val_reward: -2.5,
            val_elbo: -4.0,
            val_kl: 3.0,
            val_entropy: 2.5,
            val_l2: 0.1,
            val_nll_per_dim: 0.3,
            val_accuracy: Some(0.9),
            wall_clock_s: None,
        }
    }

    #[test]
    fn jsonl_round_trip_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::open(&p, false).unwrap();
        w.write(&record(200)).unwrap();
        w.write(&MetricsRecord { eta: None, ess_ratio: None, ..record(400) }).unwrap();
        drop(w);
        let back = read_metrics(&p).unwrap();
        assert_eq!(back[0], record(200));
        assert!(!fs::read_to_string(&p).unwrap().contains("wall_clock"));
        let csv = dir.path().join("p.csv");
        assert_eq!(export_plots(&p, &csv).unwrap(), 2);
        let text = fs::read_to_string(&csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], PLOT_HEADER);
        assert_eq!(lines[1], "200,-2.5,-4,2.5,1.25,0.5");
        assert_eq!(lines[2], "400,-2.5,-4,2.5,,");
    }

    #[test]
    fn append_mode_keeps_existing_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        MetricsWriter::open(&p, false).unwrap().write(&record(1)).unwrap();
        MetricsWriter::open(&p, true).unwrap().write(&record(2)).unwrap();
        assert_eq!(read_metrics(&p).unwrap().len(), 2);
    }

    #[test]
    fn malformed_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, "{\"step\": 1}\n").unwrap();
        assert!(read_metrics(&p).unwrap_err().to_string().contains("line 1"));
    }
}
