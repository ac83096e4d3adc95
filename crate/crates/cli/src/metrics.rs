//! Per-epoch metrics tables.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use backeisnn::network::{ActivityStats, ConfusionMatrix};

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: u32,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: f64,
    pub wall_time: f64,
    pub lr: f64,
    /// `(layer index, mean spike magnitude)` per spiking layer.
    pub spike_rates: Vec<(usize, f64)>,
}

impl MetricsRow {
    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["epoch", "split", "loss", "accuracy", "wall_time_s", "lr"]
            .map(String::from)
            .to_vec();
        h.extend(
            self.spike_rates
                .iter()
                .map(|(l, _)| format!("spike_rate_layer{l}")),
        );
        h
    }

    fn record(&self) -> Vec<String> {
        let mut r = vec![
            self.epoch.to_string(),
            self.split.to_string(),
            self.loss.to_string(),
            self.accuracy.to_string(),
            format!("{:.3}", self.wall_time),
            self.lr.to_string(),
        ];
        r.extend(self.spike_rates.iter().map(|(_, v)| v.to_string()));
        r
    }
}

/// Appends rows to a CSV file, writing the header only when the file is new.
pub struct MetricsWriter {
    path: PathBuf,
}

impl MetricsWriter {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, row: &MetricsRow) -> Result<(), CliError> {
        let fresh = !self.path.exists();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| CliError::io(&self.path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let io = |e: csv::Error| CliError::io(&self.path, std::io::Error::other(e));
        if fresh {
            w.write_record(row.header()).map_err(io)?;
        }
        w.write_record(row.record()).map_err(io)?;
        w.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

pub fn spike_rates(stats: &ActivityStats) -> Vec<(usize, f64)> {
    stats
        .layers
        .iter()
        .map(|l| (l.layer, l.spike_rate()))
        .collect()
}

/// Per-layer activity table.
pub fn activity_table(stats: &ActivityStats) -> String {
    let mut out =
        String::from("layer,spike_rate,positive,negative,negative_fraction,sfb_mean,sfb_std\n");
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for l in &stats.layers {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            l.layer,
            l.spike_rate(),
            l.positive,
            l.negative,
            l.negative_fraction(),
            opt(l.sfb_mean()),
            opt(l.sfb_std())
        ));
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_confusion(path: &Path, cm: &ConfusionMatrix) -> Result<(), CliError> {
    write_text(path, &cm.to_grid())
}
