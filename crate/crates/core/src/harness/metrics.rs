use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::algos::UpdateReport;
use crate::error::{Error, Result};

/// One row per update. Contains no wall-clock quantities, so identical
/// configurations produce identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub update: usize,
    pub step: usize,
    pub train_return: Option<f64>,
    pub episodes: usize,
    pub eval_return: Option<f64>,
    pub eval_return_dropout_on: Option<f64>,
    pub eval_return_dropout_off: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm_pre_clip: f64,
    pub min_batch_logp: f64,
    pub early_stopped_at: Option<usize>,
    pub actor_steps: usize,
    pub diverged: bool,
}

impl MetricsRecord {
    pub fn new(update: usize, step: usize, completed: &[f64], r: &UpdateReport) -> Self {
        MetricsRecord {
            update,
            step,
            train_return: (!completed.is_empty()).then(|| completed.iter().sum::<f64>() / completed.len() as f64),
            episodes: completed.len(),
            eval_return: None,
            eval_return_dropout_on: None,
            eval_return_dropout_off: None,
            policy_loss: r.policy_loss,
            value_loss: r.value_loss,
            entropy: r.entropy,
            mean_kl: r.mean_kl,
            clip_fraction: r.clip_fraction,
            grad_norm_pre_clip: r.grad_norm_pre_clip,
            min_batch_logp: r.min_batch_logp,
            early_stopped_at: r.early_stopped_at,
            actor_steps: r.actor_steps,
            diverged: r.diverged,
        }
    }
}

/// Streams records to `metrics.jsonl` and `metrics.csv`.
pub struct MetricsWriter {
    jsonl: BufWriter<File>,
    csv: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let jsonl = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
        let csv = csv::Writer::from_path(dir.join("metrics.csv")).map_err(csv_err)?;
        Ok(MetricsWriter { jsonl, csv })
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.jsonl, rec).map_err(|e| Error::Format(e.to_string()))?;
        self.jsonl.write_all(b"\n")?;
        self.csv.serialize(rec).map_err(csv_err)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.jsonl.flush()?;
        self.csv.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(e.to_string())))
        .collect()
}

/// Mean training return over the last third of the updates that completed
/// at least one episode.
pub fn final_third_return(records: &[MetricsRecord]) -> Option<f64> {
    let n = records.len();
    if n == 0 {
        return None;
    }
    let tail: Vec<f64> = records[n - n.div_ceil(3)..]
        .iter()
        .filter_map(|r| r.train_return)
        .collect();
    (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
}
