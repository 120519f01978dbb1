use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Evaluation, SelectionSummary};
use crate::error::{Error, Result};
use crate::objective::LossBreakdown;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Step,
    Epoch,
}

/// One line of the metrics stream. Training statistics cover the steps
/// since the previous record of the same kind; `val` is present on epoch
/// records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub kind: RecordKind,
    pub step: u64,
    pub epoch: u64,
    pub loss: LossBreakdown,
    pub acc_train: f64,
    pub acc_val: Option<f64>,
    pub mean_k: f64,
    pub train: SelectionSummary,
    pub val: Option<Evaluation>,
}

pub const CSV_HEADER: &str = "step,epoch,loss_total,loss_task,loss_budget,loss_entropy,acc_train,acc_val,s_mean,s_std,mean_k,flops_inference,ratio_attention";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let cost = self.val.as_ref().map(|v| &v.cost);
        [
            self.step.to_string(),
            self.epoch.to_string(),
            self.loss.total.to_string(),
            self.loss.task.to_string(),
            self.loss.budget.to_string(),
            self.loss.entropy.to_string(),
            self.acc_train.to_string(),
            opt(self.acc_val),
            opt(self.train.s_mean),
            opt(self.train.s_std),
            self.mean_k.to_string(),
            opt(cost.map(|c| c.flops_total)),
            opt(cost.map(|c| c.ratio_attention)),
        ]
        .join(",")
    }
}

/// Appends records to `metrics.jsonl` and `metrics.csv`.
pub struct MetricsWriter {
    jsonl: BufWriter<File>,
    csv: BufWriter<File>,
    dir: std::path::PathBuf,
}

impl MetricsWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let path = dir.join(name);
            Ok(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?))
        };
        let mut w = Self {
            jsonl: open("metrics.jsonl")?,
            csv: open("metrics.csv")?,
            dir: dir.to_path_buf(),
        };
        writeln!(w.csv, "{CSV_HEADER}").map_err(|e| Error::io(&w.dir, e))?;
        Ok(w)
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(self.jsonl, "{line}").map_err(|e| Error::io(&self.dir, e))?;
        writeln!(self.csv, "{}", rec.csv_row()).map_err(|e| Error::io(&self.dir, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.jsonl.flush().map_err(|e| Error::io(&self.dir, e))?;
        self.csv.flush().map_err(|e| Error::io(&self.dir, e))
    }
}
