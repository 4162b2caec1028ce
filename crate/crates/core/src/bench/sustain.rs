use std::collections::HashSet;
use std::fmt::Write as _;

use super::{deployed_accuracy, develop};
use crate::data::{image_digest, Dataset};
use crate::error::{Error, Result};
use crate::train::{split_train_test, TrainConfig};
use crate::zoo::ModelSpec;

pub const LOOP_CSV_HEADER: &str = "model,iteration,op_accuracy,storage_mib";
pub const DEFAULT_SHIFT: f64 = 0.6;
/// Share of the operation data held out for evaluation; the rest is sent
/// back for retraining.
pub const OP_EVAL_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct LoopRecord {
    pub model: String,
    pub iteration: u8,
    pub op_accuracy: f64,
    pub storage_bytes: u64,
}

impl LoopRecord {
    pub fn storage_mib(&self) -> f64 {
        self.storage_bytes as f64 / (1u64 << 20) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoopReport {
    pub records: Vec<LoopRecord>,
    /// Held-out operation images that also appear among the training inputs
    /// of either iteration, by content hash.
    pub eval_overlap: usize,
    pub op_train: usize,
    pub op_eval: usize,
}

impl LoopReport {
    pub fn is_disjoint(&self) -> bool {
        self.eval_overlap == 0
    }

    pub fn record(&self, model: &str, iteration: u8) -> Option<&LoopRecord> {
        self.records
            .iter()
            .find(|r| r.model == model && r.iteration == iteration)
    }

    /// Append the records of another model's run.
    pub fn extend(&mut self, other: LoopReport) {
        self.records.extend(other.records);
        self.eval_overlap += other.eval_overlap;
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{LOOP_CSV_HEADER}\n");
        for r in &self.records {
            writeln!(
                out,
                "{},{},{:.4},{:.4}",
                r.model,
                r.iteration,
                r.op_accuracy,
                r.storage_mib()
            )
            .unwrap();
        }
        out
    }

    pub fn to_table(&self) -> String {
        let width = self.records.iter().map(|r| r.model.len()).max().unwrap_or(0).max(5);
        let mut out = format!("{:<width$}  Iteration  Op. accuracy  Storage\n", "Model");
        for r in &self.records {
            writeln!(
                out,
                "{:<width$}  {:<9}  {:<12}  {:.2} MiB",
                r.model,
                r.iteration,
                format!("{:.2}%", r.op_accuracy * 100.0),
                r.storage_mib()
            )
            .unwrap();
        }
        out
    }
}

/// Two deployment iterations of `model`. Iteration 1 trains on `dev` only;
/// iteration 2 retrains from scratch on `dev` plus the operation-side
/// training split. Both are exported, loaded by the runtime and scored on the
/// same held-out operation split.
pub fn run_sustainability_loop(
    model: &ModelSpec,
    dev: &Dataset,
    op: &Dataset,
    cfg: &TrainConfig,
) -> Result<LoopReport> {
    let (op_train, op_eval) = split_train_test(op, OP_EVAL_FRACTION, cfg.seed)
        .map_err(|e| Error::Data(format!("operation data too small to split: {e}")))?;
    let merged = dev.merged(&op_train, "op_");

    let trained: HashSet<[u8; 32]> = merged.images.iter().map(image_digest).collect();
    let eval_overlap = op_eval
        .images
        .iter()
        .filter(|img| trained.contains(&image_digest(img)))
        .count();

    let mut records = Vec::with_capacity(2);
    for (iteration, data) in [(1u8, dev), (2u8, &merged)] {
        let (g, _) = develop(model, data, cfg)?;
        let (op_accuracy, storage_bytes) = deployed_accuracy(&g, &op_eval)?;
        records.push(LoopRecord {
            model: model.family().to_string(),
            iteration,
            op_accuracy,
            storage_bytes,
        });
    }
    Ok(LoopReport {
        records,
        eval_overlap,
        op_train: op_train.len(),
        op_eval: op_eval.len(),
    })
}
