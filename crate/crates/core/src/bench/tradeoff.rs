use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{deployed_accuracy, develop};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::train::TrainConfig;
use crate::zoo::{storage_weight, ModelSpec};

pub const TRADEOFF_CSV_HEADER: &str =
    "augmented,image_size,batch_size,conv_blocks,fc1_input,fc2_input,param_count,test_accuracy,storage_mib";

#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffRow {
    pub model: String,
    pub augmented: bool,
    pub image_size: usize,
    pub batch_size: usize,
    pub conv_blocks: usize,
    pub fc1_input: String,
    pub fc2_input: String,
    pub param_count: usize,
    /// `None` when training diverged.
    pub test_accuracy: Option<f64>,
    pub storage_bytes: u64,
}

impl TradeoffRow {
    pub fn storage_mib(&self) -> f64 {
        self.storage_bytes as f64 / (1u64 << 20) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TradeoffReport {
    pub rows: Vec<TradeoffRow>,
}

impl TradeoffReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{TRADEOFF_CSV_HEADER}\n");
        for r in &self.rows {
            let acc = r
                .test_accuracy
                .map_or_else(|| "diverged".to_string(), |a| format!("{a:.4}"));
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{:.4}",
                r.augmented,
                r.image_size,
                r.batch_size,
                r.conv_blocks,
                r.fc1_input,
                r.fc2_input,
                r.param_count,
                acc,
                r.storage_mib()
            )
            .unwrap();
        }
        out
    }

    /// Plain-text table with one left-aligned column per field.
    pub fn to_table(&self) -> String {
        let header = [
            "Model",
            "Augmented",
            "Image size",
            "Batch",
            "Conv. layers",
            "FC1 input",
            "FC2 input",
            "Params",
            "Test acc.",
            "Storage",
        ];
        let rows: Vec<[String; 10]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.model.clone(),
                    if r.augmented { "YES" } else { "NO" }.into(),
                    r.image_size.to_string(),
                    r.batch_size.to_string(),
                    r.conv_blocks.to_string(),
                    r.fc1_input.clone(),
                    r.fc2_input.clone(),
                    format!("{:.2}M", r.param_count as f64 / 1e6),
                    r.test_accuracy
                        .map_or_else(|| "diverged".into(), |a| format!("{:.2}%", a * 100.0)),
                    format!("{:.2} MiB", r.storage_mib()),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = String::new();
        let mut line = |cells: &[&str]| {
            let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
            out.push_str(padded.join("  ").trim_end());
            out.push('\n');
        };
        line(&header);
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        line(&rule.iter().map(String::as_str).collect::<Vec<_>>());
        for row in &rows {
            line(&row.iter().map(String::as_str).collect::<Vec<_>>());
        }
        out
    }

    pub fn best_accuracy(&self) -> Option<f64> {
        self.rows.iter().filter_map(|r| r.test_accuracy).reduce(f64::max)
    }

    /// The row with the fewest parameters among those within `points`
    /// accuracy points (fractions, so 0.03 = 3 points) of the best.
    pub fn lightest_within(&self, points: f64) -> Option<&TradeoffRow> {
        let best = self.best_accuracy()?;
        self.rows
            .iter()
            .filter(|r| r.test_accuracy.is_some_and(|a| a >= best - points - 1e-12))
            .min_by_key(|r| r.param_count)
    }

    pub fn largest(&self) -> Option<&TradeoffRow> {
        self.rows.iter().max_by_key(|r| r.param_count)
    }
}

fn bench_row(model: &ModelSpec, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<TradeoffRow> {
    let shape_only = model.build(cfg.seed)?;
    let mut row = TradeoffRow {
        model: model.family().to_string(),
        augmented: cfg.augment,
        image_size: model.image_size(),
        batch_size: cfg.batch_size,
        conv_blocks: model.conv_blocks(),
        fc1_input: model.fc1_input_label(),
        fc2_input: model.fc2_input_label(),
        param_count: shape_only.param_count(),
        test_accuracy: None,
        storage_bytes: storage_weight(&shape_only).storage_bytes,
    };
    match develop(model, train, cfg) {
        Ok((g, _)) => {
            let (acc, bytes) = deployed_accuracy(&g, test)?;
            row.test_accuracy = Some(acc);
            row.storage_bytes = bytes;
        }
        Err(Error::Diverged { .. }) => {}
        Err(e) => return Err(e),
    }
    Ok(row)
}

/// Train every model on the same data with the same config, deploy it and
/// record accuracy next to its size. Rows keep the order of `models`;
/// `jobs` rows train concurrently.
pub fn run_tradeoff_bench(
    models: &[ModelSpec],
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<TradeoffReport> {
    if models.len() < 2 {
        return Err(Error::Config(format!(
            "the bench needs at least 2 models, got {}",
            models.len()
        )));
    }
    cfg.validate()?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<TradeoffRow>>>> = Mutex::new(models.iter().map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, models.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(model) = models.get(i) else { break };
                let row = bench_row(model, train, test, cfg);
                results.lock().expect("no worker panicked")[i] = Some(row);
            });
        }
    });
    let rows = results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every row ran"))
        .collect::<Result<Vec<_>>>()?;
    Ok(TradeoffReport { rows })
}
