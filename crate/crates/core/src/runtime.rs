//! Operation-side inference: load an exchange file once, then predict.

use std::time::{Duration, Instant};

use crate::error::{Error, FormatError, Result};
use crate::exchange::{self, OpSupportTable};
use crate::graph::ModelGraph;
use crate::preprocess::{preprocess_pipeline, Image, PreprocessSpec};
use crate::tensor::{argmax, Tensor4};

pub const DEFAULT_WARMUP: usize = 3;
pub const DEFAULT_RUNS: usize = 30;

/// An immutable loaded model. Sessions are `Sync`; `predict` takes `&self`.
#[derive(Debug, Clone)]
pub struct RuntimeSession {
    graph: ModelGraph,
    spec: PreprocessSpec,
    storage_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class_id: usize,
    /// Softmax scaled to percentages; sums to 100.
    pub confidences: Vec<f64>,
    /// Forward pass only.
    pub latency: Duration,
    pub preprocess_time: Duration,
}

impl Prediction {
    pub fn confidence(&self) -> f64 {
        self.confidences[self.class_id]
    }

    /// `class_id,confidence_pct,latency_ms`
    pub fn to_line(&self) -> String {
        format!(
            "{},{:.2},{:.3}",
            self.class_id,
            self.confidence(),
            self.latency.as_secs_f64() * 1e3
        )
    }

    pub fn to_kv(&self) -> String {
        let confs: Vec<String> = self.confidences.iter().map(|c| format!("{c:.4}")).collect();
        format!(
            "class_id={} confidence_pct={:.4} latency_ms={:.3} preprocess_ms={:.3} confidences={}",
            self.class_id,
            self.confidence(),
            self.latency.as_secs_f64() * 1e3,
            self.preprocess_time.as_secs_f64() * 1e3,
            confs.join(",")
        )
    }

    /// Equal apart from timings.
    pub fn same_outcome(&self, other: &Prediction) -> bool {
        self.class_id == other.class_id && self.confidences == other.confidences
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Line,
    Kv,
}

impl OutputFormat {
    pub fn render(self, p: &Prediction) -> String {
        match self {
            OutputFormat::Line => p.to_line(),
            OutputFormat::Kv => p.to_kv(),
        }
    }
}

/// Refuses files that fail validation against `support` or carry no
/// preprocessing spec; the spec always comes from the file.
pub fn load_session(bytes: &[u8], support: &OpSupportTable) -> Result<RuntimeSession> {
    let graph = exchange::import_model(bytes, support)?;
    let spec = graph
        .meta
        .preprocess
        .ok_or_else(|| FormatError::Metadata("file carries no preprocessing spec".into()))?;
    if spec.target_size != graph.meta.image_size {
        return Err(FormatError::Metadata(format!(
            "preprocess size {} differs from model input {}",
            spec.target_size, graph.meta.image_size
        ))
        .into());
    }
    Ok(RuntimeSession {
        graph,
        spec,
        storage_bytes: bytes.len() as u64,
    })
}

/// Softmax of one logit row, as percentages, computed in double precision.
pub fn confidences(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| 100.0 * e / total).collect()
}

impl RuntimeSession {
    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn spec(&self) -> &PreprocessSpec {
        &self.spec
    }

    pub fn storage_bytes(&self) -> u64 {
        self.storage_bytes
    }

    pub fn num_classes(&self) -> usize {
        self.graph.meta.num_classes
    }

    /// The same entry point the trainer uses.
    pub fn preprocess(&self, img: &Image) -> Result<Tensor4> {
        preprocess_pipeline(img, &self.spec)
    }

    pub fn predict(&self, img: &Image) -> Result<Prediction> {
        let start = Instant::now();
        let t = self.preprocess(img)?;
        let preprocess_time = start.elapsed();
        let mut p = self.predict_tensor(&t)?;
        p.preprocess_time = preprocess_time;
        Ok(p)
    }

    /// Predict from an already preprocessed `1×3×S×S` tensor.
    pub fn predict_tensor(&self, t: &Tensor4) -> Result<Prediction> {
        if t.shape().b != 1 {
            return Err(Error::Dimension {
                op: "predict",
                axis: "B",
                expected: 1,
                actual: t.shape().b,
            });
        }
        let start = Instant::now();
        let logits = self.graph.forward_eval(t)?;
        let latency = start.elapsed();
        let confidences = confidences(logits.row(0));
        Ok(Prediction {
            class_id: argmax(&confidences),
            confidences,
            latency,
            preprocess_time: Duration::ZERO,
        })
    }

    /// Share of `images` whose predicted class equals the label.
    pub fn accuracy(&self, images: &[Image], labels: &[usize]) -> Result<f64> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::Data(format!(
                "accuracy needs matching non-empty images and labels ({} vs {})",
                images.len(),
                labels.len()
            )));
        }
        let mut correct = 0;
        for (img, &label) in images.iter().zip(labels) {
            if self.predict(img)?.class_id == label {
                correct += 1;
            }
        }
        Ok(correct as f64 / images.len() as f64)
    }

    pub fn measure_latency(&self, img: &Image, warmup: usize, runs: usize) -> Result<LatencySummary> {
        if runs == 0 {
            return Err(Error::invalid("measure_latency", "runs must be >= 1"));
        }
        let t = self.preprocess(img)?;
        for _ in 0..warmup {
            self.graph.forward_eval(&t)?;
        }
        let samples = (0..runs)
            .map(|_| {
                let start = Instant::now();
                self.graph.forward_eval(&t).map(|_| start.elapsed())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LatencySummary::from_samples(samples))
    }
}

/// Read `path`, then [`load_session`].
pub fn load_session_file(path: &std::path::Path, support: &OpSupportTable) -> Result<RuntimeSession> {
    load_session(&std::fs::read(path)?, support)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencySummary {
    pub samples: Vec<Duration>,
    pub median: Duration,
    pub p95: Duration,
}

impl LatencySummary {
    /// Median (mean of the two middle values for even counts) and
    /// nearest-rank 95th percentile.
    pub fn from_samples(samples: Vec<Duration>) -> Self {
        assert!(!samples.is_empty(), "at least one sample");
        let mut sorted = samples.clone();
        sorted.sort();
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2
        };
        let rank = (0.95 * n as f64).ceil() as usize;
        LatencySummary {
            samples,
            median,
            p95: sorted[rank.max(1) - 1],
        }
    }
}
