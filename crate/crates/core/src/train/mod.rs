//! Minibatch training, transfer regimes, evaluation and checkpoints.

mod optim;

pub use optim::{Optimizer, OptimizerState};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exchange::{self, hex_f64, ExchangeFile, META_FROZEN};
use crate::graph::ModelGraph;
use crate::ops::{self, Mode};
use crate::preprocess::{
    augment_geometric, compute_dataset_stats, margin_resize, normalize_image, preprocess_pipeline, PreprocessSpec,
};
use crate::rng::Rng;
use crate::tensor::{argmax, Tensor2, Tensor4};
use crate::zoo::init_parameters;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    FeatureExtraction,
    FineTuning,
    TrainFromScratch,
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fe" | "feature-extraction" => Ok(Regime::FeatureExtraction),
            "ft" | "fine-tuning" => Ok(Regime::FineTuning),
            "tfs" | "scratch" | "train-from-scratch" => Ok(Regime::TrainFromScratch),
            _ => Err(Error::Config(format!("unknown regime {s} (expected fe, ft or tfs)"))),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::FeatureExtraction => "fe",
            Regime::FineTuning => "ft",
            Regime::TrainFromScratch => "tfs",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub regime: Regime,
    pub seed: u64,
    /// Train on the four geometric variants of every training image.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            regime: Regime::TrainFromScratch,
            seed: 7,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub test_accuracy: Option<f64>,
    pub steps: usize,
    pub wall_time: Duration,
    pub config: TrainConfig,
}

/// Preprocessed inputs (each `1×3×S×S`) with labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorSet {
    pub inputs: Vec<Tensor4>,
    pub labels: Vec<usize>,
}

impl TensorSet {
    /// Run every image through the shared preprocessing pipeline. With
    /// `augment`, each image contributes its four geometric variants.
    pub fn from_dataset(data: &Dataset, spec: &PreprocessSpec, augment: bool) -> Result<Self> {
        let mut out = TensorSet::default();
        for (img, &label) in data.images.iter().zip(&data.labels) {
            let t = preprocess_pipeline(img, spec)?;
            if augment {
                for v in augment_geometric(&t)? {
                    out.inputs.push(v);
                    out.labels.push(label);
                }
            } else {
                out.inputs.push(t);
                out.labels.push(label);
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn batch(&self, indices: &[usize]) -> Result<(Tensor4, Vec<usize>)> {
        let refs: Vec<&Tensor4> = indices.iter().map(|&i| &self.inputs[i]).collect();
        Ok((
            Tensor4::stack(&refs)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }
}

/// Channel statistics of the training split after resize, crop and scaling.
pub fn fit_preprocess(train: &Dataset, image_size: usize) -> Result<PreprocessSpec> {
    let resize = margin_resize(image_size);
    let tensors = train
        .images
        .iter()
        .map(|img| normalize_image(img, image_size, resize))
        .collect::<Result<Vec<_>>>()?;
    PreprocessSpec::new(image_size, resize, compute_dataset_stats(&tensors)?)
}

/// Class-stratified, seed-deterministic split. Every class keeps at least one
/// sample on each side.
pub fn split_train_test(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in data.labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = Rng::new(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (class, mut idx) in by_class {
        if idx.len() < 2 {
            return Err(Error::Data(format!("class {class} has fewer than 2 samples")));
        }
        rng.shuffle(&mut idx);
        let n_test = ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len() - 1);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((data.subset(&train), data.subset(&test)))
}

/// Prepare `g` for `regime`. FE and FT copy every feature layer from
/// `pretrained` and reinitialize the classifier; FE also freezes the features.
pub fn apply_regime(
    mut g: ModelGraph,
    regime: Regime,
    pretrained: Option<&ModelGraph>,
    seed: u64,
) -> Result<ModelGraph> {
    let mut rng = Rng::new(seed);
    match regime {
        Regime::TrainFromScratch => {
            init_parameters(&mut g, &mut rng, |_| true);
            g.set_frozen(|_| false);
        }
        Regime::FeatureExtraction | Regime::FineTuning => {
            let src = pretrained
                .ok_or_else(|| Error::Checkpoint(format!("regime {regime} needs a pretrained checkpoint")))?;
            let classifier = g.meta.classifier.clone();
            for (name, layer) in g.layers.iter_mut() {
                if classifier.contains(name) {
                    continue;
                }
                let from = src
                    .layers
                    .get(name)
                    .ok_or_else(|| Error::Checkpoint(format!("pretrained checkpoint has no layer {name}")))?;
                let same_shape = from.kind == layer.kind
                    && from.weight.shape == layer.weight.shape
                    && from.bias.as_ref().map(|b| &b.shape) == layer.bias.as_ref().map(|b| &b.shape);
                if !same_shape {
                    return Err(Error::Checkpoint(format!(
                        "layer {name} does not match the pretrained shape"
                    )));
                }
                *layer = from.clone();
            }
            init_parameters(&mut g, &mut rng, |n| classifier.iter().any(|c| c == n));
            let freeze = regime == Regime::FeatureExtraction;
            g.set_frozen(|n| freeze && !classifier.iter().any(|c| c == n));
        }
    }
    Ok(g)
}

/// Train `g` and return it with a report. Feature layers
/// marked frozen are never updated.
pub fn train(
    mut g: ModelGraph,
    data: &TensorSet,
    test: Option<&TensorSet>,
    cfg: &TrainConfig,
) -> Result<(ModelGraph, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let start = Instant::now();
    let mut rng = Rng::new(cfg.seed);
    let mut order_rng = rng.fork();
    let mut dropout_rng = rng.fork();
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;

    for epoch in 0..cfg.epochs {
        order_rng.shuffle(&mut order);
        let mut total = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = data.batch(batch)?;
            let (logits, mut tape) = g.forward(&x, Mode::Train, &mut dropout_rng)?;
            let (loss, grad) = ops::cross_entropy_loss(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            total += loss as f64 * batch.len() as f64;
            let grads = tape.backward(&g, &grad)?;
            opt.apply(&mut g, &grads);
            steps += 1;
        }
        epoch_losses.push(total / data.len() as f64);
    }
    let test_accuracy = test.map(|t| evaluate_accuracy(&g, t)).transpose()?;
    Ok((
        g,
        TrainReport {
            epoch_losses,
            test_accuracy,
            steps,
            wall_time: start.elapsed(),
            config: cfg.clone(),
        },
    ))
}

const EVAL_BATCH: usize = 64;

/// Eval-mode softmax probabilities, one row per input.
pub fn class_probabilities(g: &ModelGraph, inputs: &[Tensor4]) -> Result<Tensor2> {
    let mut rows = Vec::new();
    for chunk in inputs.chunks(EVAL_BATCH) {
        let refs: Vec<&Tensor4> = chunk.iter().collect();
        let probs = ops::softmax(&g.forward_eval(&Tensor4::stack(&refs)?)?);
        rows.extend_from_slice(probs.data());
    }
    Tensor2::from_vec(inputs.len(), g.meta.num_classes, rows)
}

/// Fraction of inputs whose Eval-mode argmax (lowest index on ties) matches the label.
pub fn evaluate_accuracy(g: &ModelGraph, data: &TensorSet) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut correct = 0;
    for (chunk, labels) in data.inputs.chunks(EVAL_BATCH).zip(data.labels.chunks(EVAL_BATCH)) {
        let refs: Vec<&Tensor4> = chunk.iter().collect();
        let logits = g.forward_eval(&Tensor4::stack(&refs)?)?;
        correct += labels
            .iter()
            .enumerate()
            .filter(|&(r, &l)| argmax(logits.row(r)) == l)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Exchange file plus training metadata (frozen layers, regime, seed, ...).
pub fn save_checkpoint(g: &ModelGraph, report: Option<&TrainReport>) -> Vec<u8> {
    let mut file = exchange::to_exchange(g, None);
    let frozen: Vec<&str> = g
        .layers
        .iter()
        .filter(|(_, l)| l.frozen)
        .map(|(n, _)| n.as_str())
        .collect();
    file.metadata.insert(META_FROZEN.into(), frozen.join(","));
    if let Some(r) = report {
        let c = &r.config;
        let mut put = |k: &str, v: String| file.metadata.insert(format!("train.{k}"), v);
        put("epochs", c.epochs.to_string());
        put("batch_size", c.batch_size.to_string());
        put("learning_rate", hex_f64(c.learning_rate));
        put("regime", c.regime.to_string());
        put("seed", c.seed.to_string());
        put("augment", c.augment.to_string());
        if let Some(acc) = r.test_accuracy {
            put("test_accuracy", hex_f64(acc));
        }
    }
    file.encode()
}

/// Inverse of [`save_checkpoint`]; checkpoints are not screened against a
/// support table since they never leave the development side.
pub fn load_checkpoint(bytes: &[u8]) -> Result<ModelGraph> {
    let file = ExchangeFile::decode(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    exchange::from_exchange(&file)
}
