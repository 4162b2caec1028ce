//! Synthetic data, the accuracy/complexity trade-off bench and the retraining loop.

mod sustain;
mod synth;
mod tradeoff;
mod transfer;

pub use sustain::{run_sustainability_loop, LoopRecord, LoopReport, DEFAULT_SHIFT, LOOP_CSV_HEADER, OP_EVAL_FRACTION};
pub use synth::{generate_synthetic, glyph, shift_effects, Shape, SynthSpec, GLYPH_COUNT, PALETTE, SHAPES};
pub use tradeoff::{run_tradeoff_bench, TradeoffReport, TradeoffRow, TRADEOFF_CSV_HEADER};
pub use transfer::{run_transfer, source_domain, TransferReport};

use crate::data::Dataset;
use crate::error::Result;
use crate::exchange::{self, OpSupportTable};
use crate::graph::ModelGraph;
use crate::runtime::load_session;
use crate::train::{fit_preprocess, train, TensorSet, TrainConfig, TrainReport};
use crate::zoo::ModelSpec;

/// Fit preprocessing on `data`, build `model` from `cfg.seed` and train it.
/// The returned graph carries the fitted spec.
pub fn develop(model: &ModelSpec, data: &Dataset, cfg: &TrainConfig) -> Result<(ModelGraph, TrainReport)> {
    let spec = fit_preprocess(data, model.image_size())?;
    let set = TensorSet::from_dataset(data, &spec, cfg.augment)?;
    let mut g = model.build(cfg.seed)?;
    g.meta.preprocess = Some(spec);
    train(g, &set, None, cfg)
}

/// Export `g`, load it the way a device would and measure accuracy on `data`.
/// Returns the accuracy and the exported size in bytes.
pub fn deployed_accuracy(g: &ModelGraph, data: &Dataset) -> Result<(f64, u64)> {
    let bytes = exchange::export_model(g, None);
    let session = load_session(&bytes, &OpSupportTable::default_table())?;
    Ok((session.accuracy(&data.images, &data.labels)?, bytes.len() as u64))
}
