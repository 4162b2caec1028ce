use super::{develop, SynthSpec};
use crate::data::Dataset;
use crate::error::Result;
use crate::graph::ModelGraph;
use crate::train::{apply_regime, evaluate_accuracy, fit_preprocess, train, Regime, TensorSet, TrainConfig};
use crate::zoo::ModelSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    pub feature_extraction: f64,
    pub fine_tuning: f64,
    /// Every feature layer of the FE model is bitwise equal to the pretrained one.
    pub features_unchanged: bool,
}

/// The pretraining domain for `target`: the same sizes and seed offset by
/// one, drawn from the glyphs that follow the target's classes.
pub fn source_domain(target: &SynthSpec) -> SynthSpec {
    SynthSpec {
        first_glyph: target.first_glyph + target.num_classes,
        shift: 0.0,
        seed: target.seed.wrapping_add(1),
        ..target.clone()
    }
}

fn same_bits(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn features_match(a: &ModelGraph, b: &ModelGraph) -> bool {
    a.layers
        .iter()
        .filter(|(name, _)| !a.is_classifier(name))
        .all(|(name, la)| {
            let Some(lb) = b.layers.get(name) else { return false };
            let opt = |x: Option<&Vec<f32>>, y: Option<&Vec<f32>>| match (x, y) {
                (Some(x), Some(y)) => same_bits(x, y),
                (None, None) => true,
                _ => false,
            };
            same_bits(&la.weight.data, &lb.weight.data)
                && opt(la.bias.as_ref().map(|t| &t.data), lb.bias.as_ref().map(|t| &t.data))
                && opt(la.running_mean.as_ref(), lb.running_mean.as_ref())
                && opt(la.running_var.as_ref(), lb.running_var.as_ref())
        })
}

/// Pretrain `model` on `source`, then adapt it to the target task with
/// feature extraction and with fine-tuning under the same config.
pub fn run_transfer(
    model: &ModelSpec,
    source: &Dataset,
    target_train: &Dataset,
    target_test: &Dataset,
    cfg: &TrainConfig,
) -> Result<TransferReport> {
    let scratch = TrainConfig {
        regime: Regime::TrainFromScratch,
        ..cfg.clone()
    };
    let (pretrained, _) = develop(model, source, &scratch)?;
    let spec = fit_preprocess(target_train, model.image_size())?;
    let train_set = TensorSet::from_dataset(target_train, &spec, cfg.augment)?;
    let test_set = TensorSet::from_dataset(target_test, &spec, false)?;
    let adapt = |regime: Regime| -> Result<(ModelGraph, f64)> {
        let g = apply_regime(model.build(cfg.seed)?, regime, Some(&pretrained), cfg.seed)?;
        let (g, _) = train(g, &train_set, None, &TrainConfig { regime, ..cfg.clone() })?;
        let acc = evaluate_accuracy(&g, &test_set)?;
        Ok((g, acc))
    };
    let (fe, fe_acc) = adapt(Regime::FeatureExtraction)?;
    let (_, ft_acc) = adapt(Regime::FineTuning)?;
    Ok(TransferReport {
        feature_extraction: fe_acc,
        fine_tuning: ft_acc,
        features_unchanged: features_match(&fe, &pretrained),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::generate_synthetic;
    use crate::zoo::SmallCnnConfig;

    #[test]
    fn source_domain_uses_the_next_glyphs() {
        let target = SynthSpec::new(8, 10, 32, 0.6, 7);
        let src = source_domain(&target);
        assert_eq!((src.first_glyph, src.num_classes, src.shift, src.seed), (8, 8, 0.0, 8));
        assert!(src.validate().is_ok());
    }

    #[test]
    fn feature_extraction_keeps_features() {
        let target = SynthSpec::new(3, 6, 16, 0.3, 2);
        let source = generate_synthetic(&source_domain(&target)).unwrap();
        let data = generate_synthetic(&target).unwrap();
        let model = ModelSpec::SmallCnn(SmallCnnConfig::new(16, 2, 4, 3));
        let cfg = TrainConfig {
            epochs: 2,
            augment: false,
            ..TrainConfig::default()
        };
        let r = run_transfer(&model, &source, &data, &data, &cfg).unwrap();
        assert!(r.features_unchanged);
        assert!((0.0..=1.0).contains(&r.feature_extraction) && (0.0..=1.0).contains(&r.fine_tuning));
    }
}
