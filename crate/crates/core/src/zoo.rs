//! Builders for the three model families and their complexity metrics.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::exchange;
use crate::graph::{GraphMeta, ModelGraph, Node, Op, GRAPH_INPUT};
use crate::ops::{LayerParams, DEFAULT_DROPOUT};
use crate::rng::Rng;

pub const SMALL_CNN: &str = "small_cnn";
pub const MOBILE_NET: &str = "mobile_net";
pub const RESIDUAL_NET: &str = "residual_net";

/// One SmallCNN configuration: `n` blocks of conv/bn/relu/pool/dropout with
/// channels `c0 · 2^i`, then a two-layer classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallCnnConfig {
    pub image_size: usize,
    pub num_conv_blocks: usize,
    pub base_channels: usize,
    pub fc1_out: usize,
    pub num_classes: usize,
    pub dropout_p: f64,
}

impl SmallCnnConfig {
    /// `fc1_out` defaults to a sixteenth of the FC1 input, i.e. the
    /// `(h/2)×(h/2)×(c/4)` layout used for the FC2 input column.
    pub fn new(image_size: usize, num_conv_blocks: usize, base_channels: usize, num_classes: usize) -> Self {
        let mut cfg = SmallCnnConfig {
            image_size,
            num_conv_blocks,
            base_channels,
            fc1_out: 0,
            num_classes,
            dropout_p: DEFAULT_DROPOUT,
        };
        cfg.fc1_out = (cfg.fc1_input() / 16).max(1);
        cfg
    }

    pub fn with_fc1_out(mut self, fc1_out: usize) -> Self {
        self.fc1_out = fc1_out;
        self
    }

    pub fn final_channels(&self) -> usize {
        self.base_channels << self.num_conv_blocks.saturating_sub(1)
    }

    pub fn final_spatial(&self) -> usize {
        self.image_size >> self.num_conv_blocks
    }

    /// `(S/2^n)² · c0·2^(n−1)`
    pub fn fc1_input(&self) -> usize {
        self.final_spatial().pow(2) * self.final_channels()
    }

    /// `"8x8x256"` style rendering of the FC1 input.
    pub fn fc1_input_label(&self) -> String {
        let h = self.final_spatial();
        format!("{h}x{h}x{}", self.final_channels())
    }

    /// FC2 input rendered as `(h/2)x(h/2)x(c/4)` when `fc1_out` has that
    /// layout, otherwise as a plain count.
    pub fn fc2_input_label(&self) -> String {
        fc2_label(self.final_spatial(), self.final_channels(), self.fc1_out)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("SmallCNN: {msg}")));
        if self.num_conv_blocks == 0 || self.base_channels == 0 || self.fc1_out == 0 {
            return bad("blocks, base channels and fc1_out must be >= 1".into());
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.num_conv_blocks >= usize::BITS as usize - 1
            || !self.image_size.is_multiple_of(1 << self.num_conv_blocks)
            || self.final_spatial() == 0
        {
            return bad(format!(
                "image size {} is not divisible by 2^{}",
                self.image_size, self.num_conv_blocks
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout_p));
        }
        Ok(())
    }

    fn echo(&self) -> String {
        format!(
            "image_size={};blocks={};base_channels={};fc1_out={};classes={};dropout={}",
            self.image_size, self.num_conv_blocks, self.base_channels, self.fc1_out, self.num_classes, self.dropout_p
        )
    }
}

fn fc2_label(h: usize, c: usize, fc1_out: usize) -> String {
    if h >= 2 && c >= 4 && fc1_out == (h / 2).pow(2) * (c / 4) {
        format!("{0}x{0}x{1}", h / 2, c / 4)
    } else {
        fc1_out.to_string()
    }
}

/// Depthwise-separable counterpart of a SmallCNN: the first block keeps a
/// standard convolution as stem, every later block is factorized.
#[derive(Debug, Clone, PartialEq)]
pub struct MobileNetConfig {
    pub image_size: usize,
    /// Output channels per block, stem first.
    pub channels: Vec<usize>,
    pub fc1_out: usize,
    pub num_classes: usize,
    pub dropout_p: f64,
}

impl MobileNetConfig {
    /// Same channel schedule and classifier as `cfg`.
    pub fn matching(cfg: &SmallCnnConfig) -> Self {
        MobileNetConfig {
            image_size: cfg.image_size,
            channels: (0..cfg.num_conv_blocks).map(|i| cfg.base_channels << i).collect(),
            fc1_out: cfg.fc1_out,
            num_classes: cfg.num_classes,
            dropout_p: cfg.dropout_p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0 || self.channels.contains(&0) {
            return Err(Error::Config(
                "MobileNet: channel schedule must be non-empty and positive".into(),
            ));
        }
        if n >= usize::BITS as usize - 1 || !self.image_size.is_multiple_of(1 << n) || self.image_size >> n == 0 {
            return Err(Error::Config(format!(
                "MobileNet: image size {} is not divisible by 2^{n}",
                self.image_size
            )));
        }
        if self.num_classes < 2 || self.fc1_out == 0 || !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config("MobileNet: invalid classifier settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stem {
    /// 3×3 stride-1 convolution, for small inputs.
    Compact,
    /// 7×7 stride-2 convolution followed by a 2×2 max pool.
    ImageNet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResNetConfig {
    pub image_size: usize,
    pub blocks_per_stage: Vec<usize>,
    pub base_channels: usize,
    pub num_classes: usize,
    pub stem: Stem,
}

impl ResNetConfig {
    /// The desk-scale default: two stages of two blocks.
    pub fn desk(image_size: usize, num_classes: usize) -> Self {
        ResNetConfig {
            image_size,
            blocks_per_stage: vec![2, 2],
            base_channels: 16,
            num_classes,
            stem: Stem::Compact,
        }
    }

    /// The 34-layer schedule at 224×224 with 1000 classes.
    pub fn resnet34() -> Self {
        ResNetConfig {
            image_size: 224,
            blocks_per_stage: vec![3, 4, 6, 3],
            base_channels: 64,
            num_classes: 1000,
            stem: Stem::ImageNet,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks_per_stage.is_empty() || self.blocks_per_stage.contains(&0) {
            return Err(Error::Config(
                "ResNet: stage list must be non-empty with >= 1 block each".into(),
            ));
        }
        if self.base_channels == 0 || self.num_classes < 2 {
            return Err(Error::Config("ResNet: invalid channels or class count".into()));
        }
        let min = match self.stem {
            Stem::Compact => 1,
            Stem::ImageNet => 4,
        };
        if self.image_size < min {
            return Err(Error::Config(format!(
                "ResNet: image size {} too small",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// A buildable configuration of any family.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    SmallCnn(SmallCnnConfig),
    MobileNet(MobileNetConfig),
    Residual(ResNetConfig),
}

impl ModelSpec {
    pub fn family(&self) -> &'static str {
        match self {
            ModelSpec::SmallCnn(_) => SMALL_CNN,
            ModelSpec::MobileNet(_) => MOBILE_NET,
            ModelSpec::Residual(_) => RESIDUAL_NET,
        }
    }

    pub fn image_size(&self) -> usize {
        match self {
            ModelSpec::SmallCnn(c) => c.image_size,
            ModelSpec::MobileNet(c) => c.image_size,
            ModelSpec::Residual(c) => c.image_size,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelSpec::SmallCnn(c) => c.num_classes,
            ModelSpec::MobileNet(c) => c.num_classes,
            ModelSpec::Residual(c) => c.num_classes,
        }
    }

    /// Convolutional blocks (residual blocks for the residual family).
    pub fn conv_blocks(&self) -> usize {
        match self {
            ModelSpec::SmallCnn(c) => c.num_conv_blocks,
            ModelSpec::MobileNet(c) => c.channels.len(),
            ModelSpec::Residual(c) => c.blocks_per_stage.iter().sum(),
        }
    }

    pub fn fc1_input_label(&self) -> String {
        match self {
            ModelSpec::SmallCnn(c) => c.fc1_input_label(),
            ModelSpec::MobileNet(c) => {
                let h = c.image_size >> c.channels.len();
                format!("{h}x{h}x{}", c.channels.last().copied().unwrap_or(0))
            }
            ModelSpec::Residual(c) => {
                let width = c.base_channels << c.blocks_per_stage.len().saturating_sub(1);
                format!("1x1x{width}")
            }
        }
    }

    /// `"-"` for the residual family, whose classifier is a single layer.
    pub fn fc2_input_label(&self) -> String {
        match self {
            ModelSpec::SmallCnn(c) => c.fc2_input_label(),
            ModelSpec::MobileNet(c) => fc2_label(
                c.image_size >> c.channels.len(),
                c.channels.last().copied().unwrap_or(0),
                c.fc1_out,
            ),
            ModelSpec::Residual(_) => "-".into(),
        }
    }

    pub fn build(&self, seed: u64) -> Result<ModelGraph> {
        match self {
            ModelSpec::SmallCnn(c) => build_small_cnn(c, seed),
            ModelSpec::MobileNet(c) => build_mobile_net(c, seed),
            ModelSpec::Residual(c) => build_residual_net(c, seed),
        }
    }
}

/// Incremental graph assembly; each added node's output is named after the node.
struct Builder {
    nodes: Vec<Node>,
    layers: BTreeMap<String, LayerParams>,
    cur: String,
}

impl Builder {
    fn new() -> Self {
        Builder {
            nodes: Vec::new(),
            layers: BTreeMap::new(),
            cur: GRAPH_INPUT.to_string(),
        }
    }

    fn push(&mut self, name: &str, op: Op, extra_inputs: &[&str]) -> String {
        let mut inputs = vec![self.cur.clone()];
        inputs.extend(extra_inputs.iter().map(|s| s.to_string()));
        self.nodes.push(Node {
            name: name.to_string(),
            op,
            inputs,
            output: name.to_string(),
        });
        self.cur = name.to_string();
        self.cur.clone()
    }

    fn layer(&mut self, name: &str, params: LayerParams, op: Op) -> String {
        self.layers.insert(name.to_string(), params);
        self.push(name, op, &[])
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize, bias: bool) {
        let op = Op::Conv {
            layer: name.into(),
            stride,
            padding,
        };
        self.layer(name, LayerParams::conv(c_out, c_in, k, bias), op);
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.layer(name, LayerParams::batchnorm(c), Op::BatchNorm { layer: name.into() });
    }

    fn linear(&mut self, name: &str, c_in: usize, c_out: usize) {
        self.layer(
            name,
            LayerParams::linear(c_out, c_in, true),
            Op::Linear { layer: name.into() },
        );
    }

    fn classifier(&mut self, fc1_in: usize, fc1_out: usize, classes: usize) {
        self.push("flatten", Op::Flatten, &[]);
        self.linear("fc1", fc1_in, fc1_out);
        self.push("fc1.relu", Op::Relu, &[]);
        self.linear("fc2", fc1_out, classes);
    }

    fn finish(self, meta: GraphMeta) -> Result<ModelGraph> {
        let mut g = ModelGraph {
            nodes: self.nodes,
            layers: self.layers,
            meta,
        };
        let mut rng = Rng::new(g.meta.seed);
        init_parameters(&mut g, &mut rng, |_| true);
        g.validate()?;
        Ok(g)
    }
}

/// He-uniform reinitialization of every layer selected by `pred`, visiting
/// layers in name order so the draw sequence is fixed.
pub fn init_parameters(g: &mut ModelGraph, rng: &mut Rng, pred: impl Fn(&str) -> bool) {
    for (name, layer) in &mut g.layers {
        if pred(name) {
            layer.init_he_uniform(rng);
        }
    }
}

pub fn build_small_cnn(cfg: &SmallCnnConfig, seed: u64) -> Result<ModelGraph> {
    cfg.validate()?;
    let mut b = Builder::new();
    let mut c_in = 3;
    for i in 0..cfg.num_conv_blocks {
        let c_out = cfg.base_channels << i;
        let p = format!("block{i}");
        b.conv(&format!("{p}.conv"), c_in, c_out, 3, 1, 1, true);
        b.bn(&format!("{p}.bn"), c_out);
        b.push(&format!("{p}.relu"), Op::Relu, &[]);
        b.push(&format!("{p}.pool"), Op::MaxPool { window: 2, stride: 2 }, &[]);
        b.push(&format!("{p}.dropout"), Op::Dropout { p: cfg.dropout_p }, &[]);
        c_in = c_out;
    }
    b.classifier(cfg.fc1_input(), cfg.fc1_out, cfg.num_classes);
    b.finish(GraphMeta {
        family: SMALL_CNN.into(),
        config: cfg.echo(),
        image_size: cfg.image_size,
        num_classes: cfg.num_classes,
        classifier: vec!["fc1".into(), "fc2".into()],
        preprocess: None,
        seed,
    })
}

pub fn build_mobile_net(cfg: &MobileNetConfig, seed: u64) -> Result<ModelGraph> {
    cfg.validate()?;
    let mut b = Builder::new();
    let pool = |b: &mut Builder, p: &str| {
        b.push(&format!("{p}.pool"), Op::MaxPool { window: 2, stride: 2 }, &[]);
        b.push(&format!("{p}.dropout"), Op::Dropout { p: cfg.dropout_p }, &[]);
    };
    b.conv("stem.conv", 3, cfg.channels[0], 3, 1, 1, true);
    b.bn("stem.bn", cfg.channels[0]);
    b.push("stem.relu", Op::Relu, &[]);
    pool(&mut b, "stem");
    for (i, w) in cfg.channels.windows(2).enumerate() {
        let (c_in, c_out) = (w[0], w[1]);
        let p = format!("block{}", i + 1);
        let dw = format!("{p}.dw");
        b.layer(
            &dw,
            LayerParams::depthwise(c_in, 3, false),
            Op::DepthwiseConv {
                layer: dw.clone(),
                stride: 1,
                padding: 1,
            },
        );
        b.bn(&format!("{p}.dw_bn"), c_in);
        b.push(&format!("{p}.dw_relu"), Op::Relu, &[]);
        let pw = format!("{p}.pw");
        b.layer(
            &pw,
            LayerParams::pointwise(c_out, c_in, false),
            Op::PointwiseConv { layer: pw.clone() },
        );
        b.bn(&format!("{p}.pw_bn"), c_out);
        b.push(&format!("{p}.pw_relu"), Op::Relu, &[]);
        pool(&mut b, &p);
    }
    let n = cfg.channels.len();
    let fc1_in = (cfg.image_size >> n).pow(2) * cfg.channels[n - 1];
    b.classifier(fc1_in, cfg.fc1_out, cfg.num_classes);
    b.finish(GraphMeta {
        family: MOBILE_NET.into(),
        config: format!(
            "image_size={};channels={:?};fc1_out={};classes={};dropout={}",
            cfg.image_size, cfg.channels, cfg.fc1_out, cfg.num_classes, cfg.dropout_p
        ),
        image_size: cfg.image_size,
        num_classes: cfg.num_classes,
        classifier: vec!["fc1".into(), "fc2".into()],
        preprocess: None,
        seed,
    })
}

pub fn build_residual_net(cfg: &ResNetConfig, seed: u64) -> Result<ModelGraph> {
    cfg.validate()?;
    let mut b = Builder::new();
    let c0 = cfg.base_channels;
    match cfg.stem {
        Stem::Compact => b.conv("stem.conv", 3, c0, 3, 1, 1, false),
        Stem::ImageNet => b.conv("stem.conv", 3, c0, 7, 2, 3, false),
    }
    b.bn("stem.bn", c0);
    b.push("stem.relu", Op::Relu, &[]);
    if cfg.stem == Stem::ImageNet {
        b.push("stem.pool", Op::MaxPool { window: 2, stride: 2 }, &[]);
    }
    let mut c_in = c0;
    for (s, &blocks) in cfg.blocks_per_stage.iter().enumerate() {
        let c_out = c0 << s;
        for j in 0..blocks {
            let p = format!("stage{s}.block{j}");
            let stride = if s > 0 && j == 0 { 2 } else { 1 };
            let block_in = b.cur.clone();
            b.conv(&format!("{p}.conv1"), c_in, c_out, 3, stride, 1, false);
            b.bn(&format!("{p}.bn1"), c_out);
            b.push(&format!("{p}.relu1"), Op::Relu, &[]);
            b.conv(&format!("{p}.conv2"), c_out, c_out, 3, 1, 1, false);
            let branch = {
                b.bn(&format!("{p}.bn2"), c_out);
                b.cur.clone()
            };
            let skip = if stride != 1 || c_in != c_out {
                b.cur = block_in;
                b.conv(&format!("{p}.proj"), c_in, c_out, 1, stride, 0, false);
                b.bn(&format!("{p}.proj_bn"), c_out);
                b.cur.clone()
            } else {
                block_in
            };
            b.cur = branch;
            b.push(&format!("{p}.add"), Op::Add, &[&skip]);
            b.push(&format!("{p}.relu2"), Op::Relu, &[]);
            c_in = c_out;
        }
    }
    b.push("gap", Op::GlobalAvgPool, &[]);
    b.push("flatten", Op::Flatten, &[]);
    b.linear("fc", c_in, cfg.num_classes);
    b.finish(GraphMeta {
        family: RESIDUAL_NET.into(),
        config: format!(
            "image_size={};stages={:?};base_channels={};classes={};stem={:?}",
            cfg.image_size, cfg.blocks_per_stage, cfg.base_channels, cfg.num_classes, cfg.stem
        ),
        image_size: cfg.image_size,
        num_classes: cfg.num_classes,
        classifier: vec!["fc".into()],
        preprocess: None,
        seed,
    })
}

/// Weights, biases and batchnorm scale/shift; running statistics excluded.
pub fn count_parameters(g: &ModelGraph) -> usize {
    g.param_count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComplexityMetrics {
    pub param_count: usize,
    pub storage_bytes: u64,
}

impl ComplexityMetrics {
    pub fn storage_mib(&self) -> f64 {
        self.storage_bytes as f64 / (1u64 << 20) as f64
    }
}

/// Parameter count plus the exact size the graph occupies as an exchange file.
pub fn storage_weight(g: &ModelGraph) -> ComplexityMetrics {
    ComplexityMetrics {
        param_count: g.param_count(),
        storage_bytes: exchange::encoded_len(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::Mode;
    use crate::tensor::{Shape4, Tensor4};

    fn random_input(b: usize, s: usize, seed: u64) -> Tensor4 {
        let mut rng = Rng::new(seed);
        Tensor4::from_vec(
            Shape4::new(b, 3, s, s),
            (0..b * 3 * s * s).map(|_| rng.normal() as f32).collect(),
        )
        .unwrap()
    }

    /// Closed-form SmallCNN count.
    fn small_cnn_oracle(cfg: &SmallCnnConfig) -> usize {
        let mut total = 0;
        let mut c_in = 3;
        for i in 0..cfg.num_conv_blocks {
            let c = cfg.base_channels << i;
            total += c_in * c * 9 + c + 2 * c;
            c_in = c;
        }
        total + cfg.fc1_input() * cfg.fc1_out + cfg.fc1_out + cfg.fc1_out * cfg.num_classes + cfg.num_classes
    }

    #[test]
    fn first_table_row_shapes() {
        let cfg = SmallCnnConfig::new(256, 5, 16, 43);
        assert_eq!(cfg.fc1_input(), 16384);
        assert_eq!(cfg.fc1_out, 1024);
        assert_eq!(cfg.fc1_input_label(), "8x8x256");
        assert_eq!(cfg.fc2_input_label(), "4x4x64");
        let six = SmallCnnConfig::new(256, 6, 16, 43);
        assert_eq!(six.fc1_input(), 8192);
        assert_eq!(six.fc2_input_label(), "2x2x128");
    }

    #[test]
    fn tiny_model_forward_shape() {
        let cfg = SmallCnnConfig::new(32, 2, 4, 3).with_fc1_out(8);
        let g = build_small_cnn(&cfg, 1).unwrap();
        assert_eq!(g.param_count(), small_cnn_oracle(&cfg));
        let out = g.forward_eval(&random_input(1, 32, 2)).unwrap();
        assert_eq!((out.rows(), out.cols()), (1, 3));
        assert_eq!(g.layers["fc2"].weight.shape, vec![3, 8]);
    }

    #[test]
    fn static_shapes_agree_with_execution() {
        let graphs = [
            build_small_cnn(&SmallCnnConfig::new(32, 3, 4, 5), 3).unwrap(),
            build_mobile_net(&MobileNetConfig::matching(&SmallCnnConfig::new(32, 3, 4, 5)), 3).unwrap(),
            build_residual_net(&ResNetConfig::desk(16, 4), 3).unwrap(),
        ];
        for g in &graphs {
            let shapes = g.infer_shapes().unwrap();
            let out = g.forward_eval(&random_input(2, g.meta.image_size, 4)).unwrap();
            assert_eq!(shapes.last().unwrap().numel(), out.cols());
            assert_eq!(out.rows(), 2);
        }
    }

    #[test]
    fn seeded_construction() {
        let cfg = SmallCnnConfig::new(32, 2, 4, 3);
        assert_eq!(build_small_cnn(&cfg, 9).unwrap(), build_small_cnn(&cfg, 9).unwrap());
        assert_ne!(build_small_cnn(&cfg, 9).unwrap(), build_small_cnn(&cfg, 10).unwrap());
    }

    #[test]
    fn invalid_configs() {
        assert!(build_small_cnn(&SmallCnnConfig::new(32, 6, 4, 3), 0).is_err());
        assert!(build_small_cnn(&SmallCnnConfig::new(32, 2, 4, 1), 0).is_err());
        let mut cfg = MobileNetConfig::matching(&SmallCnnConfig::new(32, 2, 4, 3));
        cfg.channels.clear();
        assert!(build_mobile_net(&cfg, 0).is_err());
        let mut r = ResNetConfig::desk(32, 3);
        r.blocks_per_stage.clear();
        assert!(build_residual_net(&r, 0).is_err());
    }

    #[test]
    fn separable_is_strictly_cheaper() {
        for (n, c0) in [(2, 4), (3, 8), (4, 16)] {
            let cfg = SmallCnnConfig::new(64, n, c0, 8);
            let small = build_small_cnn(&cfg, 0).unwrap().param_count();
            let mobile = build_mobile_net(&MobileNetConfig::matching(&cfg), 0)
                .unwrap()
                .param_count();
            assert!(mobile < small, "n={n}: {mobile} >= {small}");
        }
    }

    #[test]
    fn separable_block_count_formula() {
        let cfg = MobileNetConfig::matching(&SmallCnnConfig::new(32, 2, 16, 4));
        let g = build_mobile_net(&cfg, 0).unwrap();
        // Brute-force enumeration of tensor sizes against k²·C_in + C_in·C_out.
        let dw = g.layers["block1.dw"].weight.shape.iter().product::<usize>();
        let pw = g.layers["block1.pw"].weight.shape.iter().product::<usize>();
        assert_eq!(dw + pw, 9 * 16 + 16 * 32);
    }

    #[test]
    fn classifier_is_separable_from_features() {
        let g = build_mobile_net(&MobileNetConfig::matching(&SmallCnnConfig::new(32, 2, 4, 3)), 0).unwrap();
        assert!(g.layers.keys().any(|k| !g.is_classifier(k)));
        assert!(g.meta.classifier.iter().all(|c| g.layers.contains_key(c)));
        let head: Vec<_> = g.nodes.iter().skip_while(|n| n.op != Op::Flatten).collect();
        assert!(head.iter().filter_map(|n| n.op.layer()).all(|l| g.is_classifier(l)));
    }

    #[test]
    fn zeroed_residual_branches_reduce_to_skip_path() {
        let cfg = ResNetConfig {
            blocks_per_stage: vec![3],
            ..ResNetConfig::desk(8, 4)
        };
        let mut g = build_residual_net(&cfg, 5).unwrap();
        for (name, layer) in g.layers.iter_mut() {
            if name.ends_with(".conv2") {
                layer.weight.data.iter_mut().for_each(|w| *w = 0.0);
            }
        }
        let x = random_input(2, 8, 6);
        let full = g.forward_eval(&x).unwrap();

        // Skip path: stem, then straight to pooling and the classifier.
        let stem = crate::ops::conv2d(&x, &g.layers["stem.conv"], 1, 1).unwrap();
        let (stem, _) = crate::ops::batchnorm2d_eval(&stem, &g.layers["stem.bn"], crate::ops::BN_EPSILON).unwrap();
        let stem = crate::ops::relu(&stem);
        let pooled = crate::ops::flatten(&crate::ops::global_avg_pool(&stem));
        let skip = crate::ops::linear(&pooled, &g.layers["fc"]).unwrap();
        assert!(full.max_abs_diff(&skip) < 1e-5, "{}", full.max_abs_diff(&skip));
    }

    #[test]
    fn resnet34_schedule_count() {
        let g = build_residual_net(&ResNetConfig::resnet34(), 0).unwrap();
        assert_eq!(g.param_count(), 21_797_672);
        let mib = 4.0 * g.param_count() as f64 / (1u64 << 20) as f64;
        assert!((mib - 83.2).abs() < 0.1, "{mib}");
    }

    #[test]
    fn monotone_in_every_size_knob() {
        let base = SmallCnnConfig::new(64, 2, 8, 8).with_fc1_out(64);
        let count = |c: &SmallCnnConfig| build_small_cnn(c, 0).unwrap().param_count();
        let b = count(&base);
        assert!(
            count(&SmallCnnConfig {
                base_channels: 16,
                ..base.clone()
            }) > b
        );
        assert!(count(&base.clone().with_fc1_out(65)) > b);
        assert!(
            count(&SmallCnnConfig {
                num_classes: 9,
                ..base.clone()
            }) > b
        );

        // Depth only adds parameters once the convolutions dominate.
        let conv_heavy = SmallCnnConfig::new(16, 3, 16, 8).with_fc1_out(64);
        let deeper = SmallCnnConfig {
            num_conv_blocks: 4,
            ..conv_heavy.clone()
        };
        assert!(count(&deeper) > count(&conv_heavy));
        // In FC1-dominated configs an extra block halves FC1's input instead.
        let fc_heavy = SmallCnnConfig::new(64, 2, 8, 8).with_fc1_out(64);
        let deeper = SmallCnnConfig {
            num_conv_blocks: 3,
            ..fc_heavy.clone()
        };
        assert!(count(&deeper) < count(&fc_heavy));
    }

    #[test]
    fn storage_covers_payload() {
        let g = build_small_cnn(&SmallCnnConfig::new(32, 2, 4, 3), 0).unwrap();
        let m = storage_weight(&g);
        assert!(m.storage_bytes >= 4 * m.param_count as u64);
        assert_eq!(m.storage_bytes, exchange::export_model(&g, None).len() as u64);
    }

    #[test]
    fn train_mode_forward_matches_shapes() {
        let mut g = build_small_cnn(&SmallCnnConfig::new(16, 2, 4, 3), 0).unwrap();
        let (out, _) = g
            .forward(&random_input(3, 16, 1), Mode::Train, &mut Rng::new(0))
            .unwrap();
        assert_eq!((out.rows(), out.cols()), (3, 3));
    }
}
