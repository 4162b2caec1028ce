//! The `.nnex` exchange format: export, import, op validation and the
//! reshape-to-flatten rewrite.

mod format;
mod support;

pub use format::{ExchangeFile, Initializer, NodeRecord, DTYPE_F32, MAGIC, VERSION};
pub use support::{
    is_flattening_reshape, validate_ops, AttrRange, OpSupportTable, Violation, ViolationKind, DEFAULT_SUPPORT_TABLE,
};

use std::collections::{BTreeMap, HashSet};

use crate::error::{FormatError, Result};
use crate::graph::{GraphMeta, ModelGraph, Node, Op, GRAPH_INPUT};
use crate::ops::{LayerKind, LayerParams, ParamTensor};
use crate::preprocess::{ChannelStats, PreprocessSpec};

/// Metadata key listing frozen layers (checkpoints only).
pub const META_FROZEN: &str = "train.frozen";

pub fn hex_f32(v: f32) -> String {
    format!("0x{:08x}", v.to_bits())
}

pub fn hex_f64(v: f64) -> String {
    format!("0x{:016x}", v.to_bits())
}

fn parse_hex(s: &str) -> Option<u64> {
    u64::from_str_radix(s.strip_prefix("0x")?, 16).ok()
}

pub fn parse_hex_f32(s: &str) -> Option<f32> {
    parse_hex(s).and_then(|b| u32::try_from(b).ok()).map(f32::from_bits)
}

pub fn parse_hex_f64(s: &str) -> Option<f64> {
    parse_hex(s).map(f64::from_bits)
}

fn hex_triple(v: [f32; 3]) -> String {
    v.map(hex_f32).join(",")
}

fn layer_inputs(name: &str, layer: &LayerParams) -> Vec<String> {
    let mut v = vec![format!("{name}.weight")];
    if layer.bias.is_some() {
        v.push(format!("{name}.bias"));
    }
    if layer.running_mean.is_some() {
        v.push(format!("{name}.running_mean"));
        v.push(format!("{name}.running_var"));
    }
    v
}

fn attributes(op: &Op, g: &ModelGraph) -> Vec<(String, String)> {
    let mut a: Vec<(String, String)> = match op {
        Op::Conv { layer, stride, padding } | Op::DepthwiseConv { layer, stride, padding } => vec![
            ("kernel".into(), g.layers[layer].weight.shape[2].to_string()),
            ("padding".into(), padding.to_string()),
            ("stride".into(), stride.to_string()),
        ],
        Op::MaxPool { window, stride } => vec![
            ("stride".into(), stride.to_string()),
            ("window".into(), window.to_string()),
        ],
        Op::Dropout { p } => vec![("p".into(), hex_f64(*p))],
        Op::Reshape { shape } => vec![(
            "shape".into(),
            shape.iter().map(i64::to_string).collect::<Vec<_>>().join(","),
        )],
        _ => vec![],
    };
    a.sort();
    a
}

/// Build the file representation of `g`. `preprocess` overrides the spec in
/// the graph's metadata.
pub fn to_exchange(g: &ModelGraph, preprocess: Option<&PreprocessSpec>) -> ExchangeFile {
    let m = &g.meta;
    let mut metadata = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        metadata.insert(k.to_string(), v);
    };
    put("family", m.family.clone());
    put("config", m.config.clone());
    put("image_size", m.image_size.to_string());
    put("num_classes", m.num_classes.to_string());
    put("classifier", m.classifier.join(","));
    put("seed", m.seed.to_string());
    put("input", GRAPH_INPUT.to_string());
    put("output", g.output_name().to_string());
    if let Some(p) = preprocess.or(m.preprocess.as_ref()) {
        put("preprocess.size", p.target_size.to_string());
        put("preprocess.resize", p.resize_size.to_string());
        put("preprocess.mean", hex_triple(p.stats.mean()));
        put("preprocess.std", hex_triple(p.stats.std()));
    }

    let nodes = g
        .nodes
        .iter()
        .map(|n| {
            let mut inputs = n.inputs.clone();
            if let Some(l) = n.op.layer() {
                inputs.extend(layer_inputs(l, &g.layers[l]));
            }
            NodeRecord {
                op: n.op.name().to_string(),
                attributes: attributes(&n.op, g),
                inputs,
                outputs: vec![n.output.clone()],
            }
        })
        .collect();

    let mut initializers = Vec::new();
    for (name, layer) in &g.layers {
        let mut add = |suffix: &str, dims: &[usize], data: &[f32]| {
            initializers.push(Initializer {
                name: format!("{name}.{suffix}"),
                dims: dims.iter().map(|&d| d as u64).collect(),
                data: data.to_vec(),
            })
        };
        add("weight", &layer.weight.shape, &layer.weight.data);
        if let Some(b) = &layer.bias {
            add("bias", &b.shape, &b.data);
        }
        if let (Some(rm), Some(rv)) = (&layer.running_mean, &layer.running_var) {
            add("running_mean", &[rm.len()], rm);
            add("running_var", &[rv.len()], rv);
        }
    }
    ExchangeFile {
        version: VERSION,
        metadata,
        nodes,
        initializers,
    }
}

/// Deterministic byte encoding of `g` with its preprocessing spec embedded.
pub fn export_model(g: &ModelGraph, preprocess: Option<&PreprocessSpec>) -> Vec<u8> {
    to_exchange(g, preprocess).encode()
}

/// Size of [`export_model`]'s output without materializing it.
pub fn encoded_len(g: &ModelGraph) -> u64 {
    to_exchange(g, None).encoded_len()
}

/// Every node input must be the graph input, an earlier node's output or an initializer.
pub fn check_references(file: &ExchangeFile) -> Result<(), FormatError> {
    let mut known: HashSet<&str> = file.initializers.iter().map(|t| t.name.as_str()).collect();
    known.insert(GRAPH_INPUT);
    for (i, node) in file.nodes.iter().enumerate() {
        if let Some(name) = node.inputs.iter().find(|n| !known.contains(n.as_str())) {
            return Err(FormatError::DanglingReference {
                node: i,
                name: name.clone(),
            });
        }
        known.extend(node.outputs.iter().map(String::as_str));
    }
    Ok(())
}

fn meta_err(msg: impl Into<String>) -> FormatError {
    FormatError::Metadata(msg.into())
}

fn meta_usize(file: &ExchangeFile, key: &str) -> Result<usize, FormatError> {
    file.metadata
        .get(key)
        .ok_or_else(|| meta_err(format!("missing {key}")))?
        .parse()
        .map_err(|_| meta_err(format!("{key} is not an integer")))
}

fn meta_triple(file: &ExchangeFile, key: &str) -> Result<[f32; 3], FormatError> {
    let raw = file
        .metadata
        .get(key)
        .ok_or_else(|| meta_err(format!("missing {key}")))?;
    let vals: Vec<f32> = raw
        .split(',')
        .map(|s| parse_hex_f32(s).ok_or_else(|| meta_err(format!("{key}: bad float {s}"))))
        .collect::<Result<_, _>>()?;
    vals.try_into().map_err(|_| meta_err(format!("{key} needs 3 values")))
}

/// Read the embedded preprocessing spec, if the file has one.
pub fn preprocess_from_metadata(file: &ExchangeFile) -> Result<Option<PreprocessSpec>> {
    if !file.metadata.contains_key("preprocess.size") {
        return Ok(None);
    }
    let stats = ChannelStats::new(
        meta_triple(file, "preprocess.mean")?,
        meta_triple(file, "preprocess.std")?,
    )
    .map_err(|e| meta_err(e.to_string()))?;
    let spec = PreprocessSpec::new(
        meta_usize(file, "preprocess.size")?,
        meta_usize(file, "preprocess.resize")?,
        stats,
    )
    .map_err(|e| meta_err(e.to_string()))?;
    Ok(Some(spec))
}

fn bad_node(i: usize, node: &NodeRecord, msg: impl Into<String>) -> FormatError {
    FormatError::BadNode {
        node: i,
        op: node.op.clone(),
        msg: msg.into(),
    }
}

fn int_attr(i: usize, node: &NodeRecord, key: &str) -> Result<usize, FormatError> {
    node.attr(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad_node(i, node, format!("missing or invalid attribute {key}")))
}

/// Rebuild a graph from a decoded file. Ops outside the known set are
/// reported as unsupported; no support table is consulted here.
pub fn from_exchange(file: &ExchangeFile) -> Result<ModelGraph> {
    check_references(file)?;
    let tensors: BTreeMap<&str, &Initializer> = file.initializers.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut layers: BTreeMap<String, LayerParams> = BTreeMap::new();
    let mut nodes = Vec::with_capacity(file.nodes.len());

    for (i, rec) in file.nodes.iter().enumerate() {
        let conv_like = |ctor: fn(String, usize, usize) -> Op| -> Result<Op, FormatError> {
            Ok(ctor(
                String::new(),
                int_attr(i, rec, "stride")?,
                int_attr(i, rec, "padding")?,
            ))
        };
        let mut op = match rec.op.as_str() {
            "Conv" => conv_like(|layer, stride, padding| Op::Conv { layer, stride, padding })?,
            "DepthwiseConv" => conv_like(|layer, stride, padding| Op::DepthwiseConv { layer, stride, padding })?,
            "PointwiseConv" => Op::PointwiseConv { layer: String::new() },
            "BatchNorm" => Op::BatchNorm { layer: String::new() },
            "Linear" => Op::Linear { layer: String::new() },
            "Relu" => Op::Relu,
            "MaxPool" => Op::MaxPool {
                window: int_attr(i, rec, "window")?,
                stride: int_attr(i, rec, "stride")?,
            },
            "Dropout" => Op::Dropout {
                p: rec
                    .attr("p")
                    .and_then(parse_hex_f64)
                    .ok_or_else(|| bad_node(i, rec, "missing or invalid attribute p"))?,
            },
            "Flatten" => Op::Flatten,
            "Reshape" => Op::Reshape {
                shape: rec
                    .attr("shape")
                    .ok_or_else(|| bad_node(i, rec, "missing attribute shape"))?
                    .split(',')
                    .map(|s| s.trim().parse::<i64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad_node(i, rec, "invalid shape attribute"))?,
            },
            "GlobalAveragePool" => Op::GlobalAvgPool,
            "Add" => Op::Add,
            other => {
                return Err(FormatError::UnsupportedOp {
                    op: other.to_string(),
                    node: i,
                }
                .into())
            }
        };
        let arity = op.arity();
        if rec.inputs.len() < arity || rec.outputs.len() != 1 {
            return Err(bad_node(i, rec, "wrong number of inputs or outputs").into());
        }
        let params = &rec.inputs[arity..];
        match &mut op {
            Op::Conv { layer, .. }
            | Op::DepthwiseConv { layer, .. }
            | Op::PointwiseConv { layer }
            | Op::BatchNorm { layer }
            | Op::Linear { layer } => {
                let weight = params
                    .first()
                    .and_then(|p| p.strip_suffix(".weight"))
                    .ok_or_else(|| bad_node(i, rec, "first parameter must be a .weight tensor"))?;
                *layer = weight.to_string();
            }
            _ if !params.is_empty() => return Err(bad_node(i, rec, "op takes no parameters").into()),
            _ => {}
        }
        if let Some(name) = op.layer() {
            if !layers.contains_key(name) {
                let built = build_layer(i, rec, &op, name, params, &tensors)?;
                layers.insert(name.to_string(), built);
            }
        }
        nodes.push(Node {
            name: rec.outputs[0].clone(),
            op,
            inputs: rec.inputs[..arity].to_vec(),
            output: rec.outputs[0].clone(),
        });
    }

    if let Some(input) = file.metadata.get("input") {
        if input != GRAPH_INPUT {
            return Err(meta_err(format!("graph input must be named {GRAPH_INPUT}, got {input}")).into());
        }
    }
    let meta = GraphMeta {
        family: file.metadata.get("family").cloned().unwrap_or_default(),
        config: file.metadata.get("config").cloned().unwrap_or_default(),
        image_size: meta_usize(file, "image_size")?,
        num_classes: meta_usize(file, "num_classes")?,
        classifier: file
            .metadata
            .get("classifier")
            .map(|c| c.split(',').filter(|s| !s.is_empty()).map(String::from).collect())
            .unwrap_or_default(),
        preprocess: preprocess_from_metadata(file)?,
        seed: file.metadata.get("seed").and_then(|s| s.parse().ok()).unwrap_or(0),
    };
    let mut g = ModelGraph { nodes, layers, meta };
    if let Some(frozen) = file.metadata.get(META_FROZEN) {
        let frozen: HashSet<&str> = frozen.split(',').collect();
        g.set_frozen(|name| frozen.contains(name));
    }
    if let Some(out) = file.metadata.get("output") {
        if out != g.output_name() {
            return Err(meta_err(format!("output {out} is not the last node's output")).into());
        }
    }
    g.validate()?;
    Ok(g)
}

fn build_layer(
    i: usize,
    rec: &NodeRecord,
    op: &Op,
    name: &str,
    params: &[String],
    tensors: &BTreeMap<&str, &Initializer>,
) -> Result<LayerParams, FormatError> {
    let get = |suffix: &str| -> Option<&Initializer> {
        let key = format!("{name}.{suffix}");
        params.contains(&key).then(|| tensors[key.as_str()])
    };
    let weight = get("weight").expect("weight reference checked");
    let dims: Vec<usize> = weight.dims.iter().map(|&d| d as usize).collect();
    let bias = get("bias");
    let shape_ok = match op {
        Op::Conv { .. } => dims.len() == 4 && dims[2] == dims[3],
        Op::DepthwiseConv { .. } => dims.len() == 4 && dims[1] == 1 && dims[2] == dims[3],
        Op::PointwiseConv { .. } => dims.len() == 4 && dims[2] == 1 && dims[3] == 1,
        Op::BatchNorm { .. } => dims.len() == 1,
        _ => dims.len() == 2,
    };
    if !shape_ok || dims.contains(&0) {
        return Err(bad_node(
            i,
            rec,
            format!("weight {name}.weight has invalid shape {dims:?}"),
        ));
    }
    if matches!(op, Op::Conv { .. } | Op::DepthwiseConv { .. }) && int_attr(i, rec, "kernel")? != dims[2] {
        return Err(bad_node(i, rec, "kernel attribute disagrees with weight shape"));
    }
    let out_dim = dims[0];
    if let Some(b) = bias {
        if b.dims != [out_dim as u64] {
            return Err(bad_node(
                i,
                rec,
                format!("bias {name}.bias must have shape [{out_dim}]"),
            ));
        }
    }
    let kind = match op {
        Op::Conv { .. } => LayerKind::Conv,
        Op::DepthwiseConv { .. } => LayerKind::DepthwiseConv,
        Op::PointwiseConv { .. } => LayerKind::PointwiseConv,
        Op::BatchNorm { .. } => LayerKind::BatchNorm,
        _ => LayerKind::Linear,
    };
    let (mut running_mean, mut running_var) = (None, None);
    if kind == LayerKind::BatchNorm {
        let (Some(_), Some(rm), Some(rv)) = (bias, get("running_mean"), get("running_var")) else {
            return Err(bad_node(i, rec, "batchnorm needs bias, running_mean and running_var"));
        };
        if rm.data.len() != out_dim || rv.data.len() != out_dim {
            return Err(bad_node(i, rec, "running statistics length mismatch"));
        }
        if rv.data.iter().any(|&v| v.is_nan() || v < 0.0) {
            return Err(bad_node(i, rec, "negative running variance"));
        }
        running_mean = Some(rm.data.clone());
        running_var = Some(rv.data.clone());
    }
    Ok(LayerParams {
        kind,
        weight: ParamTensor {
            shape: dims,
            data: weight.data.clone(),
        },
        bias: bias.map(|b| ParamTensor {
            shape: vec![out_dim],
            data: b.data.clone(),
        }),
        running_mean,
        running_var,
        frozen: false,
    })
}

/// Decode, validate against `support` and rebuild. Nothing is executed for a
/// file that fails any check.
pub fn import_model(bytes: &[u8], support: &OpSupportTable) -> Result<ModelGraph> {
    let file = ExchangeFile::decode(bytes)?;
    check_references(&file)?;
    if let Some(v) = validate_ops(&file, support).into_iter().next() {
        return Err(match v.kind {
            ViolationKind::UnsupportedOp => FormatError::UnsupportedOp { op: v.op, node: v.node },
            ViolationKind::AttributeOutOfRange { .. } => FormatError::BadNode {
                node: v.node,
                op: v.op.clone(),
                msg: v.to_string(),
            },
        }
        .into());
    }
    from_exchange(&file)
}

/// Replace every `Reshape` with target `[0, -1]` by `Flatten`. Returns the
/// rewritten file and how many nodes changed.
pub fn rewrite_reshape_to_flatten(file: &ExchangeFile) -> (ExchangeFile, usize) {
    let mut out = file.clone();
    let mut count = 0;
    for node in &mut out.nodes {
        if is_flattening_reshape(node) {
            node.op = "Flatten".into();
            node.attributes.clear();
            node.inputs.truncate(1);
            count += 1;
        }
    }
    (out, count)
}

/// Byte-level form of [`rewrite_reshape_to_flatten`]; a file with nothing to
/// rewrite comes back unchanged.
pub fn rewrite_bytes(bytes: &[u8]) -> Result<Vec<u8>> {
    let file = ExchangeFile::decode(bytes)?;
    let (rewritten, count) = rewrite_reshape_to_flatten(&file);
    Ok(if count == 0 { bytes.to_vec() } else { rewritten.encode() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::rng::Rng;
    use crate::tensor::{Shape4, Tensor4};
    use crate::zoo::{build_small_cnn, SmallCnnConfig};

    fn tiny() -> ModelGraph {
        build_small_cnn(&SmallCnnConfig::new(16, 2, 4, 3).with_fc1_out(6), 11).unwrap()
    }

    fn input(seed: u64) -> Tensor4 {
        let mut rng = Rng::new(seed);
        Tensor4::from_vec(
            Shape4::new(2, 3, 16, 16),
            (0..2 * 3 * 256).map(|_| rng.normal() as f32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn hex_floats_are_exact_and_fixed_width() {
        for v in [0.0f32, -0.0, 1.0 / 3.0, f32::MAX, 1e-40] {
            let s = hex_f32(v);
            assert_eq!(s.len(), 10);
            assert_eq!(parse_hex_f32(&s).unwrap().to_bits(), v.to_bits());
        }
        assert_eq!(hex_f32(0.5), "0x3f000000");
        assert_eq!(parse_hex_f64(&hex_f64(0.25)), Some(0.25));
        assert_eq!(parse_hex_f32("3f000000"), None);
    }

    #[test]
    fn export_import_round_trip() {
        let mut g = tiny();
        let stats = ChannelStats::new([0.1, 0.2, 0.3], [0.4, 0.5, 1.0 / 3.0]).unwrap();
        g.meta.preprocess = Some(PreprocessSpec::with_margin(16, stats).unwrap());
        let bytes = export_model(&g, None);
        assert_eq!(bytes, export_model(&g, None));
        let back = import_model(&bytes, &OpSupportTable::default_table()).unwrap();
        assert_eq!(back, g);
        assert_eq!(
            back.meta.preprocess.unwrap().stats.std()[2].to_bits(),
            (1.0f32 / 3.0).to_bits()
        );
        let x = input(1);
        assert_eq!(back.forward_eval(&x).unwrap(), g.forward_eval(&x).unwrap());
        assert_eq!(export_model(&back, None), bytes);
    }

    #[test]
    fn frozen_flags_survive_via_metadata() {
        let mut g = tiny();
        g.set_frozen(|n| n.starts_with("block"));
        let mut file = to_exchange(&g, None);
        file.metadata
            .insert(META_FROZEN.into(), "block0.bn,block0.conv,block1.bn,block1.conv".into());
        let back = from_exchange(&file).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn dropped_byte_is_rejected() {
        let bytes = export_model(&tiny(), None);
        for cut in [bytes.len() - 1, bytes.len() / 2, 20] {
            let mut b = bytes.clone();
            b.remove(cut);
            assert!(import_model(&b, &OpSupportTable::default_table()).is_err());
        }
        let err = import_model(&bytes[..bytes.len() - 1], &OpSupportTable::default_table()).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::Truncated { .. })), "{err}");
    }

    #[test]
    fn unknown_op_is_named_with_its_index() {
        let mut file = to_exchange(&tiny(), None);
        file.nodes[3].op = "GridSample".into();
        let err = import_model(&file.encode(), &OpSupportTable::default_table()).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::UnsupportedOp { ref op, node: 3 }) if op == "GridSample"));
        // Even a permissive consumer cannot build an op it does not know.
        let all =
            OpSupportTable::parse("GridSample\nFlatten\nConv\nBatchNorm\nRelu\nMaxPool\nDropout\nLinear\n").unwrap();
        assert!(import_model(&file.encode(), &all).is_err());
    }

    #[test]
    fn dangling_reference() {
        let mut file = to_exchange(&tiny(), None);
        file.nodes[2].inputs[0] = "nowhere".into();
        assert!(matches!(
            check_references(&file),
            Err(FormatError::DanglingReference { node: 2, ref name }) if name == "nowhere"
        ));
        // Forward references are dangling too.
        let mut file = to_exchange(&tiny(), None);
        file.nodes[0].inputs[0] = file.nodes[1].outputs[0].clone();
        assert!(check_references(&file).is_err());
    }

    #[test]
    fn rewrite_only_touches_flattening_reshapes() {
        let g = tiny();
        let plain = export_model(&g, None);
        assert_eq!(rewrite_bytes(&plain).unwrap(), plain);

        let mut with_reshape = g.clone();
        for n in &mut with_reshape.nodes {
            if n.op == Op::Flatten {
                n.op = Op::Reshape { shape: vec![0, -1] };
            }
        }
        let file = to_exchange(&with_reshape, None);
        let violations = validate_ops(&file, &OpSupportTable::default_table());
        assert_eq!(violations.len(), 1);
        assert!(violations[0].rewritable);
        let (fixed, n) = rewrite_reshape_to_flatten(&file);
        assert_eq!(n, 1);
        assert!(validate_ops(&fixed, &OpSupportTable::default_table()).is_empty());
        assert_eq!(fixed.encode(), plain);
    }
}
