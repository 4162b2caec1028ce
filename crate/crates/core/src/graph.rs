//! The model graph: an ordered node list over named values plus a parameter
//! store keyed by layer name. The same structure is trained in memory and
//! serialized to the exchange format.

use std::collections::{BTreeMap, HashMap};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ops::{self, LayerKind, LayerParams, Mode, BN_EPSILON, BN_MOMENTUM};
use crate::preprocess::PreprocessSpec;
use crate::rng::Rng;
use crate::tape::{GradTape, Saved};
use crate::tensor::{Scalar, Shape4, Tensor2, Tensor4};

/// Name of the value fed into the first node.
pub const GRAPH_INPUT: &str = "input";

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Conv {
        layer: String,
        stride: usize,
        padding: usize,
    },
    DepthwiseConv {
        layer: String,
        stride: usize,
        padding: usize,
    },
    PointwiseConv {
        layer: String,
    },
    BatchNorm {
        layer: String,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Dropout {
        p: f64,
    },
    Flatten,
    /// Target dims in ONNX convention: `0` copies the input dim, `-1` is inferred.
    Reshape {
        shape: Vec<i64>,
    },
    Linear {
        layer: String,
    },
    GlobalAvgPool,
    Add,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Conv { .. } => "Conv",
            Op::DepthwiseConv { .. } => "DepthwiseConv",
            Op::PointwiseConv { .. } => "PointwiseConv",
            Op::BatchNorm { .. } => "BatchNorm",
            Op::Relu => "Relu",
            Op::MaxPool { .. } => "MaxPool",
            Op::Dropout { .. } => "Dropout",
            Op::Flatten => "Flatten",
            Op::Reshape { .. } => "Reshape",
            Op::Linear { .. } => "Linear",
            Op::GlobalAvgPool => "GlobalAveragePool",
            Op::Add => "Add",
        }
    }

    pub fn layer(&self) -> Option<&str> {
        match self {
            Op::Conv { layer, .. }
            | Op::DepthwiseConv { layer, .. }
            | Op::PointwiseConv { layer }
            | Op::BatchNorm { layer }
            | Op::Linear { layer } => Some(layer),
            _ => None,
        }
    }

    fn layer_kind(&self) -> Option<LayerKind> {
        Some(match self {
            Op::Conv { .. } => LayerKind::Conv,
            Op::DepthwiseConv { .. } => LayerKind::DepthwiseConv,
            Op::PointwiseConv { .. } => LayerKind::PointwiseConv,
            Op::BatchNorm { .. } => LayerKind::BatchNorm,
            Op::Linear { .. } => LayerKind::Linear,
            _ => return None,
        })
    }

    pub(crate) fn arity(&self) -> usize {
        if matches!(self, Op::Add) {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<String>,
    pub output: String,
}

/// Shape of a value without its batch dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueShape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ValueShape {
    pub fn numel(&self) -> usize {
        match *self {
            ValueShape::Map { c, h, w } => c * h * w,
            ValueShape::Flat(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value<T> {
    Map(Tensor4<T>),
    Flat(Tensor2<T>),
}

impl<T: Scalar> Value<T> {
    pub fn batch(&self) -> usize {
        match self {
            Value::Map(t) => t.shape().b,
            Value::Flat(t) => t.rows(),
        }
    }

    pub fn data(&self) -> &[T] {
        match self {
            Value::Map(t) => t.data(),
            Value::Flat(t) => t.data(),
        }
    }

    pub(crate) fn dims(&self) -> Vec<usize> {
        match self {
            Value::Map(t) => t.shape().dims().to_vec(),
            Value::Flat(t) => vec![t.rows(), t.cols()],
        }
    }

    pub(crate) fn from_dims(dims: &[usize], data: Vec<T>) -> Result<Self> {
        match *dims {
            [b, f] => Ok(Value::Flat(Tensor2::from_vec(b, f, data)?)),
            [b, c, h, w] => Ok(Value::Map(Tensor4::from_vec(Shape4::new(b, c, h, w), data)?)),
            _ => Err(Error::invalid(
                "Reshape",
                format!("rank-{} values are not supported", dims.len()),
            )),
        }
    }

    pub(crate) fn accumulate(&mut self, other: &Value<T>) {
        let dst = match self {
            Value::Map(t) => t.data_mut(),
            Value::Flat(t) => t.data_mut(),
        };
        for (d, &s) in dst.iter_mut().zip(other.data()) {
            *d += s;
        }
    }

    pub(crate) fn as_map(&self, node: &Node) -> Result<&Tensor4<T>> {
        match self {
            Value::Map(t) => Ok(t),
            Value::Flat(_) => Err(node_error(node, "expects a [B,C,H,W] input")),
        }
    }

    pub(crate) fn as_flat(&self, node: &Node) -> Result<&Tensor2<T>> {
        match self {
            Value::Flat(t) => Ok(t),
            Value::Map(_) => Err(node_error(node, "expects a [B,F] input")),
        }
    }
}

pub(crate) fn node_error(node: &Node, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("node {} ({}): {msg}", node.name, node.op.name()))
}

/// Resolve a reshape target against concrete input dims.
pub fn reshape_dims(input: &[usize], target: &[i64]) -> Result<Vec<usize>> {
    let total: usize = input.iter().product();
    let mut out = Vec::with_capacity(target.len());
    let mut infer = None;
    for (i, &d) in target.iter().enumerate() {
        match d {
            0 => out.push(
                *input
                    .get(i)
                    .ok_or_else(|| Error::invalid("Reshape", "0 refers past the input rank"))?,
            ),
            -1 if infer.is_none() => {
                infer = Some(i);
                out.push(1);
            }
            d if d > 0 => out.push(d as usize),
            _ => return Err(Error::invalid("Reshape", format!("bad target {target:?}"))),
        }
    }
    let known: usize = out.iter().product();
    if let Some(i) = infer {
        if known == 0 || !total.is_multiple_of(known) {
            return Err(Error::invalid("Reshape", format!("cannot infer -1 in {target:?}")));
        }
        out[i] = total / known;
    }
    if out.iter().product::<usize>() != total {
        return Err(Error::invalid(
            "Reshape",
            format!("target {target:?} does not preserve {total} elements"),
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphMeta {
    /// `small_cnn`, `mobile_net` or `residual_net`.
    pub family: String,
    /// Free-form `key=value;...` echo of the builder configuration.
    pub config: String,
    pub image_size: usize,
    pub num_classes: usize,
    /// Layers forming the classifier head (reinitialized by transfer regimes).
    pub classifier: Vec<String>,
    pub preprocess: Option<PreprocessSpec>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T = f32> {
    pub nodes: Vec<Node>,
    pub layers: BTreeMap<String, LayerParams<T>>,
    pub meta: GraphMeta,
}

impl<T: Scalar> ModelGraph<T> {
    pub fn input_shape(&self) -> ValueShape {
        ValueShape::Map {
            c: 3,
            h: self.meta.image_size,
            w: self.meta.image_size,
        }
    }

    pub fn output_name(&self) -> &str {
        self.nodes.last().map_or(GRAPH_INPUT, |n| &n.output)
    }

    pub fn layer(&self, name: &str) -> Result<&LayerParams<T>> {
        self.layers
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown layer {name}")))
    }

    /// Trainable element count; running statistics are excluded.
    pub fn param_count(&self) -> usize {
        self.layers.values().map(LayerParams::param_count).sum()
    }

    pub fn set_frozen(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, layer) in &mut self.layers {
            layer.frozen = pred(name);
        }
    }

    pub fn is_classifier(&self, layer: &str) -> bool {
        self.meta.classifier.iter().any(|c| c == layer)
    }

    /// SHA-256 over every layer's parameters and running statistics.
    pub fn parameter_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, l) in &self.layers {
            h.update(name.as_bytes());
            let parts = [
                Some(&l.weight.data),
                l.bias.as_ref().map(|b| &b.data),
                l.running_mean.as_ref(),
                l.running_var.as_ref(),
            ];
            for part in parts.into_iter().flatten() {
                for v in part {
                    h.update(Scalar::to_f64(*v).to_le_bytes());
                }
            }
        }
        h.finalize().into()
    }

    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph {
            nodes: self.nodes.clone(),
            layers: self.layers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            meta: self.meta.clone(),
        }
    }

    fn slot_map(&self) -> Result<HashMap<&str, usize>> {
        let mut slots = HashMap::with_capacity(self.nodes.len() + 1);
        slots.insert(GRAPH_INPUT, 0);
        for (i, node) in self.nodes.iter().enumerate() {
            if slots.insert(node.output.as_str(), i + 1).is_some() {
                return Err(node_error(node, format!("output {} is produced twice", node.output)));
            }
        }
        Ok(slots)
    }

    /// Input slot indices for every node, checking that each refers to an earlier value.
    pub(crate) fn wiring(&self) -> Result<Vec<Vec<usize>>> {
        let slots = self.slot_map()?;
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                if node.inputs.len() != node.op.arity() {
                    return Err(node_error(
                        node,
                        format!("expects {} inputs, got {}", node.op.arity(), node.inputs.len()),
                    ));
                }
                node.inputs
                    .iter()
                    .map(|name| match slots.get(name.as_str()) {
                        Some(&s) if s <= i => Ok(s),
                        _ => Err(node_error(node, format!("input {name} is not produced earlier"))),
                    })
                    .collect()
            })
            .collect()
    }

    /// Static shape check from the declared input shape to the logits.
    /// Returns the shape of every value slot (slot 0 is the graph input).
    pub fn infer_shapes(&self) -> Result<Vec<ValueShape>> {
        let wiring = self.wiring()?;
        let mut shapes = vec![self.input_shape()];
        for (node, ins) in self.nodes.iter().zip(&wiring) {
            let x = shapes[ins[0]];
            if let (Some(name), Some(kind)) = (node.op.layer(), node.op.layer_kind()) {
                let layer = self.layer(name).map_err(|e| node_error(node, e))?;
                if layer.kind != kind {
                    return Err(node_error(node, format!("layer {name} is {:?}", layer.kind)));
                }
            }
            let map = |x: ValueShape| match x {
                ValueShape::Map { c, h, w } => Ok((c, h, w)),
                ValueShape::Flat(_) => Err(node_error(node, "expects a [B,C,H,W] input")),
            };
            let out = match &node.op {
                Op::Conv { layer, stride, padding } | Op::DepthwiseConv { layer, stride, padding } => {
                    let (c, h, w) = map(x)?;
                    let ws = &self.layers[layer].weight.shape;
                    let (c_in, c_out) = if matches!(node.op, Op::Conv { .. }) {
                        (ws[1], ws[0])
                    } else {
                        (ws[0], ws[0])
                    };
                    if c_in != c {
                        return Err(node_error(node, format!("expects {c_in} channels, got {c}")));
                    }
                    ValueShape::Map {
                        c: c_out,
                        h: ops::conv_output_size("shape check", "H", h, ws[2], *stride, *padding)?,
                        w: ops::conv_output_size("shape check", "W", w, ws[3], *stride, *padding)?,
                    }
                }
                Op::PointwiseConv { layer } => {
                    let (c, h, w) = map(x)?;
                    let ws = &self.layers[layer].weight.shape;
                    if ws[1] != c {
                        return Err(node_error(node, format!("expects {} channels, got {c}", ws[1])));
                    }
                    ValueShape::Map { c: ws[0], h, w }
                }
                Op::BatchNorm { layer } => {
                    let (c, _, _) = map(x)?;
                    if self.layers[layer].weight.len() != c {
                        return Err(node_error(node, "channel count mismatch"));
                    }
                    x
                }
                Op::Relu | Op::Dropout { .. } => x,
                Op::MaxPool { window, stride } => {
                    let (c, h, w) = map(x)?;
                    ValueShape::Map {
                        c,
                        h: ops::pool_output_size("H", h, *window, *stride)?,
                        w: ops::pool_output_size("W", w, *window, *stride)?,
                    }
                }
                Op::Flatten => ValueShape::Flat(x.numel()),
                Op::Reshape { shape } => {
                    let mut dims = vec![1];
                    match x {
                        ValueShape::Map { c, h, w } => dims.extend([c, h, w]),
                        ValueShape::Flat(f) => dims.push(f),
                    }
                    match reshape_dims(&dims, shape).map_err(|e| node_error(node, e))?[..] {
                        [_, f] => ValueShape::Flat(f),
                        [_, c, h, w] => ValueShape::Map { c, h, w },
                        ref d => return Err(node_error(node, format!("rank-{} output unsupported", d.len()))),
                    }
                }
                Op::Linear { layer } => {
                    let ValueShape::Flat(f) = x else {
                        return Err(node_error(node, "expects a [B,F] input"));
                    };
                    let ws = &self.layers[layer].weight.shape;
                    if ws[1] != f {
                        return Err(node_error(node, format!("expects {} features, got {f}", ws[1])));
                    }
                    ValueShape::Flat(ws[0])
                }
                Op::GlobalAvgPool => {
                    let (c, _, _) = map(x)?;
                    ValueShape::Map { c, h: 1, w: 1 }
                }
                Op::Add => {
                    if shapes[ins[1]] != x {
                        return Err(node_error(node, "operand shapes differ"));
                    }
                    x
                }
            };
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// Full structural validation: shapes chain and the graph ends in exactly one
    /// terminal `Linear` emitting `num_classes` logits.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.infer_shapes()?;
        let last = self
            .nodes
            .last()
            .ok_or_else(|| Error::Config("graph has no nodes".into()))?;
        if !matches!(last.op, Op::Linear { .. }) {
            return Err(Error::Config(format!(
                "graph must end in Linear, ends in {}",
                last.op.name()
            )));
        }
        if shapes.last() != Some(&ValueShape::Flat(self.meta.num_classes)) {
            return Err(Error::Config(format!(
                "terminal Linear must emit {} logits, emits {:?}",
                self.meta.num_classes,
                shapes.last()
            )));
        }
        let consumed: Vec<&str> = self
            .nodes
            .iter()
            .flat_map(|n| n.inputs.iter().map(String::as_str))
            .collect();
        let terminal_linears = self
            .nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Linear { .. }) && !consumed.contains(&n.output.as_str()))
            .count();
        if terminal_linears != 1 {
            return Err(Error::Config(format!(
                "expected one terminal Linear, found {terminal_linears}"
            )));
        }
        Ok(())
    }

    /// Eval-mode forward pass; never mutates the graph.
    pub fn forward_eval(&self, input: &Tensor4<T>) -> Result<Tensor2<T>> {
        let (out, _, _) = self.execute(input, Mode::Eval, None, false)?;
        Ok(out)
    }

    /// Forward pass that records a tape for [`GradTape::backward`]. In Train mode
    /// batchnorm running statistics are updated and dropout draws from `rng`.
    pub fn forward(&mut self, input: &Tensor4<T>, mode: Mode, rng: &mut Rng) -> Result<(Tensor2<T>, GradTape<T>)> {
        let (out, tape, updates) = self.execute(input, mode, Some(rng), true)?;
        for (name, mean, var) in updates {
            let layer = self.layers.get_mut(&name).expect("layer exists");
            layer.running_mean = Some(mean);
            layer.running_var = Some(var);
        }
        Ok((out, tape.expect("tape recorded")))
    }

    #[allow(clippy::type_complexity)]
    fn execute(
        &self,
        input: &Tensor4<T>,
        mode: Mode,
        mut rng: Option<&mut Rng>,
        record: bool,
    ) -> Result<(Tensor2<T>, Option<GradTape<T>>, Vec<(String, Vec<T>, Vec<T>)>)> {
        let s = input.shape();
        let expect = self.input_shape();
        if (ValueShape::Map { c: s.c, h: s.h, w: s.w }) != expect {
            return Err(Error::invalid(
                "forward",
                format!("input {s} does not match model input {expect:?}"),
            ));
        }
        let wiring = self.wiring()?;
        let mut values: Vec<Option<Value<T>>> = Vec::with_capacity(self.nodes.len() + 1);
        values.push(Some(Value::Map(input.clone())));
        let mut saved = Vec::with_capacity(self.nodes.len());
        let mut updates = Vec::new();
        // A slot needs a gradient if some trainable layer feeds it.
        let mut needs_grad = vec![false];

        // Last consumer of each slot, so Eval-mode runs can free values early.
        let mut last_use = vec![0usize; self.nodes.len() + 1];
        for (i, ins) in wiring.iter().enumerate() {
            for &s in ins {
                last_use[s] = i;
            }
        }

        for (i, (node, ins)) in self.nodes.iter().zip(&wiring).enumerate() {
            let x = values[ins[0]].as_ref().expect("value alive while it has consumers");
            let layer = node.op.layer().map(|l| self.layer(l)).transpose()?;
            let (out, save) = match &node.op {
                Op::Conv { stride, padding, .. } => (
                    Value::Map(ops::conv2d(x.as_map(node)?, layer.unwrap(), *stride, *padding)?),
                    Saved::None,
                ),
                Op::DepthwiseConv { stride, padding, .. } => (
                    Value::Map(ops::depthwise_conv2d(
                        x.as_map(node)?,
                        layer.unwrap(),
                        *stride,
                        *padding,
                    )?),
                    Saved::None,
                ),
                Op::PointwiseConv { .. } => (
                    Value::Map(ops::pointwise_conv2d(x.as_map(node)?, layer.unwrap())?),
                    Saved::None,
                ),
                Op::BatchNorm { layer: name } => {
                    let p = layer.unwrap();
                    // Frozen layers keep their running statistics even while training.
                    let (y, cache) = match mode {
                        Mode::Eval => ops::batchnorm2d_eval(x.as_map(node)?, p, BN_EPSILON)?,
                        Mode::Train if p.frozen => ops::batchnorm2d_eval(x.as_map(node)?, p, BN_EPSILON)?,
                        Mode::Train => {
                            let mut scratch = p.clone();
                            let r = ops::batchnorm2d_train(x.as_map(node)?, &mut scratch, BN_MOMENTUM, BN_EPSILON)?;
                            updates.push((
                                name.clone(),
                                scratch.running_mean.unwrap(),
                                scratch.running_var.unwrap(),
                            ));
                            r
                        }
                    };
                    (Value::Map(y), Saved::BatchNorm(cache))
                }
                Op::Relu => (
                    match x {
                        Value::Map(t) => Value::Map(ops::relu(t)),
                        Value::Flat(t) => Value::Flat(ops::relu(t)),
                    },
                    Saved::None,
                ),
                Op::MaxPool { window, stride } => {
                    let (y, arg) = ops::maxpool2d(x.as_map(node)?, *window, *stride)?;
                    (Value::Map(y), Saved::MaxPool(arg))
                }
                Op::Dropout { p } => {
                    let rng = match (mode, rng.as_deref_mut()) {
                        (Mode::Train, Some(r)) => Some(r),
                        (Mode::Train, None) => return Err(node_error(node, "Train mode needs an rng")),
                        (Mode::Eval, _) => None,
                    };
                    let mut dummy = Rng::new(0);
                    let r = rng.unwrap_or(&mut dummy);
                    let (y, mask) = match x {
                        Value::Map(t) => {
                            let (y, m) = ops::dropout(t, *p, mode, r)?;
                            (Value::Map(y), m)
                        }
                        Value::Flat(t) => {
                            let (y, m) = ops::dropout(t, *p, mode, r)?;
                            (Value::Flat(y), m)
                        }
                    };
                    (y, Saved::Dropout(mask))
                }
                Op::Flatten => (
                    match x {
                        Value::Map(t) => Value::Flat(ops::flatten(t)),
                        Value::Flat(t) => Value::Flat(t.clone()),
                    },
                    Saved::None,
                ),
                Op::Reshape { shape } => {
                    let dims = reshape_dims(&x.dims(), shape).map_err(|e| node_error(node, e))?;
                    (Value::from_dims(&dims, x.data().to_vec())?, Saved::None)
                }
                Op::Linear { .. } => (Value::Flat(ops::linear(x.as_flat(node)?, layer.unwrap())?), Saved::None),
                Op::GlobalAvgPool => (Value::Map(ops::global_avg_pool(x.as_map(node)?)), Saved::None),
                Op::Add => {
                    let y = values[ins[1]].as_ref().expect("alive");
                    (Value::Map(ops::add(x.as_map(node)?, y.as_map(node)?)?), Saved::None)
                }
            };
            let trainable = layer.is_some_and(|l| !l.frozen);
            needs_grad.push(trainable || ins.iter().any(|&s| needs_grad[s]));
            values.push(Some(out));
            if record {
                saved.push(save);
            } else {
                for &s in ins {
                    if last_use[s] == i {
                        values[s] = None;
                    }
                }
            }
        }

        let logits = match values.last().cloned().flatten() {
            Some(Value::Flat(t)) => t,
            _ => return Err(Error::Config("graph output is not [B, classes] logits".into())),
        };
        let tape = record.then(|| {
            GradTape::new(
                values.into_iter().map(|v| v.expect("recorded")).collect(),
                saved,
                needs_grad,
                wiring,
            )
        });
        Ok((logits, tape, updates))
    }
}
