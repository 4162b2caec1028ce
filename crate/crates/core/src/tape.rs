//! Reverse-mode differentiation over a recorded forward pass.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{ModelGraph, Op, Value};
use crate::ops::{self, BatchNormCache, LayerParams};
use crate::tensor::{Scalar, Tensor2};

#[derive(Debug, Clone)]
pub(crate) enum Saved<T> {
    None,
    BatchNorm(BatchNormCache<T>),
    MaxPool(Vec<usize>),
    Dropout(Option<Vec<T>>),
}

/// Gradient of one layer's trainable tensors (for batchnorm: scale and shift).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T> {
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

pub type Gradients<T> = BTreeMap<String, ParamGrads<T>>;

/// Every value produced by a forward pass plus what each node needs to run in
/// reverse. A tape can be replayed exactly once.
#[derive(Debug)]
pub struct GradTape<T> {
    values: Vec<Value<T>>,
    saved: Vec<Saved<T>>,
    needs_grad: Vec<bool>,
    wiring: Vec<Vec<usize>>,
    consumed: bool,
}

impl<T: Scalar> GradTape<T> {
    pub(crate) fn new(
        values: Vec<Value<T>>,
        saved: Vec<Saved<T>>,
        needs_grad: Vec<bool>,
        wiring: Vec<Vec<usize>>,
    ) -> Self {
        GradTape {
            values,
            saved,
            needs_grad,
            wiring,
            consumed: false,
        }
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Propagate `grad_output` (dL/dlogits) back through `graph`, which must be
    /// the graph that recorded this tape. Frozen layers receive no entry.
    pub fn backward(&mut self, graph: &ModelGraph<T>, grad_output: &Tensor2<T>) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if graph.nodes.len() != self.saved.len() {
            return Err(Error::invalid("backward", "tape was recorded on a different graph"));
        }
        match self.values.last() {
            Some(Value::Flat(t)) if t.rows() == grad_output.rows() && t.cols() == grad_output.cols() => {}
            _ => {
                return Err(Error::invalid(
                    "backward",
                    "seed gradient does not match the output shape",
                ))
            }
        }
        self.consumed = true;

        let mut grads: Vec<Option<Value<T>>> = vec![None; self.values.len()];
        *grads.last_mut().expect("output slot") = Some(Value::Flat(grad_output.clone()));
        let mut out: Gradients<T> = BTreeMap::new();

        for (i, node) in graph.nodes.iter().enumerate().rev() {
            let slot = i + 1;
            let Some(g) = grads[slot].take() else { continue };
            if !self.needs_grad[slot] {
                continue;
            }
            let ins = &self.wiring[i];
            let need_in = self.needs_grad[ins[0]];
            let x = &self.values[ins[0]];
            let layer = node.op.layer().map(|l| graph.layer(l)).transpose()?;
            let input_grad: Option<Value<T>> = match (&node.op, &self.saved[i]) {
                (Op::Conv { stride, padding, .. }, _) => {
                    let p = layer.unwrap();
                    let r = ops::conv2d_backward(x.as_map(node)?, p, g.as_map(node)?, *stride, *padding, need_in)?;
                    record(&mut out, node.op.layer().unwrap(), p, r.weight, r.bias);
                    r.input.map(Value::Map)
                }
                (Op::DepthwiseConv { stride, padding, .. }, _) => {
                    let p = layer.unwrap();
                    let r = ops::depthwise_conv2d_backward(
                        x.as_map(node)?,
                        p,
                        g.as_map(node)?,
                        *stride,
                        *padding,
                        need_in,
                    )?;
                    record(&mut out, node.op.layer().unwrap(), p, r.weight, r.bias);
                    r.input.map(Value::Map)
                }
                (Op::PointwiseConv { .. }, _) => {
                    let p = layer.unwrap();
                    let r = ops::pointwise_conv2d_backward(x.as_map(node)?, p, g.as_map(node)?, need_in)?;
                    record(&mut out, node.op.layer().unwrap(), p, r.weight, r.bias);
                    r.input.map(Value::Map)
                }
                (Op::BatchNorm { .. }, Saved::BatchNorm(cache)) => {
                    let p = layer.unwrap();
                    let r = ops::batchnorm2d_backward(cache, p, g.as_map(node)?, need_in)?;
                    record(&mut out, node.op.layer().unwrap(), p, r.scale, Some(r.shift));
                    r.input.map(Value::Map)
                }
                (Op::Relu, _) => Some(match (x, &g) {
                    (Value::Map(xv), Value::Map(gv)) => Value::Map(ops::relu_backward(xv, gv)),
                    (Value::Flat(xv), Value::Flat(gv)) => Value::Flat(ops::relu_backward(xv, gv)),
                    _ => return Err(crate::graph::node_error(node, "gradient shape mismatch")),
                }),
                (Op::MaxPool { .. }, Saved::MaxPool(arg)) => Some(Value::Map(ops::maxpool2d_backward(
                    x.as_map(node)?.shape(),
                    arg,
                    g.as_map(node)?,
                ))),
                (Op::Dropout { .. }, Saved::Dropout(mask)) => Some(match &g {
                    Value::Map(gv) => Value::Map(ops::dropout_backward(mask.as_deref(), gv)),
                    Value::Flat(gv) => Value::Flat(ops::dropout_backward(mask.as_deref(), gv)),
                }),
                (Op::Flatten | Op::Reshape { .. }, _) => Some(Value::from_dims(&x.dims(), g.data().to_vec())?),
                (Op::Linear { .. }, _) => {
                    let p = layer.unwrap();
                    let r = ops::linear_backward(x.as_flat(node)?, p, g.as_flat(node)?, need_in)?;
                    record(&mut out, node.op.layer().unwrap(), p, r.weight, r.bias);
                    r.input.map(Value::Flat)
                }
                (Op::GlobalAvgPool, _) => Some(Value::Map(ops::global_avg_pool_backward(
                    x.as_map(node)?.shape(),
                    g.as_map(node)?,
                ))),
                (Op::Add, _) => {
                    if self.needs_grad[ins[1]] {
                        accumulate(&mut grads, ins[1], g.clone());
                    }
                    Some(g)
                }
                (op, _) => {
                    return Err(Error::invalid(
                        "backward",
                        format!("tape entry does not match op {}", op.name()),
                    ))
                }
            };
            if need_in {
                if let Some(v) = input_grad {
                    accumulate(&mut grads, ins[0], v);
                }
            }
        }

        // Trainable layers the gradient never reached still get (zero) entries.
        for (name, layer) in &graph.layers {
            if !layer.frozen && !out.contains_key(name) {
                let used = graph.nodes.iter().any(|n| n.op.layer() == Some(name.as_str()));
                if used {
                    out.insert(
                        name.clone(),
                        ParamGrads {
                            weight: vec![T::zero(); layer.weight.len()],
                            bias: layer.bias.as_ref().map(|b| vec![T::zero(); b.len()]),
                        },
                    );
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Value<T>>], slot: usize, v: Value<T>) {
    match &mut grads[slot] {
        Some(existing) => existing.accumulate(&v),
        empty => *empty = Some(v),
    }
}

fn record<T: Scalar>(out: &mut Gradients<T>, name: &str, layer: &LayerParams<T>, weight: Vec<T>, bias: Option<Vec<T>>) {
    if layer.frozen {
        return;
    }
    match out.get_mut(name) {
        Some(e) => {
            e.weight.iter_mut().zip(&weight).for_each(|(a, &b)| *a += b);
            if let (Some(a), Some(b)) = (e.bias.as_mut(), bias.as_ref()) {
                a.iter_mut().zip(b).for_each(|(a, &b)| *a += b);
            }
        }
        None => {
            out.insert(name.to_string(), ParamGrads { weight, bias });
        }
    }
}
