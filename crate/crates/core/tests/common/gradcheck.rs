//! Central finite-difference checks of every differentiable op and of whole
//! graphs. Gradients are compared as whole tensors with
//! `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.

use edgeloop::graph::ModelGraph;
use edgeloop::ops::{self, LayerParams, Mode};
use edgeloop::rng::Rng;
use edgeloop::tensor::{Shape4, Tensor2, Tensor4};
use edgeloop::zoo::{
    build_mobile_net, build_residual_net, build_small_cnn, MobileNetConfig, ResNetConfig, SmallCnnConfig,
};

pub const STEP: f64 = 1e-3;
/// Whole graphs contain thousands of ReLU and max-pool kinks; a 1e-3 probe
/// on a first-layer weight crosses some of them, so graphs use a finer step.
pub const GRAPH_STEP: f64 = 1e-6;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const F32_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub rel_error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.rel_error < self.tolerance
    }
}

pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Numeric gradient of `loss` with respect to each entry of `x`.
fn numeric(x: &[f64], loss: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    numeric_with_step(x, STEP, loss)
}

fn numeric_with_step(x: &[f64], step: f64, mut loss: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = loss(&probe);
            probe[i] = x[i] - step;
            let down = loss(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

fn uniform(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

/// Values at least 0.05 away from zero so no probe crosses the ReLU kink.
fn away_from_zero(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.uniform(0.05, 1.0);
            if rng.next_f64() < 0.5 {
                -m
            } else {
                m
            }
        })
        .collect()
}

/// Distinct values spaced 0.01 apart so the max inside a pooling window never changes under a probe.
fn distinct(rng: &mut Rng, n: usize) -> Vec<f64> {
    let mut ranks: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut ranks);
    ranks.into_iter().map(|r| r as f64 * 0.01 - n as f64 * 0.005).collect()
}

fn t4(shape: Shape4, data: &[f64]) -> Tensor4<f64> {
    Tensor4::from_vec(shape, data.to_vec()).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn with_weight(p: &LayerParams<f64>, w: &[f64]) -> LayerParams<f64> {
    let mut q = p.clone();
    q.weight.data = w.to_vec();
    q
}

fn with_bias(p: &LayerParams<f64>, b: &[f64]) -> LayerParams<f64> {
    let mut q = p.clone();
    q.bias.as_mut().unwrap().data = b.to_vec();
    q
}

fn randomized(mut p: LayerParams<f64>, rng: &mut Rng) -> LayerParams<f64> {
    p.weight.data = uniform(rng, p.weight.len());
    if let Some(b) = &mut p.bias {
        b.data = uniform(rng, b.len());
    }
    p
}

fn worst(parts: &[f64]) -> f64 {
    parts.iter().copied().fold(0.0, f64::max)
}

#[derive(Clone, Copy)]
enum ConvKind {
    Standard,
    Depthwise,
    Pointwise,
}

fn conv_check(
    kind: ConvKind,
    shape: Shape4,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    seed: u64,
) -> Check {
    let mut rng = Rng::new(seed);
    let params = match kind {
        ConvKind::Standard => LayerParams::conv(c_out, shape.c, k, true),
        ConvKind::Depthwise => LayerParams::depthwise(shape.c, k, true),
        ConvKind::Pointwise => LayerParams::pointwise(c_out, shape.c, true),
    };
    let params = randomized(params, &mut rng).cast::<f64>();
    let x = uniform(&mut rng, shape.len());
    let fwd = |x: &[f64], p: &LayerParams<f64>| match kind {
        ConvKind::Standard => ops::conv2d(&t4(shape, x), p, stride, padding).unwrap(),
        ConvKind::Depthwise => ops::depthwise_conv2d(&t4(shape, x), p, stride, padding).unwrap(),
        ConvKind::Pointwise => ops::pointwise_conv2d(&t4(shape, x), p).unwrap(),
    };
    let out = fwd(&x, &params);
    let r = uniform(&mut rng, out.data().len());
    let grads = match kind {
        ConvKind::Standard => {
            ops::conv2d_backward(&t4(shape, &x), &params, &t4(out.shape(), &r), stride, padding, true)
        }
        ConvKind::Depthwise => {
            ops::depthwise_conv2d_backward(&t4(shape, &x), &params, &t4(out.shape(), &r), stride, padding, true)
        }
        ConvKind::Pointwise => ops::pointwise_conv2d_backward(&t4(shape, &x), &params, &t4(out.shape(), &r), true),
    }
    .unwrap();
    let gx = numeric(&x, |x| dot(fwd(x, &params).data(), &r));
    let gw = numeric(&params.weight.data, |w| {
        dot(fwd(&x, &with_weight(&params, w)).data(), &r)
    });
    let bias = &params.bias.as_ref().unwrap().data;
    let gb = numeric(bias, |b| dot(fwd(&x, &with_bias(&params, b)).data(), &r));
    let name = match kind {
        ConvKind::Standard => format!("conv2d k{k} s{stride} p{padding} {shape}"),
        ConvKind::Depthwise => format!("depthwise k{k} s{stride} p{padding} {shape}"),
        ConvKind::Pointwise => format!("pointwise {}->{c_out} {shape}", shape.c),
    };
    Check {
        name,
        rel_error: worst(&[
            rel_error(grads.input.unwrap().data(), &gx),
            rel_error(&grads.weight, &gw),
            rel_error(grads.bias.as_ref().unwrap(), &gb),
        ]),
        tolerance: OP_TOLERANCE,
    }
}

fn batchnorm_check(shape: Shape4, seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let mut params = LayerParams::<f64>::batchnorm(shape.c).cast::<f64>();
    params.weight.data = (0..shape.c).map(|_| rng.uniform(0.5, 1.5)).collect();
    params.bias.as_mut().unwrap().data = uniform(&mut rng, shape.c);
    let x = uniform(&mut rng, shape.len());
    let fwd = |x: &[f64], p: &LayerParams<f64>| {
        let mut p = p.clone();
        ops::batchnorm2d(&t4(shape, x), &mut p, Mode::Train, ops::BN_MOMENTUM, ops::BN_EPSILON).unwrap()
    };
    let (out, cache) = fwd(&x, &params);
    let r = uniform(&mut rng, out.data().len());
    let grads = ops::batchnorm2d_backward(&cache, &params, &t4(shape, &r), true).unwrap();
    let gx = numeric(&x, |x| dot(fwd(x, &params).0.data(), &r));
    let gs = numeric(&params.weight.data, |w| {
        dot(fwd(&x, &with_weight(&params, w)).0.data(), &r)
    });
    let bias = params.bias.as_ref().unwrap().data.clone();
    let gb = numeric(&bias, |b| dot(fwd(&x, &with_bias(&params, b)).0.data(), &r));
    Check {
        name: format!("batchnorm train {shape}"),
        rel_error: worst(&[
            rel_error(grads.input.unwrap().data(), &gx),
            rel_error(&grads.scale, &gs),
            rel_error(&grads.shift, &gb),
        ]),
        tolerance: OP_TOLERANCE,
    }
}

fn linear_check(rows: usize, in_f: usize, out_f: usize, seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let params = randomized(LayerParams::linear(out_f, in_f, true), &mut rng).cast::<f64>();
    let x = uniform(&mut rng, rows * in_f);
    let fwd =
        |x: &[f64], p: &LayerParams<f64>| ops::linear(&Tensor2::from_vec(rows, in_f, x.to_vec()).unwrap(), p).unwrap();
    let r = uniform(&mut rng, rows * out_f);
    let grads = ops::linear_backward(
        &Tensor2::from_vec(rows, in_f, x.clone()).unwrap(),
        &params,
        &Tensor2::from_vec(rows, out_f, r.clone()).unwrap(),
        true,
    )
    .unwrap();
    let gx = numeric(&x, |x| dot(fwd(x, &params).data(), &r));
    let gw = numeric(&params.weight.data, |w| {
        dot(fwd(&x, &with_weight(&params, w)).data(), &r)
    });
    let bias = params.bias.as_ref().unwrap().data.clone();
    let gb = numeric(&bias, |b| dot(fwd(&x, &with_bias(&params, b)).data(), &r));
    Check {
        name: format!("linear {rows}x{in_f}->{out_f}"),
        rel_error: worst(&[
            rel_error(grads.input.unwrap().data(), &gx),
            rel_error(&grads.weight, &gw),
            rel_error(grads.bias.as_ref().unwrap(), &gb),
        ]),
        tolerance: OP_TOLERANCE,
    }
}

/// Input-only ops: `fwd` maps the flat input to the flat output, `bwd` maps
/// (input, upstream) to the input gradient.
fn unary_check(
    name: String,
    x: Vec<f64>,
    rng: &mut Rng,
    fwd: impl Fn(&[f64]) -> Vec<f64>,
    bwd: impl Fn(&[f64], &[f64]) -> Vec<f64>,
) -> Check {
    let r = uniform(rng, fwd(&x).len());
    let analytic = bwd(&x, &r);
    let gx = numeric(&x, |x| dot(&fwd(x), &r));
    Check {
        name,
        rel_error: rel_error(&analytic, &gx),
        tolerance: OP_TOLERANCE,
    }
}

fn relu_check(shape: Shape4, seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let x = away_from_zero(&mut rng, shape.len());
    unary_check(
        format!("relu {shape}"),
        x,
        &mut rng,
        |x| ops::relu(&t4(shape, x)).into_vec(),
        |x, r| ops::relu_backward(&t4(shape, x), &t4(shape, r)).into_vec(),
    )
}

fn maxpool_check(shape: Shape4, window: usize, stride: usize, seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let x = distinct(&mut rng, shape.len());
    unary_check(
        format!("maxpool w{window} s{stride} {shape}"),
        x,
        &mut rng,
        |x| ops::maxpool2d(&t4(shape, x), window, stride).unwrap().0.into_vec(),
        |x, r| {
            let (out, arg) = ops::maxpool2d(&t4(shape, x), window, stride).unwrap();
            ops::maxpool2d_backward(shape, &arg, &t4(out.shape(), r)).into_vec()
        },
    )
}

fn gap_check(shape: Shape4, seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let x = uniform(&mut rng, shape.len());
    let out_shape = Shape4::new(shape.b, shape.c, 1, 1);
    unary_check(
        format!("global average pool {shape}"),
        x,
        &mut rng,
        |x| ops::global_avg_pool(&t4(shape, x)).into_vec(),
        |_, r| ops::global_avg_pool_backward(shape, &t4(out_shape, r)).into_vec(),
    )
}

fn dropout_check(shape: Shape4, p: f64, seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let x = uniform(&mut rng, shape.len());
    let mask_seed = rng.next_u64();
    let fwd = |x: &[f64]| {
        ops::dropout(&t4(shape, x), p, Mode::Train, &mut Rng::new(mask_seed))
            .unwrap()
            .0
            .into_vec()
    };
    unary_check(format!("dropout p{p} {shape}"), x, &mut rng, fwd, |x, r| {
        let (_, mask) = ops::dropout(&t4(shape, x), p, Mode::Train, &mut Rng::new(mask_seed)).unwrap();
        ops::dropout_backward(mask.as_deref(), &t4(shape, r)).into_vec()
    })
}

fn add_check(shape: Shape4, seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let a = uniform(&mut rng, shape.len());
    let b = uniform(&mut rng, shape.len());
    let r = uniform(&mut rng, shape.len());
    let ga = numeric(&a, |a| dot(ops::add(&t4(shape, a), &t4(shape, &b)).unwrap().data(), &r));
    let gb = numeric(&b, |b| dot(ops::add(&t4(shape, &a), &t4(shape, b)).unwrap().data(), &r));
    // d(a + b)/da = d(a + b)/db = upstream.
    Check {
        name: format!("add {shape}"),
        rel_error: worst(&[rel_error(&r, &ga), rel_error(&r, &gb)]),
        tolerance: OP_TOLERANCE,
    }
}

fn flatten_check(shape: Shape4, seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let x = uniform(&mut rng, shape.len());
    let flat_cols = shape.c * shape.h * shape.w;
    unary_check(
        format!("flatten {shape}"),
        x,
        &mut rng,
        |x| ops::flatten(&t4(shape, x)).into_vec(),
        |_, r| {
            ops::unflatten(&Tensor2::from_vec(shape.b, flat_cols, r.to_vec()).unwrap(), shape)
                .unwrap()
                .into_vec()
        },
    )
}

fn cross_entropy_check(rows: usize, k: usize, seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let logits: Vec<f64> = (0..rows * k).map(|_| rng.uniform(-3.0, 3.0)).collect();
    let labels: Vec<usize> = (0..rows).map(|_| rng.below(k as u64) as usize).collect();
    let loss = |z: &[f64]| {
        ops::cross_entropy_loss(&Tensor2::from_vec(rows, k, z.to_vec()).unwrap(), &labels)
            .unwrap()
            .0
    };
    let (_, grad) = ops::cross_entropy_loss(&Tensor2::from_vec(rows, k, logits.clone()).unwrap(), &labels).unwrap();
    Check {
        name: format!("softmax cross-entropy {rows}x{k}"),
        rel_error: rel_error(grad.data(), &numeric(&logits, loss)),
        tolerance: OP_TOLERANCE,
    }
}

/// Every parameter of `g`, in layer order, with a setter.
fn flat_params(g: &ModelGraph<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    for p in g.layers.values() {
        out.extend(&p.weight.data);
        if let Some(b) = &p.bias {
            out.extend(&b.data);
        }
    }
    out
}

fn set_flat_params(g: &mut ModelGraph<f64>, flat: &[f64]) {
    let mut at = 0;
    for p in g.layers.values_mut() {
        let n = p.weight.len();
        p.weight.data.copy_from_slice(&flat[at..at + n]);
        at += n;
        if let Some(b) = &mut p.bias {
            let n = b.len();
            b.data.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
    }
}

fn analytic_graph<T: edgeloop::tensor::Scalar>(
    g: &ModelGraph<T>,
    x: &Tensor4<T>,
    labels: &[usize],
    dropout_seed: u64,
) -> Vec<f64> {
    let mut g = g.clone();
    let (logits, mut tape) = g.forward(x, Mode::Train, &mut Rng::new(dropout_seed)).unwrap();
    let (_, grad) = ops::cross_entropy_loss(&logits, labels).unwrap();
    let grads = tape.backward(&g, &grad).unwrap();
    let mut out = Vec::new();
    for (name, p) in &g.layers {
        let pg = &grads[name];
        assert_eq!(pg.weight.len(), p.weight.len());
        out.extend(pg.weight.iter().map(|&v| v.to_f64()));
        if let Some(b) = &pg.bias {
            out.extend(b.iter().map(|&v| v.to_f64()));
        }
    }
    out
}

fn numeric_graph(g: &ModelGraph<f64>, x: &Tensor4<f64>, labels: &[usize], dropout_seed: u64) -> Vec<f64> {
    let base = flat_params(g);
    let mut probe = g.clone();
    numeric_with_step(&base, GRAPH_STEP, |flat| {
        set_flat_params(&mut probe, flat);
        let (logits, _) = probe.forward(x, Mode::Train, &mut Rng::new(dropout_seed)).unwrap();
        ops::cross_entropy_loss(&logits, labels).unwrap().0
    })
}

/// Loss gradient of a whole model on a 2-image batch, in Train mode with a
/// fixed dropout mask. Returns the f64 check and, for `with_f32`, the check of
/// the single-precision gradient against the same f64 reference.
fn graph_checks(name: &str, g: ModelGraph, seed: u64, with_f32: bool) -> Vec<Check> {
    let mut rng = Rng::new(seed);
    let s = g.meta.image_size;
    let shape = Shape4::new(2, 3, s, s);
    let x32 = Tensor4::from_vec(
        shape,
        uniform(&mut rng, shape.len()).iter().map(|&v| v as f32).collect(),
    )
    .unwrap();
    let x64 = x32.cast::<f64>();
    let labels: Vec<usize> = (0..2).map(|_| rng.below(g.meta.num_classes as u64) as usize).collect();
    let dropout_seed = rng.next_u64();
    let g64 = g.cast::<f64>();
    let reference = numeric_graph(&g64, &x64, &labels, dropout_seed);
    let mut out = vec![Check {
        name: format!("{name} end to end (f64)"),
        rel_error: rel_error(&analytic_graph(&g64, &x64, &labels, dropout_seed), &reference),
        tolerance: OP_TOLERANCE,
    }];
    if with_f32 {
        out.push(Check {
            name: format!("{name} end to end (f32)"),
            rel_error: rel_error(&analytic_graph(&g, &x32, &labels, dropout_seed), &reference),
            tolerance: F32_TOLERANCE,
        });
    }
    out
}

/// Random instances drawn per op and per network.
pub const INSTANCES: u64 = 20;

/// Per-op checks: each case is drawn [`INSTANCES`] times with different seeds.
pub fn op_checks() -> Vec<Check> {
    let s = Shape4::new;
    let mut checks = Vec::new();
    for i in 0..INSTANCES {
        let seed = |base: u64| base + 1000 * i;
        checks.extend([
            conv_check(ConvKind::Standard, s(2, 3, 6, 6), 4, 3, 1, 1, seed(1)),
            conv_check(ConvKind::Standard, s(2, 2, 7, 7), 3, 3, 2, 1, seed(2)),
            conv_check(ConvKind::Standard, s(1, 3, 5, 5), 2, 1, 1, 0, seed(3)),
            conv_check(ConvKind::Standard, s(2, 2, 9, 9), 2, 5, 2, 2, seed(4)),
            conv_check(ConvKind::Standard, s(1, 1, 6, 5), 3, 3, 1, 0, seed(5)),
            conv_check(ConvKind::Depthwise, s(2, 3, 6, 6), 3, 3, 1, 1, seed(6)),
            conv_check(ConvKind::Depthwise, s(2, 4, 7, 7), 4, 3, 2, 1, seed(7)),
            conv_check(ConvKind::Depthwise, s(1, 2, 5, 5), 2, 3, 1, 0, seed(8)),
            conv_check(ConvKind::Pointwise, s(2, 3, 4, 4), 5, 1, 1, 0, seed(9)),
            conv_check(ConvKind::Pointwise, s(1, 6, 3, 3), 2, 1, 1, 0, seed(10)),
            batchnorm_check(s(4, 3, 3, 3), seed(11)),
            batchnorm_check(s(2, 2, 5, 4), seed(12)),
            batchnorm_check(s(8, 1, 1, 1), seed(13)),
            linear_check(3, 7, 4, seed(14)),
            linear_check(1, 12, 9, seed(15)),
            relu_check(s(2, 3, 4, 4), seed(16)),
            maxpool_check(s(2, 2, 6, 6), 2, 2, seed(17)),
            maxpool_check(s(1, 3, 7, 7), 3, 2, seed(18)),
            gap_check(s(2, 4, 3, 5), seed(19)),
            dropout_check(s(2, 3, 4, 4), 0.25, seed(20)),
            add_check(s(2, 2, 3, 3), seed(21)),
            flatten_check(s(2, 3, 2, 2), seed(22)),
            cross_entropy_check(4, 5, seed(23)),
            cross_entropy_check(1, 2, seed(24)),
        ]);
    }
    checks
}

/// Whole-network checks. SmallCNN also runs in single precision.
pub fn network_checks() -> Vec<Check> {
    let small = SmallCnnConfig::new(8, 2, 2, 3).with_fc1_out(4);
    let mobile = MobileNetConfig::matching(&small);
    let residual = ResNetConfig {
        blocks_per_stage: vec![1, 1],
        base_channels: 2,
        ..ResNetConfig::desk(8, 3)
    };
    let mut checks = Vec::new();
    for i in 0..INSTANCES {
        let seed = 100 * i;
        checks.extend(graph_checks(
            "small cnn",
            build_small_cnn(&small, seed + 31).unwrap(),
            seed + 32,
            true,
        ));
        checks.extend(graph_checks(
            "mobile net",
            build_mobile_net(&mobile, seed + 33).unwrap(),
            seed + 34,
            false,
        ));
        checks.extend(graph_checks(
            "residual net",
            build_residual_net(&residual, seed + 35).unwrap(),
            seed + 36,
            false,
        ));
    }
    checks
}

pub fn all_checks() -> Vec<Check> {
    let mut checks = op_checks();
    checks.extend(network_checks());
    checks
}
