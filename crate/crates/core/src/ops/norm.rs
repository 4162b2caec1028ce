use super::{LayerKind, LayerParams, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Saved normalized activations for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub xhat: Tensor4<T>,
    pub inv_std: Vec<T>,
    /// True when batch statistics were used (Train mode).
    pub batch_stats: bool,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<T> {
    pub input: Option<Tensor4<T>>,
    pub scale: Vec<T>,
    pub shift: Vec<T>,
}

fn check<T: Scalar>(input: &Tensor4<T>, params: &LayerParams<T>, epsilon: f64) -> Result<()> {
    params.expect_kind("batchnorm2d", LayerKind::BatchNorm)?;
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::invalid(
            "batchnorm2d",
            format!("epsilon must be positive, got {epsilon}"),
        ));
    }
    let c = input.shape().c;
    let lens = [
        Some(params.weight.len()),
        params.bias.as_ref().map(|b| b.len()),
        params.running_mean.as_ref().map(Vec::len),
        params.running_var.as_ref().map(Vec::len),
    ];
    for len in lens {
        match len {
            Some(n) if n == c => {}
            Some(n) => {
                return Err(Error::Dimension {
                    op: "batchnorm2d",
                    axis: "C",
                    expected: n,
                    actual: c,
                })
            }
            None => return Err(Error::invalid("batchnorm2d", "missing shift or running statistics")),
        }
    }
    Ok(())
}

/// Batch normalization over `(B, H, W)` per channel.
///
/// Train mode normalizes with the biased batch variance and folds the batch
/// statistics into the running ones with weight `momentum`. Eval mode reads
/// only the running statistics and leaves `params` untouched.
pub fn batchnorm2d<T: Scalar>(
    input: &Tensor4<T>,
    params: &mut LayerParams<T>,
    mode: Mode,
    momentum: f64,
    epsilon: f64,
) -> Result<(Tensor4<T>, BatchNormCache<T>)> {
    match mode {
        Mode::Eval => batchnorm2d_eval(input, params, epsilon),
        Mode::Train => batchnorm2d_train(input, params, momentum, epsilon),
    }
}

pub(crate) fn batchnorm2d_train<T: Scalar>(
    input: &Tensor4<T>,
    params: &mut LayerParams<T>,
    momentum: f64,
    epsilon: f64,
) -> Result<(Tensor4<T>, BatchNormCache<T>)> {
    check(input, params, epsilon)?;
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::invalid(
            "batchnorm2d",
            format!("momentum {momentum} outside [0, 1]"),
        ));
    }
    let s = input.shape();
    let n = (s.b * s.plane()) as f64;
    let mut means = vec![0.0f64; s.c];
    let mut vars = vec![0.0f64; s.c];
    for c in 0..s.c {
        let mut sum = 0.0;
        for b in 0..s.b {
            let base = input.index(b, c, 0, 0);
            sum += input.data()[base..base + s.plane()]
                .iter()
                .map(|&v| Scalar::to_f64(v))
                .sum::<f64>();
        }
        let mean = sum / n;
        let mut sq = 0.0;
        for b in 0..s.b {
            let base = input.index(b, c, 0, 0);
            sq += input.data()[base..base + s.plane()]
                .iter()
                .map(|&v| (Scalar::to_f64(v) - mean).powi(2))
                .sum::<f64>();
        }
        means[c] = mean;
        vars[c] = sq / n;
    }
    let inv_std: Vec<T> = vars.iter().map(|&v| T::from_f64(1.0 / (v + epsilon).sqrt())).collect();
    let mean_t: Vec<T> = means.iter().map(|&m| T::from_f64(m)).collect();
    let (out, xhat) = affine(input, &mean_t, &inv_std, params);

    let m = T::from_f64(momentum);
    let keep = T::one() - m;
    if let (Some(rm), Some(rv)) = (params.running_mean.as_mut(), params.running_var.as_mut()) {
        for c in 0..s.c {
            rm[c] = keep * rm[c] + m * mean_t[c];
            rv[c] = keep * rv[c] + m * T::from_f64(vars[c]);
        }
    }
    Ok((
        out,
        BatchNormCache {
            xhat,
            inv_std,
            batch_stats: true,
        },
    ))
}

pub fn batchnorm2d_eval<T: Scalar>(
    input: &Tensor4<T>,
    params: &LayerParams<T>,
    epsilon: f64,
) -> Result<(Tensor4<T>, BatchNormCache<T>)> {
    check(input, params, epsilon)?;
    let rm = params.running_mean.as_ref().expect("checked");
    let rv = params.running_var.as_ref().expect("checked");
    let eps = T::from_f64(epsilon);
    let inv_std: Vec<T> = rv.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (out, xhat) = affine(input, rm, &inv_std, params);
    Ok((
        out,
        BatchNormCache {
            xhat,
            inv_std,
            batch_stats: false,
        },
    ))
}

fn affine<T: Scalar>(
    input: &Tensor4<T>,
    mean: &[T],
    inv_std: &[T],
    params: &LayerParams<T>,
) -> (Tensor4<T>, Tensor4<T>) {
    let s = input.shape();
    let scale = &params.weight.data;
    let shift = &params.bias.as_ref().expect("checked").data;
    let mut xhat = Tensor4::zeros(s);
    let mut out = Tensor4::zeros(s);
    for b in 0..s.b {
        for c in 0..s.c {
            let base = input.index(b, c, 0, 0);
            for i in base..base + s.plane() {
                let xh = (input.data()[i] - mean[c]) * inv_std[c];
                xhat.data_mut()[i] = xh;
                out.data_mut()[i] = scale[c] * xh + shift[c];
            }
        }
    }
    (out, xhat)
}

pub fn batchnorm2d_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    params: &LayerParams<T>,
    grad_out: &Tensor4<T>,
    need_input_grad: bool,
) -> Result<BatchNormGrads<T>> {
    let s = grad_out.shape();
    if s != cache.xhat.shape() {
        return Err(Error::invalid(
            "batchnorm2d_backward",
            "gradient shape does not match cache",
        ));
    }
    let scale = &params.weight.data;
    let mut g_scale = vec![T::zero(); s.c];
    let mut g_shift = vec![T::zero(); s.c];
    for b in 0..s.b {
        for c in 0..s.c {
            let base = grad_out.index(b, c, 0, 0);
            for i in base..base + s.plane() {
                let g = grad_out.data()[i];
                g_shift[c] += g;
                g_scale[c] += g * cache.xhat.data()[i];
            }
        }
    }
    let input = need_input_grad.then(|| {
        let mut gx = Tensor4::zeros(s);
        let n = T::from_f64((s.b * s.plane()) as f64);
        for c in 0..s.c {
            let k = scale[c] * cache.inv_std[c];
            for b in 0..s.b {
                let base = grad_out.index(b, c, 0, 0);
                for i in base..base + s.plane() {
                    let g = grad_out.data()[i];
                    gx.data_mut()[i] = if cache.batch_stats {
                        // dx = γ/σ · (g − mean(g) − x̂·mean(g·x̂))
                        k * (g - g_shift[c] / n - cache.xhat.data()[i] * g_scale[c] / n)
                    } else {
                        k * g
                    };
                }
            }
        }
        gx
    });
    Ok(BatchNormGrads {
        input,
        scale: g_scale,
        shift: g_shift,
    })
}
