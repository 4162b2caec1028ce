//! Forward and backward kernels for every layer type the model families use.

mod activation;
mod conv;
pub mod gemm;
mod linear;
mod norm;
mod pool;

pub use activation::{cross_entropy_loss, dropout, dropout_backward, relu, relu_backward, softmax, Elementwise};
pub use conv::{
    conv2d, conv2d_backward, conv_output_size, depthwise_conv2d, depthwise_conv2d_backward, depthwise_separable_conv,
    pointwise_conv2d, pointwise_conv2d_backward, ConvGrads,
};
pub use linear::{add, flatten, linear, linear_backward, unflatten, LinearGrads};
pub(crate) use norm::batchnorm2d_train;
pub use norm::{batchnorm2d, batchnorm2d_backward, batchnorm2d_eval, BatchNormCache, BatchNormGrads};
pub use pool::{global_avg_pool, global_avg_pool_backward, maxpool2d, maxpool2d_backward, pool_output_size};

use crate::rng::Rng;
use crate::tensor::Scalar;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;
pub const DEFAULT_DROPOUT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    DepthwiseConv,
    PointwiseConv,
    BatchNorm,
    Linear,
}

/// A parameter tensor: flat data plus its logical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T = f32> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        ParamTensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        ParamTensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> ParamTensor<U> {
        ParamTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Trainable state of one layer.
///
/// For `BatchNorm`, `weight` is the per-channel scale and `bias` the shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T = f32> {
    pub kind: LayerKind,
    pub weight: ParamTensor<T>,
    pub bias: Option<ParamTensor<T>>,
    pub running_mean: Option<Vec<T>>,
    pub running_var: Option<Vec<T>>,
    pub frozen: bool,
}

impl<T: Scalar> LayerParams<T> {
    pub fn conv(c_out: usize, c_in: usize, k: usize, bias: bool) -> Self {
        LayerParams {
            kind: LayerKind::Conv,
            weight: ParamTensor::zeros(vec![c_out, c_in, k, k]),
            bias: bias.then(|| ParamTensor::zeros(vec![c_out])),
            running_mean: None,
            running_var: None,
            frozen: false,
        }
    }

    pub fn depthwise(channels: usize, k: usize, bias: bool) -> Self {
        LayerParams {
            kind: LayerKind::DepthwiseConv,
            weight: ParamTensor::zeros(vec![channels, 1, k, k]),
            bias: bias.then(|| ParamTensor::zeros(vec![channels])),
            running_mean: None,
            running_var: None,
            frozen: false,
        }
    }

    pub fn pointwise(c_out: usize, c_in: usize, bias: bool) -> Self {
        LayerParams {
            kind: LayerKind::PointwiseConv,
            weight: ParamTensor::zeros(vec![c_out, c_in, 1, 1]),
            bias: bias.then(|| ParamTensor::zeros(vec![c_out])),
            running_mean: None,
            running_var: None,
            frozen: false,
        }
    }

    pub fn batchnorm(channels: usize) -> Self {
        LayerParams {
            kind: LayerKind::BatchNorm,
            weight: ParamTensor::filled(vec![channels], T::one()),
            bias: Some(ParamTensor::zeros(vec![channels])),
            running_mean: Some(vec![T::zero(); channels]),
            running_var: Some(vec![T::one(); channels]),
            frozen: false,
        }
    }

    pub fn linear(out_features: usize, in_features: usize, bias: bool) -> Self {
        LayerParams {
            kind: LayerKind::Linear,
            weight: ParamTensor::zeros(vec![out_features, in_features]),
            bias: bias.then(|| ParamTensor::zeros(vec![out_features])),
            running_mean: None,
            running_var: None,
            frozen: false,
        }
    }

    /// Trainable element count (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    pub fn fan_in(&self) -> usize {
        let s = &self.weight.shape;
        match self.kind {
            LayerKind::Conv | LayerKind::PointwiseConv | LayerKind::DepthwiseConv => s[1] * s[2] * s[3],
            LayerKind::Linear => s[1],
            LayerKind::BatchNorm => 1,
        }
    }

    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero bias. Batchnorm layers
    /// are reset to scale 1, shift 0 and identity running statistics.
    pub fn init_he_uniform(&mut self, rng: &mut Rng) {
        if self.kind == LayerKind::BatchNorm {
            self.weight.data.iter_mut().for_each(|v| *v = T::one());
            if let Some(b) = &mut self.bias {
                b.data.iter_mut().for_each(|v| *v = T::zero());
            }
            if let Some(m) = &mut self.running_mean {
                m.iter_mut().for_each(|v| *v = T::zero());
            }
            if let Some(v) = &mut self.running_var {
                v.iter_mut().for_each(|x| *x = T::one());
            }
            return;
        }
        let bound = (6.0 / self.fan_in() as f64).sqrt();
        for w in &mut self.weight.data {
            *w = T::from_f64(rng.uniform(-bound, bound));
        }
        if let Some(b) = &mut self.bias {
            b.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> LayerParams<U> {
        let cast_vec = |v: &Vec<T>| v.iter().map(|&x| U::from_f64(x.to_f64())).collect();
        LayerParams {
            kind: self.kind,
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(|b| b.cast()),
            running_mean: self.running_mean.as_ref().map(cast_vec),
            running_var: self.running_var.as_ref().map(cast_vec),
            frozen: self.frozen,
        }
    }

    pub(crate) fn expect_kind(&self, op: &'static str, kind: LayerKind) -> crate::Result<()> {
        if self.kind != kind {
            return Err(crate::Error::invalid(
                op,
                format!("expected {kind:?} parameters, got {:?}", self.kind),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_param_count_with_bias() {
        assert_eq!(LayerParams::<f32>::conv(16, 3, 3, true).param_count(), 448);
    }

    #[test]
    fn batchnorm_counts_scale_and_shift_only() {
        let bn = LayerParams::<f32>::batchnorm(16);
        assert_eq!(bn.param_count(), 32);
        assert!(bn.running_var.unwrap().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn he_uniform_is_bounded_and_seeded() {
        let mut a = LayerParams::<f32>::conv(8, 4, 3, true);
        let mut b = a.clone();
        a.init_he_uniform(&mut Rng::new(1));
        b.init_he_uniform(&mut Rng::new(1));
        assert_eq!(a, b);
        let bound = (6.0f32 / 36.0).sqrt();
        assert!(a.weight.data.iter().all(|w| w.abs() <= bound));
        assert!(a.weight.data.iter().any(|w| *w != 0.0));
    }
}
