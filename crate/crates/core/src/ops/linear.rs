use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{LayerKind, LayerParams};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor2, Tensor4};

#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub input: Option<Tensor2<T>>,
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

fn dims<T: Scalar>(op: &'static str, input: &Tensor2<T>, params: &LayerParams<T>) -> Result<(usize, usize)> {
    params.expect_kind(op, LayerKind::Linear)?;
    let (out_f, in_f) = (params.weight.shape[0], params.weight.shape[1]);
    if input.cols() != in_f {
        return Err(Error::Dimension {
            op,
            axis: "features",
            expected: in_f,
            actual: input.cols(),
        });
    }
    Ok((out_f, in_f))
}

/// `input · Wᵀ + bias` for every batch row.
pub fn linear<T: Scalar>(input: &Tensor2<T>, params: &LayerParams<T>) -> Result<Tensor2<T>> {
    let (out_f, in_f) = dims("linear", input, params)?;
    let rows = input.rows();
    let mut out = Tensor2::zeros(rows, out_f);
    if let Some(b) = &params.bias {
        for r in 0..rows {
            out.data_mut()[r * out_f..(r + 1) * out_f].copy_from_slice(&b.data);
        }
    }
    gemm_nt(rows, in_f, out_f, input.data(), &params.weight.data, out.data_mut());
    Ok(out)
}

pub fn linear_backward<T: Scalar>(
    input: &Tensor2<T>,
    params: &LayerParams<T>,
    grad_out: &Tensor2<T>,
    need_input_grad: bool,
) -> Result<LinearGrads<T>> {
    let (out_f, in_f) = dims("linear_backward", input, params)?;
    let rows = input.rows();
    if grad_out.rows() != rows || grad_out.cols() != out_f {
        return Err(Error::invalid(
            "linear_backward",
            "upstream gradient has the wrong shape",
        ));
    }
    let mut gw = vec![T::zero(); out_f * in_f];
    // dL/dW = gradᵀ · input
    gemm_tn(out_f, rows, in_f, grad_out.data(), input.data(), &mut gw);
    let gb = params.bias.as_ref().map(|_| {
        let mut gb = vec![T::zero(); out_f];
        for r in 0..rows {
            for (acc, &g) in gb.iter_mut().zip(grad_out.row(r)) {
                *acc += g;
            }
        }
        gb
    });
    let gx = need_input_grad.then(|| {
        let mut gx = Tensor2::zeros(rows, in_f);
        gemm_nn(rows, out_f, in_f, grad_out.data(), &params.weight.data, gx.data_mut());
        gx
    });
    Ok(LinearGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

/// `[B, C, H, W] → [B, C·H·W]`, keeping row-major element order.
pub fn flatten<T: Scalar>(input: &Tensor4<T>) -> Tensor2<T> {
    let s = input.shape();
    Tensor2::from_vec(s.b, s.item_len(), input.data().to_vec()).expect("same element count")
}

pub fn unflatten<T: Scalar>(input: &Tensor2<T>, shape: Shape4) -> Result<Tensor4<T>> {
    if input.rows() != shape.b || input.cols() != shape.item_len() {
        return Err(Error::invalid(
            "unflatten",
            format!("{}x{} cannot be viewed as {shape}", input.rows(), input.cols()),
        ));
    }
    Tensor4::from_vec(shape, input.data().to_vec())
}

pub fn add<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(
            "add",
            format!("shapes {} and {} differ", a.shape(), b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor4::from_vec(a.shape(), data)
}
