use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{LayerKind, LayerParams};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// `floor((n + 2·padding − k) / stride) + 1`, or an error naming `axis` when the
/// padded input is smaller than the kernel.
pub fn conv_output_size(
    op: &'static str,
    axis: &'static str,
    n: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid(op, "stride must be >= 1"));
    }
    if n + 2 * padding < k {
        return Err(Error::Dimension {
            op,
            axis,
            expected: k,
            actual: n + 2 * padding,
        });
    }
    Ok((n + 2 * padding - k) / stride + 1)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    /// `None` when the caller did not ask for the input gradient.
    pub input: Option<Tensor4<T>>,
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

struct Geometry {
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

fn conv_geometry<T: Scalar>(
    op: &'static str,
    input: Shape4,
    params: &LayerParams<T>,
    stride: usize,
    padding: usize,
) -> Result<Geometry> {
    let ws = &params.weight.shape;
    if ws.len() != 4 || ws[2] != ws[3] {
        return Err(Error::invalid(
            op,
            format!("kernel must be (C_out, C_in, k, k), got {ws:?}"),
        ));
    }
    if ws[1] != input.c {
        return Err(Error::Dimension {
            op,
            axis: "C",
            expected: ws[1],
            actual: input.c,
        });
    }
    let k = ws[2];
    let ho = conv_output_size(op, "H", input.h, k, stride, padding)?;
    let wo = conv_output_size(op, "W", input.w, k, stride, padding)?;
    Ok(Geometry {
        c_in: ws[1],
        c_out: ws[0],
        k,
        stride,
        padding,
        h: input.h,
        w: input.w,
        ho,
        wo,
    })
}

fn im2col<T: Scalar>(g: &Geometry, x: &[T], cols: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.padding);
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &Geometry, cols: &[T], dx: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.padding);
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        let xc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < g.w as isize {
                            xc[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Standard 2-D convolution (cross-correlation, no kernel flip).
pub fn conv2d<T: Scalar>(
    input: &Tensor4<T>,
    params: &LayerParams<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor4<T>> {
    params.expect_kind("conv2d", LayerKind::Conv)?;
    let s = input.shape();
    let g = conv_geometry("conv2d", s, params, stride, padding)?;
    let out_shape = Shape4::new(s.b, g.c_out, g.ho, g.wo);
    let mut out = Tensor4::zeros(out_shape);
    let plane = g.out_plane();
    let mut cols = vec![T::zero(); g.patch() * plane];
    let w = &params.weight.data;
    for b in 0..s.b {
        im2col(&g, input.item(b), &mut cols);
        let dst = &mut out.data_mut()[b * g.c_out * plane..(b + 1) * g.c_out * plane];
        if let Some(bias) = &params.bias {
            for (co, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias.data[co]);
            }
        }
        gemm_nn(g.c_out, g.patch(), plane, w, &cols, dst);
    }
    Ok(out)
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    params: &LayerParams<T>,
    grad_out: &Tensor4<T>,
    stride: usize,
    padding: usize,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    params.expect_kind("conv2d_backward", LayerKind::Conv)?;
    let s = input.shape();
    let g = conv_geometry("conv2d_backward", s, params, stride, padding)?;
    let plane = g.out_plane();
    let expected = Shape4::new(s.b, g.c_out, g.ho, g.wo);
    if grad_out.shape() != expected {
        return Err(Error::invalid(
            "conv2d_backward",
            format!(
                "upstream gradient {} does not match output {expected}",
                grad_out.shape()
            ),
        ));
    }
    let mut gw = vec![T::zero(); params.weight.len()];
    let mut gb = params.bias.as_ref().map(|b| vec![T::zero(); b.len()]);
    let mut gx = need_input_grad.then(|| Tensor4::zeros(s));
    let mut cols = vec![T::zero(); g.patch() * plane];
    let mut gcols = vec![T::zero(); g.patch() * plane];
    let w = &params.weight.data;
    for b in 0..s.b {
        let go = grad_out.item(b);
        im2col(&g, input.item(b), &mut cols);
        gemm_nt(g.c_out, plane, g.patch(), go, &cols, &mut gw);
        if let Some(gb) = &mut gb {
            for (co, chunk) in go.chunks(plane).enumerate() {
                gb[co] += chunk.iter().fold(T::zero(), |a, &v| a + v);
            }
        }
        if let Some(gx) = &mut gx {
            gcols.iter_mut().for_each(|v| *v = T::zero());
            gemm_tn(g.patch(), g.c_out, plane, w, go, &mut gcols);
            let n = s.item_len();
            col2im(&g, &gcols, &mut gx.data_mut()[b * n..(b + 1) * n]);
        }
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

fn depthwise_geometry<T: Scalar>(
    op: &'static str,
    input: Shape4,
    params: &LayerParams<T>,
    stride: usize,
    padding: usize,
) -> Result<Geometry> {
    params.expect_kind(op, LayerKind::DepthwiseConv)?;
    let ws = &params.weight.shape;
    if ws.len() != 4 || ws[1] != 1 || ws[2] != ws[3] {
        return Err(Error::invalid(op, format!("kernel must be (C, 1, k, k), got {ws:?}")));
    }
    if ws[0] != input.c {
        return Err(Error::Dimension {
            op,
            axis: "C",
            expected: ws[0],
            actual: input.c,
        });
    }
    let k = ws[2];
    Ok(Geometry {
        c_in: input.c,
        c_out: input.c,
        k,
        stride,
        padding,
        h: input.h,
        w: input.w,
        ho: conv_output_size(op, "H", input.h, k, stride, padding)?,
        wo: conv_output_size(op, "W", input.w, k, stride, padding)?,
    })
}

/// Per-channel spatial convolution: one `k×k` filter for each input channel.
pub fn depthwise_conv2d<T: Scalar>(
    input: &Tensor4<T>,
    params: &LayerParams<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor4<T>> {
    let s = input.shape();
    let g = depthwise_geometry("depthwise_conv2d", s, params, stride, padding)?;
    let mut out = Tensor4::zeros(Shape4::new(s.b, s.c, g.ho, g.wo));
    let (k, p) = (g.k, g.padding as isize);
    for b in 0..s.b {
        for c in 0..s.c {
            let kern = &params.weight.data[c * k * k..(c + 1) * k * k];
            let bias = params.bias.as_ref().map_or(T::zero(), |bb| bb.data[c]);
            let x = &input.item(b)[c * s.plane()..(c + 1) * s.plane()];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = bias;
                    for ky in 0..k {
                        let iy = (oy * g.stride + ky) as isize - p;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * g.stride + kx) as isize - p;
                            if ix >= 0 && ix < s.w as isize {
                                acc += kern[ky * k + kx] * x[iy as usize * s.w + ix as usize];
                            }
                        }
                    }
                    out.set(b, c, oy, ox, acc);
                }
            }
        }
    }
    Ok(out)
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    params: &LayerParams<T>,
    grad_out: &Tensor4<T>,
    stride: usize,
    padding: usize,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let s = input.shape();
    let g = depthwise_geometry("depthwise_conv2d_backward", s, params, stride, padding)?;
    let (k, p) = (g.k, g.padding as isize);
    let mut gw = vec![T::zero(); params.weight.len()];
    let mut gb = params.bias.as_ref().map(|b| vec![T::zero(); b.len()]);
    let mut gx = need_input_grad.then(|| Tensor4::zeros(s));
    for b in 0..s.b {
        for c in 0..s.c {
            let kern = &params.weight.data[c * k * k..(c + 1) * k * k];
            let x = &input.item(b)[c * s.plane()..(c + 1) * s.plane()];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let go = grad_out.get(b, c, oy, ox);
                    if let Some(gb) = &mut gb {
                        gb[c] += go;
                    }
                    for ky in 0..k {
                        let iy = (oy * g.stride + ky) as isize - p;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * g.stride + kx) as isize - p;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            let (iy, ix) = (iy as usize, ix as usize);
                            gw[c * k * k + ky * k + kx] += go * x[iy * s.w + ix];
                            if let Some(gx) = &mut gx {
                                let i = gx.index(b, c, iy, ix);
                                gx.data_mut()[i] += go * kern[ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

fn pointwise_dims<T: Scalar>(op: &'static str, input: Shape4, params: &LayerParams<T>) -> Result<(usize, usize)> {
    params.expect_kind(op, LayerKind::PointwiseConv)?;
    let ws = &params.weight.shape;
    if ws.len() != 4 || ws[2] != 1 || ws[3] != 1 {
        return Err(Error::invalid(op, format!("pointwise kernel must be 1x1, got {ws:?}")));
    }
    if ws[1] != input.c {
        return Err(Error::Dimension {
            op,
            axis: "C",
            expected: ws[1],
            actual: input.c,
        });
    }
    Ok((ws[0], ws[1]))
}

/// 1×1 convolution mixing channels at every pixel.
pub fn pointwise_conv2d<T: Scalar>(input: &Tensor4<T>, params: &LayerParams<T>) -> Result<Tensor4<T>> {
    let s = input.shape();
    let (c_out, c_in) = pointwise_dims("pointwise_conv2d", s, params)?;
    let plane = s.plane();
    let mut out = Tensor4::zeros(Shape4::new(s.b, c_out, s.h, s.w));
    for b in 0..s.b {
        let dst = &mut out.data_mut()[b * c_out * plane..(b + 1) * c_out * plane];
        if let Some(bias) = &params.bias {
            for (co, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias.data[co]);
            }
        }
        gemm_nn(c_out, c_in, plane, &params.weight.data, input.item(b), dst);
    }
    Ok(out)
}

pub fn pointwise_conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    params: &LayerParams<T>,
    grad_out: &Tensor4<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let s = input.shape();
    let (c_out, c_in) = pointwise_dims("pointwise_conv2d_backward", s, params)?;
    let plane = s.plane();
    let mut gw = vec![T::zero(); params.weight.len()];
    let mut gb = params.bias.as_ref().map(|b| vec![T::zero(); b.len()]);
    let mut gx = need_input_grad.then(|| Tensor4::zeros(s));
    for b in 0..s.b {
        let go = grad_out.item(b);
        gemm_nt(c_out, plane, c_in, go, input.item(b), &mut gw);
        if let Some(gb) = &mut gb {
            for (co, chunk) in go.chunks(plane).enumerate() {
                gb[co] += chunk.iter().fold(T::zero(), |a, &v| a + v);
            }
        }
        if let Some(gx) = &mut gx {
            let n = s.item_len();
            gemm_tn(
                c_in,
                c_out,
                plane,
                &params.weight.data,
                go,
                &mut gx.data_mut()[b * n..(b + 1) * n],
            );
        }
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

/// Depthwise spatial convolution followed by a pointwise channel mix.
pub fn depthwise_separable_conv<T: Scalar>(
    input: &Tensor4<T>,
    dw: &LayerParams<T>,
    pw: &LayerParams<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor4<T>> {
    dw.expect_kind("depthwise_separable_conv", LayerKind::DepthwiseConv)?;
    pw.expect_kind("depthwise_separable_conv", LayerKind::PointwiseConv)?;
    if pw.weight.shape[1] != dw.weight.shape[0] {
        return Err(Error::invalid(
            "depthwise_separable_conv",
            format!(
                "channel mismatch: depthwise stage has {} channels, pointwise expects {}",
                dw.weight.shape[0], pw.weight.shape[1]
            ),
        ));
    }
    let mid = depthwise_conv2d(input, dw, stride, padding)?;
    pointwise_conv2d(&mid, pw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(shape: Shape4, rng: &mut Rng) -> Tensor4<f64> {
        Tensor4::from_vec(shape, (0..shape.len()).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    fn conv_params(c_out: usize, c_in: usize, k: usize, vals: &[f64], bias: Option<&[f64]>) -> LayerParams<f64> {
        let mut p = LayerParams::conv(c_out, c_in, k, bias.is_some());
        p.weight.data.copy_from_slice(vals);
        if let (Some(b), Some(pb)) = (bias, p.bias.as_mut()) {
            pb.data.copy_from_slice(b);
        }
        p
    }

    /// Direct six-loop reference convolution.
    fn naive_conv(x: &Tensor4<f64>, p: &LayerParams<f64>, stride: usize, pad: usize) -> Tensor4<f64> {
        let s = x.shape();
        let (co, k) = (p.weight.shape[0], p.weight.shape[2]);
        let ho = (s.h + 2 * pad - k) / stride + 1;
        let wo = (s.w + 2 * pad - k) / stride + 1;
        let mut out = Tensor4::zeros(Shape4::new(s.b, co, ho, wo));
        for b in 0..s.b {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = p.bias.as_ref().map_or(0.0, |bb| bb.data[o]);
                        for c in 0..s.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                                        acc += p.weight.data[((o * s.c + c) * k + ky) * k + kx]
                                            * x.get(b, c, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.set(b, o, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn zero_input_zero_output() {
        let x = Tensor4::<f64>::zeros(Shape4::new(1, 1, 3, 3));
        let p = conv_params(1, 1, 3, &[0.3; 9], Some(&[0.0]));
        let y = conv2d(&x, &p, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_kernel() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = conv_params(1, 1, 1, &[2.0], Some(&[1.0]));
        let y = conv2d(&x, &p, 1, 0).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn ones_sum_to_nine() {
        let x = Tensor4::full(Shape4::new(1, 1, 3, 3), 1.0);
        let p = conv_params(1, 1, 3, &[1.0; 9], None);
        let y = conv2d(&x, &p, 1, 0).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 1, 1, 1));
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let x = Tensor4::<f64>::zeros(Shape4::new(1, 2, 3, 3));
        let p = LayerParams::conv(1, 3, 3, false);
        match conv2d(&x, &p, 1, 1) {
            Err(Error::Dimension {
                axis, expected, actual, ..
            }) => {
                assert_eq!((axis, expected, actual), ("C", 3, 2));
            }
            other => panic!("{other:?}"),
        }
        let p = LayerParams::conv(1, 2, 5, false);
        assert!(matches!(conv2d(&x, &p, 1, 0), Err(Error::Dimension { axis: "H", .. })));
    }

    #[test]
    fn matches_naive_over_strides_and_padding() {
        let mut rng = Rng::new(11);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let x = random(Shape4::new(2, 3, 7, 6), &mut rng);
            let mut p = LayerParams::conv(4, 3, 3, true);
            p.weight.data.iter_mut().for_each(|v| *v = rng.uniform(-1.0, 1.0));
            p.bias
                .as_mut()
                .unwrap()
                .data
                .iter_mut()
                .for_each(|v| *v = rng.uniform(-1.0, 1.0));
            let got = conv2d(&x, &p, stride, pad).unwrap();
            let want = naive_conv(&x, &p, stride, pad);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn separable_identity() {
        let mut rng = Rng::new(2);
        let x = random(Shape4::new(1, 3, 5, 5), &mut rng);
        let mut dw = LayerParams::depthwise(3, 3, false);
        for c in 0..3 {
            dw.weight.data[c * 9 + 4] = 1.0;
        }
        let mut pw = LayerParams::pointwise(3, 3, false);
        for c in 0..3 {
            pw.weight.data[c * 3 + c] = 1.0;
        }
        let y = depthwise_separable_conv(&x, &dw, &pw, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn separable_equals_block_diagonal_conv_then_pointwise() {
        let mut rng = Rng::new(17);
        let x = random(Shape4::new(1, 2, 4, 4), &mut rng);
        let mut dw = LayerParams::depthwise(2, 3, false);
        dw.weight.data.iter_mut().for_each(|v| *v = rng.uniform(-1.0, 1.0));
        let mut pw = LayerParams::pointwise(3, 2, false);
        pw.weight.data.iter_mut().for_each(|v| *v = rng.uniform(-1.0, 1.0));

        // Dense kernel that is zero off the channel diagonal.
        let mut dense = LayerParams::conv(2, 2, 3, false);
        for c in 0..2 {
            for t in 0..9 {
                dense.weight.data[(c * 2 + c) * 9 + t] = dw.weight.data[c * 9 + t];
            }
        }
        let mut one_by_one = LayerParams::conv(3, 2, 1, false);
        one_by_one.weight.data.copy_from_slice(&pw.weight.data);

        let oracle = conv2d(&conv2d(&x, &dense, 1, 1).unwrap(), &one_by_one, 1, 0).unwrap();
        let got = depthwise_separable_conv(&x, &dw, &pw, 1, 1).unwrap();
        assert!(got.max_abs_diff(&oracle) < 1e-6);
    }

    #[test]
    fn separable_param_count() {
        let dw = LayerParams::<f32>::depthwise(32, 3, false);
        let pw = LayerParams::<f32>::pointwise(64, 32, false);
        let standard = LayerParams::<f32>::conv(64, 32, 3, false);
        assert_eq!(dw.param_count() + pw.param_count(), 2336);
        assert_eq!(standard.param_count(), 18432);
    }

    #[test]
    fn separable_channel_mismatch() {
        let x = Tensor4::<f64>::zeros(Shape4::new(1, 3, 4, 4));
        let dw = LayerParams::depthwise(3, 3, false);
        let pw = LayerParams::pointwise(4, 2, false);
        assert!(depthwise_separable_conv(&x, &dw, &pw, 1, 1).is_err());
    }
}
