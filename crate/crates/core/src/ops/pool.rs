use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

pub fn pool_output_size(axis: &'static str, n: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 {
        return Err(Error::invalid("maxpool2d", "window and stride must be >= 1"));
    }
    if window > n {
        return Err(Error::Dimension {
            op: "maxpool2d",
            axis,
            expected: window,
            actual: n,
        });
    }
    Ok((n - window) / stride + 1)
}

/// Max pooling without padding. Returns the pooled tensor and, per output
/// element, the flat input index that won (first in row-major window order on ties).
pub fn maxpool2d<T: Scalar>(input: &Tensor4<T>, window: usize, stride: usize) -> Result<(Tensor4<T>, Vec<usize>)> {
    let s = input.shape();
    let ho = pool_output_size("H", s.h, window, stride)?;
    let wo = pool_output_size("W", s.w, window, stride)?;
    let out_shape = Shape4::new(s.b, s.c, ho, wo);
    let mut out = Vec::with_capacity(out_shape.len());
    let mut arg = Vec::with_capacity(out_shape.len());
    let x = input.data();
    for b in 0..s.b {
        for c in 0..s.c {
            let base = input.index(b, c, 0, 0);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * s.w + ox * stride;
                    for ky in 0..window {
                        for kx in 0..window {
                            let i = base + (oy * stride + ky) * s.w + ox * stride + kx;
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(x[best]);
                    arg.push(best);
                }
            }
        }
    }
    Ok((Tensor4::from_vec(out_shape, out)?, arg))
}

/// Routes each upstream gradient to the input element that produced the maximum.
pub fn maxpool2d_backward<T: Scalar>(input_shape: Shape4, argmax: &[usize], grad_out: &Tensor4<T>) -> Tensor4<T> {
    let mut gx = Tensor4::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gx.data_mut()[i] += g;
    }
    gx
}

/// Mean over each channel plane, giving `[B, C, 1, 1]`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor4<T>) -> Tensor4<T> {
    let s = input.shape();
    let inv = T::one() / T::from_f64(s.plane() as f64);
    let data = input
        .data()
        .chunks(s.plane())
        .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) * inv)
        .collect();
    Tensor4::from_vec(Shape4::new(s.b, s.c, 1, 1), data).expect("shape")
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: Shape4, grad_out: &Tensor4<T>) -> Tensor4<T> {
    let inv = T::one() / T::from_f64(input_shape.plane() as f64);
    let mut gx = Tensor4::zeros(input_shape);
    for (plane, &g) in gx.data_mut().chunks_mut(input_shape.plane()).zip(grad_out.data()) {
        plane.iter_mut().for_each(|v| *v = g * inv);
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_max() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn constant_input_and_tie_break() {
        let x = Tensor4::full(Shape4::new(1, 2, 4, 4), 0.5f32);
        let (y, arg) = maxpool2d(&x, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
        // first element of each window wins
        assert_eq!(&arg[..4], &[0, 2, 8, 10]);
        let g = Tensor4::full(y.shape(), 1.0f32);
        let gx = maxpool2d_backward(x.shape(), &arg, &g);
        assert_eq!(gx.get(0, 0, 0, 0), 1.0);
        assert_eq!(gx.get(0, 0, 0, 1), 0.0);
    }

    #[test]
    fn five_halvings_of_256() {
        let mut side = 256;
        for _ in 0..5 {
            side = pool_output_size("H", side, 2, 2).unwrap();
        }
        assert_eq!(side, 8);
    }

    #[test]
    fn window_larger_than_input() {
        let x = Tensor4::full(Shape4::new(1, 1, 1, 3), 0.0f32);
        assert!(matches!(maxpool2d(&x, 2, 2), Err(Error::Dimension { axis: "H", .. })));
    }

    #[test]
    fn gap_means() {
        let x = Tensor4::from_vec(Shape4::new(1, 2, 1, 2), vec![1.0f32, 3.0, -1.0, 5.0]).unwrap();
        assert_eq!(global_avg_pool(&x).data(), &[2.0, 2.0]);
    }
}
