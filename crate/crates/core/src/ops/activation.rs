use super::Mode;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor2, Tensor4};

/// Tensors whose values can be rewritten element by element.
pub trait Elementwise<T: Scalar>: Sized {
    fn values(&self) -> &[T];
    fn with_values(&self, values: Vec<T>) -> Self;
}

impl<T: Scalar> Elementwise<T> for Tensor4<T> {
    fn values(&self) -> &[T] {
        self.data()
    }
    fn with_values(&self, values: Vec<T>) -> Self {
        Tensor4::from_vec(self.shape(), values).expect("same shape")
    }
}

impl<T: Scalar> Elementwise<T> for Tensor2<T> {
    fn values(&self) -> &[T] {
        self.data()
    }
    fn with_values(&self, values: Vec<T>) -> Self {
        Tensor2::from_vec(self.rows(), self.cols(), values).expect("same shape")
    }
}

pub fn relu<T: Scalar, X: Elementwise<T>>(input: &X) -> X {
    input.with_values(
        input
            .values()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect(),
    )
}

/// Gradient passes where the forward input was strictly positive (0 at x = 0).
pub fn relu_backward<T: Scalar, X: Elementwise<T>>(input: &X, grad_out: &X) -> X {
    let g = input
        .values()
        .iter()
        .zip(grad_out.values())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    grad_out.with_values(g)
}

/// Inverted dropout. In Train mode each element is zeroed with probability `p`
/// and survivors are scaled by `1/(1−p)`; the returned mask holds the per-element
/// multiplier for the backward pass. Eval mode (or `p == 0`) is the identity and
/// draws nothing from `rng`.
pub fn dropout<T: Scalar, X: Elementwise<T>>(
    input: &X,
    p: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(X, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid("dropout", format!("p must be in [0, 1), got {p}")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok((input.with_values(input.values().to_vec()), None));
    }
    let keep = T::from_f64(1.0 / (1.0 - p));
    let mask: Vec<T> = input
        .values()
        .iter()
        .map(|_| if rng.next_f64() < p { T::zero() } else { keep })
        .collect();
    let out = input.values().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    Ok((input.with_values(out), Some(mask)))
}

pub fn dropout_backward<T: Scalar, X: Elementwise<T>>(mask: Option<&[T]>, grad_out: &X) -> X {
    match mask {
        None => grad_out.with_values(grad_out.values().to_vec()),
        Some(m) => grad_out.with_values(grad_out.values().iter().zip(m).map(|(&g, &k)| g * k).collect()),
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor2<T>) -> Tensor2<T> {
    let mut out = Vec::with_capacity(logits.data().len());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum = exps.iter().fold(T::zero(), |a, &v| a + v);
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    Tensor2::from_vec(logits.rows(), logits.cols(), out).expect("same shape")
}

/// Mean negative log-likelihood and its gradient `(softmax − one_hot) / B`.
pub fn cross_entropy_loss<T: Scalar>(logits: &Tensor2<T>, labels: &[usize]) -> Result<(T, Tensor2<T>)> {
    let (rows, k) = (logits.rows(), logits.cols());
    if labels.len() != rows {
        return Err(Error::Dimension {
            op: "cross_entropy_loss",
            axis: "B",
            expected: rows,
            actual: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(
            "cross_entropy_loss",
            format!("label {bad} out of range for {k} classes"),
        ));
    }
    let probs = softmax(logits);
    let inv_b = T::one() / T::from_f64(rows as f64);
    let mut loss = T::zero();
    let mut grad = probs.into_vec();
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln();
        loss += lse - row[label];
        grad[r * k + label] -= T::one();
    }
    grad.iter_mut().for_each(|g| *g *= inv_b);
    Ok((loss * inv_b, Tensor2::from_vec(rows, k, grad)?))
}
