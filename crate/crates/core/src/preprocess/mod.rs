//! Image preprocessing shared by training and the deployed runtime.
//!
//! The pipeline is: bilinear resize to `R×R`, center crop to `S×S`, scale
//! samples to `[0, 1]`, then standardize each channel with dataset statistics.
//! Training and inference both go through [`preprocess_pipeline`]; there is no
//! second implementation that could drift.

mod image;
mod ppm;

pub use image::{center_crop, resize_bilinear, Image};
pub use ppm::{decode_ppm, encode_ppm};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// Per-channel mean and (population) standard deviation of `[0, 1]` samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    mean: [f32; 3],
    std: [f32; 3],
}

impl ChannelStats {
    pub fn new(mean: [f32; 3], std: [f32; 3]) -> Result<Self> {
        for (c, &s) in std.iter().enumerate() {
            if s <= 0.0 || !s.is_finite() {
                return Err(Error::DegenerateChannel { channel: c });
            }
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("ChannelStats", "non-finite mean"));
        }
        Ok(ChannelStats { mean, std })
    }

    /// Mean 0, std 1: standardization becomes the identity.
    pub fn identity() -> Self {
        ChannelStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn mean(&self) -> [f32; 3] {
        self.mean
    }

    pub fn std(&self) -> [f32; 3] {
        self.std
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessSpec {
    pub target_size: usize,
    pub resize_size: usize,
    pub stats: ChannelStats,
}

impl PreprocessSpec {
    pub fn new(target_size: usize, resize_size: usize, stats: ChannelStats) -> Result<Self> {
        if target_size == 0 || resize_size < target_size {
            return Err(Error::invalid(
                "PreprocessSpec",
                format!("need 1 <= S <= R, got S={target_size} R={resize_size}"),
            ));
        }
        Ok(PreprocessSpec {
            target_size,
            resize_size,
            stats,
        })
    }

    /// `R = ceil(S / 0.9)`: the crop then trims roughly a 10% border.
    pub fn with_margin(target_size: usize, stats: ChannelStats) -> Result<Self> {
        Self::new(target_size, margin_resize(target_size), stats)
    }
}

/// `ceil(S / 0.9)` in integer arithmetic.
pub fn margin_resize(target_size: usize) -> usize {
    (target_size * 10).div_ceil(9)
}

/// `1×3×H×W` tensor with `value = sample / 255`, channels in R, G, B order.
pub fn to_tensor(img: &Image) -> Tensor4<f32> {
    let (w, h) = (img.width(), img.height());
    let mut t = Tensor4::zeros(Shape4::new(1, 3, h, w));
    let plane = w * h;
    let out = t.data_mut();
    for (i, px) in img.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    t
}

/// `out[b,c] = (in[b,c] − mean[c]) / std[c]`
pub fn standardize(t: &Tensor4<f32>, stats: &ChannelStats) -> Result<Tensor4<f32>> {
    let s = t.shape();
    if s.c != 3 {
        return Err(Error::Dimension {
            op: "standardize",
            axis: "C",
            expected: 3,
            actual: s.c,
        });
    }
    let mut out = t.clone();
    for (i, chunk) in out.data_mut().chunks_mut(s.plane()).enumerate() {
        let c = i % 3;
        chunk.iter_mut().for_each(|v| *v = (*v - stats.mean[c]) / stats.std[c]);
    }
    Ok(out)
}

/// Resize, crop and scale to `[0, 1]` (everything except standardization).
pub fn normalize_image(img: &Image, target_size: usize, resize_size: usize) -> Result<Tensor4<f32>> {
    let resized = resize_bilinear(img, resize_size, resize_size)?;
    Ok(to_tensor(&center_crop(&resized, target_size)?))
}

/// The full four-stage pipeline; output is always `1×3×S×S`.
pub fn preprocess_pipeline(img: &Image, spec: &PreprocessSpec) -> Result<Tensor4<f32>> {
    let t = normalize_image(img, spec.target_size, spec.resize_size)?;
    standardize(&t, &spec.stats)
}

#[derive(Debug, Clone, Copy)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn of(values: &[f32]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let m2 = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum();
        Moments { n, mean, m2 }
    }

    /// Chan et al. pairwise combination.
    fn merge(a: Moments, b: Moments) -> Moments {
        let n = a.n + b.n;
        let delta = b.mean - a.mean;
        Moments {
            n,
            mean: a.mean + delta * b.n / n,
            m2: a.m2 + b.m2 + delta * delta * a.n * b.n / n,
        }
    }
}

fn tree_merge(parts: &[Moments]) -> Moments {
    match parts.len() {
        1 => parts[0],
        n => {
            let (l, r) = parts.split_at(n / 2);
            Moments::merge(tree_merge(l), tree_merge(r))
        }
    }
}

/// Per-channel mean and population std over every pixel of every tensor.
/// Tensors are expected to be scaled to `[0, 1]` but not yet standardized.
pub fn compute_dataset_stats(tensors: &[Tensor4<f32>]) -> Result<ChannelStats> {
    if tensors.is_empty() {
        return Err(Error::Data("cannot compute statistics of an empty dataset".into()));
    }
    let mut per_channel: [Vec<Moments>; 3] = Default::default();
    for t in tensors {
        let s = t.shape();
        if s.c != 3 {
            return Err(Error::Dimension {
                op: "compute_dataset_stats",
                axis: "C",
                expected: 3,
                actual: s.c,
            });
        }
        for (i, plane) in t.data().chunks(s.plane()).enumerate() {
            per_channel[i % 3].push(Moments::of(plane));
        }
    }
    let mut mean = [0f32; 3];
    let mut std = [0f32; 3];
    for c in 0..3 {
        let m = tree_merge(&per_channel[c]);
        mean[c] = m.mean as f32;
        std[c] = (m.m2 / m.n).sqrt() as f32;
    }
    ChannelStats::new(mean, std)
}

fn square_side(t: &Tensor4<f32>) -> Result<usize> {
    let s = t.shape();
    if s.h != s.w {
        return Err(Error::invalid("augment_geometric", format!("{s} is not square")));
    }
    Ok(s.h)
}

fn remap(t: &Tensor4<f32>, f: impl Fn(usize, usize, usize) -> (usize, usize)) -> Tensor4<f32> {
    let s = t.shape();
    let n = s.h;
    let mut out = Tensor4::zeros(s);
    for b in 0..s.b {
        for c in 0..s.c {
            for y in 0..n {
                for x in 0..n {
                    let (sy, sx) = f(n, y, x);
                    out.set(b, c, y, x, t.get(b, c, sy, sx));
                }
            }
        }
    }
    out
}

/// Counter-clockwise quarter turn of each square plane.
pub fn rot90(t: &Tensor4<f32>) -> Result<Tensor4<f32>> {
    square_side(t)?;
    Ok(remap(t, |n, y, x| (x, n - 1 - y)))
}

pub fn hflip(t: &Tensor4<f32>) -> Result<Tensor4<f32>> {
    square_side(t)?;
    Ok(remap(t, |n, y, x| (y, n - 1 - x)))
}

pub fn vflip(t: &Tensor4<f32>) -> Result<Tensor4<f32>> {
    square_side(t)?;
    Ok(remap(t, |n, y, x| (n - 1 - y, x)))
}

/// `[original, rot90, hflip, vflip]`.
pub fn augment_geometric(t: &Tensor4<f32>) -> Result<[Tensor4<f32>; 4]> {
    Ok([t.clone(), rot90(t)?, hflip(t)?, vflip(t)?])
}
