use crate::error::{Error, Result};

/// 8-bit interleaved RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("Image", "dimensions must be >= 1"));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Dimension {
                op: "Image",
                axis: "data",
                expected: width * height * 3,
                actual: data.len(),
            });
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = std::iter::repeat_n(rgb, width * height).flatten().collect();
        Image { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Source coordinate for output index `i` under half-pixel-center mapping,
/// clamped to the valid range; returns the two taps and the blend weight.
fn taps(i: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let src = ((i as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

/// Bilinear resize with half-pixel centers. Results are rounded half away
/// from zero and clamped to `[0, 255]`.
pub fn resize_bilinear(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::invalid("resize_bilinear", "output dimensions must be >= 1"));
    }
    let xs: Vec<_> = (0..out_w).map(|x| taps(x, img.width, out_w)).collect();
    let mut data = Vec::with_capacity(out_w * out_h * 3);
    for y in 0..out_h {
        let (y0, y1, fy) = taps(y, img.height, out_h);
        for &(x0, x1, fx) in &xs {
            let (p00, p01) = (img.pixel(x0, y0), img.pixel(x1, y0));
            let (p10, p11) = (img.pixel(x0, y1), img.pixel(x1, y1));
            for c in 0..3 {
                let top = (1.0 - fx) * p00[c] as f64 + fx * p01[c] as f64;
                let bottom = (1.0 - fx) * p10[c] as f64 + fx * p11[c] as f64;
                let v = (1.0 - fy) * top + fy * bottom;
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Image::new(out_w, out_h, data)
}

/// Central `size × size` window; top-left offset is `((H−S)/2, (W−S)/2)` rounded down.
pub fn center_crop(img: &Image, size: usize) -> Result<Image> {
    if size == 0 || size > img.width || size > img.height {
        return Err(Error::invalid(
            "center_crop",
            format!("crop {size} does not fit a {}x{} image", img.width, img.height),
        ));
    }
    let top = (img.height - size) / 2;
    let left = (img.width - size) / 2;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in top..top + size {
        let row = (y * img.width + left) * 3;
        data.extend_from_slice(&img.data[row..row + size * 3]);
    }
    Image::new(size, size, data)
}
