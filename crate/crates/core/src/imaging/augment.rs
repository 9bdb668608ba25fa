use serde::{Deserialize, Serialize};

use super::{Image, Rng, CHANNELS};
use crate::error::{Error, Result};

/// Integer crop window in source-pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    /// Range of the crop area as a fraction of the image area.
    pub scale: (f64, f64),
    /// Range of the crop aspect ratio (width / height).
    pub ratio: (f64, f64),
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            scale: (0.6, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
        }
    }
}

impl CropConfig {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::contract(format!("crop scale {:?} must satisfy 0 < lo <= hi <= 1", self.scale)));
        }
        let (rlo, rhi) = self.ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::contract(format!("crop ratio {:?} must satisfy 0 < lo <= hi", self.ratio)));
        }
        Ok(())
    }

    /// Samples a crop window; after 10 rejected draws falls back to the
    /// largest centered window whose aspect ratio lies in range.
    pub fn sample(&self, height: usize, width: usize, rng: &mut Rng) -> Result<CropBox> {
        self.validate()?;
        let area = (height * width) as f64;
        for _ in 0..10 {
            let target = area * rng.range(self.scale.0, self.scale.1);
            let ratio = rng.range(self.ratio.0, self.ratio.1);
            let w = (target * ratio).sqrt().round() as usize;
            let h = (target / ratio).sqrt().round() as usize;
            if w > 0 && h > 0 && w <= width && h <= height {
                let top = rng.index(height - h + 1);
                let left = rng.index(width - w + 1);
                return Ok(CropBox {
                    top,
                    left,
                    height: h,
                    width: w,
                });
            }
        }
        let in_ratio = width as f64 / height as f64;
        let (h, w) = if in_ratio < self.ratio.0 {
            (((width as f64 / self.ratio.0).round() as usize).clamp(1, height), width)
        } else if in_ratio > self.ratio.1 {
            (height, ((height as f64 * self.ratio.1).round() as usize).clamp(1, width))
        } else {
            (height, width)
        };
        Ok(CropBox {
            top: (height - h) / 2,
            left: (width - w) / 2,
            height: h,
            width: w,
        })
    }
}

/// Bilinear resampling of the `bx` window to `out_h × out_w`, with
/// half-pixel centers and edge clamping.
pub fn resized_crop(img: &Image, bx: CropBox, out_h: usize, out_w: usize) -> Result<Image> {
    if bx.height == 0 || bx.width == 0 || bx.top + bx.height > img.height || bx.left + bx.width > img.width {
        return Err(Error::contract(format!(
            "crop {bx:?} outside {}x{} image",
            img.height, img.width
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::contract("output size must be positive"));
    }
    let sy = bx.height as f64 / out_h as f64;
    let sx = bx.width as f64 / out_w as f64;
    // (index0, index1, weight of index1) per output coordinate
    let axis = |n_out: usize, scale: f64, len: usize, offset: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (offset + i0, offset + i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = axis(out_h, sy, bx.height, bx.top);
    let xs = axis(out_w, sx, bx.width, bx.left);
    let src = img.pixels();
    let at = |y: usize, x: usize, c: usize| src[(y * img.width + x) * CHANNELS + c];
    let mut pixels = Vec::with_capacity(out_h * out_w * CHANNELS);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..CHANNELS {
                let top = at(y0, x0, c) * (1.0 - fx) + at(y0, x1, c) * fx;
                let bottom = at(y1, x0, c) * (1.0 - fx) + at(y1, x1, c) * fx;
                pixels.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(out_h, out_w, pixels)
}

pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    let full = CropBox {
        top: 0,
        left: 0,
        height: img.height,
        width: img.width,
    };
    resized_crop(img, full, out_h, out_w)
}

pub fn random_resized_crop(
    img: &Image,
    crop: &CropConfig,
    out_h: usize,
    out_w: usize,
    rng: &mut Rng,
) -> Result<Image> {
    let bx = crop.sample(img.height, img.width, rng)?;
    resized_crop(img, bx, out_h, out_w)
}

/// Mirrors the image with probability `p`.
pub fn horizontal_flip(img: &Image, p: f64, rng: &mut Rng) -> Result<Image> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::contract(format!("flip probability {p} outside [0, 1]")));
    }
    Ok(if rng.uniform() < p {
        img.mirrored()
    } else {
        img.clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
}

/// Concrete jitter factors and application order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub order: [JitterOp; 3],
}

impl JitterFactors {
    pub fn identity() -> Self {
        Self {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            order: [JitterOp::Brightness, JitterOp::Contrast, JitterOp::Saturation],
        }
    }

    pub fn sample(strengths: (f64, f64, f64), rng: &mut Rng) -> Result<Self> {
        let (b, c, s) = strengths;
        if b < 0.0 || c < 0.0 || s < 0.0 {
            return Err(Error::contract(format!("jitter strengths {strengths:?} must be >= 0")));
        }
        let mut order = [JitterOp::Brightness, JitterOp::Contrast, JitterOp::Saturation];
        rng.shuffle(&mut order);
        Ok(Self {
            brightness: rng.range((1.0 - b).max(0.0), 1.0 + b),
            contrast: rng.range((1.0 - c).max(0.0), 1.0 + c),
            saturation: rng.range((1.0 - s).max(0.0), 1.0 + s),
            order,
        })
    }

    pub fn apply(&self, img: &Image) -> Image {
        let mut px = img.pixels().to_vec();
        for op in self.order {
            match op {
                JitterOp::Brightness => {
                    let f = self.brightness;
                    px.iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
                }
                JitterOp::Contrast => {
                    let f = self.contrast;
                    let n = (px.len() / CHANNELS) as f64;
                    let mean = px.chunks_exact(CHANNELS).map(luma).sum::<f64>() / n;
                    px.iter_mut()
                        .for_each(|v| *v = (f * *v + (1.0 - f) * mean).clamp(0.0, 1.0));
                }
                JitterOp::Saturation => {
                    let f = self.saturation;
                    for p in px.chunks_exact_mut(CHANNELS) {
                        let g = luma(p);
                        p.iter_mut()
                            .for_each(|v| *v = (f * *v + (1.0 - f) * g).clamp(0.0, 1.0));
                    }
                }
            }
        }
        Image::from_fn(img.height, img.width, |y, x| {
            let i = (y * img.width + x) * CHANNELS;
            [px[i], px[i + 1], px[i + 2]]
        })
    }
}

fn luma(p: &[f64]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

pub fn color_jitter(
    img: &Image,
    brightness: f64,
    contrast: f64,
    saturation: f64,
    rng: &mut Rng,
) -> Result<Image> {
    Ok(JitterFactors::sample((brightness, contrast, saturation), rng)?.apply(img))
}

/// Random resized crop → horizontal flip → color jitter, output at the
/// input size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugConfig {
    pub crop: CropConfig,
    pub flip_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            crop: CropConfig::default(),
            flip_p: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
        }
    }
}

impl AugConfig {
    /// A pipeline that returns its input unchanged.
    pub fn identity() -> Self {
        Self {
            crop: CropConfig {
                scale: (1.0, 1.0),
                ratio: (1.0, 1.0),
            },
            flip_p: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
        }
    }

    pub fn apply(&self, img: &Image, rng: &mut Rng) -> Result<Image> {
        let cropped = random_resized_crop(img, &self.crop, img.height, img.width, rng)?;
        let flipped = horizontal_flip(&cropped, self.flip_p, rng)?;
        color_jitter(&flipped, self.brightness, self.contrast, self.saturation, rng)
    }
}
