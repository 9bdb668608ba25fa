//! RGB images in `[0, 1]` and the deterministic operations applied to them:
//! rotations, 3×3 tiling, augmentations and PPM I/O.

mod augment;
mod ppm;

pub use augment::{
    color_jitter, horizontal_flip, random_resized_crop, resize_bilinear, resized_crop, AugConfig,
    CropBox, CropConfig, JitterFactors, JitterOp,
};
pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};

pub use crate::rng::Rng;
use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Row-major, channel-interleaved RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::contract("image dimensions must be positive"));
        }
        if pixels.len() != height * width * CHANNELS {
            return Err(Error::Shape {
                op: "image",
                left: vec![height, width, CHANNELS],
                right: vec![pixels.len()],
            });
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * CHANNELS])
    }

    /// Builds an image from a per-pixel function; values are clamped.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                pixels.extend(f(y, x).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn bit_eq(&self, other: &Image) -> bool {
        self.height == other.height
            && self.width == other.width
            && self
                .pixels
                .iter()
                .zip(&other.pixels)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn remap(&self, height: usize, width: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Image {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for y in 0..height {
            for x in 0..width {
                let (sy, sx) = src(y, x);
                let i = (sy * self.width + sx) * CHANNELS;
                pixels.extend_from_slice(&self.pixels[i..i + CHANNELS]);
            }
        }
        Image {
            height,
            width,
            pixels,
        }
    }

    /// Mirrors columns.
    pub fn mirrored(&self) -> Image {
        let w = self.width;
        self.remap(self.height, w, |y, x| (y, w - 1 - x))
    }
}

/// Counter-clockwise rotation by a multiple of 90°.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn from_index(i: usize) -> Option<Rotation> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn degrees(self) -> u32 {
        90 * self as u32
    }

    pub fn from_degrees(deg: u32) -> Option<Rotation> {
        if deg.is_multiple_of(90) {
            Self::from_index((deg / 90) as usize)
        } else {
            None
        }
    }

    pub fn inverse(self) -> Rotation {
        Self::ALL[(4 - self.index()) % 4]
    }
}

pub fn rotate(img: &Image, rot: Rotation) -> Result<Image> {
    let (h, w) = (img.height, img.width);
    if matches!(rot, Rotation::R90 | Rotation::R270) && h != w {
        return Err(Error::Shape {
            op: "rotate",
            left: vec![h, w],
            right: vec![w, h],
        });
    }
    Ok(match rot {
        Rotation::R0 => img.clone(),
        Rotation::R90 => img.remap(w, h, |y, x| (x, w - 1 - y)),
        Rotation::R180 => img.remap(h, w, |y, x| (h - 1 - y, w - 1 - x)),
        Rotation::R270 => img.remap(w, h, |y, x| (h - 1 - x, y)),
    })
}

/// Splits an image into a 3×3 grid of tiles, row-major.
pub fn tile3x3(img: &Image) -> Result<Vec<Image>> {
    let (h, w) = (img.height, img.width);
    if h % 3 != 0 || w % 3 != 0 {
        return Err(Error::Shape {
            op: "tile3x3",
            left: vec![h, w],
            right: vec![3, 3],
        });
    }
    let (th, tw) = (h / 3, w / 3);
    Ok((0..9)
        .map(|t| {
            let (oy, ox) = ((t / 3) * th, (t % 3) * tw);
            img.remap(th, tw, |y, x| (oy + y, ox + x))
        })
        .collect())
}

fn check_permutation(order: &[usize]) -> Result<()> {
    let mut seen = [false; 9];
    if order.len() != 9 {
        return Err(Error::contract(format!("order has {} entries, expected 9", order.len())));
    }
    for &o in order {
        if o >= 9 || seen[o] {
            return Err(Error::contract(format!("order {order:?} is not a permutation of 0..8")));
        }
        seen[o] = true;
    }
    Ok(())
}

/// Places `tiles[order[p]]` at grid position `p`.
pub fn assemble3x3(tiles: &[Image], order: &[usize]) -> Result<Image> {
    if tiles.len() != 9 {
        return Err(Error::contract(format!("expected 9 tiles, got {}", tiles.len())));
    }
    check_permutation(order)?;
    let (th, tw) = (tiles[0].height, tiles[0].width);
    if let Some(bad) = tiles.iter().find(|t| t.height != th || t.width != tw) {
        return Err(Error::Shape {
            op: "assemble3x3",
            left: vec![th, tw],
            right: vec![bad.height, bad.width],
        });
    }
    let (h, w) = (th * 3, tw * 3);
    let mut pixels = vec![0.0; h * w * CHANNELS];
    for (p, &src) in order.iter().enumerate() {
        let (oy, ox) = ((p / 3) * th, (p % 3) * tw);
        let tile = &tiles[src];
        for y in 0..th {
            let dst = ((oy + y) * w + ox) * CHANNELS;
            let from = y * tw * CHANNELS;
            pixels[dst..dst + tw * CHANNELS].copy_from_slice(&tile.pixels[from..from + tw * CHANNELS]);
        }
    }
    Ok(Image {
        height: h,
        width: w,
        pixels,
    })
}

/// Inverse of a permutation of `0..n`.
pub fn invert_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (p, &o) in order.iter().enumerate() {
        inv[o] = p;
    }
    inv
}
