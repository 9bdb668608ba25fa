//! Procedural class prototypes and domain styles.

use std::f64::consts::PI;

use crate::imaging::Image;
use crate::rng::Rng;

/// Number of distinct rendering styles; domain `d` uses style `d % STYLES`.
pub const STYLES: usize = 4;

/// Human-readable style names, indexed by `domain_id % STYLES`.
pub const STYLE_NAMES: [&str; STYLES] = ["photo", "sketch", "inverted", "noisy"];

#[derive(Clone, Copy, Debug)]
enum Pattern {
    Blobs { centers: [(f64, f64); 3], radius: f64 },
    Stripes { freq: f64, angle: f64, phase: f64 },
    Checker { fu: f64, fv: f64, angle: f64 },
    Rings { freq: f64, center: (f64, f64) },
}

/// Shape and palette shared by every sample of one class.
#[derive(Clone, Copy, Debug)]
pub struct Prototype {
    pattern: Pattern,
    fg: [f64; 3],
    bg: [f64; 3],
}

fn color(rng: &mut Rng) -> [f64; 3] {
    [rng.uniform(), rng.uniform(), rng.uniform()]
}

impl Prototype {
    pub fn new(class_id: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed).fork(1_000_000 + class_id as u64);
        let pattern = match class_id % 4 {
            0 => {
                let mut centers = [(0.0, 0.0); 3];
                for c in &mut centers {
                    *c = (rng.range(-0.6, 0.6), rng.range(-0.6, 0.6));
                }
                Pattern::Blobs {
                    centers,
                    radius: rng.range(0.2, 0.4),
                }
            }
            1 => Pattern::Stripes {
                freq: rng.range(2.0, 5.0),
                angle: rng.range(0.0, PI),
                phase: rng.range(0.0, 2.0 * PI),
            },
            2 => Pattern::Checker {
                fu: rng.range(1.5, 3.5),
                fv: rng.range(1.5, 3.5),
                angle: rng.range(0.0, PI / 2.0),
            },
            _ => Pattern::Rings {
                freq: rng.range(2.0, 5.0),
                center: (rng.range(-0.3, 0.3), rng.range(-0.3, 0.3)),
            },
        };
        // dark shape on a light ground, so luminance carries the shape in every style
        let fg = color(&mut rng).map(|c| 0.5 * c);
        let bg = color(&mut rng).map(|c| 0.55 + 0.45 * c);
        Self { pattern, fg, bg }
    }

    /// Foreground weight in `[0, 1]` at normalized coordinates `(u, v)`.
    fn mask(&self, u: f64, v: f64) -> f64 {
        match self.pattern {
            Pattern::Blobs { centers, radius } => {
                let s: f64 = centers
                    .iter()
                    .map(|&(cu, cv)| (-((u - cu).powi(2) + (v - cv).powi(2)) / (2.0 * radius * radius)).exp())
                    .sum();
                s.min(1.0)
            }
            Pattern::Stripes { freq, angle, phase } => {
                let t = u * angle.cos() + v * angle.sin();
                0.5 + 0.5 * (PI * freq * t + phase).sin()
            }
            Pattern::Checker { fu, fv, angle } => {
                let (a, b) = (u * angle.cos() - v * angle.sin(), u * angle.sin() + v * angle.cos());
                let s = (PI * fu * a).sin() * (PI * fv * b).sin();
                0.5 + 0.5 * (4.0 * s).tanh()
            }
            Pattern::Rings { freq, center } => {
                let r = ((u - center.0).powi(2) + (v - center.1).powi(2)).sqrt();
                0.5 + 0.5 * (PI * freq * r).cos()
            }
        }
    }
}

/// Per-sample pose: shift, isotropic scale and rotation of the pattern.
#[derive(Clone, Copy, Debug)]
struct Pose {
    du: f64,
    dv: f64,
    scale: f64,
    angle: f64,
}

impl Pose {
    fn sample(rng: &mut Rng) -> Self {
        Self {
            du: rng.range(-0.1, 0.1),
            dv: rng.range(-0.1, 0.1),
            scale: rng.range(0.85, 1.15),
            angle: rng.range(-0.3, 0.3),
        }
    }

    fn map(&self, u: f64, v: f64) -> (f64, f64) {
        let (u, v) = (u - self.du, v - self.dv);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        ((c * u + s * v) / self.scale, (-s * u + c * v) / self.scale)
    }
}

fn mask_grid(proto: &Prototype, pose: &Pose, size: usize) -> Vec<f64> {
    let mut m = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let v = (y as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let (pu, pv) = pose.map(u, v);
            m.push(proto.mask(pu, pv));
        }
    }
    m
}

fn blend(bg: [f64; 3], fg: [f64; 3], t: f64) -> [f64; 3] {
    std::array::from_fn(|c| bg[c] * (1.0 - t) + fg[c] * t)
}

/// Colour of the ground band shared by every class.
const GROUND: [f64; 3] = [0.42, 0.36, 0.3];

/// Renders one sample of `proto` in the style of `domain_id`.
///
/// Every scene has a canonical up direction: light falls from the top and a
/// ground band of random height fills the bottom rows.
pub fn render(proto: &Prototype, domain_id: usize, size: usize, rng: &mut Rng) -> Image {
    let pose = Pose::sample(rng);
    let m = mask_grid(proto, &pose, size);
    let horizon = ((rng.range(0.6, 0.7) * size as f64) as usize).min(size - 1);
    let at = |y: usize, x: usize| m[y * size + x];
    let clean = |y: usize, x: usize| {
        let v = (y as f64 + 0.5) / size as f64 * 2.0 - 1.0;
        let shade = 0.9 - 0.12 * v;
        let base = if y >= horizon { GROUND } else { blend(proto.bg, proto.fg, at(y, x)) };
        base.map(|c| c * shade)
    };
    match domain_id % STYLES {
        0 => Image::from_fn(size, size, |y, x| clean(y, x).map(|c| c + 0.03 * (rng.uniform() - 0.5))),
        1 => {
            let ink = proto.fg.map(|c| 0.6 * c);
            // 0 background, 1 shape, 2 ground
            let region = |y: usize, x: usize| {
                if y >= horizon {
                    2
                } else {
                    u8::from(at(y, x) > 0.5)
                }
            };
            Image::from_fn(size, size, |y, x| {
                let here = region(y, x);
                let contour = (y > 0 && region(y - 1, x) != here)
                    || (x > 0 && region(y, x - 1) != here)
                    || (y + 1 < size && region(y + 1, x) != here)
                    || (x + 1 < size && region(y, x + 1) != here);
                if contour {
                    ink
                } else if (here == 1 && (x + y) % 2 == 0) || (here == 2 && (x + 2 * y) % 5 == 0) {
                    blend([1.0; 3], ink, 0.6)
                } else {
                    [1.0; 3]
                }
            })
        }
        2 => Image::from_fn(size, size, |y, x| {
            let [r, g, b] = clean(y, x).map(|c| 1.0 - c);
            [g, b, r]
        }),
        _ => {
            // coarse blotches on a 6×6 grid plus per-pixel speckle, over a washed-out palette
            let blotch: Vec<f64> = (0..36).map(|_| rng.range(-0.25, 0.25)).collect();
            Image::from_fn(size, size, |y, x| {
                let c = clean(y, x);
                let luma = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
                let speckle = 1.0 + 0.6 * (2.0 * rng.uniform() - 1.0);
                let b = blotch[(y * 6 / size) * 6 + x * 6 / size];
                c.map(|v| (0.25 * v + 0.75 * luma) * speckle + b + 0.2)
            })
        }
    }
}
