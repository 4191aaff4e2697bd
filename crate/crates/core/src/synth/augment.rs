//! Photometric (Aug1) and spatial (Aug2) augmentations.

use rand::seq::index::sample;
use rand::Rng;

use crate::imaging::{image_size, quantize, Image, Mask};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Aug1Op {
    Equalize,
    Solarize { threshold: f32 },
    Posterize { bits: u8 },
    Sharpness { factor: f32 },
    AutoContrast,
    Invert,
    GammaContrast { gamma: f32 },
}

pub const AUG1_KINDS: usize = 7;

impl Aug1Op {
    /// Operation `kind` (0..7) with randomly drawn parameters.
    pub fn sample(kind: usize, rng: &mut impl Rng) -> Self {
        match kind {
            0 => Self::Equalize,
            1 => Self::Solarize { threshold: rng.random_range(64.0..=192.0) / 255.0 },
            2 => Self::Posterize { bits: rng.random_range(3..=6) },
            3 => Self::Sharpness { factor: rng.random_range(1.0..=3.0) },
            4 => Self::AutoContrast,
            5 => Self::Invert,
            6 => Self::GammaContrast { gamma: rng.random_range(0.7..=1.5) },
            _ => panic!("unknown Aug1 operation {kind}"),
        }
    }

    pub fn apply(&self, img: &Image) -> Image {
        match *self {
            Self::Equalize => per_channel(img, equalize_channel),
            Self::Solarize { threshold } => img.map(|v| if v >= threshold { 1.0 - v } else { v }),
            Self::Posterize { bits } => {
                let mask = 0xffu8 << (8 - bits);
                img.map(|v| (quantize(v) & mask) as f32 / 255.0)
            }
            Self::Sharpness { factor } => sharpen(img, factor),
            Self::AutoContrast => per_channel(img, |c| {
                let lo = c.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = c.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                if hi > lo {
                    c.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
                }
            }),
            Self::Invert => img.map(|v| 1.0 - v),
            Self::GammaContrast { gamma } => img.map(|v| v.clamp(0.0, 1.0).powf(gamma)),
        }
    }
}

fn per_channel(img: &Image, f: impl Fn(&mut [f32])) -> Image {
    let (h, w) = image_size(img);
    let mut out = img.clone();
    for c in out.data_mut().chunks_exact_mut(h * w) {
        f(c);
    }
    out
}

/// Histogram equalization over 8-bit levels.
fn equalize_channel(c: &mut [f32]) {
    let mut hist = [0usize; 256];
    for &v in c.iter() {
        hist[quantize(v) as usize] += 1;
    }
    let mut cdf = [0usize; 256];
    let mut acc = 0;
    for (i, &n) in hist.iter().enumerate() {
        acc += n;
        cdf[i] = acc;
    }
    let cdf_min = cdf.iter().copied().find(|&v| v > 0).unwrap_or(0);
    let denom = c.len() - cdf_min;
    if denom == 0 {
        return;
    }
    for v in c.iter_mut() {
        let level = cdf[quantize(*v) as usize] - cdf_min;
        *v = (level as f32 / denom as f32).clamp(0.0, 1.0);
    }
}

/// Blends with a 3x3 smoothed copy: `smooth + factor * (img - smooth)`.
/// Border pixels are kept.
fn sharpen(img: &Image, factor: f32) -> Image {
    let (h, w) = image_size(img);
    let src = img.data();
    let mut out = img.clone();
    let dst = out.data_mut();
    for c in 0..3 {
        let base = c * h * w;
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let mut acc = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let weight = if dy == 1 && dx == 1 { 5.0 } else { 1.0 };
                        acc += weight * src[base + (y + dy - 1) * w + x + dx - 1];
                    }
                }
                let smooth = acc / 13.0;
                let v = src[base + y * w + x];
                dst[base + y * w + x] = (smooth + factor * (v - smooth)).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Two distinct random operations applied in sequence.
pub fn aug1(img: &Image, rng: &mut impl Rng) -> (Image, [Aug1Op; 2]) {
    let kinds = sample(rng, AUG1_KINDS, 2);
    let ops = [Aug1Op::sample(kinds.index(0), rng), Aug1Op::sample(kinds.index(1), rng)];
    let out = ops[1].apply(&ops[0].apply(img));
    (out, ops)
}

/// Rotation (degrees), shear and shift (fractions of the frame) about the centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aug2Params {
    pub rotate_deg: f64,
    pub shear: f64,
    pub shift: (f64, f64),
}

impl Aug2Params {
    pub fn identity() -> Self {
        Self { rotate_deg: 0.0, shear: 0.0, shift: (0.0, 0.0) }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            rotate_deg: rng.random_range(-45.0..=45.0),
            shear: rng.random_range(-0.2..=0.2),
            shift: (rng.random_range(-0.25..=0.25), rng.random_range(-0.25..=0.25)),
        }
    }
}

/// Warps an image and its mask with nearest-neighbour sampling, so every
/// output pixel is an exact copy of an input pixel or zero.
pub fn aug2(img: &Image, mask: &Mask, p: Aug2Params) -> (Image, Mask) {
    let (h, w) = image_size(img);
    let (s, c) = p.rotate_deg.to_radians().sin_cos();
    // forward: x' = R * Sh * (x - ctr) + ctr + t ; Sh = [[1, k], [0, 1]] in (x, y).
    let k = p.shear;
    let (a, b, cc, d) = (c, c * k - s, s, s * k + c);
    let det = a * d - b * cc;
    let (ia, ib, ic, id) = (d / det, -b / det, -cc / det, a / det);
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let (ty, tx) = (p.shift.0 * h as f64, p.shift.1 * w as f64);
    let src = img.data();
    let mut out = Image::zeros(&[3, h, w]);
    let mut out_mask = Mask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx - tx, y as f64 + 0.5 - cy - ty);
            let sx = ia * dx + ib * dy + cx;
            let sy = ic * dx + id * dy + cy;
            let (fx, fy) = (sx.floor(), sy.floor());
            if fx < 0.0 || fy < 0.0 || fx >= w as f64 || fy >= h as f64 {
                continue;
            }
            let (ux, uy) = (fx as usize, fy as usize);
            for ch in 0..3 {
                out.data_mut()[(ch * h + y) * w + x] = src[(ch * h + uy) * w + ux];
            }
            out_mask.set(y, x, mask.get(uy, ux));
        }
    }
    (out, out_mask)
}
