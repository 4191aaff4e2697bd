//! Texture sources for heterologous anomalies.

use std::f64::consts::TAU;
use std::path::Path;

use image::imageops::{self, FilterType};
use prn_tensor::Tensor;
use rand::Rng;

use crate::error::{PrnError, Result};
use crate::imaging::{rgb_to_image, Image};
use crate::rng::{self, Stream};
use crate::synth::perlin::perlin_noise;

/// Random gratings plus band-limited noise, mapped onto a random two-colour
/// palette.
pub fn procedural_texture(size: usize, rng: &mut impl Rng) -> Image {
    let n = rng.random_range(1..=3);
    let waves: Vec<(f64, f64, f64, f64)> = (0..n)
        .map(|_| {
            let angle: f64 = rng.random_range(0.0..TAU);
            let freq = rng.random_range(1.0..6.0) / size as f64;
            (angle.sin() * freq, angle.cos() * freq, rng.random_range(0.0..TAU), rng.random_range(0.3..1.0))
        })
        .collect();
    let period = [4, 8, 16].into_iter().filter(|p| size % p == 0).nth(rng.random_range(0..2)).unwrap_or(size);
    let noise = perlin_noise(size, size, period, 3, 0.5, rng);
    let weight: f64 = rng.random_range(0.2..0.8);
    let mut field = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let g: f64 = waves.iter().map(|&(fy, fx, ph, a)| a * (TAU * (fy * y as f64 + fx * x as f64) + ph).sin()).sum();
            field[y * size + x] = (1.0 - weight) * g / n as f64 + weight * noise[y * size + x];
        }
    }
    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let a: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    let b: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    Tensor::from_fn(&[3, size, size], |i| {
        let (c, p) = (i / (size * size), i % (size * size));
        let t = (field[p] - lo) / span;
        (a[c] + t * (b[c] - a[c])) as f32
    })
}

#[derive(Clone, Debug, Default)]
pub struct TexturePool {
    images: Vec<Image>,
}

impl TexturePool {
    pub fn new(images: Vec<Image>) -> Self {
        Self { images }
    }

    pub fn procedural(count: usize, size: usize, seed: u64) -> Self {
        let images =
            (0..count).map(|i| procedural_texture(size, &mut rng::substream(seed, Stream::Textures, i as u64))).collect();
        Self { images }
    }

    /// Every decodable image in `dir` (sorted by name), centre-cropped to a
    /// square and resized to `size`.
    pub fn from_dir(dir: &Path, size: usize) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| PrnError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        let mut images = Vec::new();
        for path in paths {
            let Ok(img) = image::open(&path) else {
                log::warn!("skipping undecodable texture {}", path.display());
                continue;
            };
            let rgb = img.to_rgb8();
            let side = rgb.width().min(rgb.height());
            let crop = imageops::crop_imm(&rgb, (rgb.width() - side) / 2, (rgb.height() - side) / 2, side, side).to_image();
            let resized = imageops::resize(&crop, size as u32, size as u32, FilterType::Triangle);
            images.push(rgb_to_image(&resized));
        }
        Ok(Self { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, index: usize) -> &Image {
        &self.images[index]
    }

    pub fn choose(&self, rng: &mut impl Rng) -> Option<&Image> {
        (!self.images.is_empty()).then(|| &self.images[rng.random_range(0..self.images.len())])
    }
}
