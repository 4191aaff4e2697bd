//! Multi-octave gradient (Perlin) noise and thresholded noise masks.

use std::f64::consts::TAU;

use rand::Rng;

use crate::config::SynthConfig;
use crate::error::{PrnError, Result};
use crate::imaging::Mask;

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// One octave on a lattice with cells of `cell` pixels, sampled at pixel centres.
fn octave(h: usize, w: usize, cell: f64, rng: &mut impl Rng, out: &mut [f64], amplitude: f64) {
    let gy = (h as f64 / cell).ceil() as usize + 1;
    let gx = (w as f64 / cell).ceil() as usize + 1;
    let grads: Vec<(f64, f64)> = (0..gy * gx)
        .map(|_| {
            let a: f64 = rng.random_range(0.0..TAU);
            (a.sin(), a.cos())
        })
        .collect();
    for y in 0..h {
        let fy = (y as f64 + 0.5) / cell;
        let (iy, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = (x as f64 + 0.5) / cell;
            let (ix, tx) = (fx.floor() as usize, fx.fract());
            let dot = |cy: usize, cx: usize| {
                let (gy_, gx_) = grads[(iy + cy) * gx + ix + cx];
                gy_ * (ty - cy as f64) + gx_ * (tx - cx as f64)
            };
            let (u, v) = (fade(tx), fade(ty));
            let top = dot(0, 0) + u * (dot(0, 1) - dot(0, 0));
            let bottom = dot(1, 0) + u * (dot(1, 1) - dot(1, 0));
            out[y * w + x] += amplitude * (top + v * (bottom - top));
        }
    }
}

/// Sum of `octaves` noise layers; octave `o` has cells of `period / 2^o`
/// pixels and amplitude `persistence^o`.
pub fn perlin_noise(h: usize, w: usize, period: usize, octaves: usize, persistence: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let mut amplitude = 1.0;
    for o in 0..octaves {
        octave(h, w, period as f64 / (1u64 << o) as f64, rng, &mut out, amplitude);
        amplitude *= persistence;
    }
    out
}

/// Noise rescaled to `[0, 1]` and thresholded (strictly above `threshold`).
pub fn noise_mask(h: usize, w: usize, cfg: &SynthConfig, rng: &mut impl Rng) -> Mask {
    let noise = perlin_noise(h, w, cfg.perlin_period, cfg.perlin_octaves, cfg.perlin_persistence, rng);
    let lo = noise.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = noise.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    Mask::from_fn(h, w, |y, x| (noise[y * w + x] - lo) / span > cfg.perlin_threshold)
}

/// Thresholded noise restricted to `target`, resampled until nonempty.
pub fn perlin_mask(target: &Mask, cfg: &SynthConfig, rng: &mut impl Rng) -> Result<Mask> {
    let (h, w) = (target.height(), target.width());
    if cfg.perlin_period == 0 || h % cfg.perlin_period != 0 || w % cfg.perlin_period != 0 {
        return Err(PrnError::Generation(format!(
            "image {h}x{w} is not a multiple of the noise period {}",
            cfg.perlin_period
        )));
    }
    for _ in 0..cfg.perlin_retries.max(1) {
        let m = noise_mask(h, w, cfg, rng).and(target);
        if !m.is_empty() {
            return Ok(m);
        }
    }
    Err(PrnError::Generation(format!("noise mask stayed empty after {} attempts", cfg.perlin_retries)))
}
