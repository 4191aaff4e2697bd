//! Synthetic anomaly generation.
//!
//! Extended anomalies (EA) paste an augmented, warped copy of a seen defect
//! into a normal image. Simulated anomalies blend a source image into a
//! normal image under a Perlin-noise mask: an external texture for
//! heterologous anomalies (HEA), a grid-shuffled copy of the normal image
//! itself for homologous ones (HOA). Both kinds are restricted to a sampled
//! target area and blended with opacity `beta`.

pub mod augment;
pub mod perlin;
pub mod target;
pub mod texture;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::SynthConfig;
use crate::error::{PrnError, Result};
use crate::imaging::{image_size, Image, Mask};

pub use augment::{aug1, aug2, Aug1Op, Aug2Params};
pub use perlin::perlin_mask;
pub use target::{estimate_foreground, sample_target_area, ShapeKind, TargetArea};
pub use texture::TexturePool;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum SampleKind {
    Normal,
    Real,
    #[serde(rename = "EA")]
    Ea,
    #[serde(rename = "HEA")]
    Hea,
    #[serde(rename = "HOA")]
    Hoa,
}

impl SampleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Normal => "normal",
            Self::Real => "real",
            Self::Ea => "EA",
            Self::Hea => "HEA",
            Self::Hoa => "HOA",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalySample {
    pub image: Image,
    pub mask: Mask,
    pub kind: SampleKind,
    pub beta: Option<f32>,
    pub seed: u64,
}

fn check_pair(normal: &Image, other: &Image, mask: &Mask) -> Result<(usize, usize)> {
    let (h, w) = image_size(normal);
    if other.shape() != normal.shape() || mask.height() != h || mask.width() != w {
        return Err(PrnError::dim(format!(
            "compositing inputs disagree: normal {:?}, source {:?}, mask {}x{}",
            normal.shape(),
            other.shape(),
            mask.height(),
            mask.width()
        )));
    }
    Ok((h, w))
}

/// `E = (1 - M) * N + (1 - beta) * C + beta * (M * N)`.
pub fn compose_extended(normal: &Image, crop: &Image, mask: &Mask, beta: f32) -> Result<Image> {
    let (h, w) = check_pair(normal, crop, mask)?;
    let m = mask.to_f32();
    let (n, c) = (normal.data(), crop.data());
    Ok(Image::from_fn(&[3, h, w], |i| {
        let mi = m[i % (h * w)];
        (1.0 - mi) * n[i] + (1.0 - beta) * c[i] + beta * (mi * n[i])
    }))
}

/// `S = (1 - M) * N + (1 - beta) * (M * A) + beta * (M * N)`.
pub fn compose_simulated(normal: &Image, source: &Image, mask: &Mask, beta: f32) -> Result<Image> {
    let (h, w) = check_pair(normal, source, mask)?;
    let m = mask.to_f32();
    let (n, a) = (normal.data(), source.data());
    Ok(Image::from_fn(&[3, h, w], |i| {
        let mi = m[i % (h * w)];
        (1.0 - mi) * n[i] + (1.0 - beta) * (mi * a[i]) + beta * (mi * n[i])
    }))
}

pub fn sample_beta(cfg: &SynthConfig, rng: &mut impl Rng) -> f32 {
    let [lo, hi] = cfg.beta_range;
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn masked(img: &Image, mask: &Mask) -> Image {
    let (h, w) = image_size(img);
    let m = mask.to_f32();
    Image::from_fn(&[3, h, w], |i| img.data()[i] * m[i % (h * w)])
}

/// Extended anomaly from one seen defect.
///
/// The seen image goes through two random photometric operations, its
/// defect region (ground-truth mask) is warped by a random rotation, shear
/// and shift until it overlaps `target`, and the overlap is blended into
/// `normal`.
pub fn extended_anomaly(
    normal: &Image,
    seen_image: &Image,
    seen_mask: &Mask,
    target: &TargetArea,
    cfg: &SynthConfig,
    beta: f32,
    rng: &mut impl Rng,
) -> Result<AnomalySample> {
    check_pair(normal, seen_image, seen_mask)?;
    if seen_mask.is_empty() {
        return Err(PrnError::Generation("seen anomaly has an empty mask".into()));
    }
    let (augmented, _) = aug1(seen_image, rng);
    let region = masked(&augmented, seen_mask);
    for _ in 0..cfg.aug2_retries.max(1) {
        let (warped, warped_mask) = aug2(&region, seen_mask, Aug2Params::sample(rng));
        let mask = warped_mask.and(&target.mask);
        if mask.is_empty() {
            continue;
        }
        let crop = masked(&warped, &mask);
        let image = compose_extended(normal, &crop, &mask, beta)?;
        return Ok(AnomalySample { image, mask, kind: SampleKind::Ea, beta: Some(beta), seed: 0 });
    }
    Err(PrnError::Generation(format!(
        "warped defect missed the target area in {} attempts",
        cfg.aug2_retries
    )))
}

/// Simulated anomaly of kind [`SampleKind::Hea`] (texture from `pool`) or
/// [`SampleKind::Hoa`] (grid-shuffled augmented copy of `normal`).
pub fn simulated_anomaly(
    normal: &Image,
    kind: SampleKind,
    pool: &TexturePool,
    target: &TargetArea,
    cfg: &SynthConfig,
    beta: f32,
    rng: &mut impl Rng,
) -> Result<AnomalySample> {
    let source = match kind {
        SampleKind::Hea => {
            let texture = pool
                .choose(rng)
                .ok_or_else(|| PrnError::Generation("heterologous anomalies need a nonempty texture pool".into()))?;
            if texture.shape() != normal.shape() {
                return Err(PrnError::dim(format!("texture {:?} vs image {:?}", texture.shape(), normal.shape())));
            }
            aug1(texture, rng).0
        }
        SampleKind::Hoa => {
            let (augmented, _) = aug1(normal, rng);
            grid_shuffle(&augmented, cfg.shuffle_grid, rng)?.0
        }
        other => return Err(PrnError::Generation(format!("{other:?} is not a simulated anomaly kind"))),
    };
    let mask = perlin_mask(&target.mask, cfg, rng)?;
    let image = compose_simulated(normal, &source, &mask, beta)?;
    Ok(AnomalySample { image, mask, kind, beta: Some(beta), seed: 0 })
}

/// Rearranges the `grid x grid` cells of `img`: output cell `k` is input
/// cell `perm[k]` (cells in row-major order).
pub fn grid_shuffle_with(img: &Image, grid: usize, perm: &[usize]) -> Result<Image> {
    let (h, w) = image_size(img);
    if grid == 0 || h % grid != 0 || w % grid != 0 {
        return Err(PrnError::dim(format!("grid {grid} does not divide {h}x{w}")));
    }
    if perm.len() != grid * grid {
        return Err(PrnError::dim(format!("permutation has {} cells, expected {}", perm.len(), grid * grid)));
    }
    let (ch, cw) = (h / grid, w / grid);
    let src = img.data();
    let mut out = img.clone();
    let dst = out.data_mut();
    for (k, &from) in perm.iter().enumerate() {
        let (ty, tx) = (k / grid * ch, k % grid * cw);
        let (sy, sx) = (from / grid * ch, from % grid * cw);
        for c in 0..3 {
            for dy in 0..ch {
                let d = (c * h + ty + dy) * w + tx;
                let s = (c * h + sy + dy) * w + sx;
                dst[d..d + cw].copy_from_slice(&src[s..s + cw]);
            }
        }
    }
    Ok(out)
}

/// Random cell permutation; returns the image and the permutation used.
pub fn grid_shuffle(img: &Image, grid: usize, rng: &mut impl Rng) -> Result<(Image, Vec<usize>)> {
    let mut perm: Vec<usize> = (0..grid * grid).collect();
    perm.shuffle(rng);
    Ok((grid_shuffle_with(img, grid, &perm)?, perm))
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DatasetKind;
    use crate::rng::{self, Stream};
    use prn_tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_image(rng: &mut impl Rng, size: usize) -> Image {
        Tensor::from_fn(&[3, size, size], |_| rng.random::<f32>())
    }

    fn seen(rng: &mut impl Rng) -> (Image, Mask) {
        (random_image(rng, 32), Mask::from_fn(32, 32, |y, x| (10..20).contains(&y) && (12..22).contains(&x)))
    }

    #[test]
    fn beta_one_returns_the_normal_image() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let cfg = SynthConfig::default();
        let normal = random_image(&mut r, 32);
        let (si, sm) = seen(&mut r);
        let ta = TargetArea::full_frame(32, 32, DatasetKind::Texture);
        let ea = extended_anomaly(&normal, &si, &sm, &ta, &cfg, 1.0, &mut r).unwrap();
        assert_eq!(ea.image, normal);
        let pool = TexturePool::procedural(2, 32, 0);
        for kind in [SampleKind::Hea, SampleKind::Hoa] {
            let s = simulated_anomaly(&normal, kind, &pool, &ta, &cfg, 1.0, &mut r).unwrap();
            assert_eq!(s.image, normal);
        }
    }

    #[test]
    fn beta_zero_pastes_the_crop() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let normal = random_image(&mut r, 8);
        let crop_src = random_image(&mut r, 8);
        let mask = Mask::from_fn(8, 8, |y, _| y < 3);
        let crop = masked(&crop_src, &mask);
        let e = compose_extended(&normal, &crop, &mask, 0.0).unwrap();
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    let i = (c * 8 + y) * 8 + x;
                    let expect = if y < 3 { crop.data()[i] } else { normal.data()[i] };
                    assert_eq!(e.data()[i], expect);
                }
            }
        }
    }

    #[test]
    fn zero_mask_is_identity() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let n = random_image(&mut r, 8);
        let a = random_image(&mut r, 8);
        let empty = Mask::empty(8, 8);
        assert_eq!(compose_simulated(&n, &a, &empty, 0.3).unwrap(), n);
        assert_eq!(compose_extended(&n, &Image::zeros(&[3, 8, 8]), &empty, 0.3).unwrap(), n);
    }

    #[test]
    fn generated_samples_satisfy_invariants() {
        let cfg = SynthConfig::default();
        let pool = TexturePool::procedural(3, 32, 1);
        let mut misses = 0;
        for seed in 0..30u64 {
            let mut r = rng::stream(seed, Stream::Augmentation);
            let normal = random_image(&mut r, 32);
            let (si, sm) = seen(&mut r);
            let ta = sample_target_area(&normal, DatasetKind::Texture, cfg.target_area, &mut r);
            let beta = sample_beta(&cfg, &mut r);
            assert!((0.2..=0.9).contains(&beta));
            let samples = [
                extended_anomaly(&normal, &si, &sm, &ta, &cfg, beta, &mut r),
                simulated_anomaly(&normal, SampleKind::Hea, &pool, &ta, &cfg, beta, &mut r),
                simulated_anomaly(&normal, SampleKind::Hoa, &pool, &ta, &cfg, beta, &mut r),
            ];
            for s in samples {
                // A warp that keeps missing a small target is a legitimate
                // outcome; the batch assembler resamples in that case.
                let s = match s {
                    Err(PrnError::Generation(_)) => {
                        misses += 1;
                        continue;
                    }
                    other => other.unwrap(),
                };
                assert!(!s.mask.is_empty());
                assert!(s.mask.is_subset_of(&ta.mask));
                for c in 0..3 {
                    for y in 0..32 {
                        for x in 0..32 {
                            if !s.mask.get(y, x) {
                                let i = (c * 32 + y) * 32 + x;
                                assert_eq!(s.image.data()[i], normal.data()[i]);
                            }
                        }
                    }
                }
            }
        }
        assert!(misses <= 9, "{misses} of 90 generations failed");
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        let pool = TexturePool::procedural(3, 32, 1);
        let run = |seed| {
            let mut r = rng::stream(seed, Stream::Augmentation);
            let normal = random_image(&mut r, 32);
            let ta = sample_target_area(&normal, DatasetKind::Texture, cfg.target_area, &mut r);
            simulated_anomaly(&normal, SampleKind::Hoa, &pool, &ta, &cfg, 0.5, &mut r).unwrap()
        };
        assert_eq!(run(4), run(4));
    }

    #[test]
    fn failures_are_reported() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let cfg = SynthConfig::default();
        let normal = random_image(&mut r, 32);
        let ta = TargetArea::full_frame(32, 32, DatasetKind::Texture);
        let empty_pool = TexturePool::default();
        assert!(simulated_anomaly(&normal, SampleKind::Hea, &empty_pool, &ta, &cfg, 0.5, &mut r).is_err());
        let (si, _) = seen(&mut r);
        assert!(extended_anomaly(&normal, &si, &Mask::empty(32, 32), &ta, &cfg, 0.5, &mut r).is_err());
        let corner = TargetArea { mask: Mask::from_fn(32, 32, |y, x| y == 0 && x == 0), ..ta.clone() };
        let speck = Mask::from_fn(32, 32, |y, x| y == 16 && x == 16);
        let tight = SynthConfig { aug2_retries: 1, ..cfg.clone() };
        let res = extended_anomaly(&normal, &si, &speck, &corner, &tight, 0.5, &mut r);
        assert!(matches!(res, Err(PrnError::Generation(_))));
    }

    #[test]
    fn grid_shuffle_identity_and_inverse() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let img = random_image(&mut r, 32);
        let id: Vec<usize> = (0..64).collect();
        assert_eq!(grid_shuffle_with(&img, 8, &id).unwrap(), img);
        let (shuffled, perm) = grid_shuffle(&img, 8, &mut r).unwrap();
        let restored = grid_shuffle_with(&shuffled, 8, &inverse_permutation(&perm)).unwrap();
        assert_eq!(restored, img);
        let mut a: Vec<u32> = img.data().iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u32> = shuffled.data().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        assert!(grid_shuffle(&random_image(&mut r, 12), 8, &mut r).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn compositing_matches_pixel_oracle(seed in any::<u64>(), beta in 0.0f32..=1.0) {
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = random_image(&mut r, 8);
            let a = random_image(&mut r, 8);
            let mask = Mask::from_fn(8, 8, |_, _| r.random::<bool>());
            let c = masked(&a, &mask);
            let e = compose_extended(&n, &c, &mask, beta).unwrap();
            let s = compose_simulated(&n, &a, &mask, beta).unwrap();
            for ch in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        let i = (ch * 8 + y) * 8 + x;
                        let m = if mask.get(y, x) { 1.0f64 } else { 0.0 };
                        let (nv, av, cv) = (n.data()[i] as f64, a.data()[i] as f64, c.data()[i] as f64);
                        let b = beta as f64;
                        let eo = (1.0 - m) * nv + (1.0 - b) * cv + b * m * nv;
                        let so = (1.0 - m) * nv + (1.0 - b) * m * av + b * m * nv;
                        prop_assert!((e.data()[i] as f64 - eo).abs() < 1e-6);
                        prop_assert!((s.data()[i] as f64 - so).abs() < 1e-6);
                    }
                }
            }
        }
    }
}
