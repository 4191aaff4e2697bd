//! Target areas: random geometric regions where synthetic defects may go.

use std::f64::consts::PI;

use rand::Rng;

use crate::config::DatasetKind;
use crate::imaging::{closing, grayscale, image_size, largest_component, Image, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Polygon,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetArea {
    pub mask: Mask,
    pub shape: ShapeKind,
    pub dataset_kind: DatasetKind,
    /// Foreground estimation failed and the full frame was used instead.
    pub fallback: bool,
}

impl TargetArea {
    /// The whole frame, used when target areas are disabled.
    pub fn full_frame(height: usize, width: usize, dataset_kind: DatasetKind) -> Self {
        Self { mask: Mask::full(height, width), shape: ShapeKind::Rectangle, dataset_kind, fallback: false }
    }
}

/// Otsu threshold over 8-bit levels of `values` in `[0, 1]`; pixels strictly
/// above the returned level form the upper class.
pub fn otsu_level(values: &[f32]) -> u8 {
    let mut hist = [0usize; 256];
    for &v in values {
        hist[crate::imaging::quantize(v) as usize] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_var) = (0u8, -1.0);
    for t in 0..256 {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let var = w0 * w1 * (m0 - m1).powi(2);
        if var > best_var {
            best_var = var;
            best = t as u8;
        }
    }
    best
}

/// Object foreground: Otsu split of the grayscale image, taking the class
/// that covers less of the border, then the largest component and a 5x5
/// closing.
pub fn estimate_foreground(img: &Image) -> Mask {
    let (h, w) = image_size(img);
    let gray = grayscale(img);
    let level = otsu_level(&gray);
    let upper = Mask::from_fn(h, w, |y, x| crate::imaging::quantize(gray[y * w + x]) > level);
    let border: Vec<bool> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| y == 0 || x == 0 || y + 1 == h || x + 1 == w)
        .map(|(y, x)| upper.get(y, x))
        .collect();
    let upper_on_border = border.iter().filter(|&&b| b).count() * 2 > border.len();
    let fg = if upper_on_border { Mask::from_fn(h, w, |y, x| !upper.get(y, x)) } else { upper };
    closing(&largest_component(&fg), 5)
}

fn shape_mask(h: usize, w: usize, shape: ShapeKind, area: f64, cy: f64, cx: f64, rng: &mut impl Rng) -> Mask {
    match shape {
        ShapeKind::Circle => {
            let r2 = area / PI;
            Mask::from_fn(h, w, |y, x| (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2) <= r2)
        }
        ShapeKind::Rectangle => {
            let aspect: f64 = rng.random_range(0.5..2.0);
            let rw = (area * aspect).sqrt() / 2.0;
            let rh = (area / aspect).sqrt() / 2.0;
            Mask::from_fn(h, w, |y, x| ((y as f64 + 0.5) - cy).abs() <= rh && ((x as f64 + 0.5) - cx).abs() <= rw)
        }
        ShapeKind::Polygon => {
            let n = rng.random_range(3..=8);
            let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            angles.sort_by(f64::total_cmp);
            let radii: Vec<f64> = (0..n).map(|_| rng.random_range(0.6..1.0)).collect();
            let unit: Vec<(f64, f64)> = angles.iter().zip(&radii).map(|(a, r)| (r * a.sin(), r * a.cos())).collect();
            let unit_area = 0.5
                * (0..n)
                    .map(|i| {
                        let (y0, x0) = unit[i];
                        let (y1, x1) = unit[(i + 1) % n];
                        x0 * y1 - x1 * y0
                    })
                    .sum::<f64>()
                    .abs();
            let scale = (area / unit_area.max(1e-6)).sqrt();
            let verts: Vec<(f64, f64)> = unit.iter().map(|(y, x)| (cy + y * scale, cx + x * scale)).collect();
            Mask::from_fn(h, w, |y, x| point_in_polygon(y as f64 + 0.5, x as f64 + 0.5, &verts))
        }
    }
}

fn point_in_polygon(py: f64, px: f64, verts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = verts.len();
    for i in 0..n {
        let (yi, xi) = verts[i];
        let (yj, xj) = verts[(i + n - 1) % n];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
    }
    inside
}

const TARGET_ATTEMPTS: usize = 64;

/// Samples a circle, rectangle or polygon whose part inside the allowed
/// region (foreground for objects, the frame for textures) covers between
/// `area[0]` and `area[1]` of the image.
pub fn sample_target_area(img: &Image, kind: DatasetKind, area: [f64; 2], rng: &mut impl Rng) -> TargetArea {
    let (h, w) = image_size(img);
    let total = (h * w) as f64;
    let (region, fallback) = match kind {
        DatasetKind::Texture => (Mask::full(h, w), false),
        DatasetKind::Object => {
            let fg = estimate_foreground(img);
            if fg.is_empty() {
                log::warn!("foreground estimate is empty; target area falls back to the full frame");
                (Mask::full(h, w), true)
            } else {
                (fg, false)
            }
        }
    };
    let anchors: Vec<(usize, usize)> =
        (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).filter(|&(y, x)| region.get(y, x)).collect();
    let lo = (area[0] * total).ceil().max(1.0) as usize;
    let hi = (area[1] * total).floor().max(lo as f64) as usize;
    let mut best: Option<(Mask, ShapeKind)> = None;
    for _ in 0..TARGET_ATTEMPTS {
        let shape = [ShapeKind::Circle, ShapeKind::Rectangle, ShapeKind::Polygon][rng.random_range(0..3)];
        let want = rng.random_range(area[0]..=area[1]) * total;
        let (ay, ax) = anchors[rng.random_range(0..anchors.len())];
        let m = shape_mask(h, w, shape, want, ay as f64 + 0.5, ax as f64 + 0.5, rng).and(&region);
        let n = m.count();
        if (lo..=hi).contains(&n) {
            return TargetArea { mask: m, shape, dataset_kind: kind, fallback };
        }
        if n > 0 && best.as_ref().is_none_or(|(b, _)| n.abs_diff(lo) < b.count().abs_diff(lo)) {
            best = Some((m, shape));
        }
    }
    // Small regions cannot host the minimum area; use the closest candidate.
    let (mask, shape) = best.unwrap_or_else(|| (region.clone(), ShapeKind::Rectangle));
    TargetArea { mask, shape, dataset_kind: kind, fallback }
}

#[cfg(test)]
mod tests {
    use super::*;
    use prn_tensor::Tensor;
    use rand::SeedableRng;

    fn disc_image(size: usize) -> Image {
        let c = size as f64 / 2.0;
        let r = size as f64 * 0.3;
        Tensor::from_fn(&[3, size, size], |i| {
            let p = i % (size * size);
            let (y, x) = ((p / size) as f64 + 0.5, (p % size) as f64 + 0.5);
            if (y - c).powi(2) + (x - c).powi(2) <= r * r {
                0.8
            } else {
                0.1
            }
        })
    }

    #[test]
    fn otsu_separates_two_levels() {
        let values: Vec<f32> = (0..100).map(|i| if i < 60 { 0.1 } else { 0.8 }).collect();
        let t = otsu_level(&values);
        assert!((crate::imaging::quantize(0.1)..crate::imaging::quantize(0.8)).contains(&t));
    }

    #[test]
    fn foreground_finds_the_object() {
        let img = disc_image(32);
        let fg = estimate_foreground(&img);
        assert!(fg.get(16, 16));
        assert!(!fg.get(0, 0));
        let inverted = img.map(|v| 1.0 - v);
        assert_eq!(estimate_foreground(&inverted), fg);
    }

    #[test]
    fn object_targets_stay_in_foreground() {
        let img = disc_image(32);
        let fg = estimate_foreground(&img);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut kinds = std::collections::HashSet::new();
        for _ in 0..1000 {
            let ta = sample_target_area(&img, DatasetKind::Object, [0.02, 0.4], &mut rng);
            assert!(!ta.mask.is_empty());
            assert!(ta.mask.is_subset_of(&fg));
            kinds.insert(format!("{:?}", ta.shape));
        }
        assert_eq!(kinds.len(), 3);
    }

    #[test]
    fn texture_targets_respect_area_bounds_and_reach_edges() {
        let img = Tensor::full(&[3, 32, 32], 0.5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut touched = Mask::empty(32, 32);
        for _ in 0..500 {
            let ta = sample_target_area(&img, DatasetKind::Texture, [0.02, 0.4], &mut rng);
            let f = ta.mask.fraction();
            assert!((0.02..=0.4).contains(&f), "{f}");
            for y in 0..32 {
                for x in 0..32 {
                    if ta.mask.get(y, x) {
                        touched.set(y, x, true);
                    }
                }
            }
        }
        assert!(touched.get(0, 0) || touched.get(31, 31) || touched.get(0, 31) || touched.get(31, 0));
    }

    #[test]
    fn blank_object_image_falls_back_to_frame() {
        let img = Tensor::full(&[3, 16, 16], 0.5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let ta = sample_target_area(&img, DatasetKind::Object, [0.02, 0.4], &mut rng);
        assert!(ta.fallback);
        assert!(!ta.mask.is_empty());
    }
}
