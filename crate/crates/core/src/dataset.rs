//! MVTec-style dataset layout: indexing, loading and a seeded synthetic
//! stand-in category.
//!
//! ```text
//! <root>/<category>/train/good/*.png
//! <root>/<category>/test/good/*.png
//! <root>/<category>/test/<defect>/*.png
//! <root>/<category>/ground_truth/<defect>/<stem>_mask.png
//! ```

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::config::PrnConfig;
use crate::error::{PrnError, Result};
use crate::imaging::{load_image, load_mask, quantize_image, save_image, save_mask, Image, Mask};
use crate::rng::{self, Stream};
use crate::synth::perlin::perlin_noise;
use crate::synth::TexturePool;
use crate::train::TrainingData;

pub const GOOD: &str = "good";
pub const SYNTHETIC_DEFECTS: [&str; 3] = ["ellipse", "scratch", "square"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TestItem {
    /// `<defect>/<file stem>`, unique within a category.
    pub id: String,
    pub path: PathBuf,
    /// `None` for defect-free images.
    pub defect: Option<String>,
    pub mask: Option<PathBuf>,
}

impl TestItem {
    pub fn is_anomalous(&self) -> bool {
        self.defect.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub category: String,
    pub defect_classes: Vec<String>,
    pub train: Vec<PathBuf>,
    /// Evaluation split; never contains a seen anomaly.
    pub test: Vec<TestItem>,
    /// Anomalies moved to training.
    pub seen: Vec<TestItem>,
    pub seed: u64,
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| PrnError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Indexes one category and moves `n_seen` anomalies, drawn round-robin
/// over the defect classes, from the test split to the seen pool.
pub fn index_dataset(root: &Path, category: &str, n_seen: usize, seed: u64) -> Result<DatasetIndex> {
    let base = root.join(category);
    if !base.is_dir() {
        return Err(PrnError::Index(format!("category directory {} does not exist", base.display())));
    }
    let train = png_files(&base.join("train").join(GOOD))?;
    if train.is_empty() {
        return Err(PrnError::Index(format!("no training images under {}", base.join("train").join(GOOD).display())));
    }
    let test_dir = base.join("test");
    let mut classes: Vec<String> = std::fs::read_dir(&test_dir)
        .map_err(|e| PrnError::io(&test_dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    classes.sort();
    let mut test = Vec::new();
    let mut by_class: Vec<Vec<TestItem>> = Vec::new();
    for class in &classes {
        let files = png_files(&test_dir.join(class))?;
        if class == GOOD {
            test.extend(files.into_iter().map(|path| TestItem {
                id: format!("{GOOD}/{}", stem(&path)),
                path,
                defect: None,
                mask: None,
            }));
            continue;
        }
        let mut items = Vec::new();
        for path in files {
            let mask = base.join("ground_truth").join(class).join(format!("{}_mask.png", stem(&path)));
            if !mask.is_file() {
                return Err(PrnError::Index(format!(
                    "anomalous test image {} has no mask (expected {})",
                    path.display(),
                    mask.display()
                )));
            }
            items.push(TestItem { id: format!("{class}/{}", stem(&path)), path, defect: Some(class.clone()), mask: Some(mask) });
        }
        by_class.push(items);
    }
    let defect_classes: Vec<String> = classes.into_iter().filter(|c| c != GOOD).collect();
    let available: usize = by_class.iter().map(Vec::len).sum();
    if n_seen > available {
        return Err(PrnError::Index(format!("{n_seen} seen anomalies requested but only {available} exist")));
    }
    let mut rng = rng::stream(seed, Stream::DatasetIndex);
    let mut order: Vec<usize> = (0..by_class.len()).collect();
    order.shuffle(&mut rng);
    for items in &mut by_class {
        items.shuffle(&mut rng);
    }
    let mut seen = Vec::with_capacity(n_seen);
    'outer: for round in 0.. {
        let mut took = false;
        for &c in &order {
            if seen.len() == n_seen {
                break 'outer;
            }
            if let Some(item) = by_class[c].get(round) {
                seen.push(item.clone());
                took = true;
            }
        }
        if !took {
            break;
        }
    }
    for items in by_class {
        test.extend(items.into_iter().filter(|i| !seen.contains(i)));
    }
    test.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(DatasetIndex { root: root.to_path_buf(), category: category.to_string(), defect_classes, train, test, seen, seed })
}

impl DatasetIndex {
    /// Canonical JSON listing of every split.
    pub fn manifest(&self) -> String {
        serde_json::to_string_pretty(self).expect("index is serializable")
    }

    /// Normal images, seen anomalies and the heterologous texture pool.
    pub fn training_data(&self, cfg: &PrnConfig) -> Result<TrainingData> {
        let size = cfg.encoder.input_size;
        let normals = self.train.iter().map(|p| load_image(p, size)).collect::<Result<Vec<_>>>()?;
        let seen = self
            .seen
            .iter()
            .map(|item| Ok((load_image(&item.path, size)?, load_mask(item.mask.as_ref().unwrap(), size)?)))
            .collect::<Result<Vec<_>>>()?;
        let textures = match &cfg.synth.texture_dir {
            Some(dir) => {
                let pool = TexturePool::from_dir(dir, size)?;
                if pool.is_empty() {
                    return Err(PrnError::config(format!("texture directory {} holds no images", dir.display())));
                }
                pool
            }
            None => TexturePool::procedural(cfg.synth.procedural_textures, size, cfg.seed),
        };
        Ok(TrainingData { normals, seen, textures })
    }

    /// Evaluation images with their masks (empty for defect-free ones).
    pub fn test_set(&self, size: usize) -> Result<Vec<TestSample>> {
        self.test
            .iter()
            .map(|item| {
                let image = load_image(&item.path, size)?;
                let mask = match &item.mask {
                    Some(m) => load_mask(m, size)?,
                    None => Mask::empty(size, size),
                };
                Ok(TestSample { id: item.id.clone(), defect: item.defect.clone(), image, mask })
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TestSample {
    pub id: String,
    pub defect: Option<String>,
    pub image: Image,
    pub mask: Mask,
}

impl TestSample {
    pub fn is_anomalous(&self) -> bool {
        self.defect.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub category: String,
    pub n_normal: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    pub resolution: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn desk(seed: u64) -> Self {
        Self { category: "synthetic".into(), n_normal: 40, n_test_normal: 20, n_test_anomalous: 20, resolution: 32, seed }
    }
}

/// Category-wide look: oriented gratings, a colour palette and noise.
#[derive(Clone, Debug)]
struct TextureStyle {
    waves: Vec<(f64, f64, f64)>,
    low: [f64; 3],
    high: [f64; 3],
    noise_weight: f64,
    noise_period: usize,
}

impl TextureStyle {
    fn sample(size: usize, rng: &mut impl Rng) -> Self {
        let waves = (0..2)
            .map(|_| {
                let angle: f64 = rng.random_range(0.0..TAU);
                let cycles = rng.random_range(2.0..5.0) / size as f64;
                (angle.sin() * cycles, angle.cos() * cycles, rng.random_range(0.5..1.0))
            })
            .collect();
        let low = std::array::from_fn(|_| rng.random_range(0.15..0.4));
        let high = std::array::from_fn(|_| rng.random_range(0.6..0.85));
        let noise_period = if size % 8 == 0 { 8 } else { size };
        Self { waves, low, high, noise_weight: 0.25, noise_period }
    }

    /// One normal instance: the gratings at a random phase plus fresh noise.
    fn render(&self, size: usize, rng: &mut impl Rng) -> Image {
        let phases: Vec<f64> = self.waves.iter().map(|_| rng.random_range(0.0..TAU)).collect();
        let noise = perlin_noise(size, size, self.noise_period, 2, 0.5, rng);
        let amp: f64 = self.waves.iter().map(|w| w.2).sum();
        let field: Vec<f64> = (0..size * size)
            .map(|i| {
                let (y, x) = ((i / size) as f64, (i % size) as f64);
                let g: f64 = self
                    .waves
                    .iter()
                    .zip(&phases)
                    .map(|(&(fy, fx, a), &ph)| a * (TAU * (fy * y + fx * x) + ph).sin())
                    .sum::<f64>()
                    / amp;
                let t = 0.5 + 0.5 * ((1.0 - self.noise_weight) * g + self.noise_weight * noise[i]);
                t.clamp(0.0, 1.0)
            })
            .collect();
        let hw = size * size;
        quantize_image(&Image::from_fn(&[3, size, size], |i| {
            let (c, p) = (i / hw, i % hw);
            (self.low[c] + field[p] * (self.high[c] - self.low[c])) as f32
        }))
    }
}

fn defect_mask(class: &str, size: usize, rng: &mut impl Rng) -> Mask {
    let s = size as f64;
    loop {
        let mask = match class {
            "square" => {
                let side = rng.random_range(0.12 * s..0.28 * s).round().max(2.0) as usize;
                let y0 = rng.random_range(0..=size - side);
                let x0 = rng.random_range(0..=size - side);
                Mask::from_fn(size, size, |y, x| (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x))
            }
            "ellipse" => {
                let (ry, rx) = (rng.random_range(0.08 * s..0.18 * s), rng.random_range(0.08 * s..0.18 * s));
                let (cy, cx) = (rng.random_range(ry..s - ry), rng.random_range(rx..s - rx));
                Mask::from_fn(size, size, |y, x| {
                    let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
                    dy * dy + dx * dx <= 1.0
                })
            }
            _ => {
                // Polyline of 2-3 segments with half-width ~ 0.03 * size.
                let n = rng.random_range(3..=4);
                let pts: Vec<(f64, f64)> =
                    (0..n).map(|_| (rng.random_range(0.1 * s..0.9 * s), rng.random_range(0.1 * s..0.9 * s))).collect();
                let half = (0.03 * s).max(0.75);
                Mask::from_fn(size, size, |y, x| {
                    let p = (y as f64 + 0.5, x as f64 + 0.5);
                    pts.windows(2).any(|seg| segment_distance(p, seg[0], seg[1]) <= half)
                })
            }
        };
        if mask.count() >= 4 && mask.fraction() <= 0.25 {
            return mask;
        }
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dy + (p.1 - a.1) * dx) / len2).clamp(0.0, 1.0) };
    let (qy, qx) = (a.0 + t * dy - p.0, a.1 + t * dx - p.1);
    (qy * qy + qx * qx).sqrt()
}

/// Paints a defect: a brightness shift and colour tint inside `mask`, with a
/// little pixel noise. Pixels outside `mask` are copied unchanged.
fn paint_defect(base: &Image, mask: &Mask, rng: &mut impl Rng) -> Image {
    let size = mask.height();
    let hw = size * size;
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let shift: f32 = sign * rng.random_range(0.25..0.45);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.1..0.1));
    let mut out = base.clone();
    let data = out.data_mut();
    for p in 0..hw {
        if !mask.get(p / size, p % size) {
            continue;
        }
        let jitter: f32 = rng.random_range(-0.05..0.05);
        for c in 0..3 {
            let v = data[c * hw + p] + shift + tint[c] + jitter;
            data[c * hw + p] = v.clamp(0.0, 1.0);
        }
    }
    quantize_image(&out)
}

#[derive(Clone, Debug)]
pub struct SyntheticAnomaly {
    pub defect: &'static str,
    pub base: Image,
    pub image: Image,
    pub mask: Mask,
}

#[derive(Clone, Debug)]
pub struct SyntheticCategory {
    pub train: Vec<Image>,
    pub test_normal: Vec<Image>,
    pub test_anomalous: Vec<SyntheticAnomaly>,
}

/// In-memory synthetic category; images are already on the 8-bit grid.
pub fn synthetic_category(spec: &SyntheticSpec) -> Result<SyntheticCategory> {
    let size = spec.resolution;
    if size == 0 || size % 32 != 0 {
        return Err(PrnError::config(format!("resolution {size} must be a positive multiple of 32")));
    }
    let mut rng = rng::stream(spec.seed, Stream::SyntheticData);
    let style = TextureStyle::sample(size, &mut rng);
    let train = (0..spec.n_normal).map(|_| style.render(size, &mut rng)).collect();
    let test_normal = (0..spec.n_test_normal).map(|_| style.render(size, &mut rng)).collect();
    let test_anomalous = (0..spec.n_test_anomalous)
        .map(|i| {
            let defect = SYNTHETIC_DEFECTS[i % SYNTHETIC_DEFECTS.len()];
            let base = style.render(size, &mut rng);
            let mask = defect_mask(defect, size, &mut rng);
            let image = paint_defect(&base, &mask, &mut rng);
            SyntheticAnomaly { defect, base, image, mask }
        })
        .collect();
    Ok(SyntheticCategory { train, test_normal, test_anomalous })
}

/// Writes a synthetic category under `out_dir/<category>` and returns that
/// directory.
pub fn generate_synthetic_dataset(out_dir: &Path, spec: &SyntheticSpec) -> Result<PathBuf> {
    let data = synthetic_category(spec)?;
    let base = out_dir.join(&spec.category);
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| PrnError::io(p, e));
    let train_dir = base.join("train").join(GOOD);
    let good_dir = base.join("test").join(GOOD);
    mkdir(&train_dir)?;
    mkdir(&good_dir)?;
    for (i, img) in data.train.iter().enumerate() {
        save_image(img, &train_dir.join(format!("{i:03}.png")))?;
    }
    for (i, img) in data.test_normal.iter().enumerate() {
        save_image(img, &good_dir.join(format!("{i:03}.png")))?;
    }
    for (i, a) in data.test_anomalous.iter().enumerate() {
        let img_dir = base.join("test").join(a.defect);
        let gt_dir = base.join("ground_truth").join(a.defect);
        mkdir(&img_dir)?;
        mkdir(&gt_dir)?;
        save_image(&a.image, &img_dir.join(format!("{i:03}.png")))?;
        save_mask(&a.mask, &gt_dir.join(format!("{i:03}_mask.png")))?;
    }
    Ok(base)
}
