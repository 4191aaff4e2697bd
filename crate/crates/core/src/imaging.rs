//! Image and mask containers plus PNG I/O.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{GrayImage, Luma, Rgb, RgbImage};
use prn_tensor::Tensor;

use crate::error::{PrnError, Result};

/// RGB image, `(3, h, w)` with values in `[0, 1]`.
pub type Image = Tensor<f32>;

/// Binary mask stored as 0/1 bytes, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![1; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self { height, width, data }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), height * width);
        Self { height, width, data: bits.into_iter().map(u8::from).collect() }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn bits(&self) -> impl Iterator<Item = bool> + '_ {
        self.data.iter().map(|&v| v != 0)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.len().max(1) as f64
    }

    pub fn and(&self, other: &Mask) -> Mask {
        assert_eq!((self.height, self.width), (other.height, other.width));
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a & b).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    /// 0.0 / 1.0 values.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[self.height, self.width], self.to_f32())
    }
}

pub fn image_size(img: &Image) -> (usize, usize) {
    assert_eq!(img.ndim(), 3, "image must be (3, h, w)");
    (img.shape()[1], img.shape()[2])
}

pub fn check_image(img: &Image, size: usize) -> Result<()> {
    if img.shape() != [3, size, size] {
        return Err(PrnError::dim(format!("expected image (3, {size}, {size}), got {:?}", img.shape())));
    }
    Ok(())
}

pub fn rgb_to_image(rgb: &RgbImage) -> Image {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn image_to_rgb(img: &Image) -> RgbImage {
    let (h, w) = image_size(img);
    let d = img.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| quantize(d[(c * h + y as usize) * w + x as usize]);
        Rgb([px(0), px(1), px(2)])
    })
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every value to the nearest 8-bit level.
pub fn quantize_image(img: &Image) -> Image {
    img.map(|v| quantize(v) as f32 / 255.0)
}

/// Decodes any supported image, replicating grayscale to RGB, and resizes
/// bilinearly to `size x size` when needed.
pub fn load_image(path: &Path, size: usize) -> Result<Image> {
    let dynimg = image::open(path).map_err(|source| PrnError::Image { path: path.into(), source })?;
    let mut rgb = dynimg.to_rgb8();
    if rgb.width() as usize != size || rgb.height() as usize != size {
        rgb = imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
    }
    Ok(rgb_to_image(&rgb))
}

/// Decodes a mask, resizes with nearest neighbour and binarizes at 0.5.
pub fn load_mask(path: &Path, size: usize) -> Result<Mask> {
    let dynimg = image::open(path).map_err(|source| PrnError::Image { path: path.into(), source })?;
    let mut gray = dynimg.to_luma8();
    if gray.width() as usize != size || gray.height() as usize != size {
        gray = imageops::resize(&gray, size as u32, size as u32, FilterType::Nearest);
    }
    Ok(Mask::from_fn(size, size, |y, x| gray.get_pixel(x as u32, y as u32)[0] >= 128))
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    image_to_rgb(img).save(path).map_err(|source| PrnError::Image { path: path.into(), source })
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let gray = GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    gray.save(path).map_err(|source| PrnError::Image { path: path.into(), source })
}

/// Score map `(h, w)` in `[0, 1]` as 8-bit grayscale (0 -> 0, 1 -> 255).
pub fn save_heatmap(scores: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w) = (scores.shape()[0], scores.shape()[1]);
    let d = scores.data();
    let gray = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([quantize(d[y as usize * w + x as usize])]));
    gray.save(path).map_err(|source| PrnError::Image { path: path.into(), source })
}

/// Luma in `[0, 1]` (ITU-R 601 weights), `h * w` values.
pub fn grayscale(img: &Image) -> Vec<f32> {
    let (h, w) = image_size(img);
    let d = img.data();
    let hw = h * w;
    (0..hw).map(|i| 0.299 * d[i] + 0.587 * d[hw + i] + 0.114 * d[2 * hw + i]).collect()
}

/// 8-connected component labels (0 = background, regions numbered from 1)
/// and the number of regions.
pub fn label_components(mask: &Mask) -> (Vec<u32>, usize) {
    let (h, w) = (mask.height, mask.width);
    let mut labels = vec![0u32; h * w];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask.data[start] == 0 || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            for ny in y.saturating_sub(1)..(y + 2).min(h) {
                for nx in x.saturating_sub(1)..(x + 2).min(w) {
                    let j = ny * w + nx;
                    if mask.data[j] != 0 && labels[j] == 0 {
                        labels[j] = count;
                        stack.push(j);
                    }
                }
            }
        }
    }
    (labels, count as usize)
}

/// Largest 8-connected region (lowest label on ties); empty if the mask is.
pub fn largest_component(mask: &Mask) -> Mask {
    let (labels, count) = label_components(mask);
    let mut sizes = vec![0usize; count + 1];
    for &l in &labels {
        sizes[l as usize] += 1;
    }
    let best = (1..=count).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)));
    match best {
        Some(b) => Mask { height: mask.height, width: mask.width, data: labels.iter().map(|&l| (l == b as u32) as u8).collect() },
        None => Mask::empty(mask.height, mask.width),
    }
}

fn morph(mask: &Mask, size: usize, dilate: bool) -> Mask {
    let r = size / 2;
    let (h, w) = (mask.height, mask.width);
    Mask::from_fn(h, w, |y, x| {
        let mut window = (y.saturating_sub(r)..(y + r + 1).min(h))
            .flat_map(|ny| (x.saturating_sub(r)..(x + r + 1).min(w)).map(move |nx| (ny, nx)));
        if dilate {
            window.any(|(ny, nx)| mask.get(ny, nx))
        } else {
            window.all(|(ny, nx)| mask.get(ny, nx))
        }
    })
}

/// Square-window dilation followed by erosion; the frame edge does not erode.
pub fn closing(mask: &Mask, size: usize) -> Mask {
    morph(&morph(mask, size, true), size, false)
}
