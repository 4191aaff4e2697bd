//! Frozen multi-scale convolutional feature extractor.
//!
//! Stand-in for the first three stages of a pretrained ResNet: a stride-4
//! stem (7x7 stride-2 convolution plus 3x3 stride-2 max pooling) followed by
//! three blocks of two conv-norm-ReLU layers. The first block keeps the stem
//! resolution, the next two halve it, so scale `j` (0-based) has side
//! `input_size / 2^(j+2)`.
//!
//! Weights are drawn from a seeded normal distribution. Each normalization
//! layer is a fixed per-channel affine map, calibrated once at build time so
//! that its output has zero mean and unit variance over a seeded batch of
//! noise images. After construction nothing here ever changes.

use std::collections::BTreeMap;
use std::path::Path;

use prn_tensor::kernels::{self, ConvGeometry};
use prn_tensor::Tensor;

use crate::config::EncoderConfig;
use crate::error::{PrnError, Result};
use crate::imaging::{check_image, Image};
use crate::nn::{normal_init, ParamKind, ParamStore};
use crate::rng::{self, Stream};

pub const NUM_SCALES: usize = 3;

/// Feature maps of one image, map `j` shaped `(c_j, h_j, h_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub maps: [Tensor<f32>; NUM_SCALES],
    pub source_id: String,
}

impl FeaturePyramid {
    pub fn new(maps: [Tensor<f32>; NUM_SCALES], source_id: impl Into<String>) -> Self {
        Self { maps, source_id: source_id.into() }
    }
}

#[derive(Clone, Debug)]
struct FrozenConv {
    name: String,
    geom: ConvGeometry,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    params: ParamStore<f32>,
    stem: FrozenConv,
    blocks: [[FrozenConv; 2]; NUM_SCALES],
}

const CALIBRATION_IMAGES: usize = 8;

impl Encoder {
    pub fn build(config: &EncoderConfig) -> Result<Self> {
        let mut encoder = Self::skeleton(config)?;
        if let Some(path) = &config.pretrained_weights {
            encoder.load_pretrained(path)?;
        } else {
            encoder.calibrate();
        }
        Ok(encoder)
    }

    /// Rebuilds an encoder from previously exported arrays (see [`Self::named_arrays`]).
    pub fn from_arrays(config: &EncoderConfig, arrays: &BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        let mut encoder = Self::skeleton(config)?;
        encoder.load_arrays(arrays)?;
        Ok(encoder)
    }

    fn skeleton(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, Stream::EncoderInit);
        let mut params = ParamStore::new();
        let std = config.weight_std;
        let [c1, c2, c3] = config.channels;
        let mut conv = |name: &str, cin: usize, cout: usize, k: usize, stride: usize| {
            params.add(format!("{name}.weight"), ParamKind::Buffer, normal_init(&[cout, cin, k, k], std, &mut rng));
            params.add(format!("{name}.norm.scale"), ParamKind::Buffer, Tensor::full(&[cout], 1.0));
            params.add(format!("{name}.norm.shift"), ParamKind::Buffer, Tensor::zeros(&[cout]));
            FrozenConv { name: name.to_string(), geom: ConvGeometry { stride, padding: k / 2, groups: 1 } }
        };
        let stem = conv("stem", 3, c1, 7, 2);
        let blocks = [
            [conv("block1.conv1", c1, c1, 3, 1), conv("block1.conv2", c1, c1, 3, 1)],
            [conv("block2.conv1", c1, c2, 3, 2), conv("block2.conv2", c2, c2, 3, 1)],
            [conv("block3.conv1", c2, c3, 3, 2), conv("block3.conv2", c3, c3, 3, 1)],
        ];
        Ok(Self { config: config.clone(), params, stem, blocks })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    fn layers(&self) -> impl Iterator<Item = &FrozenConv> {
        std::iter::once(&self.stem).chain(self.blocks.iter().flatten())
    }

    fn tensor(&self, name: &str) -> &Tensor<f32> {
        self.params.get(self.params.lookup(name).expect("encoder parameter exists"))
    }

    fn conv_raw(&self, layer: &FrozenConv, x: &Tensor<f32>) -> Tensor<f32> {
        kernels::conv2d(x, self.tensor(&format!("{}.weight", layer.name)), None, layer.geom)
    }

    fn norm_relu(&self, layer: &FrozenConv, x: &Tensor<f32>) -> Tensor<f32> {
        let scale = self.tensor(&format!("{}.norm.scale", layer.name)).data();
        let shift = self.tensor(&format!("{}.norm.shift", layer.name)).data();
        kernels::channel_affine(x, scale, shift).map(|v| v.max(0.0))
    }

    fn apply(&self, layer: &FrozenConv, x: &Tensor<f32>) -> Tensor<f32> {
        self.norm_relu(layer, &self.conv_raw(layer, x))
    }

    /// Sets every normalization to whiten its pre-activation over a batch of
    /// seeded uniform-noise images, layer by layer.
    fn calibrate(&mut self) {
        let size = self.config.input_size;
        let mut rng = rng::stream(self.config.seed, Stream::EncoderInit);
        rng.set_word_pos(1 << 40);
        let batch = Tensor::from_fn(&[CALIBRATION_IMAGES, 3, size, size], |_| {
            use rand::Rng;
            rng.random::<f32>()
        });
        let mut x = self.normalize_input(batch);
        let layers: Vec<FrozenConv> = self.layers().cloned().collect();
        for (i, layer) in layers.iter().enumerate() {
            let pre = self.conv_raw(layer, &x);
            let (mean, var) = kernels::channel_moments(&pre);
            let scale: Vec<f32> = var.iter().map(|&v| 1.0 / (v + 1e-5).sqrt()).collect();
            let shift: Vec<f32> = mean.iter().zip(&scale).map(|(&m, &s)| -m * s).collect();
            let sid = self.params.lookup(&format!("{}.norm.scale", layer.name)).unwrap();
            let hid = self.params.lookup(&format!("{}.norm.shift", layer.name)).unwrap();
            self.params.get_mut(sid).data_mut().copy_from_slice(&scale);
            self.params.get_mut(hid).data_mut().copy_from_slice(&shift);
            x = self.norm_relu(layer, &pre);
            if i == 0 {
                x = kernels::max_pool2d(&x, 3, 2, 1);
            }
        }
    }

    /// Replaces weights with arrays named `encoder/<param>` from a checkpoint.
    /// Arrays for layers past the third block are ignored.
    pub fn load_pretrained(&mut self, path: &Path) -> Result<()> {
        let container = crate::checkpoint::Checkpoint::read(path)?;
        self.load_arrays(&container.arrays)
    }

    pub fn load_arrays(&mut self, arrays: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            let name = self.params.name(id).to_string();
            let key = format!("encoder/{name}");
            let layer = name.rsplit_once('.').map_or(name.as_str(), |(l, _)| l).trim_end_matches(".norm").to_string();
            let Some(array) = arrays.get(&key) else {
                return Err(PrnError::WeightLoad { layer, reason: format!("array `{key}` is missing") });
            };
            let expected = self.params.get(id).shape().to_vec();
            if array.shape() != expected.as_slice() {
                return Err(PrnError::WeightLoad {
                    layer,
                    reason: format!("shape {:?} does not match expected {:?}", array.shape(), expected),
                });
            }
            *self.params.get_mut(id) = array.clone();
        }
        Ok(())
    }

    pub fn named_arrays(&self) -> Vec<(String, Tensor<f32>)> {
        self.params.ids().map(|id| (format!("encoder/{}", self.params.name(id)), self.params.get(id).clone())).collect()
    }

    fn normalize_input(&self, mut batch: Tensor<f32>) -> Tensor<f32> {
        if self.config.normalize_input {
            let scale: Vec<f32> = self.config.input_std.iter().map(|s| 1.0 / s).collect();
            let shift: Vec<f32> = self.config.input_mean.iter().zip(&scale).map(|(m, s)| -m * s).collect();
            batch = kernels::channel_affine(&batch, &scale, &shift);
        }
        batch
    }

    /// Feature maps for a batch `(n, 3, s, s)`; map `j` is `(n, c_j, h_j, h_j)`.
    pub fn extract_batch(&self, batch: &Tensor<f32>) -> Result<[Tensor<f32>; NUM_SCALES]> {
        let s = self.config.input_size;
        if batch.ndim() != 4 || batch.shape()[1..] != [3, s, s] {
            return Err(PrnError::dim(format!("expected image batch (n, 3, {s}, {s}), got {:?}", batch.shape())));
        }
        let x = self.normalize_input(batch.clone());
        let x = kernels::max_pool2d(&self.apply(&self.stem, &x), 3, 2, 1);
        let f1 = self.apply(&self.blocks[0][1], &self.apply(&self.blocks[0][0], &x));
        let f2 = self.apply(&self.blocks[1][1], &self.apply(&self.blocks[1][0], &f1));
        let f3 = self.apply(&self.blocks[2][1], &self.apply(&self.blocks[2][0], &f2));
        Ok([f1, f2, f3])
    }

    pub fn extract(&self, image: &Image, source_id: &str) -> Result<FeaturePyramid> {
        check_image(image, self.config.input_size)?;
        let batch = image.clone().reshape(&[1, 3, self.config.input_size, self.config.input_size]);
        let maps = self.extract_batch(&batch)?.map(|m| m.slice_outer(0));
        Ok(FeaturePyramid::new(maps, source_id))
    }
}
