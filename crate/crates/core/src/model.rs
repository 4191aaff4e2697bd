//! The assembled network: frozen encoder and prototype bank, then fusion,
//! multi-size attention, a second fusion and a U-Net style decoder.

use std::collections::BTreeMap;

use prn_tensor::{Scalar, Tensor, Var};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::PrnConfig;
use crate::encoder::{Encoder, NUM_SCALES};
use crate::error::{PrnError, Result};
use crate::fusion::{fuse_and_concat, Fusion};
use crate::imaging::{check_image, Image};
use crate::msa::MsaStack;
use crate::nn::{Conv2d, ConvBnRelu, ConvSpec, Ctx, ParamStore};
use crate::prototype::PrototypeBank;
use crate::rng::{self, Stream};

/// Per-pixel anomaly probabilities `(H, W)` and the derived image score.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub map: Tensor<f32>,
    pub image_score: f32,
    pub source_id: String,
}

/// Mean of the `top_k` largest values (all values when `top_k` exceeds the count).
pub fn image_score(map: &[f32], top_k: usize) -> Result<f32> {
    if map.is_empty() {
        return Err(PrnError::dim("image score of an empty map"));
    }
    if top_k == 0 {
        return Err(PrnError::config("top_k must be at least 1"));
    }
    let mut v = map.to_vec();
    let k = top_k.min(v.len());
    if k < v.len() {
        v.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    }
    Ok((v[..k].iter().map(|&x| x as f64).sum::<f64>() / k as f64) as f32)
}

#[derive(Clone, Debug)]
pub struct Decoder {
    stages: [[ConvBnRelu; 2]; NUM_SCALES],
    head: Conv2d,
    output_size: usize,
}

impl Decoder {
    /// `skips` are the widths of `T*_1..T*_3`; `widths` the stage outputs,
    /// deepest first.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        skips: [usize; NUM_SCALES],
        widths: [usize; NUM_SCALES],
        output_size: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let inputs = [skips[2], widths[0] + skips[1], widths[1] + skips[0]];
        let stages = [0, 1, 2].map(|s| {
            [
                ConvBnRelu::new(store, &format!("decoder.stage{s}.a"), ConvSpec::new(inputs[s], widths[s], 3), rng),
                ConvBnRelu::new(store, &format!("decoder.stage{s}.b"), ConvSpec::new(widths[s], widths[s], 3), rng),
            ]
        });
        let head = Conv2d::new(store, "decoder.head", ConvSpec::new(widths[2], 1, 1), rng);
        Self { stages, head, output_size }
    }

    /// Consumes `T*_3` and merges `T*_2`, `T*_1` after each x2 upsampling.
    /// Returns probabilities `(n, 1, H, W)`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, skips: [Var; NUM_SCALES]) -> Var {
        let mut x = skips[2];
        for (s, stage) in self.stages.iter().enumerate() {
            if s > 0 {
                let (_, _, h, w) = ctx.tape.value(x).dims4();
                let up = ctx.tape.resize_bilinear(x, 2 * h, 2 * w);
                x = ctx.tape.concat(&[up, skips[2 - s]], 1);
            }
            x = stage[0].forward(ctx, x);
            x = stage[1].forward(ctx, x);
        }
        // A 1x1 convolution commutes with bilinear resizing, so projecting
        // first is exact and cheaper.
        let logits = self.head.forward(ctx, x);
        let up = ctx.tape.resize_bilinear(logits, self.output_size, self.output_size);
        ctx.tape.sigmoid(up)
    }
}

/// Trainable part of the model.
#[derive(Clone, Debug)]
pub struct PrnNet {
    pub feature_fusion: Option<Fusion>,
    pub residual_fusion: Option<Fusion>,
    pub post_fusion: Option<Fusion>,
    pub msa: Option<Vec<MsaStack>>,
    pub decoder: Decoder,
    pub use_residuals: bool,
}

impl PrnNet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &PrnConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.encoder.channels;
        let wide = c.map(|x| 2 * x);
        let m = &cfg.model;
        let feature_fusion = m.mf.then(|| Fusion::new(store, "mf_features", c, rng));
        let residual_fusion = m.mf.then(|| Fusion::new(store, "mf_residuals", c, rng));
        let msa = if m.msa {
            Some(
                (0..NUM_SCALES)
                    .map(|j| MsaStack::new(store, &format!("msa{}", j + 1), wide[j], cfg.encoder.side(j), &cfg.msa, rng))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let post_fusion = m.mf.then(|| Fusion::new(store, "mf_post", wide, rng));
        let decoder = Decoder::new(store, wide, cfg.decoder_channels(), cfg.encoder.input_size, rng);
        Ok(Self { feature_fusion, residual_fusion, post_fusion, msa, decoder, use_residuals: m.mp })
    }

    /// Batched features and residuals `(n, c_j, h_j, w_j)` to probabilities `(n, 1, H, W)`.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        features: [Var; NUM_SCALES],
        residuals: [Var; NUM_SCALES],
    ) -> Result<Var> {
        let residuals = if self.use_residuals {
            residuals
        } else {
            residuals.map(|r| {
                let zeros = Tensor::zeros(ctx.tape.shape(r));
                ctx.tape.constant(zeros)
            })
        };
        let combined = match (&self.feature_fusion, &self.residual_fusion) {
            (Some(ff), Some(rf)) => fuse_and_concat(ctx, ff, rf, features, residuals)?,
            _ => [0, 1, 2].map(|j| ctx.tape.concat(&[features[j], residuals[j]], 1)),
        };
        let attended = match &self.msa {
            Some(stacks) => {
                let mut out = combined;
                for (j, stack) in stacks.iter().enumerate() {
                    out[j] = stack.forward(ctx, combined[j])?;
                }
                out
            }
            None => combined,
        };
        let skips = match &self.post_fusion {
            Some(f) => f.forward(ctx, attended)?,
            None => attended,
        };
        Ok(self.decoder.forward(ctx, skips))
    }
}

#[derive(Clone, Debug)]
pub struct PrnModel {
    pub config: PrnConfig,
    pub encoder: Encoder,
    pub bank: PrototypeBank,
    pub net: PrnNet,
    pub params: ParamStore<f32>,
}

pub const EVAL_CHUNK: usize = 16;

impl PrnModel {
    pub fn new(config: PrnConfig, encoder: Encoder, bank: PrototypeBank) -> Result<Self> {
        if encoder.config() != &config.encoder {
            return Err(PrnError::config("encoder was built from a different configuration"));
        }
        let mut params = ParamStore::new();
        let mut rng = rng::stream(config.seed, Stream::ModelInit);
        let net = PrnNet::new(&mut params, &config, &mut rng)?;
        Ok(Self { config, encoder, bank, net, params })
    }

    pub fn input_size(&self) -> usize {
        self.config.encoder.input_size
    }

    /// Frozen features and residuals of a batch `(n, 3, S, S)`.
    pub fn embed(&self, images: &Tensor<f32>) -> Result<([Tensor<f32>; NUM_SCALES], [Tensor<f32>; NUM_SCALES])> {
        let features = self.encoder.extract_batch(images)?;
        let residuals = self.bank.residual_batch(&features)?;
        Ok((features, residuals))
    }

    /// Records the forward pass of a batch on `ctx`; output `(n, 1, S, S)`.
    pub fn forward_on(&self, ctx: &mut Ctx<'_, f32>, images: &Tensor<f32>) -> Result<Var> {
        let (features, residuals) = self.embed(images)?;
        let f = features.map(|t| ctx.tape.constant(t));
        let r = residuals.map(|t| ctx.tape.constant(t));
        self.net.forward(ctx, f, r)
    }

    /// Eval-mode probabilities `(n, S, S)`.
    pub fn predict_batch(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let n = images.shape()[0];
        let s = self.input_size();
        let mut out = Vec::with_capacity(n * s * s);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let chunk = images.narrow(0, start, (start + EVAL_CHUNK).min(n));
            let mut ctx = Ctx::new(&self.params, false);
            let y = self.forward_on(&mut ctx, &chunk)?;
            out.extend_from_slice(ctx.tape.value(y).data());
        }
        Ok(Tensor::new(&[n, s, s], out))
    }

    pub fn forward(&self, image: &Image, source_id: &str) -> Result<ScoreMap> {
        check_image(image, self.input_size())?;
        let s = self.input_size();
        let map = self.predict_batch(&image.clone().reshape(&[1, 3, s, s]))?.reshape(&[s, s]);
        let image_score = image_score(map.data(), self.config.top_k())?;
        Ok(ScoreMap { map, image_score, source_id: source_id.to_string() })
    }

    pub fn score_images(&self, images: &[Image]) -> Result<Vec<(Tensor<f32>, f32)>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let s = self.input_size();
        for img in images {
            check_image(img, s)?;
        }
        let batch = Tensor::stack(images);
        let maps = self.predict_batch(&batch)?;
        (0..images.len())
            .map(|i| {
                let m = maps.slice_outer(i);
                let score = image_score(m.data(), self.config.top_k())?;
                Ok((m, score))
            })
            .collect()
    }

    pub fn config_hash(config: &PrnConfig) -> String {
        hex::encode(Sha256::digest(config.to_toml_string().as_bytes()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        for (name, array) in self.encoder.named_arrays() {
            ckpt.insert(name, array);
        }
        self.bank.store(&mut ckpt);
        for id in self.params.ids() {
            ckpt.insert(format!("model/{}", self.params.name(id)), self.params.get(id).clone());
        }
        ckpt.metadata.insert("config".into(), serde_json::Value::String(self.config.to_toml_string()));
        ckpt.metadata.insert("config_sha256".into(), serde_json::Value::String(Self::config_hash(&self.config)));
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let text = ckpt
            .metadata
            .get("config")
            .and_then(|v| v.as_str())
            .ok_or_else(|| PrnError::Integrity("checkpoint has no config snapshot".into()))?;
        let config = PrnConfig::from_toml_str(text)?;
        if ckpt.metadata.get("config_sha256").and_then(|v| v.as_str()) != Some(Self::config_hash(&config).as_str()) {
            return Err(PrnError::Integrity("config snapshot does not match its hash".into()));
        }
        let encoder_arrays: BTreeMap<String, Tensor<f32>> =
            ckpt.arrays.iter().filter(|(k, _)| k.starts_with("encoder/")).map(|(k, v)| (k.clone(), v.clone())).collect();
        let encoder = Encoder::from_arrays(&config.encoder, &encoder_arrays)?;
        let bank = PrototypeBank::load(ckpt)?;
        let mut model = Self::new(config, encoder, bank)?;
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let key = format!("model/{}", model.params.name(id));
            let array = ckpt.array(&key)?;
            if array.shape() != model.params.get(id).shape() {
                return Err(PrnError::Integrity(format!(
                    "`{key}` has shape {:?}, expected {:?}",
                    array.shape(),
                    model.params.get(id).shape()
                )));
            }
            *model.params.get_mut(id) = array.clone();
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ResidualDistance;
    use crate::prototype::fit_prototypes;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    pub(crate) fn tiny_model(cfg: PrnConfig) -> (PrnModel, Vec<Image>) {
        let encoder = Encoder::build(&cfg.encoder).unwrap();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let s = cfg.encoder.input_size;
        let images: Vec<Image> = (0..4).map(|_| Tensor::from_fn(&[3, s, s], |_| r.random::<f32>())).collect();
        let pyramids: Vec<_> = images.iter().map(|i| encoder.extract(i, "n").unwrap()).collect();
        let bank = fit_prototypes(&pyramids, 0.5, 50, 0, ResidualDistance::Abs).unwrap();
        (PrnModel::new(cfg, encoder, bank).unwrap(), images)
    }

    #[test]
    fn image_score_examples() {
        assert!((image_score(&[0.3; 64], 7).unwrap() - 0.3).abs() < 1e-7);
        let mut m = vec![0.1f32; 256];
        m[..100].fill(0.9);
        assert!((image_score(&m, 100).unwrap() - 0.9).abs() < 1e-6);
        assert!((image_score(&[0.2, 0.4], 10).unwrap() - 0.3).abs() < 1e-7);
        assert!(image_score(&[], 1).is_err());
        assert!(image_score(&[1.0], 0).is_err());
    }

    #[test]
    fn forward_is_bounded_and_deterministic() {
        let (model, images) = tiny_model(PrnConfig::default());
        let a = model.forward(&images[0], "a").unwrap();
        let b = model.forward(&images[0], "a").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.map.shape(), &[32, 32]);
        assert!(a.map.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(model.forward(&Tensor::zeros(&[3, 16, 16]), "x").is_err());
        let batch = model.score_images(&images).unwrap();
        assert_eq!(batch[0].0, a.map);
        assert_eq!(batch[0].1, a.image_score);
    }

    #[test]
    fn ablation_toggles_build_and_run() {
        for (mp, msa, mf) in [(false, false, false), (true, false, true), (false, true, true), (true, true, false)] {
            let mut cfg = PrnConfig::default();
            cfg.model.mp = mp;
            cfg.model.msa = msa;
            cfg.model.mf = mf;
            let (model, images) = tiny_model(cfg);
            assert_eq!(model.net.msa.is_some(), msa);
            assert_eq!(model.net.feature_fusion.is_some(), mf);
            let s = model.forward(&images[1], "x").unwrap();
            assert!(s.map.is_finite());
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward() {
        let (model, images) = tiny_model(PrnConfig::default());
        let bytes = model.to_checkpoint().to_bytes();
        let loaded = PrnModel::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(loaded.forward(&images[2], "x").unwrap(), model.forward(&images[2], "x").unwrap());
        assert_eq!(loaded.to_checkpoint().to_bytes(), bytes);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn top_k_matches_sort_and_is_monotone(values in prop::collection::vec(0.0f32..1.0, 1..300), k in 1usize..50) {
            let mut sorted = values.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let kk = k.min(sorted.len());
            let expect = sorted[..kk].iter().map(|&v| v as f64).sum::<f64>() / kk as f64;
            let got = image_score(&values, k).unwrap();
            prop_assert!((got as f64 - expect).abs() < 1e-6);
            prop_assert!(image_score(&values, k + 1).unwrap() <= got + 1e-6);
        }
    }
}
