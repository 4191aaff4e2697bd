//! Batch assembly, the Adam optimizer and the training loop.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use prn_tensor::Tensor;
use rand::seq::index::sample;
use rand::Rng;

use crate::config::{PrnConfig, TrainConfig};
use crate::encoder::{Encoder, FeaturePyramid};
use crate::error::{PrnError, Result};
use crate::imaging::{check_image, Image, Mask};
use crate::loss::{loss_node, LossValue, LossWeights};
use crate::model::PrnModel;
use crate::nn::{apply_bn_updates, Ctx, ParamId, ParamKind, ParamStore, BN_MOMENTUM};
use crate::prototype::fit_prototypes;
use crate::rng::{self, Stream};
use crate::synth::{
    extended_anomaly, sample_beta, sample_target_area, simulated_anomaly, AnomalySample, SampleKind, TargetArea,
    TexturePool,
};

/// Attempts per synthetic slot before a generation failure aborts the batch.
pub const MAX_SAMPLE_ATTEMPTS: usize = 32;

/// Everything the training loop draws from.
#[derive(Clone, Debug, Default)]
pub struct TrainingData {
    pub normals: Vec<Image>,
    /// Seen anomalous images with their ground-truth masks.
    pub seen: Vec<(Image, Mask)>,
    pub textures: TexturePool,
}

/// Number of samples of each kind in one batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Composition {
    pub normal: usize,
    pub ea: usize,
    pub hea: usize,
    pub hoa: usize,
}

impl Composition {
    /// Half normal, the rest split evenly between extended and simulated
    /// anomalies, simulated ones split evenly between HEA and HOA. Disabled
    /// strategies hand their share to the enabled ones.
    pub fn new(batch_size: usize, t: &TrainConfig) -> Result<Self> {
        let sa_on = t.hea || t.hoa;
        if !t.ea && !sa_on {
            return Ok(Self { normal: batch_size, ea: 0, hea: 0, hoa: 0 });
        }
        let normal = batch_size / 2;
        let rest = batch_size - normal;
        let ea = match (t.ea, sa_on) {
            (true, true) => rest / 2,
            (true, false) => rest,
            _ => 0,
        };
        let sa = rest - ea;
        let hea = match (t.hea, t.hoa) {
            (true, true) => sa / 2,
            (true, false) => sa,
            _ => 0,
        };
        let c = Self { normal, ea, hea, hoa: sa - hea };
        let short = (c.normal == 0) || (t.ea && c.ea == 0) || (t.hea && c.hea == 0) || (t.hoa && c.hoa == 0);
        if short {
            return Err(PrnError::config(format!(
                "batch size {batch_size} leaves an enabled sample kind empty ({c:?})"
            )));
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.normal + self.ea + self.hea + self.hoa
    }

    /// Slot kinds in batch order.
    pub fn kinds(&self) -> Vec<SampleKind> {
        let mut v = vec![SampleKind::Normal; self.normal];
        v.extend(std::iter::repeat_n(SampleKind::Ea, self.ea));
        v.extend(std::iter::repeat_n(SampleKind::Hea, self.hea));
        v.extend(std::iter::repeat_n(SampleKind::Hoa, self.hoa));
        v
    }
}

/// Provenance of one batch slot.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub kind: SampleKind,
    pub normal_index: usize,
    pub seen_index: Option<usize>,
    pub beta: Option<f32>,
    /// Sub-stream index the slot was generated from.
    pub stream_index: u64,
    pub attempts: usize,
}

impl fmt::Display for ManifestEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(normal={}", self.kind.as_str(), self.normal_index)?;
        if let Some(s) = self.seen_index {
            write!(f, " seen={s}")?;
        }
        if let Some(b) = self.beta {
            write!(f, " beta={b:.4}")?;
        }
        write!(f, " stream={} attempts={})", self.stream_index, self.attempts)
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `(n, 3, S, S)`.
    pub images: Tensor<f32>,
    /// `(n, 1, S, S)`, zero for normal samples.
    pub masks: Tensor<f32>,
    pub manifest: Vec<ManifestEntry>,
}

pub fn manifest_summary(manifest: &[ManifestEntry]) -> String {
    manifest.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

fn target_area(normal: &Image, cfg: &PrnConfig, rng: &mut impl Rng) -> TargetArea {
    let (h, w) = crate::imaging::image_size(normal);
    if cfg.train.ta {
        sample_target_area(normal, cfg.synth.dataset_kind, cfg.synth.target_area, rng)
    } else {
        TargetArea::full_frame(h, w, cfg.synth.dataset_kind)
    }
}

/// One synthetic anomaly of `kind`, resampling the base image, target area
/// and blend factor whenever generation misses. Returns the sample, the
/// normal and seen indices used and the number of attempts.
pub fn synthesize(
    kind: SampleKind,
    data: &TrainingData,
    cfg: &PrnConfig,
    rng: &mut impl Rng,
) -> Result<(AnomalySample, usize, Option<usize>, usize)> {
    if data.normals.is_empty() {
        return Err(PrnError::config("anomaly synthesis needs at least one normal image"));
    }
    if kind == SampleKind::Ea && data.seen.is_empty() {
        return Err(PrnError::config("extended anomalies requested but the seen-anomaly pool is empty"));
    }
    let mut last = None;
    for attempt in 1..=MAX_SAMPLE_ATTEMPTS {
        let ni = rng.random_range(0..data.normals.len());
        let normal = &data.normals[ni];
        let target = target_area(normal, cfg, rng);
        let beta = sample_beta(&cfg.synth, rng);
        let (result, seen) = match kind {
            SampleKind::Ea => {
                let si = rng.random_range(0..data.seen.len());
                let (img, mask) = &data.seen[si];
                (extended_anomaly(normal, img, mask, &target, &cfg.synth, beta, rng), Some(si))
            }
            SampleKind::Hea | SampleKind::Hoa => {
                (simulated_anomaly(normal, kind, &data.textures, &target, &cfg.synth, beta, rng), None)
            }
            other => return Err(PrnError::Generation(format!("{other:?} is not a synthetic kind"))),
        };
        match result {
            Ok(s) => return Ok((s, ni, seen, attempt)),
            Err(e @ PrnError::Generation(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap().context(format!("{} attempts for a {} sample", MAX_SAMPLE_ATTEMPTS, kind.as_str())))
}

/// Batch `step` under the fixed composition; fully determined by the root
/// seed, the step and the data.
pub fn assemble_batch(data: &TrainingData, cfg: &PrnConfig, comp: &Composition, step: u64) -> Result<Batch> {
    let kinds = comp.kinds();
    if data.normals.len() < comp.normal.max(1) {
        return Err(PrnError::config(format!(
            "{} normal images cannot fill {} normal slots",
            data.normals.len(),
            comp.normal
        )));
    }
    if comp.ea > 0 && data.seen.is_empty() {
        return Err(PrnError::config("extended anomalies requested but the seen-anomaly pool is empty"));
    }
    let mut pick = rng::substream(cfg.seed, Stream::BatchSampling, step);
    let normal_slots = sample(&mut pick, data.normals.len(), comp.normal).into_vec();
    let size = cfg.encoder.input_size;
    let mut images = Vec::with_capacity(kinds.len());
    let mut masks = Vec::with_capacity(kinds.len());
    let mut manifest = Vec::with_capacity(kinds.len());
    for (slot, &kind) in kinds.iter().enumerate() {
        let stream_index = step * kinds.len() as u64 + slot as u64;
        if kind == SampleKind::Normal {
            let ni = normal_slots[slot];
            images.push(data.normals[ni].clone());
            masks.push(Tensor::zeros(&[1, size, size]));
            manifest.push(ManifestEntry { kind, normal_index: ni, seen_index: None, beta: None, stream_index, attempts: 1 });
            continue;
        }
        let mut rng = rng::substream(cfg.seed, Stream::Augmentation, stream_index);
        let (s, ni, seen_index, attempts) = synthesize(kind, data, cfg, &mut rng)?;
        images.push(s.image);
        masks.push(s.mask.to_tensor().reshape(&[1, size, size]));
        manifest.push(ManifestEntry { kind, normal_index: ni, seen_index, beta: s.beta, stream_index, attempts });
    }
    for img in &images {
        check_image(img, size)?;
    }
    Ok(Batch { images: Tensor::stack(&images), masks: Tensor::stack(&masks), manifest })
}

/// Adam with L2 weight decay added to the gradients of [`ParamKind::Weight`]
/// parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[(ParamId, Tensor<f32>)]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (id, g) in grads {
            assert!(store.is_trainable(*id), "optimizer got a gradient for frozen `{}`", store.name(*id));
            let decay = if store.kind(*id) == ParamKind::Weight { self.weight_decay } else { 0.0 };
            let (m, v) = self.moments.entry(*id).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let p = store.get_mut(*id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] as f64 + decay * p[i] as f64;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p[i] = (p[i] as f64 - update) as f32;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    /// 1-based.
    pub step: usize,
    pub loss: f64,
    pub smooth_l1: f64,
    pub focal: f64,
    pub wall_ms: u128,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} loss={:.6} smoothl1={:.6} focal={:.6} wall_ms={}",
            self.step, self.loss, self.smooth_l1, self.focal, self.wall_ms
        )
    }
}

pub fn loss_weights(t: &TrainConfig) -> LossWeights {
    LossWeights { alpha: t.focal_alpha, gamma: t.focal_gamma, lambda: t.lambda }
}

/// Forward, backward and one optimizer update. Returns the loss and the
/// parameter gradients of the step.
pub fn train_step(
    model: &mut PrnModel,
    adam: &mut Adam,
    batch: &Batch,
    weights: LossWeights,
) -> Result<(LossValue<f32>, Vec<(ParamId, Tensor<f32>)>)> {
    let (value, grads, updates) = {
        let mut ctx = Ctx::new(&model.params, true);
        let out = model.forward_on(&mut ctx, &batch.images)?;
        let (root, value) = loss_node(&mut ctx, out, &batch.masks, weights)?;
        if !value.total.is_finite() {
            return Ok((value, Vec::new()));
        }
        let mut g = ctx.tape.backward(root);
        let grads = ctx.param_grads(&mut g);
        (value, grads, ctx.take_bn_updates())
    };
    adam.step(&mut model.params, &grads);
    apply_bn_updates(&mut model.params, updates, BN_MOMENTUM);
    Ok((value, grads))
}

/// Frozen encoder, prototypes fitted on the normal pool and a freshly
/// initialized network.
pub fn prepare_model(config: &PrnConfig, normals: &[Image]) -> Result<PrnModel> {
    config.validate()?;
    if normals.is_empty() {
        return Err(PrnError::config("training needs at least one normal image"));
    }
    let encoder = Encoder::build(&config.encoder)?;
    let pyramids: Vec<FeaturePyramid> = normals
        .iter()
        .enumerate()
        .map(|(i, img)| encoder.extract(img, &format!("normal{i}")))
        .collect::<Result<_>>()?;
    let p = &config.prototypes;
    let bank = fit_prototypes(&pyramids, p.ratio, p.max_iter, p.seed, p.distance)?;
    PrnModel::new(config.clone(), encoder, bank)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: PrnModel,
    pub log: Vec<StepLog>,
}

/// Runs `config.train.steps` optimizer steps. `on_step` sees every log
/// entry and the model after the update.
pub fn train(
    config: &PrnConfig,
    data: &TrainingData,
    mut on_step: impl FnMut(&StepLog, &PrnModel) -> Result<()>,
) -> Result<TrainOutcome> {
    let t = &config.train;
    let comp = Composition::new(t.batch_size, t)?;
    if comp.ea > 0 && data.seen.is_empty() {
        return Err(PrnError::config("extended anomalies are enabled but no seen anomalies were provided"));
    }
    let mut model = prepare_model(config, &data.normals)?;
    let mut adam = Adam::new(t.lr, t.weight_decay);
    let weights = loss_weights(t);
    let mut log = Vec::with_capacity(t.steps);
    for step in 1..=t.steps {
        let start = Instant::now();
        let batch = assemble_batch(data, config, &comp, step as u64 - 1)?;
        let (value, _) = train_step(&mut model, &mut adam, &batch, weights)?;
        if !value.total.is_finite() {
            return Err(PrnError::Diverged {
                step,
                detail: format!(
                    "loss {} (smoothl1 {}, focal {}); batch: {}",
                    value.total,
                    value.smooth_l1,
                    value.focal,
                    manifest_summary(&batch.manifest)
                ),
            });
        }
        let entry = StepLog {
            step,
            loss: value.total,
            smooth_l1: value.smooth_l1,
            focal: value.focal,
            wall_ms: start.elapsed().as_millis(),
        };
        log::info!("{entry}");
        on_step(&entry, &model)?;
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}
