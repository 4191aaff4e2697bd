//! Run configuration, persisted as TOML and embedded in checkpoints.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{PrnError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrnConfig {
    /// Root seed for model initialization, batch sampling, augmentation and
    /// dataset indexing.
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub prototypes: PrototypeConfig,
    pub model: ModelConfig,
    pub msa: MsaConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for PrnConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder: EncoderConfig::default(),
            prototypes: PrototypeConfig::default(),
            model: ModelConfig::default(),
            msa: MsaConfig::default(),
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub channels: [usize; 3],
    pub seed: u64,
    /// Standard deviation of the random convolution weights.
    pub weight_std: f64,
    pub pretrained_weights: Option<PathBuf>,
    /// Per-channel `(x - mean) / std` before the stem.
    pub normalize_input: bool,
    pub input_mean: [f32; 3],
    pub input_std: [f32; 3],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            channels: [8, 16, 32],
            seed: 0,
            weight_std: 0.05,
            pretrained_weights: None,
            normalize_input: false,
            input_mean: [0.485, 0.456, 0.406],
            input_std: [0.229, 0.224, 0.225],
        }
    }
}

impl EncoderConfig {
    /// Channel widths and input size used for 256x256 inputs.
    pub fn full_scale() -> Self {
        Self { input_size: 256, channels: [64, 128, 256], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(PrnError::config(format!(
                "encoder input_size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        let [c1, c2, c3] = self.channels;
        if c1 == 0 || c1 >= c2 || c2 >= c3 {
            return Err(PrnError::config(format!(
                "encoder channels {:?} must be positive and strictly increasing",
                self.channels
            )));
        }
        if !(self.weight_std > 0.0 && self.weight_std.is_finite()) {
            return Err(PrnError::config("encoder weight_std must be positive"));
        }
        Ok(())
    }

    /// Spatial side of scale `j` (0-based): `input_size / 2^(j+2)`.
    pub fn side(&self, scale: usize) -> usize {
        self.input_size >> (scale + 2)
    }

    pub fn scale_shape(&self, scale: usize) -> [usize; 3] {
        [self.channels[scale], self.side(scale), self.side(scale)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualDistance {
    /// `|a - b|` per element.
    Abs,
    /// `(a - b)^2` per element.
    Squared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrototypeConfig {
    pub ratio: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub distance: ResidualDistance,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        Self { ratio: 0.1, max_iter: 300, seed: 0, distance: ResidualDistance::Abs }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Multi-scale prototype residuals; off replaces residuals by zeros.
    pub mp: bool,
    /// Multi-size self-attention; off is an identity pass-through.
    pub msa: bool,
    /// Multi-scale fusion; off is a per-scale identity.
    pub mf: bool,
    /// Output widths of the three decoder stages (deepest first). Defaults to
    /// the encoder widths in reverse.
    pub decoder_channels: Option<[usize; 3]>,
    /// Pixels averaged into the image score. Defaults to the 100-of-256x256
    /// fraction scaled to the input size.
    pub top_k: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { mp: true, msa: true, mf: true, decoder_channels: None, top_k: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionScale {
    /// Divide logits by the flattened patch dimension.
    Paper,
    /// Divide logits by its square root.
    Sqrt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsaConfig {
    pub stack_depth: usize,
    pub embed_dim_cap: Option<usize>,
    pub attention_scale: AttentionScale,
}

impl Default for MsaConfig {
    fn default() -> Self {
        Self { stack_depth: 3, embed_dim_cap: Some(256), attention_scale: AttentionScale::Paper }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Object,
    Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub dataset_kind: DatasetKind,
    pub beta_range: [f32; 2],
    /// Target-area size bounds as fractions of the image area.
    pub target_area: [f64; 2],
    pub aug2_retries: usize,
    pub perlin_octaves: usize,
    pub perlin_persistence: f64,
    pub perlin_period: usize,
    pub perlin_threshold: f64,
    pub perlin_retries: usize,
    pub shuffle_grid: usize,
    /// Directory of external textures for heterologous anomalies. A seeded
    /// procedural pool is used when unset.
    pub texture_dir: Option<PathBuf>,
    pub procedural_textures: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dataset_kind: DatasetKind::Texture,
            beta_range: [0.2, 0.9],
            target_area: [0.02, 0.4],
            aug2_retries: 20,
            perlin_octaves: 4,
            perlin_persistence: 0.5,
            perlin_period: 8,
            perlin_threshold: 0.5,
            perlin_retries: 20,
            shuffle_grid: 8,
            texture_dir: None,
            procedural_textures: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub lambda: f64,
    pub n_seen_anomalies: usize,
    /// Extended anomalies from seen defects.
    pub ea: bool,
    /// Heterologous simulated anomalies.
    pub hea: bool,
    /// Homologous simulated anomalies.
    pub hoa: bool,
    /// Constrain synthetic defects to sampled target areas.
    pub ta: bool,
    /// Save a checkpoint every this many steps (0 disables intermediate saves).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            steps: 200,
            batch_size: 16,
            focal_alpha: 0.5,
            focal_gamma: 4.0,
            lambda: 5.0,
            n_seen_anomalies: 10,
            ea: true,
            hea: true,
            hoa: true,
            ta: true,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub pro_fpr_limit: f64,
    /// Subsample PRO thresholds to this many quantiles when set.
    pub max_thresholds: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { pro_fpr_limit: 0.3, max_thresholds: None }
    }
}

impl PrnConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| PrnError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PrnError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| e.context(format!("loading {}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn top_k(&self) -> usize {
        self.model.top_k.unwrap_or_else(|| default_top_k(self.encoder.input_size, self.encoder.input_size))
    }

    pub fn decoder_channels(&self) -> [usize; 3] {
        self.model.decoder_channels.unwrap_or({
            let [c1, c2, c3] = self.encoder.channels;
            [c3, c2, c1]
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let p = &self.prototypes;
        if !(p.ratio > 0.0 && p.ratio <= 1.0) {
            return Err(PrnError::config(format!("prototype ratio {} must lie in (0, 1]", p.ratio)));
        }
        if p.max_iter == 0 {
            return Err(PrnError::config("prototype max_iter must be at least 1"));
        }
        if self.msa.stack_depth == 0 {
            return Err(PrnError::config("msa stack_depth must be at least 1"));
        }
        if self.msa.embed_dim_cap == Some(0) {
            return Err(PrnError::config("msa embed_dim_cap must be at least 1"));
        }
        if self.decoder_channels().iter().any(|&c| c == 0) {
            return Err(PrnError::config("decoder channels must be positive"));
        }
        if self.model.top_k == Some(0) {
            return Err(PrnError::config("top_k must be at least 1"));
        }
        let t = &self.train;
        if !(t.lambda > 0.0 && t.focal_alpha > 0.0 && t.focal_gamma > 0.0) {
            return Err(PrnError::config("lambda, focal alpha and focal gamma must be positive"));
        }
        if t.focal_alpha >= 1.0 {
            return Err(PrnError::config("focal alpha must be below 1"));
        }
        if !(t.lr > 0.0) || t.weight_decay < 0.0 {
            return Err(PrnError::config("learning rate must be positive and weight decay non-negative"));
        }
        if t.batch_size < 2 {
            return Err(PrnError::config("batch size must be at least 2"));
        }
        let s = &self.synth;
        if !(0.0 <= s.beta_range[0] && s.beta_range[0] <= s.beta_range[1] && s.beta_range[1] <= 1.0) {
            return Err(PrnError::config("beta_range must be an ordered sub-interval of [0, 1]"));
        }
        if !(0.0 < s.target_area[0] && s.target_area[0] <= s.target_area[1] && s.target_area[1] <= 1.0) {
            return Err(PrnError::config("target_area must be an ordered sub-interval of (0, 1]"));
        }
        if s.shuffle_grid == 0 || s.perlin_period == 0 || s.perlin_octaves == 0 {
            return Err(PrnError::config("shuffle grid, perlin period and octaves must be positive"));
        }
        if !(self.eval.pro_fpr_limit > 0.0 && self.eval.pro_fpr_limit <= 1.0) {
            return Err(PrnError::config("pro_fpr_limit must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// `round(100 * h * w / 256^2)`, at least 1.
pub fn default_top_k(height: usize, width: usize) -> usize {
    ((100.0 * (height * width) as f64 / 65536.0).round() as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = PrnConfig::default();
        cfg.validate().unwrap();
        let back = PrnConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = PrnConfig::from_toml_str("seed = 3\n[train]\nsteps = 5\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.steps, 5);
        assert_eq!(cfg.train.batch_size, 16);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PrnConfig::from_toml_str("[train]\nstepz = 5\n").is_err());
    }

    #[test]
    fn top_k_scales_with_area() {
        assert_eq!(default_top_k(256, 256), 100);
        assert_eq!(default_top_k(32, 32), 2);
        assert_eq!(default_top_k(8, 8), 1);
    }

    #[test]
    fn input_size_must_divide_by_32() {
        let cfg = EncoderConfig { input_size: 24, ..EncoderConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = EncoderConfig { channels: [8, 8, 16], ..EncoderConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
