//! Run configuration: JSON-serializable records with defaults for every key,
//! dataset presets, validation and the canonical config hash.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneSpec, FreezePolicy};
use crate::channel_text::{TextQuality, DEFAULT_TEXT_LEN};
use crate::dataset::{FewShotMode, MissingPolicy, SplitSpec};
use crate::error::{Error, Result};
use crate::synthetic::SyntheticSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F64 => DType::F64,
            Precision::F32 => DType::F32,
        }
    }
}

/// What the TS layer at depth `i > 1` consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CrossFeed {
    /// `Z_cross^{i-1}`: fused features flow into the next TS layer.
    #[default]
    Forward,
    /// `Z_ts^{i-1}`: the TS trunk never sees fused features.
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Cmf,
    Sum,
    Concat,
    Attention,
}

/// Which PLM features feed the PLM head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadSource {
    #[default]
    Mix,
    Plm,
}

/// Which head's forecast is reported by evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Output {
    #[default]
    Ts,
    Plm,
}

/// Component switches used by ablations. Everything on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Components {
    /// Whole PLM branch (off = TS branch alone).
    pub plm: bool,
    pub channel_layer: bool,
    pub extractor: bool,
    pub text: bool,
    pub memory: bool,
    pub current: bool,
    pub gating: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            plm: true,
            channel_layer: true,
            extractor: true,
            text: true,
            memory: true,
            current: true,
            gating: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_len: usize,
    pub horizon: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub text_len: usize,
    pub eps: f64,
    pub gamma: f64,
    /// Extractor width; `None` means a quarter of the backbone width.
    pub d_r: Option<usize>,
    pub d_t: usize,
    pub ts_heads: usize,
    pub ts_ffn_mult: usize,
    pub cross_feed: CrossFeed,
    pub fusion: Fusion,
    pub cmf_heads: usize,
    pub plm_head_source: HeadSource,
    pub output: Output,
    /// Recompute the global map from each layer's channel tokens.
    pub mg_per_layer: bool,
    /// Give the channel layers their own copy of each backbone block.
    pub disjoint_blocks: bool,
    /// Let the optimizer update the extractor as well.
    pub train_extractor: bool,
    pub components: Components,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_len: 96,
            horizon: 96,
            patch_len: 16,
            stride: 8,
            text_len: DEFAULT_TEXT_LEN,
            eps: 0.4,
            gamma: 0.9,
            d_r: None,
            d_t: 128,
            ts_heads: 8,
            ts_ffn_mult: 4,
            cross_feed: CrossFeed::Forward,
            fusion: Fusion::Cmf,
            cmf_heads: 1,
            plm_head_source: HeadSource::Mix,
            output: Output::Ts,
            mg_per_layer: false,
            disjoint_blocks: false,
            train_extractor: false,
            components: Components::default(),
            precision: Precision::F64,
        }
    }
}

impl ModelConfig {
    pub fn n_patches(&self) -> usize {
        (self.input_len - self.patch_len) / self.stride + 1
    }

    /// Token count of `Z_plm`: temporal tokens plus the channel token when present.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + usize::from(self.components.channel_layer)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.patch_len == 0 || self.stride == 0 {
            return err("patch_len and stride must be positive".into());
        }
        if self.input_len < self.patch_len {
            return err(format!(
                "input_len {} shorter than patch_len {}",
                self.input_len, self.patch_len
            ));
        }
        if self.horizon == 0 {
            return err("horizon must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.eps) {
            return err(format!("eps = {} outside [0, 1]", self.eps));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return err(format!("gamma = {} outside [0, 1]", self.gamma));
        }
        if self.d_t == 0 || self.ts_heads == 0 || !self.d_t.is_multiple_of(self.ts_heads) {
            return err(format!("d_t {} not divisible by ts_heads {}", self.d_t, self.ts_heads));
        }
        if self.cmf_heads == 0 || !self.d_t.is_multiple_of(self.cmf_heads) {
            return err(format!("d_t {} not divisible by cmf_heads {}", self.d_t, self.cmf_heads));
        }
        if self.text_len == 0 {
            return err("text_len must be positive".into());
        }
        let c = &self.components;
        let mut conflicts = Vec::new();
        if !c.plm {
            if self.output == Output::Plm {
                conflicts.push("output=plm requires the PLM branch");
            }
            if self.fusion != Fusion::Cmf {
                conflicts.push("fusion variants require the PLM branch");
            }
            if !c.channel_layer || !c.extractor || !c.text || !c.memory || !c.current || !c.gating {
                conflicts.push("PLM sub-component switches require the PLM branch");
            }
        }
        if !c.memory && !c.current {
            conflicts.push("memory and current attention cannot both be removed");
        }
        if self.fusion != Fusion::Cmf && (!c.memory || !c.current || !c.gating) {
            conflicts.push("memory/current/gating switches only apply to fusion=cmf");
        }
        if !c.channel_layer && (!c.extractor || !c.text || self.mg_per_layer) {
            conflicts.push("extractor/text switches require the channel layer");
        }
        if !conflicts.is_empty() {
            return err(format!("incompatible settings: {}", conflicts.join("; ")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps (across epochs).
    pub max_steps: Option<usize>,
    pub dropout: f64,
    pub freeze: FreezePolicy,
    /// Cap on validation windows scored per epoch (evenly spaced).
    pub max_val_windows: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.6,
            lr: 1e-4,
            weight_decay: 0.0,
            batch_size: 32,
            max_epochs: 10,
            patience: 3,
            seed: 2024,
            max_steps: None,
            dropout: 0.0,
            freeze: FreezePolicy::default(),
            max_val_windows: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda = {} outside [0, 1]", self.lambda)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Preset name (`ETTh1`, `Weather`, ...) or free-form label.
    pub name: String,
    pub path: Option<PathBuf>,
    /// `<channel>: <description>` lines.
    pub descriptions: Option<PathBuf>,
    /// Generate data instead of reading `path`.
    pub synthetic: Option<SyntheticSpec>,
    pub domain: String,
    pub frequency: String,
    pub split: SplitSpec,
    pub few_shot: Option<f64>,
    pub few_shot_mode: FewShotMode,
    pub missing: MissingPolicy,
    /// Standardize with train-split statistics before windowing.
    pub standardize: bool,
    pub window_stride: usize,
    pub text_quality: TextQuality,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            path: None,
            descriptions: None,
            synthetic: None,
            domain: "Synthetic".into(),
            frequency: "1step".into(),
            split: SplitSpec { train: 0.7, val: 0.1, test: 0.2 },
            few_shot: None,
            few_shot_mode: FewShotMode::Prefix,
            missing: MissingPolicy::Reject,
            standardize: false,
            window_stride: 1,
            text_quality: TextQuality::Clean,
        }
    }
}

/// Domain, sampling frequency and split ratios of the standard benchmarks.
pub fn preset(name: &str) -> Option<(&'static str, &'static str, SplitSpec)> {
    let ett = SplitSpec { train: 0.6, val: 0.2, test: 0.2 };
    let other = SplitSpec { train: 0.7, val: 0.1, test: 0.2 };
    Some(match name {
        "ETTh1" | "ETTh2" => ("Electricity", "1 hour", ett),
        "ETTm1" | "ETTm2" => ("Electricity", "15 mins", ett),
        "Electricity" => ("Electricity", "1 hour", other),
        "Weather" => ("Environment", "10 mins", other),
        "Traffic" => ("Transport", "1 hour", other),
        "ZafNoo" | "CzeLan" => ("Nature", "30 mins", other),
        _ => return None,
    })
}

impl DataConfig {
    /// Applies the preset for `name` (domain, frequency, split) when one exists.
    pub fn with_preset(mut self, name: &str) -> Self {
        self.name = name.to_string();
        if let Some((domain, freq, split)) = preset(name) {
            self.domain = domain.into();
            self.frequency = freq.into();
            self.split = split;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        if self.path.is_none() && self.synthetic.is_none() {
            return Err(Error::Config("data needs `path` or `synthetic`".into()));
        }
        if let Some(f) = self.few_shot {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("few_shot = {f} outside (0, 1]")));
            }
        }
        if self.window_stride == 0 {
            return Err(Error::Config("window_stride must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub backbone: BackboneSpec,
    pub train: TrainConfig,
    pub variant: String,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            backbone: BackboneSpec::default(),
            train: TrainConfig::default(),
            variant: "full".into(),
            out: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Small, fast setup on generated data and a stub backbone.
    pub fn quick(seed: u64) -> Self {
        Self {
            data: DataConfig {
                synthetic: Some(SyntheticSpec::default()),
                ..DataConfig::default()
            },
            model: ModelConfig {
                input_len: 96,
                horizon: 24,
                d_t: 16,
                ts_heads: 2,
                text_len: 64,
                ..ModelConfig::default()
            },
            backbone: BackboneSpec::stub(2, 16, 2, seed),
            train: TrainConfig {
                lr: 1e-3,
                batch_size: 16,
                max_epochs: 1,
                max_steps: Some(20),
                seed,
                max_val_windows: Some(64),
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.components.plm {
            self.backbone.validate()?;
        }
        Ok(())
    }

    /// Stable JSON used for hashing and artifacts.
    pub fn canonical_json(&self) -> Result<String> {
        // serde_json::Value sorts object keys, so the text is independent of field order.
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string(&value)?)
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.canonical_json()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}
