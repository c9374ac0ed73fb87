//! Run configuration: architecture, loss weights, augmentation and training.
//!
//! Every struct rejects unknown keys so a typo in a config file is an error
//! rather than a silently ignored setting. Missing keys take the defaults below.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingKind {
    Sigmoid,
    Tanh,
    None,
}

impl GatingKind {
    /// Gate value for a raw gate parameter.
    pub fn gate(self, a: f32) -> f32 {
        match self {
            GatingKind::Sigmoid => dmlf_tensor::sigmoid(a),
            GatingKind::Tanh => a.tanh(),
            GatingKind::None => 1.0,
        }
    }
}

/// Which rows of the MM block input act as cross-attention queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionScheme {
    /// Fusion tokens only.
    FOnly,
    /// Language and fusion tokens.
    TAndF,
    /// Language tokens only.
    TOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfwFineTune {
    Full,
    Lora { rank: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfwInit {
    FromLm,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AvInit {
    PreTune,
    PreFreeze,
    RandomTune,
}

impl std::str::FromStr for AvInit {
    type Err = crate::DmlfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre_tune" => Ok(AvInit::PreTune),
            "pre_freeze" => Ok(AvInit::PreFreeze),
            "random_tune" => Ok(AvInit::RandomTune),
            other => config_err(format!("unknown AV init mode '{other}'")),
        }
    }
}

/// MM block placement over LM layers `1..=n_layers`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmPlacement {
    /// `count` blocks every `stride` layers, counted back from the last layer.
    Every { count: usize, stride: usize },
    /// Explicit 1-based layer positions.
    Explicit(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Longest language sequence with a positional embedding.
    pub max_len: usize,
    pub n_f: usize,
    pub mm_placement: MmPlacement,
    pub gating: GatingKind,
    pub ffw_ft: FfwFineTune,
    pub ffw_init: FfwInit,
    pub fusion_scheme: FusionScheme,
    pub ffw_enabled: bool,
    /// Seed of the stand-in "pretrained" backbone, kept apart from the run seed
    /// so every run shares one frozen LM.
    pub lm_seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            d_model: 32,
            n_layers: 4,
            n_heads: 2,
            max_len: 32,
            n_f: 4,
            mm_placement: MmPlacement::Every { count: 2, stride: 2 },
            gating: GatingKind::Sigmoid,
            ffw_ft: FfwFineTune::Full,
            ffw_init: FfwInit::FromLm,
            fusion_scheme: FusionScheme::FOnly,
            ffw_enabled: true,
            lm_seed: 0,
        }
    }
}

impl MlmConfig {
    pub fn mm_positions(&self) -> Result<Vec<usize>> {
        match &self.mm_placement {
            MmPlacement::Every { count, stride } => {
                crate::mlm::build_mm_placement(self.n_layers, *count, *stride)
            }
            MmPlacement::Explicit(p) => {
                let mut p = p.clone();
                p.sort_unstable();
                p.dedup();
                if p.is_empty() {
                    return config_err("at least one MM block is required");
                }
                if p[0] == 0 || *p.last().unwrap() > self.n_layers {
                    return config_err(format!(
                        "MM positions {p:?} outside 1..={}",
                        self.n_layers
                    ));
                }
                Ok(p)
            }
        }
    }

    pub fn d_ffw(&self) -> usize {
        4 * self.d_model
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AvEncoderConfig {
    pub d_a_in: usize,
    pub d_v_in: usize,
    pub d_av: usize,
    pub n_enc_layers: usize,
    pub l_av: usize,
    pub n_heads: usize,
}

impl Default for AvEncoderConfig {
    fn default() -> Self {
        Self {
            d_a_in: 6,
            d_v_in: 6,
            d_av: 16,
            n_enc_layers: 1,
            l_av: 8,
            n_heads: 2,
        }
    }
}

impl AvEncoderConfig {
    /// Width of each modality encoder; the two are concatenated to `d_av`.
    pub fn d_enc(&self) -> usize {
        self.d_av / 2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mlm: MlmConfig,
    pub av: AvEncoderConfig,
    pub norm: NormKind,
    pub norm_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mlm: MlmConfig::default(),
            av: AvEncoderConfig::default(),
            norm: NormKind::LayerNorm,
            norm_eps: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_av: f32,
    pub lambda_t: f32,
    pub lambda_f: f32,
    pub lambda_lm: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

impl LossWeights {
    pub fn uniform(w: f32) -> Self {
        Self {
            lambda_av: w,
            lambda_t: w,
            lambda_f: w,
            lambda_lm: w,
        }
    }

    /// Weights used for the large English benchmark: every term at 1.
    pub fn mosei() -> Self {
        Self::uniform(1.0)
    }

    /// Weights used for the small English benchmark, LM term switched off.
    pub fn mosi() -> Self {
        Self {
            lambda_av: 0.8,
            lambda_t: 0.8,
            lambda_f: 0.4,
            lambda_lm: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugKind {
    None,
    Seqaug,
    Noise,
    Dropout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeqAugMode {
    Permute,
    Resample,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub kind: AugKind,
    pub p: f32,
    pub mode: SeqAugMode,
    pub sigma: f32,
    pub q: f32,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            kind: AugKind::Seqaug,
            p: 0.2,
            mode: SeqAugMode::Permute,
            sigma: 0.1,
            q: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    /// Cosine floor; `lr / 100` when absent.
    pub lr_min: Option<f32>,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_min: None,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 32,
            max_epochs: 300,
            early_stop_patience: 8,
        }
    }
}

impl TrainConfig {
    pub fn lr_min(&self) -> f32 {
        self.lr_min.unwrap_or(self.lr / 100.0)
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub aug: AugConfig,
    pub train: TrainConfig,
    pub av_init: AvInit,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            aug: AugConfig::default(),
            train: TrainConfig::default(),
            av_init: AvInit::RandomTune,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| crate::DmlfError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let l = &self.loss;
        for (name, w) in [
            ("lambda_av", l.lambda_av),
            ("lambda_t", l.lambda_t),
            ("lambda_f", l.lambda_f),
            ("lambda_lm", l.lambda_lm),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return config_err(format!("{name} must be a non-negative number"));
            }
        }
        let a = &self.aug;
        if !(0.0..=1.0).contains(&a.p) {
            return config_err(format!("aug.p = {} outside [0, 1]", a.p));
        }
        if !(a.sigma >= 0.0) {
            return config_err("aug.sigma must be >= 0");
        }
        if !(0.0..1.0).contains(&a.q) {
            return config_err(format!("aug.q = {} outside [0, 1)", a.q));
        }
        let t = &self.train;
        if !(t.lr > 0.0) || t.lr_min() < 0.0 || t.lr_min() > t.lr {
            return config_err("need 0 <= lr_min <= lr and lr > 0");
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return config_err("betas must lie in [0, 1)");
        }
        if t.batch_size == 0 || t.max_epochs == 0 {
            return config_err("batch_size and max_epochs must be positive");
        }
        if !(t.weight_decay >= 0.0) || !(t.adam_eps > 0.0) {
            return config_err("weight_decay must be >= 0 and adam_eps > 0");
        }
        Ok(())
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.mlm;
        if m.vocab_size < 2 || m.d_model == 0 || m.n_layers == 0 || m.max_len == 0 {
            return config_err("vocab_size >= 2, d_model, n_layers and max_len > 0 required");
        }
        if m.n_heads == 0 || !m.d_model.is_multiple_of(m.n_heads) {
            return config_err(format!(
                "d_model {} not divisible by n_heads {}",
                m.d_model, m.n_heads
            ));
        }
        if m.n_f == 0 {
            return config_err("n_f must be at least 1");
        }
        m.mm_positions()?;
        if let FfwFineTune::Lora { rank } = m.ffw_ft {
            if rank == 0 || rank > m.d_model {
                return config_err(format!(
                    "LoRA rank {rank} outside 1..={}",
                    m.d_model
                ));
            }
        }
        let av = &self.av;
        if av.l_av == 0 || av.d_a_in == 0 || av.d_v_in == 0 {
            return config_err("AV lengths and input dims must be positive");
        }
        if av.d_av == 0 || !av.d_av.is_multiple_of(2) {
            return config_err("d_av must be a positive even number");
        }
        if av.n_heads == 0 || !av.d_enc().is_multiple_of(av.n_heads) {
            return config_err(format!(
                "per-modality width {} not divisible by {} heads",
                av.d_enc(),
                av.n_heads
            ));
        }
        if !(self.norm_eps > 0.0) {
            return config_err("norm_eps must be positive");
        }
        Ok(())
    }
}
