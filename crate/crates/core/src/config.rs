//! Model, scoring and training configuration with the full-scale and
//! desk-scale profiles.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TadError};

/// Which parts of the pipeline are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Both tasks, fused through the memory-augmented attention stack.
    Full,
    /// Both tasks, attention stack without the memory layer.
    NoMemory,
    /// Both tasks, tokens fused by concatenation with a linear mix.
    ConcatOnly,
    /// Box prediction only; scored by prediction variance.
    FolOnly,
    /// Flow reconstruction only; scored by reconstruction error.
    FlowOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Self::Full,
        Self::NoMemory,
        Self::ConcatOnly,
        Self::FolOnly,
        Self::FlowOnly,
    ];

    pub fn uses_flow(self) -> bool {
        !matches!(self, Self::FolOnly)
    }

    pub fn uses_boxes(self) -> bool {
        !matches!(self, Self::FlowOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoMemory => "no_memory",
            Self::ConcatOnly => "concat_only",
            Self::FolOnly => "fol_only",
            Self::FlowOnly => "flow_only",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = TadError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| TadError::Config(format!("unknown variant {s:?}")))
    }
}

/// Positions fed to the sinusoidal embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// Global token at position 0, every object token at position 1. Keeps
    /// the stack equivariant under object reordering.
    TokenType,
    /// Position equals the row index.
    RowIndex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Token width D.
    pub d_model: usize,
    pub height: usize,
    pub width: usize,
    /// Channels of the three strided convolution stages.
    pub enc_channels: [usize; 3],
    /// Memory slots M per bank.
    pub memory_slots: usize,
    /// Hard-shrinkage threshold; `None` means 3/M.
    pub shrink_threshold: Option<f64>,
    pub shrink_eps: f64,
    /// Number of stacked attention blocks L.
    pub layers: usize,
    pub heads: usize,
    pub obs_len: usize,
    pub pred_len: usize,
    pub roi_size: usize,
    pub variant: Variant,
    /// Feed the encoder's lowest-resolution map to the flow decoder.
    pub use_skip: bool,
    /// One memory bank shared by all blocks instead of one per block.
    pub shared_memory: bool,
    pub position_mode: PositionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            height: 64,
            width: 64,
            enc_channels: [32, 64, 128],
            memory_slots: 100,
            shrink_threshold: None,
            shrink_eps: 1e-12,
            layers: 3,
            heads: 8,
            obs_len: 5,
            pred_len: 10,
            roi_size: 5,
            variant: Variant::Full,
            use_skip: true,
            shared_memory: false,
            position_mode: PositionMode::TokenType,
        }
    }
}

impl ModelConfig {
    pub fn threshold(&self) -> f64 {
        self.shrink_threshold
            .unwrap_or(3.0 / self.memory_slots as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TadError::Config(m));
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return fail(format!("d_model must be positive and even, got {}", self.d_model));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!("heads ({}) must divide d_model ({})", self.heads, self.d_model));
        }
        if self.height == 0 || self.width == 0 || self.height % 8 != 0 || self.width % 8 != 0 {
            return fail(format!(
                "flow size {}x{} must be a positive multiple of 8",
                self.height, self.width
            ));
        }
        if self.enc_channels.contains(&0) {
            return fail("encoder channels must be positive".into());
        }
        if self.memory_slots == 0 {
            return fail("memory_slots must be at least 1".into());
        }
        let lambda = self.threshold();
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return fail(format!("shrink_threshold must be >= 0, got {lambda}"));
        }
        if !(self.shrink_eps > 0.0) {
            return fail("shrink_eps must be > 0".into());
        }
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if self.obs_len == 0 || self.pred_len == 0 {
            return fail("obs_len and pred_len must be at least 1".into());
        }
        if self.roi_size < 2 {
            return fail("roi_size must be at least 2".into());
        }
        Ok(())
    }
}

/// Range over which min-max normalization is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// Over the whole concatenated evaluation series.
    Global,
    PerClip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    /// Number of past rollouts δ whose predictions for the current frame
    /// are compared.
    pub delta: usize,
    /// Weight of the reconstruction score in the fusion.
    pub alpha: f64,
    pub norm_scope: NormScope,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            delta: 5,
            alpha: 0.4,
            norm_scope: NormScope::Global,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self, pred_len: usize) -> Result<()> {
        if self.delta < 2 || self.delta > pred_len {
            return Err(TadError::Config(format!(
                "delta must lie in [2, pred_len={pred_len}], got {}",
                self.delta
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TadError::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub scoring: ScoringConfig,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lr: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Laptop-sized profile.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::default(),
            scoring: ScoringConfig::default(),
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.0002,
            lr: 1e-4,
            betas: [0.9, 0.999],
            weight_decay: 5e-4,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            grad_clip: 5.0,
        }
    }

    /// Full-scale profile: D=512, M=1000, batch 128, 100 epochs.
    pub fn full_scale() -> Self {
        Self {
            model: ModelConfig {
                d_model: 512,
                memory_slots: 1000,
                ..ModelConfig::default()
            },
            batch_size: 128,
            epochs: 100,
            ..Self::desk()
        }
    }

    /// Single-core profile: 32×32 flow, narrow encoder, D=32, M=50, eight
    /// epochs at a higher learning rate. One run over 200 synthetic clips
    /// takes under a minute.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig {
                d_model: 32,
                height: 32,
                width: 32,
                enc_channels: [8, 16, 32],
                memory_slots: 50,
                heads: 4,
                ..ModelConfig::default()
            },
            lr: 1e-3,
            batch_size: 16,
            epochs: 8,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scoring.validate(self.model.pred_len)?;
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TadError::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(TadError::Config("lr and batch_size must be positive".into()));
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return Err(TadError::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| TadError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `TAD_<FIELD>` environment overrides (field name upper-cased,
    /// value parsed as a TOML literal, bare words taken as strings).
    pub fn apply_env_overrides(&self, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        apply_overrides(self, "TAD_", vars)
    }

    pub fn hash_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Overrides top-level fields of any serializable config from `PREFIX<FIELD>`
/// variables.
pub fn apply_overrides<T>(
    cfg: &T,
    prefix: &str,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<T>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    let mut table = toml::Table::try_from(cfg).map_err(|e| TadError::Config(e.to_string()))?;
    let keys: Vec<String> = table.keys().cloned().collect();
    let mut changed = false;
    for (name, raw) in vars {
        let Some(field) = name.strip_prefix(prefix) else { continue };
        let Some(key) = keys.iter().find(|k| k.eq_ignore_ascii_case(field)) else {
            continue;
        };
        let value = parse_literal(&raw);
        table.insert(key.clone(), value);
        changed = true;
    }
    if !changed {
        return toml::from_str(&toml::to_string(cfg).map_err(|e| TadError::Config(e.to_string()))?)
            .map_err(|e| TadError::Config(e.to_string()));
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| TadError::Config(e.to_string()))
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
