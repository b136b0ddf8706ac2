//! Closed-form decoding-FLOPs accounting per strategy (full, TOVA-style,
//! Quest-style page scoring, AsyncSpade) with Qwen3 model presets.
//!
//! Counts follow the 2-FLOPs-per-multiply-accumulate convention throughout;
//! arithmetic is u128 so no realistic configuration can overflow.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FlopsError {
    #[error("invalid model config: {0}")]
    InvalidModel(String),
    #[error("invalid strategy config: {0}")]
    InvalidStrategy(String),
    #[error("unknown model preset '{name}'; known presets: {known}")]
    UnknownPreset { name: String, known: String },
}

/// Transformer architecture dimensions driving the FLOPs formulas.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub layers: u64,
    pub hidden: u64,
    pub query_heads: u64,
    pub kv_heads: u64,
    /// Head dim is independent of hidden/query_heads (Qwen3-32B has
    /// hidden ≠ heads × head_dim), so it is a required field.
    pub head_dim: u64,
    pub intermediate: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), FlopsError> {
        let fields = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("query_heads", self.query_heads),
            ("kv_heads", self.kv_heads),
            ("head_dim", self.head_dim),
            ("intermediate", self.intermediate),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(FlopsError::InvalidModel(format!("{name} must be positive")));
            }
        }
        if self.query_heads % self.kv_heads != 0 {
            return Err(FlopsError::InvalidModel(format!(
                "query heads {} not divisible by kv heads {}",
                self.query_heads, self.kv_heads
            )));
        }
        Ok(())
    }
}

/// Known model presets. Head dim is 128 for the whole Qwen3 dense family.
pub fn model_presets() -> Vec<ModelConfig> {
    let preset = |name: &str, layers, hidden, query_heads, intermediate| ModelConfig {
        name: name.into(),
        layers,
        hidden,
        query_heads,
        kv_heads: 8,
        head_dim: 128,
        intermediate,
    };
    vec![
        preset("qwen3-1.7b", 28, 2048, 16, 6144),
        preset("qwen3-4b", 36, 2560, 32, 9728),
        preset("qwen3-8b", 36, 4096, 32, 12288),
        preset("qwen3-32b", 64, 5120, 64, 25600),
    ]
}

pub fn model_preset(name: &str) -> Result<ModelConfig, FlopsError> {
    let presets = model_presets();
    presets
        .iter()
        .find(|m| m.name.eq_ignore_ascii_case(name))
        .cloned()
        .ok_or_else(|| FlopsError::UnknownPreset {
            name: name.into(),
            known: presets
                .iter()
                .map(|m| m.name.as_str())
                .collect::<Vec<_>>()
                .join(", "),
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Full,
    Tova,
    Quest,
    AsyncSpade,
}

impl StrategyKind {
    pub fn all() -> [StrategyKind; 4] {
        [Self::Full, Self::Tova, Self::Quest, Self::AsyncSpade]
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Tova => "tova",
            Self::Quest => "quest",
            Self::AsyncSpade => "asyncspade",
        }
    }
}

/// Decode-step sparsity strategy parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Total sequence length T.
    pub context: u64,
    /// Selected tokens C.
    pub selected: u64,
    /// Page size P (Quest only).
    pub page: u64,
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<(), FlopsError> {
        if self.selected > self.context {
            return Err(FlopsError::InvalidStrategy(format!(
                "selected C = {} exceeds context T = {}",
                self.selected, self.context
            )));
        }
        if self.page == 0 {
            return Err(FlopsError::InvalidStrategy("page size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Dense linear-layer cost per decoded token:
/// l·(2·2·H·q·h + 2·2·kv·h·H + 3·2·H·i).
pub fn param_flops(m: &ModelConfig) -> u128 {
    let (l, hd, q, kv, h, i) = (
        m.layers as u128,
        m.hidden as u128,
        m.query_heads as u128,
        m.kv_heads as u128,
        m.head_dim as u128,
        m.intermediate as u128,
    );
    l * (2 * 2 * hd * q * h + 2 * 2 * kv * h * hd + 3 * 2 * hd * i)
}

/// Attention cost per decoded token under one sparsity strategy.
/// Quest's T/P page-score term uses ceiling division: partial pages still
/// cost a score evaluation.
pub fn attn_flops(m: &ModelConfig, s: &StrategyConfig) -> u128 {
    let (l, q, h) = (m.layers as u128, m.query_heads as u128, m.head_dim as u128);
    let t = s.context as u128;
    let c = s.selected as u128;
    let p = s.page as u128;
    match s.kind {
        StrategyKind::Full => l * 4 * q * h * t,
        StrategyKind::Tova => l * (4 * q * h * c + 2 * q * h * t),
        StrategyKind::Quest => l * (4 * q * h * c + 2 * q * h * t.div_ceil(p)),
        StrategyKind::AsyncSpade => l * 4 * q * h * c,
    }
}

pub fn total_flops(m: &ModelConfig, s: &StrategyConfig) -> u128 {
    param_flops(m) + attn_flops(m, s)
}
