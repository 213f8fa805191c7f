use std::fmt;
use std::str::FromStr;

use crate::error::{FpanError, Result};

/// Attention module placed after the feedback structure of each block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    None,
    /// Global context block: pyramid attention restricted to scale 1.
    Gc,
    /// Pyramid non-local block over `ModelConfig::pyramid_scales`.
    Pnlb,
}

impl AttentionKind {
    pub fn code(self) -> u8 {
        match self {
            AttentionKind::None => 0,
            AttentionKind::Gc => 1,
            AttentionKind::Pnlb => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(AttentionKind::None),
            1 => Some(AttentionKind::Gc),
            2 => Some(AttentionKind::Pnlb),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    /// Stage-one layers see the two previous outputs (otherwise only the last one, duplicated).
    pub feedforward_skips: bool,
    /// Run the second (feedback) stage.
    pub feedback_skips: bool,
    pub attention: AttentionKind,
}

/// The five ablation configurations, from plain stacked convolutions (P0)
/// to the full block with pyramid attention (P4).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AblationPreset {
    P0,
    P1,
    P2,
    P3,
    P4,
}

impl AblationPreset {
    pub const ALL: [AblationPreset; 5] = [
        AblationPreset::P0,
        AblationPreset::P1,
        AblationPreset::P2,
        AblationPreset::P3,
        AblationPreset::P4,
    ];

    pub fn ablation(self) -> Ablation {
        let (ff, fb, attention) = match self {
            AblationPreset::P0 => (false, false, AttentionKind::None),
            AblationPreset::P1 => (true, false, AttentionKind::None),
            AblationPreset::P2 => (true, true, AttentionKind::None),
            AblationPreset::P3 => (true, true, AttentionKind::Gc),
            AblationPreset::P4 => (true, true, AttentionKind::Pnlb),
        };
        Ablation {
            feedforward_skips: ff,
            feedback_skips: fb,
            attention,
        }
    }

    /// Inverse of [`AblationPreset::ablation`], if the switches match a preset.
    pub fn of(ablation: Ablation) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.ablation() == ablation)
    }
}

impl fmt::Display for AblationPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", *self as u8)
    }
}

impl FromStr for AblationPreset {
    type Err = FpanError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "P0" => Ok(AblationPreset::P0),
            "P1" => Ok(AblationPreset::P1),
            "P2" => Ok(AblationPreset::P2),
            "P3" => Ok(AblationPreset::P3),
            "P4" => Ok(AblationPreset::P4),
            other => Err(FpanError::config(format!("unknown ablation preset '{other}' (expected P0..P4)"))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub scale: usize,
    pub channels: usize,
    pub num_blocks: usize,
    /// Convolutions per stage of the feedback structure.
    pub stage_depth: usize,
    pub pyramid_scales: Vec<usize>,
    pub reduction: usize,
    pub ablation: Ablation,
}

/// Parameter budget the full-size preset is sized against.
pub const FULL_SIZE_TARGET: usize = 11_700_000;

impl Default for ModelConfig {
    /// Desk-scale defaults: 64 channels, 4 convolutions per stage,
    /// scales {1, 2, 4}, reduction 16, two blocks, x4.
    fn default() -> Self {
        ModelConfig {
            scale: 4,
            channels: 64,
            num_blocks: 2,
            stage_depth: 4,
            pyramid_scales: vec![1, 2, 4],
            reduction: 16,
            ablation: AblationPreset::P4.ablation(),
        }
    }
}

impl ModelConfig {
    /// Eight channels, one block, two convolutions per stage.
    pub fn tiny(scale: usize) -> Self {
        ModelConfig {
            scale,
            channels: 8,
            num_blocks: 1,
            stage_depth: 2,
            pyramid_scales: vec![1, 2, 4],
            reduction: 2,
            ablation: AblationPreset::P4.ablation(),
        }
    }

    /// Full-size configuration with the block count chosen as the smallest
    /// value whose parameter count reaches [`FULL_SIZE_TARGET`].
    pub fn full(scale: usize) -> Result<Self> {
        let base = ModelConfig {
            scale,
            num_blocks: 1,
            ..ModelConfig::default()
        };
        base.validate()?;
        let per_block = crate::model::count_params_for(&ModelConfig { num_blocks: 2, ..base.clone() })?
            - crate::model::count_params_for(&base)?;
        let one = crate::model::count_params_for(&base)?;
        let extra = FULL_SIZE_TARGET.saturating_sub(one).div_ceil(per_block);
        Ok(ModelConfig {
            num_blocks: 1 + extra,
            ..base
        })
    }

    pub fn with_ablation(mut self, preset: AblationPreset) -> Self {
        self.ablation = preset.ablation();
        self
    }

    /// Scales the attention module actually pools over.
    pub fn active_scales(&self) -> Vec<usize> {
        match self.ablation.attention {
            AttentionKind::None => Vec::new(),
            AttentionKind::Gc => vec![1],
            AttentionKind::Pnlb => self.pyramid_scales.clone(),
        }
    }

    pub fn bottleneck(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 2..=4) {
            return Err(FpanError::config(format!("unsupported scale {} (expected 2, 3 or 4)", self.scale)));
        }
        if self.channels == 0 || self.num_blocks == 0 || self.stage_depth == 0 {
            return Err(FpanError::config("channels, blocks and stage depth must be >= 1"));
        }
        if self.reduction == 0 || !self.channels.is_multiple_of(self.reduction) {
            return Err(FpanError::config(format!(
                "channels {} not divisible by reduction {}",
                self.channels, self.reduction
            )));
        }
        let mut seen = Vec::new();
        for &s in &self.pyramid_scales {
            if !matches!(s, 1 | 2 | 4) || seen.contains(&s) {
                return Err(FpanError::config(format!(
                    "pyramid scales must be distinct values from {{1, 2, 4}}, got {:?}",
                    self.pyramid_scales
                )));
            }
            seen.push(s);
        }
        if self.ablation.attention == AttentionKind::Pnlb && self.pyramid_scales.is_empty() {
            return Err(FpanError::config("pyramid attention needs at least one scale"));
        }
        Ok(())
    }
}
