//! The K-stage unfolded decomposition network.
//!
//! Each stage refines a four-plane state `(B, T, N, D)` — background, target,
//! noise, reconstruction — through four modules run in order: SEBEM (residual
//! background estimation), SETEM (target extraction via a learned gradient
//! step), SENRM (noise reduction, same shape as SETEM with independent
//! weights), and SEIRM (image reconstruction). Squeeze-and-excitation blocks
//! provide channel attention inside every module and can be ablated per
//! module kind.

mod blocks;
mod lipschitz;
mod network;

pub use blocks::{apply_bn_updates, se_forward, BnUpdate, Block, ConvGroup, Phase};
pub use lipschitz::{estimate_lipschitz, GradNetKind, LipschitzEstimate};
pub use network::{ForwardOutput, StagePlanes, StageVars, UnfoldedNet};

use crate::error::{Error, Result};

/// Batchnorm epsilon used everywhere in the model.
pub const BN_EPS: f64 = 1e-5;
/// Batchnorm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;
/// Mixing constant of the target update derivation; also the initial value of
/// the learnable per-stage step size of SETEM.
pub const MIXING_GAMMA: f64 = 0.5;
/// Mixing constant of the noise update derivation; also the initial value of
/// the learnable per-stage step size of SENRM.
pub const MIXING_DELTA: f64 = 0.5;

/// Which modules carry a squeeze-and-excitation block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeFlags {
    pub sebem: bool,
    pub setem: bool,
    pub senrm: bool,
    pub seirm: bool,
}

impl Default for SeFlags {
    fn default() -> Self {
        SeFlags {
            sebem: true,
            setem: true,
            senrm: true,
            seirm: true,
        }
    }
}

impl SeFlags {
    pub const ALL_OFF: SeFlags = SeFlags {
        sebem: false,
        setem: false,
        senrm: false,
        seirm: false,
    };
}

/// Structural hyperparameters of the unfolded network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Number of unfolding stages (K).
    pub stages: usize,
    /// Bottleneck channel count (BC) of the first channel mapping.
    pub bottleneck_channels: usize,
    /// Main channel count (C) of the second channel mapping.
    pub channels: usize,
    /// Extra C-to-C convolutions in each residual/gradient group.
    pub n_fill: usize,
    /// Intermediate C-to-C layers of the reconstruction module.
    pub recon_layers: usize,
    /// Squeeze-and-excitation reduction ratio.
    pub se_ratio: usize,
    pub se: SeFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stages: 6,
            bottleneck_channels: 4,
            channels: 32,
            n_fill: 0,
            recon_layers: 3,
            se_ratio: 4,
            se: SeFlags::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages < 1 {
            return Err(Error::InvalidConfig("stage count must be at least 1".into()));
        }
        if self.bottleneck_channels < 1 || self.bottleneck_channels > self.channels {
            return Err(Error::InvalidConfig(format!(
                "bottleneck channels must satisfy 1 <= BC <= C, got BC={} C={}",
                self.bottleneck_channels, self.channels
            )));
        }
        if self.se_ratio == 0 || self.channels % self.se_ratio != 0 {
            return Err(Error::InvalidConfig(format!(
                "SE ratio {} must divide the channel count {}",
                self.se_ratio, self.channels
            )));
        }
        Ok(())
    }
}

/// The four per-stage modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModuleKind {
    Sebem,
    Setem,
    Senrm,
    Seirm,
}

impl ModuleKind {
    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Sebem => "sebem",
            ModuleKind::Setem => "setem",
            ModuleKind::Senrm => "senrm",
            ModuleKind::Seirm => "seirm",
        }
    }
}
