use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Temporal position encoding applied to part tokens before the transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeStrategy {
    None,
    Sinusoidal,
    /// One width-K kernel shared by all channels.
    Conv1dShared,
    /// One width-K kernel per channel.
    ChannelGrouped,
}

impl std::str::FromStr for PeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "sinusoidal" => Ok(Self::Sinusoidal),
            "conv1d-shared" => Ok(Self::Conv1dShared),
            "channel-grouped" => Ok(Self::ChannelGrouped),
            other => Err(Error::Config(format!("unknown position encoding strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemporalPool {
    Max,
    Mean,
}

/// Non-gait attribute predicted by a prior head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    View,
    Condition,
}

impl PriorKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::View => "view",
            Self::Condition => "condition",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Frames are resampled to this size before entering the network.
    pub input_height: usize,
    pub input_width: usize,
    pub shallow_channels: usize,
    pub shallow_layers: usize,
    /// Output channels of each STEM stage; the last entry is `C2`.
    pub stage_channels: Vec<usize>,
    /// Stage indices (0-based) followed by a 1x2x2 max pool.
    pub pool_after: Vec<usize>,
    /// Height strips inside each STEM.
    pub stem_parts: usize,
    /// Negative slope of the leaky rectifier used everywhere.
    pub slope: f64,
    /// Add UTA-aggregated fine features into every coarse stage input.
    pub coarse_injection: bool,
    /// Coarse stages reuse the fine stage weights.
    pub coarse_shares_weights: bool,
    pub fine_branch: bool,
    pub coarse_branch: bool,
    pub global_span: bool,
    pub local_span: bool,
    /// Horizontal strips produced by horizontal pooling.
    pub parts: usize,
    /// Half width of the micro-motion window.
    pub mcm_radius: usize,
    pub pe: PeStrategy,
    pub pe_kernel: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub temporal_pool: TemporalPool,
    pub priors: Vec<PriorKind>,
    pub view_classes: usize,
    pub condition_classes: usize,
    /// One class token per part instead of a single shared one.
    pub class_token_per_part: bool,
    pub gem_p_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::casia_b()
    }
}

impl ModelConfig {
    pub fn casia_b() -> Self {
        Self {
            input_height: 64,
            input_width: 44,
            shallow_channels: 32,
            shallow_layers: 1,
            stage_channels: vec![64, 64, 128],
            pool_after: vec![0],
            stem_parts: 4,
            slope: 0.01,
            coarse_injection: true,
            coarse_shares_weights: false,
            fine_branch: true,
            coarse_branch: true,
            global_span: true,
            local_span: true,
            parts: 32,
            mcm_radius: 1,
            pe: PeStrategy::ChannelGrouped,
            pe_kernel: 7,
            layers: 3,
            heads: 8,
            ffn_mult: 4,
            temporal_pool: TemporalPool::Max,
            priors: vec![PriorKind::View],
            view_classes: 11,
            condition_classes: 3,
            class_token_per_part: false,
            gem_p_init: 3.0,
        }
    }

    /// OU-MVLP and GREW: one more STEM stage with 256 channels.
    pub fn large() -> Self {
        Self {
            stage_channels: vec![64, 64, 128, 256],
            view_classes: 14,
            ..Self::casia_b()
        }
    }

    /// Small network for the synthetic desk-scale experiments.
    pub fn desk() -> Self {
        Self {
            input_height: 32,
            input_width: 22,
            shallow_channels: 4,
            stage_channels: vec![8, 16],
            parts: 16,
            heads: 2,
            layers: 1,
            view_classes: 4,
            condition_classes: 2,
            ..Self::casia_b()
        }
    }

    /// Tiny network used by the finite-difference gradient checks.
    pub fn micro() -> Self {
        Self {
            input_height: 16,
            input_width: 12,
            shallow_channels: 4,
            stage_channels: vec![4, 8],
            parts: 4,
            heads: 2,
            layers: 1,
            view_classes: 3,
            condition_classes: 2,
            ..Self::casia_b()
        }
    }

    /// `C2`, the channel width of the head.
    pub fn head_channels(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&0)
    }

    pub fn enabled_branches(&self) -> usize {
        usize::from(self.fine_branch) + usize::from(self.coarse_branch)
    }

    /// Channel dimension of the final descriptor.
    pub fn descriptor_channels(&self) -> usize {
        self.enabled_branches() * self.head_channels()
    }

    pub fn prior_classes(&self, kind: PriorKind) -> usize {
        match kind {
            PriorKind::View => self.view_classes,
            PriorKind::Condition => self.condition_classes,
        }
    }

    /// Spatial size after every configured pooling.
    pub fn final_spatial(&self) -> (usize, usize) {
        let pools = self.pool_after.len() as u32;
        (self.input_height >> pools, self.input_width >> pools)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return bad("stage_channels must be nonempty and positive".into());
        }
        if self.shallow_channels == 0 || self.shallow_layers == 0 {
            return bad("shallow stem needs at least one layer and channel".into());
        }
        if self.pool_after.iter().any(|&s| s >= self.stage_channels.len()) {
            return bad(format!("pool_after {:?} names a missing stage", self.pool_after));
        }
        if self.stem_parts != 4 {
            return bad(format!("stem_parts must be 4, got {}", self.stem_parts));
        }
        let mut h = self.input_height;
        for stage in 0..self.stage_channels.len() {
            if h % self.stem_parts != 0 {
                return bad(format!("stage {stage} height {h} not partitionable into {} strips", self.stem_parts));
            }
            if self.pool_after.contains(&stage) {
                h /= 2;
            }
        }
        let (fh, fw) = self.final_spatial();
        if fh == 0 || fw == 0 {
            return bad("input too small for the pooling schedule".into());
        }
        if self.parts == 0 || fh % self.parts != 0 {
            return bad(format!("final height {fh} not divisible into {} parts", self.parts));
        }
        if !self.fine_branch && !self.coarse_branch {
            return bad("at least one of fine_branch / coarse_branch must be on".into());
        }
        if !self.global_span && !self.local_span {
            return bad("at least one of global_span / local_span must be on".into());
        }
        let c2 = self.head_channels();
        if self.global_span {
            if self.heads == 0 || c2 % self.heads != 0 {
                return bad(format!("head width {c2} not divisible by {} heads", self.heads));
            }
            if self.pe_kernel % 2 == 0 {
                return bad(format!("pe_kernel must be odd, got {}", self.pe_kernel));
            }
            if self.layers == 0 {
                return bad("transformer needs at least one layer".into());
            }
        }
        for &kind in &self.priors {
            if self.prior_classes(kind) < 2 {
                return bad(format!("{} prior needs at least 2 classes", kind.name()));
            }
        }
        if !(self.slope.is_finite() && (0.0..1.0).contains(&self.slope)) {
            return bad(format!("slope {} outside [0, 1)", self.slope));
        }
        if !(1.0..=64.0).contains(&self.gem_p_init) {
            return bad(format!("gem_p_init {} outside [1, 64]", self.gem_p_init));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for cfg in [ModelConfig::casia_b(), ModelConfig::large(), ModelConfig::desk(), ModelConfig::micro()] {
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn casia_b_descriptor_is_256_wide() {
        let cfg = ModelConfig::casia_b();
        assert_eq!(cfg.descriptor_channels(), 256);
        assert_eq!(cfg.final_spatial(), (32, 22));
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig { heads: 3, ..ModelConfig::micro() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_pe_strategy_is_config_error() {
        assert!(matches!("learned".parse::<PeStrategy>(), Err(Error::Config(_))));
        assert_eq!("channel-grouped".parse::<PeStrategy>().unwrap(), PeStrategy::ChannelGrouped);
    }
}
