//! Model configuration: a flat TOML file with every field required, so a
//! config on disk is always a complete description of the architecture.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of prediction tasks sharing the decoder.
    pub tasks: usize,
    /// Low-rank experts per module.
    pub num_experts: usize,
    /// Experts each task routes through per module.
    pub top_k: usize,
    /// Channel width of the decoder features.
    pub channels: usize,
    /// Rank schedule: expert `i` gets `min(rank_min + i * rank_step, rank_max)`.
    pub rank_min: usize,
    pub rank_max: usize,
    pub rank_step: usize,
    /// Rank of each task-specific expert.
    pub specific_rank: usize,
    /// Output channels of every expert's second (1x1) convolution.
    pub expert_out_channels: usize,
    /// Number of feature scales consumed from the backbone.
    pub scales: usize,
    /// Modules stacked per scale.
    pub stack_per_scale: usize,
    /// Weight on the routing balance penalty.
    pub lb_weight: f64,
    /// Inject gaussian noise into routing logits during training.
    pub noise: bool,
    /// Seed for every stream of randomness in the model.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            tasks: 4,
            num_experts: 15,
            top_k: 9,
            channels: 64,
            rank_min: 16,
            rank_max: 128,
            rank_step: 8,
            specific_rank: 64,
            expert_out_channels: 107,
            scales: 4,
            stack_per_scale: 2,
            lb_weight: 0.01,
            noise: true,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Shared expert ranks, one per expert. The schedule grows linearly and
    /// saturates at `rank_max`; ranks above `channels` are legal (the
    /// factorization is then overcomplete rather than compressive).
    pub fn ranks(&self) -> Vec<usize> {
        (0..self.num_experts)
            .map(|i| (self.rank_min + i * self.rank_step).min(self.rank_max))
            .collect()
    }

    pub fn total_modules(&self) -> usize {
        self.scales * self.stack_per_scale
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.tasks == 0 {
            return fail("tasks must be positive".into());
        }
        if self.num_experts == 0 {
            return fail("num_experts must be positive".into());
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return fail(format!(
                "top_k must be in 1..={}, got {}",
                self.num_experts, self.top_k
            ));
        }
        if self.channels == 0 || self.channels % 4 != 0 {
            return fail(format!(
                "channels must be a positive multiple of 4 (router bottleneck is channels/4), got {}",
                self.channels
            ));
        }
        if self.rank_min == 0 || self.rank_max < self.rank_min {
            return fail(format!(
                "rank range must satisfy 1 <= rank_min <= rank_max, got {}..{}",
                self.rank_min, self.rank_max
            ));
        }
        if self.specific_rank == 0 {
            return fail("specific_rank must be positive".into());
        }
        if self.expert_out_channels == 0 {
            return fail("expert_out_channels must be positive".into());
        }
        if self.scales == 0 {
            return fail("scales must be positive".into());
        }
        if self.stack_per_scale == 0 {
            return fail("stack_per_scale must be positive".into());
        }
        if !self.lb_weight.is_finite() || self.lb_weight < 0.0 {
            return fail(format!("lb_weight must be finite and >= 0, got {}", self.lb_weight));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_rank_schedule_saturates() {
        let cfg = ModelConfig::default();
        let ranks = cfg.ranks();
        assert_eq!(ranks.len(), 15);
        assert_eq!(ranks[0], 16);
        assert_eq!(ranks[1], 24);
        assert_eq!(ranks[13], 120);
        assert_eq!(ranks[14], 128);
        assert!(ranks.iter().all(|&r| r <= 128));
    }

    #[test]
    fn toml_roundtrip_is_lossless() {
        let cfg = ModelConfig::default();
        let text = cfg.to_toml();
        let back = ModelConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_and_missing_keys_rejected() {
        let mut text = ModelConfig::default().to_toml();
        text.push_str("\nextra_knob = 3\n");
        assert!(ModelConfig::from_toml(&text).is_err());

        let partial = "tasks = 2\nnum_experts = 5\n";
        assert!(ModelConfig::from_toml(partial).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.top_k = 16;
        assert!(cfg.validate().is_err());
        cfg = ModelConfig::default();
        cfg.channels = 30;
        assert!(cfg.validate().is_err());
        cfg = ModelConfig::default();
        cfg.rank_max = 8;
        assert!(cfg.validate().is_err());
        cfg = ModelConfig::default();
        cfg.lb_weight = -0.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ranks_above_channels_are_allowed() {
        let mut cfg = ModelConfig::default();
        cfg.channels = 16;
        assert!(cfg.validate().is_ok());
        assert!(cfg.ranks().iter().any(|&r| r > 16));
    }
}
