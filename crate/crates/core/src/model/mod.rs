//! Tiny diffusion transformer: specs, weights, block forward and the serial
//! denoising loop used as ground truth for every parallel engine.

mod block;
mod diffusion;
mod weights;

pub use block::{
    attention_heads, attn_residual, block_forward, cross_attention, cross_kv, embed_tokens,
    ffn_residual, gated_residual, head_scale, modulated_norm1, modulated_norm2, modulation, qkv,
    skip_merge, timestep_vector, unembed_rows, BlockOutput, Modulation, Qkv,
};
pub(crate) use diffusion::{adaln_vector, cross_text};
pub use diffusion::{cfg_combine, model_forward, scheduler_update, serial_diffusion, Trace};
pub use weights::{param_count, BlockWeights, CrossWeights, SkipWeights, Weights};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    AdalnZero,
    CrossAttention,
    InContext,
}

impl ConditioningMode {
    pub const ALL: [ConditioningMode; 3] = [
        ConditioningMode::AdalnZero,
        ConditioningMode::CrossAttention,
        ConditioningMode::InContext,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConditioningMode::AdalnZero => "adaln_zero",
            ConditioningMode::CrossAttention => "cross_attention",
            ConditioningMode::InContext => "in_context",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockTopology {
    Linear,
    USkip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiTSpec {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    #[serde(default = "default_ffn")]
    pub ffn_multiplier: usize,
    pub conditioning: ConditioningMode,
    pub topology: BlockTopology,
    pub image_tokens: usize,
    pub text_tokens: usize,
    /// Width of each latent token before embedding.
    #[serde(default = "default_latent_channels")]
    pub latent_channels: usize,
}

fn default_ffn() -> usize {
    4
}

fn default_latent_channels() -> usize {
    4
}

impl DiTSpec {
    /// The small reference configuration used throughout the tests.
    pub fn desk(conditioning: ConditioningMode, topology: BlockTopology) -> Self {
        Self {
            num_layers: 4,
            hidden_size: 32,
            num_heads: 4,
            ffn_multiplier: 4,
            conditioning,
            topology,
            image_tokens: 64,
            text_tokens: 8,
            latent_channels: 4,
        }
    }

    /// A 1024px-class text-to-image transformer: 28 blocks of width 1152
    /// over 4096 image tokens, cross-attending to 120 text tokens.
    pub fn pixart_like() -> Self {
        Self {
            num_layers: 28,
            hidden_size: 1152,
            num_heads: 16,
            ffn_multiplier: 4,
            conditioning: ConditioningMode::CrossAttention,
            topology: BlockTopology::Linear,
            image_tokens: 4096,
            text_tokens: 120,
            latent_channels: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.hidden_size == 0 || self.num_heads == 0 || self.ffn_multiplier == 0 {
            return bad("hidden_size, num_heads and ffn_multiplier must be positive".into());
        }
        if self.image_tokens == 0 || self.latent_channels == 0 {
            return bad("image_tokens and latent_channels must be positive".into());
        }
        if self.hidden_size % self.num_heads != 0 {
            return bad(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        if self.hidden_size % 2 != 0 {
            return bad("hidden_size must be even for the timestep embedding".into());
        }
        if self.topology == BlockTopology::USkip && self.num_layers % 2 != 0 {
            return bad(format!("u_skip needs an even layer count, got {}", self.num_layers));
        }
        if self.conditioning != ConditioningMode::AdalnZero && self.text_tokens == 0 {
            return bad(format!("{} needs text_tokens > 0", self.conditioning.name()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_multiplier * self.hidden_size
    }

    /// Text tokens that travel through the self-attention sequence.
    pub fn context_tokens(&self) -> usize {
        match self.conditioning {
            ConditioningMode::InContext => self.text_tokens,
            _ => 0,
        }
    }

    /// Full self-attention sequence length.
    pub fn seq_len(&self) -> usize {
        self.context_tokens() + self.image_tokens
    }

    /// For a u_skip block, the earlier block whose output it merges.
    pub fn skip_source(&self, block: usize) -> Option<usize> {
        let l = self.num_layers;
        (self.topology == BlockTopology::USkip && block >= l / 2).then(|| l - 1 - block)
    }

    /// Whether a block's output is needed later by a skip connection.
    pub fn is_skip_source(&self, block: usize) -> bool {
        self.topology == BlockTopology::USkip && block < self.num_layers / 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSpec {
    pub num_steps: usize,
    pub alpha_schedule: Vec<f64>,
    /// Classifier-free guidance scale; `None` runs a single conditional branch.
    pub guidance_scale: Option<f64>,
}

impl DiffusionSpec {
    /// Linear ramp of step sizes in `(0, 0.5]`.
    pub fn linear(num_steps: usize) -> Self {
        let alpha_schedule = (0..num_steps)
            .map(|i| 0.5 * (i + 1) as f64 / num_steps as f64)
            .collect();
        Self {
            num_steps,
            alpha_schedule,
            guidance_scale: None,
        }
    }

    pub fn with_guidance(mut self, g: f64) -> Self {
        self.guidance_scale = Some(g);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha_schedule.len() != self.num_steps {
            return Err(Error::InvalidSpec(format!(
                "alpha_schedule has {} entries for {} steps",
                self.alpha_schedule.len(),
                self.num_steps
            )));
        }
        if let Some(a) = self.alpha_schedule.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(Error::InvalidSpec(format!("alpha {a} outside (0, 1]")));
        }
        if let Some(g) = self.guidance_scale {
            if !(g >= 0.0) || !g.is_finite() {
                return Err(Error::InvalidSpec(format!("guidance scale {g} must be >= 0")));
            }
        }
        Ok(())
    }

    /// Number of model branches evaluated per step.
    pub fn branches(&self) -> usize {
        if self.guidance_scale.is_some() {
            2
        } else {
            1
        }
    }

    /// Steps counting down from `T` to `1`.
    pub fn steps(&self) -> impl Iterator<Item = usize> {
        (1..=self.num_steps).rev()
    }
}

/// Conditioning input; the variant must match [`DiTSpec::conditioning`].
#[derive(Debug, Clone, PartialEq)]
pub enum Conditioning {
    AdalnZero(Tensor),
    CrossAttention(Tensor),
    InContext(Tensor),
}

impl Conditioning {
    pub fn mode(&self) -> ConditioningMode {
        match self {
            Conditioning::AdalnZero(_) => ConditioningMode::AdalnZero,
            Conditioning::CrossAttention(_) => ConditioningMode::CrossAttention,
            Conditioning::InContext(_) => ConditioningMode::InContext,
        }
    }

    pub fn tensor(&self) -> &Tensor {
        match self {
            Conditioning::AdalnZero(t) | Conditioning::CrossAttention(t) | Conditioning::InContext(t) => t,
        }
    }

    /// Random conditioning of the right shape for `spec`.
    pub fn random(spec: &DiTSpec, rng: &mut crate::rng::SeededRng) -> Self {
        let hs = spec.hidden_size;
        match spec.conditioning {
            ConditioningMode::AdalnZero => Conditioning::AdalnZero(rng.normal_tensor(&[hs])),
            ConditioningMode::CrossAttention => {
                Conditioning::CrossAttention(rng.normal_tensor(&[spec.text_tokens, hs]))
            }
            ConditioningMode::InContext => {
                Conditioning::InContext(rng.normal_tensor(&[spec.text_tokens, hs]))
            }
        }
    }

    /// The null conditioning used by the unconditional guidance branch.
    pub fn null_like(&self) -> Self {
        let z = Tensor::zeros(self.tensor().shape());
        match self {
            Conditioning::AdalnZero(_) => Conditioning::AdalnZero(z),
            Conditioning::CrossAttention(_) => Conditioning::CrossAttention(z),
            Conditioning::InContext(_) => Conditioning::InContext(z),
        }
    }

    pub fn check(&self, spec: &DiTSpec) -> Result<()> {
        if self.mode() != spec.conditioning {
            return Err(Error::ConditioningMismatch {
                expected: spec.conditioning.name(),
                got: self.mode().name(),
            });
        }
        let hs = spec.hidden_size;
        let want: Vec<usize> = match self {
            Conditioning::AdalnZero(_) => vec![hs],
            _ => vec![spec.text_tokens, hs],
        };
        if self.tensor().shape() != want.as_slice() {
            return Err(Error::InvalidSpec(format!(
                "conditioning shape {:?}, expected {want:?}",
                self.tensor().shape()
            )));
        }
        Ok(())
    }
}

/// A latent `[p, c]` at diffusion timestep `t` (`T` down to `0`).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub x: Tensor,
    pub t: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_spec_is_valid() {
        for m in ConditioningMode::ALL {
            DiTSpec::desk(m, BlockTopology::Linear).validate().unwrap();
            DiTSpec::desk(m, BlockTopology::USkip).validate().unwrap();
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = DiTSpec::desk(ConditioningMode::AdalnZero, BlockTopology::USkip);
        s.num_layers = 3;
        assert!(s.validate().is_err());
        let mut s = DiTSpec::desk(ConditioningMode::AdalnZero, BlockTopology::Linear);
        s.num_heads = 5;
        assert!(s.validate().is_err());
        let mut s = DiTSpec::desk(ConditioningMode::CrossAttention, BlockTopology::Linear);
        s.text_tokens = 0;
        assert!(s.validate().is_err());
        let mut s = DiTSpec::desk(ConditioningMode::AdalnZero, BlockTopology::Linear);
        s.text_tokens = 0;
        assert!(s.validate().is_ok());
    }

    #[test]
    fn skip_pairs() {
        let s = DiTSpec::desk(ConditioningMode::AdalnZero, BlockTopology::USkip);
        assert_eq!(s.skip_source(0), None);
        assert_eq!(s.skip_source(2), Some(1));
        assert_eq!(s.skip_source(3), Some(0));
        assert!(s.is_skip_source(1) && !s.is_skip_source(2));
    }

    #[test]
    fn schedule_validation() {
        let d = DiffusionSpec::linear(8);
        d.validate().unwrap();
        assert_eq!(d.steps().collect::<Vec<_>>(), vec![8, 7, 6, 5, 4, 3, 2, 1]);
        let mut bad = d.clone();
        bad.alpha_schedule.pop();
        assert!(bad.validate().is_err());
        assert!(d.with_guidance(-1.0).validate().is_err());
    }
}
