//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockTopology, ConditioningMode, DiTSpec, DiffusionSpec};
use crate::simnet::Topology;
use crate::strategies::ParallelConfig;
use crate::vae::VaeSpec;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub num_steps: usize,
    #[serde(default)]
    pub guidance_scale: Option<f64>,
    /// Per-step sizes, oldest step last; a linear ramp when absent.
    #[serde(default)]
    pub alpha_schedule: Option<Vec<f64>>,
}

impl DiffusionConfig {
    pub fn to_spec(&self) -> DiffusionSpec {
        let mut s = DiffusionSpec::linear(self.num_steps);
        if let Some(a) = &self.alpha_schedule {
            s.alpha_schedule = a.clone();
        }
        s.guidance_scale = self.guidance_scale;
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub model: DiTSpec,
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub parallel: ParallelConfig,
    /// Topology file, relative to the config file's directory.
    #[serde(default)]
    pub topology: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub vae: Option<VaeSpec>,
}

impl ExperimentConfig {
    /// The small reference setup: four blocks, 64 image tokens, eight steps.
    pub fn desk() -> Self {
        Self {
            version: SCHEMA_VERSION,
            model: DiTSpec::desk(ConditioningMode::AdalnZero, BlockTopology::Linear),
            diffusion: DiffusionConfig {
                num_steps: 8,
                guidance_scale: None,
                alpha_schedule: None,
            },
            parallel: ParallelConfig::serial(),
            topology: None,
            seed: 0,
            out: None,
            vae: Some(VaeSpec::desk(4)),
        }
    }

    pub fn sched(&self) -> DiffusionSpec {
        self.diffusion.to_spec()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema version {} not supported (expected {SCHEMA_VERSION})",
                self.version
            )));
        }
        self.model.validate()?;
        self.sched().validate()?;
        if let Some(v) = &self.vae {
            v.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Reads a config and resolves its topology path against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut c = Self::from_json(&text)?;
        if let Some(t) = &c.topology {
            if t.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                c.topology = Some(base.join(t));
            }
            let t = c.topology.as_ref().expect("set above");
            if !t.exists() {
                return Err(Error::Config(format!("topology file {} does not exist", t.display())));
            }
        }
        Ok(c)
    }

    /// The configured topology, or a single NVLink node large enough for `devices`.
    pub fn resolve_topology(&self, devices: usize) -> Result<Topology> {
        match &self.topology {
            Some(p) => Topology::load(p),
            None => Ok(Topology::nvlink_node(devices.max(1))),
        }
    }
}

/// Image tokens for a square image: pixels are reduced by the autoencoder
/// factor, then grouped into `patch × patch` tokens.
pub fn tokens_for_pixels(pixels: usize, vae_factor: usize, patch: usize) -> Result<usize> {
    let side = pixels / vae_factor.max(1);
    if vae_factor == 0 || patch == 0 || pixels % vae_factor != 0 || side % patch != 0 {
        return Err(Error::Config(format!(
            "{pixels}px does not tile into {vae_factor}x downsampling and {patch}x{patch} patches"
        )));
    }
    Ok((side / patch).pow(2))
}

/// Alternative token counts for large text-to-image workloads. The two 1024px
/// figures disagree with each other, so both are offered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenPreset {
    Flux1024At262k,
    Flux1024At64k,
    Flux2048At256k,
    Pixart1024,
}

impl TokenPreset {
    pub const ALL: [TokenPreset; 4] = [
        TokenPreset::Flux1024At262k,
        TokenPreset::Flux1024At64k,
        TokenPreset::Flux2048At256k,
        TokenPreset::Pixart1024,
    ];

    pub fn tokens(self) -> usize {
        match self {
            TokenPreset::Flux1024At262k => 262_144,
            TokenPreset::Flux1024At64k => 65_536,
            TokenPreset::Flux2048At256k => 262_144,
            TokenPreset::Pixart1024 => 4096,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TokenPreset::Flux1024At262k => "flux-1024-262k",
            TokenPreset::Flux1024At64k => "flux-1024-64k",
            TokenPreset::Flux2048At256k => "flux-2048-256k",
            TokenPreset::Pixart1024 => "pixart-1024",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown token preset {name:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = ExperimentConfig::desk();
        c.parallel = ParallelConfig::hybrid(2, 2, 1, 2, 4, 1);
        c.diffusion.guidance_scale = Some(3.5);
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json(), c.to_json());
    }

    #[test]
    fn rejects_wrong_version_and_unknown_fields() {
        let mut c = ExperimentConfig::desk();
        c.version = 7;
        assert!(matches!(ExperimentConfig::from_json(&c.to_json()), Err(Error::Config(_))));
        let text = ExperimentConfig::desk().to_json().replacen('{', "{\"bogus\": 1,", 1);
        assert!(ExperimentConfig::from_json(&text).is_err());
    }

    #[test]
    fn missing_topology_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ExperimentConfig::desk();
        c.topology = Some("nowhere.json".into());
        let p = dir.path().join("exp.json");
        std::fs::write(&p, c.to_json()).unwrap();
        assert!(matches!(ExperimentConfig::load(&p), Err(Error::Config(_))));
        std::fs::write(dir.path().join("nowhere.json"), serde_json::to_string(&Topology::nvlink_node(4)).unwrap()).unwrap();
        let loaded = ExperimentConfig::load(&p).unwrap();
        assert_eq!(loaded.resolve_topology(1).unwrap(), Topology::nvlink_node(4));
    }

    #[test]
    fn pixels_to_tokens() {
        assert_eq!(tokens_for_pixels(1024, 8, 2).unwrap(), 4096);
        assert_eq!(tokens_for_pixels(2048, 8, 2).unwrap(), 16384);
        assert_eq!(tokens_for_pixels(1024, 8, 2).unwrap(), TokenPreset::Pixart1024.tokens());
        assert_eq!(tokens_for_pixels(1024, 2, 1).unwrap(), TokenPreset::Flux1024At262k.tokens());
        for p in TokenPreset::ALL {
            assert_eq!(TokenPreset::parse(p.name()).unwrap(), p);
        }
        assert!(tokens_for_pixels(1000, 8, 2).is_err());
    }
}
