//! Pipeline configuration and the two protocol presets.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Protocol;
use crate::denoiser::DenoiserSpec;
use crate::error::{Error, Result};
use crate::hankel::RankBudget;
use crate::jvc::{JvcConfig, RegKind};
use crate::mussels::{MusselsConfig, REL_TOL_DIFFUSION, REL_TOL_STRUCTURAL};
use crate::phase_cycling::PhaseCycleConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    /// phase cycling and JVC start from the multishot images directly
    pub skip_denoise: bool,
    pub stop_after_mussels: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub stages: StageToggles,
    pub mussels: MusselsConfig,
    pub denoiser: DenoiserSpec,
    pub phase_cycling: PhaseCycleConfig,
    pub jvc: JvcConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig::sage()
    }
}

impl PipelineConfig {
    /// Structural five-echo protocol.
    pub fn sage() -> Self {
        PipelineConfig {
            seed: 0,
            stages: StageToggles::default(),
            mussels: MusselsConfig {
                budget: RankBudget { r: 5, n_eff: 1.0 },
                rel_tol: REL_TOL_STRUCTURAL,
                ..Default::default()
            },
            denoiser: DenoiserSpec::default(),
            phase_cycling: PhaseCycleConfig {
                alpha: 1e-5,
                iters: 500,
                ..Default::default()
            },
            jvc: JvcConfig {
                beta: 3e-4,
                reg_kind: RegKind::Tv,
                ..Default::default()
            },
        }
    }

    /// Diffusion protocol.
    pub fn dwi() -> Self {
        PipelineConfig {
            seed: 0,
            stages: StageToggles::default(),
            mussels: MusselsConfig {
                budget: RankBudget { r: 7, n_eff: 1.25 },
                rel_tol: REL_TOL_DIFFUSION,
                ..Default::default()
            },
            denoiser: DenoiserSpec::default(),
            phase_cycling: PhaseCycleConfig {
                alpha: 1e-3,
                iters: 50,
                ..Default::default()
            },
            jvc: JvcConfig {
                beta: 1e-2,
                reg_kind: RegKind::Tikhonov,
                ..Default::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mussels.validate()?;
        self.denoiser.validate()?;
        self.phase_cycling.validate()?;
        self.jvc.validate()
    }

    pub fn preset(protocol: Protocol) -> Self {
        match protocol {
            Protocol::Sage => PipelineConfig::sage(),
            Protocol::Dwi => PipelineConfig::dwi(),
        }
    }

    /// Parse a TOML file laid over a preset. A top-level `preset = "dwi"`
    /// chooses the base (SAGE otherwise); every other key overrides it.
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_or(text, Protocol::Sage)
    }

    /// As [`from_toml`](Self::from_toml), with `fallback` as the base when the
    /// file names no preset.
    pub fn from_toml_or(text: &str, fallback: Protocol) -> Result<Self> {
        let bad = |e: String| Error::InvalidParameter(format!("config: {e}"));
        let mut user: toml::Table = text.parse().map_err(|e: toml::de::Error| bad(e.to_string()))?;
        let protocol = match user.remove("preset") {
            None => fallback,
            Some(v) => v.try_into().map_err(|e: toml::de::Error| bad(e.to_string()))?,
        };
        let mut base = toml::Table::try_from(PipelineConfig::preset(protocol)).map_err(|e| bad(e.to_string()))?;
        merge(&mut base, user);
        toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| bad(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidParameter(format!("config: {e}")))
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !is_tagged(&o) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

// an internally tagged enum replaces the base table wholesale
fn is_tagged(t: &toml::Table) -> bool {
    t.contains_key("kind")
}
