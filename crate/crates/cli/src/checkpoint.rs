//! Versioned JSON checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use cvqd_core::denoiser::{Denoiser, LAYOUT_TAG, PARAMS_PER_LAYER};
use cvqd_core::trainer::TrainOutcome;
use cvqd_core::{ThetaVector, TrainConfig};

use crate::config::{Role, TargetSpec};
use crate::error::{CliError, CliResult};
use crate::output::write_atomic;

pub const FORMAT_VERSION: &str = "cvqd-ckpt-1";
const FORMAT_PREFIX: &str = "cvqd-ckpt-";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSummary {
    pub best_loss: f64,
    pub initial_loss: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Backward-chain fidelity from the thermal start, generative role only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation_fidelity: Option<f64>,
}

impl TrainingSummary {
    pub fn from_outcome(out: &TrainOutcome) -> Self {
        TrainingSummary {
            best_loss: out.best_loss,
            initial_loss: out.initial_loss,
            iterations: out.iterations,
            converged: out.converged,
            generation_fidelity: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: String,
    pub role: Role,
    pub layout: String,
    pub cfg: TrainConfig,
    pub layers: usize,
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_max: Option<f64>,
    pub summary: TrainingSummary,
}

impl Checkpoint {
    pub fn new(role: Role, cfg: TrainConfig, theta: &ThetaVector, summary: TrainingSummary) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION.into(),
            role,
            layout: LAYOUT_TAG.into(),
            layers: theta.layers(),
            theta: theta.values().to_vec(),
            cfg,
            target: None,
            s_max: None,
            summary,
        }
    }

    pub fn theta(&self) -> CliResult<ThetaVector> {
        Ok(ThetaVector::new(self.layers, self.theta.clone())?)
    }

    pub fn denoiser(&self) -> CliResult<Denoiser> {
        Ok(Denoiser::new(&self.theta()?, self.cfg.embed_config()?, self.cfg.cutoff_dim()?)?)
    }

    pub fn expect_role(&self, role: Role) -> CliResult<()> {
        if self.role != role {
            return Err(CliError::Config(format!("checkpoint role is {:?}, this command needs {:?}", self.role, role)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> CliResult<String> {
        serde_json::to_string_pretty(self).map_err(|e| CliError::io("checkpoint", e))
    }

    /// Parses and validates. Any other format version is refused.
    pub fn from_json(text: &str) -> CliResult<Self> {
        let doc: serde_json::Value = serde_json::from_str(text).map_err(|e| CliError::io("checkpoint", e))?;
        let version = doc
            .get("format_version")
            .and_then(|v| v.as_str())
            .ok_or_else(|| CliError::Io("checkpoint: missing format_version".into()))?;
        if version != FORMAT_VERSION {
            let newer = version
                .strip_prefix(FORMAT_PREFIX)
                .and_then(|n| n.parse::<u32>().ok())
                .is_some_and(|n| n > 1);
            return Err(CliError::Io(if newer {
                format!("checkpoint format {version} is newer than this build reads ({FORMAT_VERSION})")
            } else {
                format!("unsupported checkpoint format {version}")
            }));
        }
        let ck: Checkpoint = serde_json::from_value(doc).map_err(|e| CliError::io("checkpoint", e))?;
        if ck.layout != LAYOUT_TAG {
            return Err(CliError::Io(format!("checkpoint layout {} (expected {LAYOUT_TAG})", ck.layout)));
        }
        if ck.theta.len() != PARAMS_PER_LAYER * ck.layers || ck.layers != ck.cfg.layers {
            return Err(CliError::Io(format!(
                "checkpoint has {} parameters for {} layers (config says {})",
                ck.theta.len(),
                ck.layers,
                ck.cfg.layers
            )));
        }
        ck.cfg.validate().map_err(|e| CliError::io("checkpoint config", e))?;
        ck.theta().map_err(|e| CliError::io("checkpoint parameters", e))?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Io(msg) => CliError::Io(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
