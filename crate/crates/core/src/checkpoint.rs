//! Model checkpoints.
//!
//! Layout: a magic line `PRDIM-CKPT 1`, one line of JSON header, then the
//! parameters as little-endian `f64` in the order the header lists them
//! (denoiser layers, then recognizer layers; each layer weight then bias).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AxisMeta, NormStats};
use crate::diffusion::{build_schedule, Denoiser, NoiseSchedule, ScheduleKind};
use crate::em::{EmMode, GuidancePath, GuidanceReduction};
use crate::error::{Error, Result};
use crate::numerics::{Activation, Mlp, OutputActivation};
use crate::recognizer::PatternRecognizer;

const MAGIC: &str = "PRDIM-CKPT 1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetHeader {
    pub layer_dims: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: OutputActivation,
}

impl NetHeader {
    fn of(net: &Mlp) -> Self {
        Self {
            layer_dims: net.layer_dims(),
            hidden_activation: net.hidden_activation(),
            output_activation: net.output_activation(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleHeader {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub kind: ScheduleKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceHeader {
    pub scale: f64,
    pub path: GuidancePath,
    pub reduction: GuidanceReduction,
    pub grad_clip_norm: Option<f64>,
    pub em_mode: EmMode,
    pub soft_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dim: usize,
    pub embed_dim: usize,
    pub denoiser: NetHeader,
    pub recognizer: NetHeader,
    pub norm_stats: Option<NormStats>,
    pub axis_meta: Option<AxisMeta>,
    pub schedule: ScheduleHeader,
    pub guidance: GuidanceHeader,
    pub em_iteration: usize,
    pub payload_values: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub denoiser: Denoiser,
    pub recognizer: PatternRecognizer,
    pub norm_stats: Option<NormStats>,
    pub axis_meta: Option<AxisMeta>,
    pub schedule: ScheduleHeader,
    pub guidance: GuidanceHeader,
    pub em_iteration: usize,
}

impl Checkpoint {
    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        build_schedule(s.steps, s.beta_min, s.beta_max, s.kind)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dparams = self.denoiser.net().flat_params();
        let rparams = self.recognizer.net().flat_params();
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            dim: self.denoiser.dim(),
            embed_dim: self.denoiser.embed_dim(),
            denoiser: NetHeader::of(self.denoiser.net()),
            recognizer: NetHeader::of(self.recognizer.net()),
            norm_stats: self.norm_stats.clone(),
            axis_meta: self.axis_meta,
            schedule: self.schedule.clone(),
            guidance: self.guidance.clone(),
            em_iteration: self.em_iteration,
            payload_values: dparams.len() + rparams.len(),
        };
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(serde_json::to_string(&header)?.as_bytes());
        out.push(b'\n');
        for v in dparams.values().iter().chain(rparams.values()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let nl1 = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing magic line"))?;
        if &bytes[..nl1] != MAGIC.as_bytes() {
            return Err(bad("not a checkpoint or unsupported version"));
        }
        let rest = &bytes[nl1 + 1..];
        let nl2 = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&rest[..nl2])?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad("unsupported format version"));
        }
        let payload = &rest[nl2 + 1..];
        if payload.len() != header.payload_values * 8 {
            return Err(Error::Checkpoint(format!(
                "payload has {} bytes, header expects {} values",
                payload.len(),
                header.payload_values
            )));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut dnet = Mlp::zeros(
            &header.denoiser.layer_dims,
            header.denoiser.hidden_activation,
            header.denoiser.output_activation,
        )?;
        let mut rnet = Mlp::zeros(
            &header.recognizer.layer_dims,
            header.recognizer.hidden_activation,
            header.recognizer.output_activation,
        )?;
        let split = dnet.param_count();
        if split + rnet.param_count() != values.len() {
            return Err(bad("layer dimensions disagree with payload size"));
        }
        dnet.set_flat_params(&values[..split])?;
        rnet.set_flat_params(&values[split..])?;
        Ok(Self {
            denoiser: Denoiser::from_net(dnet, header.dim, header.embed_dim)?,
            recognizer: PatternRecognizer::from_net(rnet)?,
            norm_stats: header.norm_stats,
            axis_meta: header.axis_meta,
            schedule: header.schedule,
            guidance: header.guidance,
            em_iteration: header.em_iteration,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
