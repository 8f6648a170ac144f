//! Binary checkpoint container.
//!
//! Layout:
//!
//! ```text
//! offset 0   8 bytes   magic "DCLTCKPT"
//! offset 8   8 bytes   header length H, u64 little-endian
//! offset 16  H bytes   UTF-8 JSON header (CheckpointHeader)
//! offset 16+H          f32 little-endian payload; block i occupies
//!                      floats [offset_i, offset_i + len_i) of the payload
//! ```
//!
//! Blocks are the field parameters in `FieldParams::blocks` order, then
//! `camera.learnables`, then the Adam moments `adam.field.m`, `adam.field.v`,
//! `adam.camera.m`, `adam.camera.v`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AblationMode, Adam, LogRow, TrainConfig};
use crate::camera::{CameraState, Pose};
use crate::error::{Error, Result};
use crate::field::mlp::{FieldConfig, FieldState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DCLTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraHeader {
    pub principal: [f64; 2],
    pub base_poses: Vec<Pose>,
    pub trainable_from: usize,
    pub tie_focal: bool,
    pub focal_aspect: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub crate_version: String,
    pub config_hash: String,
    pub config: TrainConfig,
    pub ablation_mode: AblationMode,
    pub iteration: usize,
    /// Every per-iteration random stream is derived from this seed and the iteration.
    pub seed: u64,
    pub field: FieldConfig,
    pub camera: CameraHeader,
    pub adam_field_steps: u64,
    pub adam_camera_steps: u64,
    pub log: Vec<LogRow>,
    pub blocks: Vec<BlockEntry>,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub iteration: usize,
    pub field: FieldState<f32>,
    pub camera: CameraState<f32>,
    pub field_opt: Adam,
    pub camera_opt: Adam,
    pub log: Vec<LogRow>,
}

impl Checkpoint {
    fn blocks(&self) -> Vec<(String, &[f32])> {
        let mut out: Vec<(String, &[f32])> = self.field.params.blocks();
        out.push(("camera.learnables".into(), self.camera.learnables()));
        out.push(("adam.field.m".into(), &self.field_opt.m));
        out.push(("adam.field.v".into(), &self.field_opt.v));
        out.push(("adam.camera.m".into(), &self.camera_opt.m));
        out.push(("adam.camera.v".into(), &self.camera_opt.v));
        out
    }

    pub fn header(&self) -> CheckpointHeader {
        let mut offset = 0;
        let blocks = self
            .blocks()
            .into_iter()
            .map(|(name, b)| {
                let e = BlockEntry {
                    name,
                    offset,
                    len: b.len(),
                };
                offset += b.len();
                e
            })
            .collect();
        CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: self.config.hash(),
            config: self.config.clone(),
            ablation_mode: self.config.ablation_mode,
            iteration: self.iteration,
            seed: self.config.seed,
            field: self.field.config.clone(),
            camera: CameraHeader {
                principal: self.camera.principal(),
                base_poses: self.camera.base_poses().to_vec(),
                trainable_from: self.camera.trainable_from(),
                tie_focal: self.camera.tie_focal(),
                focal_aspect: self.camera.focal_aspect(),
            },
            adam_field_steps: self.field_opt.steps,
            adam_camera_steps: self.camera_opt.steps,
            log: self.log.clone(),
            blocks,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, b) in self.blocks() {
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |m: String| Error::format(path, m);
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fail("not a checkpoint file (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| fail("truncated header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| fail(format!("header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(fail(format!("unsupported checkpoint version {}", header.format_version)));
        }
        if header.config.hash() != header.config_hash {
            return Err(fail("config hash does not match the stored config".into()));
        }
        let payload = &bytes[16 + hlen..];
        if payload.len() % 4 != 0 {
            return Err(fail("payload is not a whole number of f32 values".into()));
        }
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let block = |name: &str| -> Result<&[f32]> {
            let e = header
                .blocks
                .iter()
                .find(|b| b.name == name)
                .ok_or_else(|| fail(format!("missing block {name}")))?;
            floats
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| fail(format!("block {name} exceeds payload")))
        };

        let mut field = FieldState::<f32>::new(header.field.clone(), 0).map_err(|e| fail(e.to_string()))?;
        let names: Vec<String> = field.params.blocks().into_iter().map(|(n, _)| n).collect();
        for (name, dst) in names.iter().zip(field.params.blocks_mut()) {
            let src = block(name)?;
            if src.len() != dst.len() {
                return Err(fail(format!("block {name} has {} values, expected {}", src.len(), dst.len())));
            }
            dst.copy_from_slice(src);
        }
        let cam = &header.camera;
        let camera = CameraState::from_parts(
            block("camera.learnables")?.to_vec(),
            cam.principal,
            cam.base_poses.clone(),
            cam.trainable_from,
            cam.tie_focal,
            cam.focal_aspect,
        )
        .map_err(|e| fail(e.to_string()))?;
        let adam = |prefix: &str, steps: u64, len: usize| -> Result<Adam> {
            let m = block(&format!("{prefix}.m"))?.to_vec();
            let v = block(&format!("{prefix}.v"))?.to_vec();
            if m.len() != len || v.len() != len {
                return Err(fail(format!("{prefix} moments have the wrong length")));
            }
            Ok(Adam {
                config: header.config.adam,
                m,
                v,
                steps,
            })
        };
        let field_opt = adam("adam.field", header.adam_field_steps, field.params.num_params())?;
        let camera_opt = adam("adam.camera", header.adam_camera_steps, camera.learnables().len())?;
        Ok(Checkpoint {
            config: header.config,
            iteration: header.iteration,
            field,
            camera,
            field_opt,
            camera_opt,
            log: header.log,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
