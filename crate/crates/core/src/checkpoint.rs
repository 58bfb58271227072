//! Bit-exact checkpoints of the projection net, its optimizer state and the
//! trainer's progress counters.
//!
//! ```text
//! magic "FACKPT01" | version u32 | meta_len u32 | meta (UTF-8 JSON)
//! then for each tensor: len u64 | len × f32
//! ```
//!
//! Tensor order: parameters (canonical order), BatchNorm running buffers,
//! Adam first moments, Adam second moments. Integers and floats are
//! little-endian, matching the feature-store conventions.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizer::{AdamConfig, AdamState};
use crate::projection::{ProjectionConfig, ProjectionNet};

pub const MAGIC: [u8; 8] = *b"FACKPT01";
pub const VERSION: u32 = 1;

/// Trainer bookkeeping needed for an exact resume.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub step: u64,
    pub best_val_loss: Option<f64>,
    pub best_step: Option<u64>,
    pub checks_without_improvement: u32,
    pub last_train_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub projection: ProjectionConfig,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub forward_passes: u64,
    pub adam_step: u64,
    pub progress: TrainProgress,
    pub tensor_lens: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: ProjectionNet<f32>,
    pub adam: AdamState<f32>,
    pub seed: u64,
    pub progress: TrainProgress,
}

impl Checkpoint {
    fn tensors(&self) -> Vec<&[f32]> {
        let mut out = self.net.param_slices();
        out.extend(self.net.buffer_slices());
        out.extend(self.adam.first_moment.iter().map(Vec::as_slice));
        out.extend(self.adam.second_moment.iter().map(Vec::as_slice));
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tensors = self.tensors();
        let meta = CheckpointMeta {
            projection: self.net.config().clone(),
            optimizer: self.adam.config.clone(),
            seed: self.seed,
            forward_passes: self.net.passes(),
            adam_step: self.adam.step,
            progress: self.progress.clone(),
            tensor_lens: tensors.iter().map(|t| t.len() as u64).collect(),
        };
        let meta = serde_json::to_vec(&meta)?;
        let tmp = path.with_extension("ckpt.tmp");
        let io = |e| Error::io(path, e);
        {
            let mut out = BufWriter::new(File::create(&tmp).map_err(io)?);
            out.write_all(&MAGIC).map_err(io)?;
            out.write_all(&VERSION.to_le_bytes()).map_err(io)?;
            out.write_all(&(meta.len() as u32).to_le_bytes()).map_err(io)?;
            out.write_all(&meta).map_err(io)?;
            for t in tensors {
                out.write_all(&(t.len() as u64).to_le_bytes()).map_err(io)?;
                let mut buf = Vec::with_capacity(t.len() * 4);
                for v in t {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                out.write_all(&buf).map_err(io)?;
            }
            out.flush().map_err(io)?;
        }
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let corrupt = |reason: &str| Error::CorruptStore { path: path.to_path_buf(), reason: reason.to_owned() };
        let mut input = BufReader::new(File::open(path).map_err(io)?);
        let mut word = [0u8; 8];
        input.read_exact(&mut word).map_err(io)?;
        if word != MAGIC {
            return Err(Error::BadMagic { path: path.to_path_buf(), found: word });
        }
        let mut u32buf = [0u8; 4];
        input.read_exact(&mut u32buf).map_err(io)?;
        let version = u32::from_le_bytes(u32buf);
        if version != VERSION {
            return Err(Error::VersionUnsupported { path: path.to_path_buf(), found: version });
        }
        input.read_exact(&mut u32buf).map_err(io)?;
        let mut meta = vec![0u8; u32::from_le_bytes(u32buf) as usize];
        input.read_exact(&mut meta).map_err(io)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta)?;

        let mut net = ProjectionNet::<f32>::init(meta.projection.clone())?;
        let shapes: Vec<usize> = net.param_slices().iter().map(|s| s.len()).collect();
        let mut adam = AdamState::<f32>::new(meta.optimizer.clone(), &shapes);
        adam.step = meta.adam_step;

        let mut read_into = |dst: &mut [f32], expected: u64| -> Result<()> {
            let mut len = [0u8; 8];
            input.read_exact(&mut len).map_err(io)?;
            if u64::from_le_bytes(len) != expected || dst.len() as u64 != expected {
                return Err(corrupt("tensor length does not match configuration"));
            }
            let mut buf = vec![0u8; dst.len() * 4];
            input.read_exact(&mut buf).map_err(io)?;
            for (d, c) in dst.iter_mut().zip(buf.chunks_exact(4)) {
                *d = f32::from_le_bytes(c.try_into().unwrap());
            }
            Ok(())
        };

        let mut lens = meta.tensor_lens.iter().copied();
        let mut next_len = || lens.next().ok_or_else(|| corrupt("tensor table too short"));
        for dst in net.param_slices_mut() {
            read_into(dst, next_len()?)?;
        }
        for dst in net.buffer_slices_mut() {
            read_into(dst, next_len()?)?;
        }
        for dst in adam.first_moment.iter_mut().chain(adam.second_moment.iter_mut()) {
            read_into(dst, next_len()?)?;
        }
        if next_len().is_ok() {
            return Err(corrupt("tensor table too long"));
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest).map_err(io)? != 0 {
            return Err(corrupt("trailing bytes"));
        }
        net.set_passes(meta.forward_passes);
        Ok(Self { net, adam, seed: meta.seed, progress: meta.progress })
    }
}
