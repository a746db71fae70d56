//! Binary checkpoint format:
//! `ICSVCKPT` · u32 version · u32 header length · header JSON · u64 count · f32 LE params.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::LayerSpec;
use super::nets::{Arch, Classifier, Network, Translator};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ICSVCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: Arch,
    pub seed: u64,
    pub epoch: usize,
    pub dtype: String,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f32>,
}

impl Checkpoint {
    pub fn capture(model: &impl Network<f32>, seed: u64, epoch: usize) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                arch: model.arch(),
                seed,
                epoch,
                dtype: "f32le".into(),
                layers: model.layer_specs(),
            },
            params: model.flat_params(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(24 + header.len() + 4 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        bytes.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut u32buf = [0u8; 4];
        bytes.read_exact(&mut u32buf).map_err(|_| bad("truncated version"))?;
        let version = u32::from_le_bytes(u32buf);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        bytes.read_exact(&mut u32buf).map_err(|_| bad("truncated header length"))?;
        let hlen = u32::from_le_bytes(u32buf) as usize;
        if bytes.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..hlen])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        bytes = &bytes[hlen..];
        if header.dtype != "f32le" {
            return Err(Error::Checkpoint(format!("unsupported dtype {}", header.dtype)));
        }
        let mut u64buf = [0u8; 8];
        bytes.read_exact(&mut u64buf).map_err(|_| bad("truncated parameter count"))?;
        let count = u64::from_le_bytes(u64buf) as usize;
        if bytes.len() != count * 4 {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                count * 4,
                bytes.len()
            )));
        }
        let params = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Checkpoint { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn restore<N: Network<f32>>(&self, mut model: N) -> Result<N> {
        if model.layer_specs() != self.header.layers {
            return Err(Error::Checkpoint("layer table does not match architecture".into()));
        }
        model.load_params(&self.params)?;
        Ok(model)
    }

    pub fn classifier(&self) -> Result<Classifier<f32>> {
        self.restore(Classifier::from_arch(&self.header.arch, self.header.seed)?)
    }

    pub fn translator(&self) -> Result<Translator<f32>> {
        self.restore(Translator::from_arch(&self.header.arch, self.header.seed)?)
    }
}
