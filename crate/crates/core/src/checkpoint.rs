//! Trained model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ADFA" | u32 version
//! str config (TOML) | str backbone identity | str dataset hash | str bank fingerprint
//! u32 tensor count, then per tensor:
//!     str name | u32 rank | u64 dims[rank] | f32 values[prod(dims)]
//! ```
//!
//! where `str` is a u32 byte length followed by UTF-8 bytes.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::adaptation::CenterBank;
use crate::backbone::BackboneHandle;
use crate::config::RunConfig;
use crate::descriptor::DescriptorParams;
use crate::error::{AdfaError, Result};

pub const MAGIC: &[u8; 4] = b"ADFA";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub backbone_identity: String,
    pub dataset_hash: String,
    pub params: DescriptorParams,
    pub bank: CenterBank,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn tensor<'a>(&mut self, name: &str, dims: &[usize], values: impl Iterator<Item = &'a f64>) {
        self.str(name);
        self.u32(dims.len() as u32);
        for &d in dims {
            self.0.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in values {
            self.0.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| AdfaError::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| AdfaError::Format(format!("checkpoint string: {e}")))
    }

    fn tensor(&mut self) -> Result<(String, ArrayD<f64>)> {
        let name = self.str()?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(AdfaError::Format(format!("tensor `{name}` has rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| AdfaError::Format(format!("tensor `{name}` is too large")))?;
        let raw = self.take(count.checked_mul(4).ok_or_else(|| AdfaError::Format("tensor too large".into()))?)?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), values).map_err(|e| AdfaError::Format(e.to_string()))?;
        Ok((name, arr))
    }
}

fn take_tensor(tensors: &mut Vec<(String, ArrayD<f64>)>, name: &str) -> Result<ArrayD<f64>> {
    let idx = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| AdfaError::Format(format!("checkpoint lacks tensor `{name}`")))?;
    Ok(tensors.swap_remove(idx).1)
}

fn matrix(a: ArrayD<f64>, name: &str) -> Result<Array2<f64>> {
    a.into_dimensionality()
        .map_err(|_| AdfaError::Format(format!("tensor `{name}` is not a matrix")))
}

fn vector(a: ArrayD<f64>, name: &str) -> Result<Array1<f64>> {
    a.into_dimensionality()
        .map_err(|_| AdfaError::Format(format!("tensor `{name}` is not a vector")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.config.to_toml());
        w.str(&self.backbone_identity);
        w.str(&self.dataset_hash);
        w.str(&self.bank.fingerprint);
        let p = &self.params;
        w.u32(5);
        w.tensor("descriptor.reduce_weights", p.reduce_weights.shape(), p.reduce_weights.iter());
        w.tensor("descriptor.reduce_bias", p.reduce_bias.shape(), p.reduce_bias.iter());
        w.tensor("descriptor.attn_kernel", p.attn_kernel.shape(), p.attn_kernel.iter());
        w.tensor("descriptor.epsilon", &[1], std::iter::once(&p.epsilon));
        w.tensor("bank.centers", self.bank.centers.shape(), self.bank.centers.iter());
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(AdfaError::Format("not an ADFA checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(AdfaError::Format(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let config = RunConfig::from_toml(&r.str()?)?;
        let backbone_identity = r.str()?;
        let dataset_hash = r.str()?;
        let fingerprint = r.str()?;
        let count = r.u32()?;
        let mut tensors = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(AdfaError::Format(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
        }
        let reduce_weights = matrix(take_tensor(&mut tensors, "descriptor.reduce_weights")?, "reduce_weights")?;
        let reduce_bias = vector(take_tensor(&mut tensors, "descriptor.reduce_bias")?, "reduce_bias")?;
        let attn_kernel = vector(take_tensor(&mut tensors, "descriptor.attn_kernel")?, "attn_kernel")?;
        let epsilon = vector(take_tensor(&mut tensors, "descriptor.epsilon")?, "epsilon")?;
        let centers = matrix(take_tensor(&mut tensors, "bank.centers")?, "centers")?;
        if epsilon.len() != 1 {
            return Err(AdfaError::Format("descriptor.epsilon must hold one value".into()));
        }
        let params = DescriptorParams {
            reduce_weights,
            reduce_bias,
            attn_kernel,
            epsilon: epsilon[0],
        };
        params.validate().map_err(|e| AdfaError::Format(e.to_string()))?;
        let bank = CenterBank {
            centers,
            fingerprint,
            refresh_policy: config.train.refresh_policy,
        };
        if bank.dim() != params.d_prime() {
            return Err(AdfaError::Format(format!(
                "center dimension {} does not match descriptor output {}",
                bank.dim(),
                params.d_prime()
            )));
        }
        Ok(Checkpoint {
            config,
            backbone_identity,
            dataset_hash,
            params,
            bank,
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    /// Reads a checkpoint and returns it with the SHA-256 of its bytes.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| AdfaError::ingestion(path, e))?;
        let ckpt = Self::from_bytes(&bytes)
            .map_err(|e| AdfaError::Format(format!("{}: {e}", path.display())))?;
        Ok((ckpt, hex::encode(Sha256::digest(&bytes))))
    }

    /// Fails unless `handle` is the backbone the checkpoint was trained with.
    pub fn check_backbone(&self, handle: &BackboneHandle) -> Result<()> {
        if handle.identity() != self.backbone_identity {
            return Err(AdfaError::Config(format!(
                "checkpoint was trained with backbone {}, loaded backbone is {}",
                short(&self.backbone_identity),
                short(handle.identity())
            )));
        }
        Ok(())
    }
}

fn short(id: &str) -> &str {
    &id[..id.len().min(12)]
}
