//! Binary checkpoints: magic "HAWQKIT1", little-endian, per-tensor records
//! {name length, name, rank, dims, f64 payload}, then a quantizer table
//! {block, bits, scale}. Round-trips are bit-exact.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LossModel, Model};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HAWQKIT1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantTableEntry {
    pub block: u32,
    pub bits: u32,
    pub scale: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub quantizers: Vec<QuantTableEntry>,
}

impl Checkpoint {
    pub fn from_model(model: &impl LossModel, quantizers: Vec<QuantTableEntry>) -> Self {
        Checkpoint {
            tensors: model
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            quantizers,
        }
    }

    /// Copy tensors into an existing model's parameters, matched by name.
    pub fn load_into(&self, model: &mut Model) -> Result<()> {
        for p in model.params_mut() {
            let (_, t) = self
                .tensors
                .iter()
                .find(|(name, _)| name == &p.name)
                .ok_or_else(|| {
                    Error::Checkpoint(format!("checkpoint is missing tensor {:?}", p.name))
                })?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?} has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let name_bytes = name.as_bytes();
            buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
            buf.extend_from_slice(name_bytes);
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.elems() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend_from_slice(&(self.quantizers.len() as u32).to_le_bytes());
        for q in &self.quantizers {
            buf.extend_from_slice(&q.block.to_le_bytes());
            buf.extend_from_slice(&q.bits.to_le_bytes());
            buf.extend_from_slice(&q.scale.to_le_bytes());
        }
        atomic_write(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "incompatible checkpoint magic {:?} in {} (expected {:?})",
                String::from_utf8_lossy(&magic),
                path.display(),
                String::from_utf8_lossy(MAGIC)
            )));
        }
        let truncated = || Error::Checkpoint(format!("truncated checkpoint {}", path.display()));
        let mut u32_buf = [0u8; 4];
        let mut u64_buf = [0u8; 8];
        let mut read_u32 = |r: &mut BufReader<fs::File>| -> Result<u32> {
            r.read_exact(&mut u32_buf).map_err(|_| truncated())?;
            Ok(u32::from_le_bytes(u32_buf))
        };
        let tensor_count = read_u32(&mut r)?;
        let mut tensors = Vec::with_capacity(tensor_count as usize);
        for _ in 0..tensor_count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|_| truncated())?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                r.read_exact(&mut u64_buf).map_err(|_| truncated())?;
                shape.push(u64::from_le_bytes(u64_buf) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut elems = Vec::with_capacity(numel);
            for _ in 0..numel {
                r.read_exact(&mut u64_buf).map_err(|_| truncated())?;
                elems.push(f64::from_le_bytes(u64_buf));
            }
            tensors.push((name, Tensor::new(shape, elems)?));
        }
        let quant_count = read_u32(&mut r)?;
        let mut quantizers = Vec::with_capacity(quant_count as usize);
        for _ in 0..quant_count {
            let block = read_u32(&mut r)?;
            let bits = read_u32(&mut r)?;
            r.read_exact(&mut u64_buf).map_err(|_| truncated())?;
            quantizers.push(QuantTableEntry {
                block,
                bits,
                scale: f64::from_le_bytes(u64_buf),
            });
        }
        if r.read(&mut [0u8; 1]).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::Checkpoint(format!(
                "trailing bytes in checkpoint {}",
                path.display()
            )));
        }
        Ok(Checkpoint { tensors, quantizers })
    }
}

/// Write-temp-then-rename so partially written files never take the
/// destination name.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}
