//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size   field
//! 0       8      magic "REMAPCK1"
//! 8       4      format version (u32) = 1
//! 12      ..     model config: variant (u8: 0 rcan, 1 edsr),
//!                n_groups, n_blocks_per_group, channels, reduction,
//!                scale, in_channels, kernel_size (u32 each),
//!                residual_scale flag (u8) + value (f64, present if 1)
//! ..      8      iteration counter (u64)
//! ..      32     RNG state (4 x u64)
//! ..      4      tensor count (u32), then per tensor:
//!                name length (u32), name (UTF-8),
//!                shape (4 x u32), payload (numel x f32 LE)
//! end-4   4      CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! Tensor names carry a role prefix: `p:` parameters, `m:`/`v:` ADAM
//! moments, keyed by the model's parameter names.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{ModelConfig, Variant};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: [u8; 8] = *b"REMAPCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn from_tensor(name: String, t: &Tensor<f32>) -> Self {
        NamedTensor {
            name,
            shape: t.shape(),
            data: t.data().to_vec(),
        }
    }
}

/// Complete training state: reloading reproduces training bit-exactly
/// from the saved iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub iteration: u64,
    pub rng_state: [u64; 4],
    pub tensors: Vec<NamedTensor>,
}

pub(crate) fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());

        let cfg = &self.model_config;
        out.push(match cfg.variant {
            Variant::Rcan => 0u8,
            Variant::Edsr => 1u8,
        });
        for v in [
            cfg.n_groups,
            cfg.n_blocks_per_group,
            cfg.channels,
            cfg.reduction,
            cfg.scale,
            cfg.in_channels,
            cfg.kernel_size,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        match cfg.residual_scale {
            Some(rs) => {
                out.push(1);
                out.extend_from_slice(&rs.to_le_bytes());
            }
            None => out.push(0),
        }

        out.extend_from_slice(&self.iteration.to_le_bytes());
        for w in self.rng_state {
            out.extend_from_slice(&w.to_le_bytes());
        }

        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            for d in [t.shape.n, t.shape.c, t.shape.h, t.shape.w] {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }

        let crc = crc32(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(Error::CheckpointBadMagic);
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }

        // checksum covers everything up to the final 4 bytes
        if bytes.len() < 12 + 4 {
            return Err(Error::CheckpointTruncated { context: "checksum" });
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32(body);
        if stored != computed {
            return Err(Error::CheckpointChecksum { stored, computed });
        }

        let variant = match r.u8("variant")? {
            0 => Variant::Rcan,
            1 => Variant::Edsr,
            other => {
                return Err(Error::CheckpointFormat(format!(
                    "unknown model variant tag {other}"
                )))
            }
        };
        let n_groups = r.u32("n_groups")? as usize;
        let n_blocks_per_group = r.u32("n_blocks_per_group")? as usize;
        let channels = r.u32("channels")? as usize;
        let reduction = r.u32("reduction")? as usize;
        let scale = r.u32("scale")? as usize;
        let in_channels = r.u32("in_channels")? as usize;
        let kernel_size = r.u32("kernel_size")? as usize;
        let residual_scale = match r.u8("residual_scale flag")? {
            0 => None,
            1 => Some(f64::from_le_bytes(
                r.take(8, "residual_scale")?.try_into().unwrap(),
            )),
            other => {
                return Err(Error::CheckpointFormat(format!(
                    "bad residual_scale flag {other}"
                )))
            }
        };
        let model_config = ModelConfig {
            variant,
            n_groups,
            n_blocks_per_group,
            channels,
            reduction,
            scale,
            in_channels,
            kernel_size,
            residual_scale,
        };

        let iteration = u64::from_le_bytes(r.take(8, "iteration")?.try_into().unwrap());
        let mut rng_state = [0u64; 4];
        for w in &mut rng_state {
            *w = u64::from_le_bytes(r.take(8, "rng state")?.try_into().unwrap());
        }

        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32("tensor name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| Error::CheckpointFormat("tensor name is not UTF-8".into()))?;
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u32("tensor shape")? as usize;
            }
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            let numel = shape.numel();
            let raw = r.take(numel * 4, "tensor payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }

        if r.pos != bytes.len() - 4 {
            return Err(Error::CheckpointFormat(format!(
                "{} trailing bytes before checksum",
                bytes.len() - 4 - r.pos
            )));
        }

        Ok(Checkpoint {
            model_config,
            iteration,
            rng_state,
            tensors,
        })
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_os_string();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// CRC-32 of the serialized form; a cheap content digest.
    pub fn digest(&self) -> u32 {
        crc32(&self.to_bytes())
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointTruncated { context });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, context: &'static str) -> Result<u8> {
        Ok(self.take(1, context)?[0])
    }

    fn u32(&mut self, context: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }
}
