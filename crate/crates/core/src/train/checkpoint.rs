//! Binary checkpoint format.
//!
//! ```text
//! "MFNET" 0x01
//! u32 config length, UTF-8 key=value config text
//! u32 tensor count
//! per tensor: u16 name length, UTF-8 name, u8 rank, rank × u32 dims,
//!             f32 values
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image_io::Image;
use crate::network::{ArchConfig, FusionNet};
use crate::nn::NetworkParams;
use crate::tensor::Tensor;

use super::config::TrainConfig;

pub const MAGIC: &[u8; 5] = b"MFNET";
pub const VERSION: u8 = 1;

/// Trained (or freshly initialised) parameters with the configuration
/// that produced them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: NetworkParams<f32>,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, params: NetworkParams<f32>) -> Self {
        Checkpoint { config, params }
    }

    pub fn arch(&self) -> Result<ArchConfig> {
        self.config.arch()
    }

    pub fn network(&self) -> Result<FusionNet<f32>> {
        FusionNet::from_params(self.arch()?, self.params.clone())
    }

    /// Fails with the list of differing fields when `arch` does not match.
    pub fn check_arch(&self, arch: &ArchConfig) -> Result<()> {
        let own = self.arch()?;
        let mut fields = Vec::new();
        if own.encoder.depth != arch.encoder.depth {
            fields.push(format!("depth: checkpoint {}, requested {}", own.encoder.depth, arch.encoder.depth));
        }
        if own.encoder.base_channels != arch.encoder.base_channels {
            fields.push(format!(
                "base_channels: checkpoint {}, requested {}",
                own.encoder.base_channels, arch.encoder.base_channels
            ));
        }
        if own.fusion_rule != arch.fusion_rule {
            fields.push(format!(
                "fusion: checkpoint {}, requested {}",
                own.fusion_rule, arch.fusion_rule
            ));
        }
        if fields.is_empty() {
            Ok(())
        } else {
            Err(Error::Incompatible { fields })
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let cfg = self.config.to_kv();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in self.params.iter() {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.value.rank() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses and validates a complete checkpoint; nothing is returned
    /// unless every check passes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = ByteReader { bytes, pos: 0 };
        if rd.take(5, "magic")? != MAGIC {
            return Err(rd.fail(0, "bad magic, not a checkpoint"));
        }
        let at = rd.pos;
        let version = rd.u8("version")?;
        if version != VERSION {
            return Err(rd.fail(at, format!("unsupported version {version}")));
        }
        let len = rd.u32("config length")? as usize;
        let at = rd.pos;
        let text = std::str::from_utf8(rd.take(len, "config text")?)
            .map_err(|_| rd.fail(at, "config text is not UTF-8"))?;
        let config = TrainConfig::from_kv(text).map_err(|e| rd.fail(at, e.to_string()))?;
        let count = rd.u32("tensor count")? as usize;
        let mut params = NetworkParams::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let at = rd.pos;
            let name_len = rd.u16("name length")? as usize;
            let name = std::str::from_utf8(rd.take(name_len, "tensor name")?)
                .map_err(|_| rd.fail(at, "tensor name is not UTF-8"))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(rd.fail(at, format!("duplicate tensor `{name}`")));
            }
            let rank = rd.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(rd.u32("dimension")? as usize);
            }
            let n: usize = shape.iter().product();
            let at = rd.pos;
            let raw = rd.take(n.checked_mul(4).ok_or_else(|| rd.fail(at, "tensor too large"))?, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.insert(name, Tensor::from_vec(&shape, data)?)?;
        }
        if rd.pos != bytes.len() {
            return Err(rd.fail(rd.pos, format!("{} trailing bytes", bytes.len() - rd.pos)));
        }
        let net = FusionNet::from_params(config.arch()?, params)?;
        Ok(Checkpoint {
            config,
            params: net.params,
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn fail(&self, offset: usize, detail: impl Into<String>) -> Error {
        Error::Integrity {
            offset,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Fuses `ix` and `iy` with the checkpointed network; any size is accepted.
pub fn infer_fuse(ckpt: &Checkpoint, ix: &Image, iy: &Image) -> Result<Image> {
    ckpt.network()?.fuse(ix, iy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_params;

    fn fresh(depth: usize) -> Checkpoint {
        let cfg = TrainConfig {
            depth,
            base_channels: 4,
            ..TrainConfig::default()
        };
        let params = init_params(&cfg.arch().unwrap(), 3).unwrap();
        Checkpoint::new(cfg, params)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = fresh(3);
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..6], b"MFNET\x01");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.config, c.config);
    }

    #[test]
    fn corruption_is_reported_with_offset() {
        let bytes = fresh(3).to_bytes();
        match Checkpoint::from_bytes(&bytes[..bytes.len() - 3]) {
            Err(Error::Integrity { offset, .. }) => assert!(offset > 6 && offset < bytes.len()),
            other => panic!("expected integrity error, got {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[5] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Integrity { offset: 5, .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Integrity { offset: 0, .. })));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Integrity { .. })));
    }

    #[test]
    fn depth_mismatch_names_fields() {
        let c = fresh(3);
        let want = fresh(4).arch().unwrap();
        match c.check_arch(&want) {
            Err(Error::Incompatible { fields }) => assert!(fields[0].starts_with("depth")),
            other => panic!("expected incompatibility, got {other:?}"),
        }
        assert!(c.check_arch(&c.arch().unwrap()).is_ok());
    }

    #[test]
    fn config_that_disagrees_with_tensors_is_incompatible() {
        let mut c = fresh(3);
        c.config.depth = 4;
        assert!(matches!(
            Checkpoint::from_bytes(&c.to_bytes()),
            Err(Error::Incompatible { .. })
        ));
    }
}
