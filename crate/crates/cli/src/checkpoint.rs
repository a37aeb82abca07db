//! Versioned binary checkpoints.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic "SNNQCKPT" | version u16 | arch hash [32]
//! arch JSON length u32 | arch JSON
//! policy JSON length u32 | policy JSON (empty when full precision)
//! layer count u32
//! per layer: weight count u64, weights f64..., readout rows u32, cols u32, readout f64...
//! SHA-256 of everything above [32]
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use snnq::net::{ArchSpec, Network};
use snnq::quant::QuantPolicy;

use crate::error::{CliError, Result};

pub const MAGIC: [u8; 8] = *b"SNNQCKPT";
pub const VERSION: u16 = 1;

/// SHA-256 of the architecture's JSON encoding. The init gain only matters
/// before training and is left out.
pub fn arch_hash(arch: &ArchSpec) -> [u8; 32] {
    let structural = ArchSpec {
        init_gain: 1.0,
        ..arch.clone()
    };
    let json = serde_json::to_vec(&structural).expect("architecture serializes");
    Sha256::digest(&json).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchSpec,
    pub net: Network,
    /// Present for fine-tuned, quantized weights.
    pub policy: Option<QuantPolicy>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&arch_hash(&self.arch));
        let arch = serde_json::to_vec(&self.arch).expect("architecture serializes");
        put_blob(&mut out, &arch);
        let policy = match &self.policy {
            Some(p) => serde_json::to_vec(p).expect("policy serializes"),
            None => Vec::new(),
        };
        put_blob(&mut out, &policy);
        out.extend_from_slice(&(self.net.n_layers() as u32).to_le_bytes());
        for layer in &self.net.layers {
            out.extend_from_slice(&(layer.params.w.len() as u64).to_le_bytes());
            for w in &layer.params.w {
                out.extend_from_slice(&w.to_le_bytes());
            }
            let r = &layer.params.readout;
            out.extend_from_slice(&(r.rows as u32).to_le_bytes());
            out.extend_from_slice(&(r.cols as u32).to_le_bytes());
            for x in &r.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest: [u8; 32] = Sha256::digest(&out).into();
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| CliError::Data(format!("checkpoint: {msg}"));
        if bytes.len() < MAGIC.len() + 2 + 32 + 32 {
            return Err(bad("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { bytes: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let stored_hash: [u8; 32] = r.array()?;
        let arch_len = u32::from_le_bytes(r.array()?) as usize;
        let arch: ArchSpec = serde_json::from_slice(r.take(arch_len)?).map_err(|e| bad(&e.to_string()))?;
        if arch_hash(&arch) != stored_hash {
            return Err(bad("architecture hash does not match its description"));
        }
        let policy_len = u32::from_le_bytes(r.array()?) as usize;
        let policy = match policy_len {
            0 => None,
            n => Some(serde_json::from_slice(r.take(n)?).map_err(|e| bad(&e.to_string()))?),
        };
        let mut net = Network::new(&arch, 0).map_err(|e| bad(&e.to_string()))?;
        let n_layers = u32::from_le_bytes(r.array()?) as usize;
        if n_layers != net.n_layers() {
            return Err(bad("layer count differs from architecture"));
        }
        for layer in &mut net.layers {
            let n = u64::from_le_bytes(r.array()?) as usize;
            if n != layer.params.w.len() {
                return Err(bad("weight count differs from architecture"));
            }
            for w in &mut layer.params.w {
                *w = f64::from_le_bytes(r.array()?);
            }
            let rows = u32::from_le_bytes(r.array()?) as usize;
            let cols = u32::from_le_bytes(r.array()?) as usize;
            let readout = &mut layer.params.readout;
            if rows != readout.rows || cols != readout.cols {
                return Err(bad("readout shape differs from architecture"));
            }
            for x in &mut readout.data {
                *x = f64::from_le_bytes(r.array()?);
            }
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { arch, net, policy })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(CliError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(CliError::io(path))?;
        Self::decode(&bytes)
    }

    /// Refuses a checkpoint whose architecture differs from the config's.
    pub fn check_arch(&self, arch: &ArchSpec) -> Result<()> {
        let (have, want) = (arch_hash(&self.arch), arch_hash(arch));
        if have != want {
            return Err(CliError::Config(format!(
                "checkpoint architecture {} does not match config architecture {}",
                &hex(&have)[..12],
                &hex(&want)[..12]
            )));
        }
        Ok(())
    }
}

fn put_blob(out: &mut Vec<u8>, blob: &[u8]) {
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(blob);
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
            .ok_or_else(|| CliError::Data("checkpoint: truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice has length N"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use snnq::data::Shape3;
    use snnq::net::LayerConfig;

    fn small() -> ArchSpec {
        ArchSpec {
            input: Shape3::new(1, 6, 6),
            n_classes: 3,
            layers: vec![
                LayerConfig::Conv {
                    channels: 2,
                    kernel: 3,
                    pool: 1,
                    lif: None,
                },
                LayerConfig::Dense { units: 4, lif: None },
            ],
            lif: Default::default(),
            init_gain: 1.0,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let arch = small();
        let ck = Checkpoint {
            net: Network::new(&arch, 5).unwrap(),
            arch,
            policy: None,
        };
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn corruption_is_detected() {
        let arch = small();
        let ck = Checkpoint {
            net: Network::new(&arch, 5).unwrap(),
            arch,
            policy: None,
        };
        let mut bytes = ck.encode();
        bytes[60] ^= 1;
        assert!(matches!(Checkpoint::decode(&bytes), Err(CliError::Data(_))));
        assert!(Checkpoint::decode(&bytes[..20]).is_err());
    }

    #[test]
    fn architecture_guard() {
        let arch = small();
        let ck = Checkpoint {
            net: Network::new(&arch, 5).unwrap(),
            arch: arch.clone(),
            policy: None,
        };
        assert!(ck.check_arch(&arch).is_ok());
        let mut regained = arch.clone();
        regained.init_gain = 0.5;
        assert!(ck.check_arch(&regained).is_ok());
        let mut other = arch;
        other.lif.alpha = 0.5;
        assert!(matches!(ck.check_arch(&other), Err(CliError::Config(_))));
    }
}
