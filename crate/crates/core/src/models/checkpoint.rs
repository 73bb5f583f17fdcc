//! `XQNP` checkpoints: magic, u32 version, u32 header length, JSON header,
//! then every parameter as little-endian f32 in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelError, NetConfig, Network};
use crate::autograd::Tensor;
use crate::encoding::{encode, FeatureVariant};
use crate::rules::Position;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XQNP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: NetConfig,
    manifest: Vec<ManifestEntry>,
    probe_hash: u64,
}

#[derive(Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

/// FNV-1a over the bit patterns of the outputs on the encoded start position.
pub fn probe_hash(net: &Network) -> u64 {
    let out = net.evaluate(&encode(&Position::startpos(), net.feature_variant()));
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in out.logits.iter().chain(std::iter::once(&out.value)) {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

fn manifest(net: &Network) -> Vec<ManifestEntry> {
    net.params
        .names()
        .iter()
        .zip(net.params.tensors())
        .map(|(n, t)| ManifestEntry { name: n.clone(), shape: t.shape().to_vec() })
        .collect()
}

pub fn save_bytes(net: &Network) -> Vec<u8> {
    let header = Header { config: net.config.clone(), manifest: manifest(net), probe_hash: probe_hash(net) };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 4 * net.params.num_scalars());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in net.params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes through a temporary file and renames it into place.
pub fn save(net: &Network, path: &Path) -> Result<(), ModelError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&save_bytes(net))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, ModelError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| ModelError::Format("truncated header".into()))
}

pub fn load_bytes(bytes: &[u8]) -> Result<Network, ModelError> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(ModelError::Format("bad magic".into()));
    }
    let version = read_u32(bytes, 4)?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Format(format!("unsupported version {version}")));
    }
    let hlen = read_u32(bytes, 8)? as usize;
    let json = bytes.get(12..12 + hlen).ok_or_else(|| ModelError::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| ModelError::Format(format!("header: {e}")))?;

    let mut net = Network::build(header.config, 0)?;
    if manifest(&net) != header.manifest {
        return Err(ModelError::ManifestMismatch("parameter manifest does not match the architecture".into()));
    }
    let payload = &bytes[12 + hlen..];
    let expected = 4 * net.params.num_scalars();
    if payload.len() != expected {
        return Err(ModelError::Format(format!("payload has {} bytes, expected {expected}", payload.len())));
    }
    let mut chunks = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    for t in net.params.tensors_mut() {
        let shape = t.shape().to_vec();
        let data: Vec<f32> = chunks.by_ref().take(t.len()).collect();
        *t = Tensor::new(&shape, data).expect("manifest-sized");
    }
    if probe_hash(&net) != header.probe_hash {
        return Err(ModelError::Format("probe hash mismatch".into()));
    }
    Ok(net)
}

pub fn load(path: &Path) -> Result<Network, ModelError> {
    load_bytes(&fs::read(path)?)
}

/// Loads a checkpoint that must use `variant` input features.
pub fn load_expecting(path: &Path, variant: FeatureVariant) -> Result<Network, ModelError> {
    let net = load(path)?;
    if net.feature_variant() != variant {
        return Err(ModelError::ManifestMismatch(format!(
            "checkpoint uses {:?} features, expected {variant:?}",
            net.feature_variant()
        )));
    }
    Ok(net)
}
