//! Model checkpoints.
//!
//! Layout: the magic `TMTK`, a little-endian `u16` format version, a `u32`
//! header length, a JSON header, then every tensor of the manifest as raw
//! little-endian `f32` values in manifest order. The header echoes the
//! model configuration and the number of identities, which is all that is
//! needed to rebuild the parameter layout; loading then checks every
//! manifest entry against that layout by name and shape.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tmt_core::model::loss::OimState;
use tmt_core::model::{ModelConfig, TmtModel};
use tmt_core::Tensor;

use crate::error::{AppError, Result};

pub const MAGIC: &[u8; 4] = b"TMTK";
pub const FORMAT_VERSION: u16 = 1;
const PREAMBLE: usize = 4 + 2 + 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ManifestEntry {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u16,
    pub model: ModelConfig,
    pub num_identities: usize,
    /// Epochs trained before the checkpoint was taken.
    pub epochs_trained: usize,
    pub manifest: Vec<ManifestEntry>,
}

/// Every tensor of `model` under its checkpoint name: trainable parameters
/// first, then the identity tables.
fn named_tensors(model: &TmtModel) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = model
        .tape
        .ids()
        .map(|id| (model.tape.name(id).to_string(), model.tape.get(id)))
        .collect();
    out.extend(model.oim.named().into_iter().map(|(n, s)| (n, s.lookup())));
    out
}

pub fn encode(model: &TmtModel, epochs_trained: usize) -> Result<Vec<u8>> {
    let tensors = named_tensors(model);
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        model: model.config().clone(),
        num_identities: model.num_identities(),
        epochs_trained,
        manifest: tensors
            .iter()
            .map(|(n, t)| ManifestEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| AppError::Validation(format!("checkpoint header: {e}")))?;
    let header_len = u32::try_from(json.len())
        .map_err(|_| AppError::Validation("checkpoint header exceeds 4 GiB".into()))?;
    let payload: usize = tensors.iter().map(|(_, t)| t.numel() * 4).sum();
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses only the preamble and header.
pub fn decode_header(bytes: &[u8]) -> std::result::Result<(CheckpointHeader, usize), String> {
    if bytes.len() < PREAMBLE {
        return Err(format!("truncated preamble: {} of {PREAMBLE} bytes", bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return Err(format!("bad magic {:?}, expected {:?}", &bytes[..4], MAGIC));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(format!("unsupported format version {version}, expected {FORMAT_VERSION}"));
    }
    let len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let end = PREAMBLE
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| format!("truncated header: needs {len} bytes after offset {PREAMBLE}"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[PREAMBLE..end]).map_err(|e| format!("malformed header: {e}"))?;
    if header.format_version != version {
        return Err(format!(
            "header claims version {} but preamble says {version}",
            header.format_version
        ));
    }
    Ok((header, end))
}

/// Rebuilds the model described by `bytes`. Every mismatch between the
/// stored manifest and the layout implied by the stored configuration is
/// reported by tensor name.
pub fn decode(bytes: &[u8]) -> std::result::Result<(TmtModel, CheckpointHeader), String> {
    let (header, start) = decode_header(bytes)?;
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let mut model = TmtModel::new(header.model.clone(), header.num_identities, &mut unused)
        .map_err(|e| format!("stored configuration is invalid: {e}"))?;

    let expected: Vec<ManifestEntry> = named_tensors(&model)
        .iter()
        .map(|(n, t)| ManifestEntry {
            name: n.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let problems = manifest_mismatches(&expected, &header.manifest);
    if !problems.is_empty() {
        return Err(format!("manifest does not match the stored configuration: {}", problems.join("; ")));
    }

    let needed: usize = header.manifest.iter().map(|m| m.numel() * 4).sum();
    if bytes.len() - start != needed {
        return Err(format!(
            "payload holds {} bytes, manifest needs {needed}",
            bytes.len() - start
        ));
    }
    let mut values = bytes[start..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
    let mut take = |m: &ManifestEntry| -> std::result::Result<Tensor, String> {
        let data: Vec<f64> = values.by_ref().take(m.numel()).collect();
        Tensor::new(&m.shape, data).map_err(|e| format!("{}: {e}", m.name))
    };

    let ids: Vec<_> = model.tape.ids().collect();
    let mut entries = header.manifest.iter();
    for id in ids {
        let m = entries.next().expect("manifest length checked above");
        let t = take(m)?;
        model.tape.set(id, t).map_err(|e| format!("{}: {e}", m.name))?;
    }
    for (name, state) in model.oim.named_mut() {
        let m = entries.next().expect("manifest length checked above");
        let t = take(m)?;
        *state = OimState::from_lookup(t, state.momentum(), state.temperature()).map_err(|e| format!("{name}: {e}"))?;
    }
    Ok((model, header))
}

/// Differences between two manifests, by tensor name.
pub fn manifest_mismatches(expected: &[ManifestEntry], found: &[ManifestEntry]) -> Vec<String> {
    let mut out = Vec::new();
    for (i, e) in expected.iter().enumerate() {
        match found.iter().position(|f| f.name == e.name) {
            None => out.push(format!("missing tensor {}", e.name)),
            Some(j) if found[j].shape != e.shape => out.push(format!(
                "tensor {} has shape {:?}, expected {:?}",
                e.name, found[j].shape, e.shape
            )),
            Some(j) if j != i => out.push(format!("tensor {} stored at position {j}, expected {i}", e.name)),
            Some(_) => {}
        }
    }
    for f in found {
        if !expected.iter().any(|e| e.name == f.name) {
            out.push(format!("unexpected tensor {}", f.name));
        }
    }
    out
}

pub fn save(path: &Path, model: &TmtModel, epochs_trained: usize) -> Result<()> {
    let bytes = encode(model, epochs_trained)?;
    fs::write(path, bytes).map_err(|e| AppError::io(path, e))
}

pub fn load(path: &Path) -> Result<(TmtModel, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode(&bytes).map_err(|reason| AppError::format(path, reason))
}

pub fn load_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode_header(&bytes)
        .map(|(h, _)| h)
        .map_err(|reason| AppError::format(path, reason))
}

/// Model parameters rounded through the stored precision, so an in-memory
/// model can be compared with a reloaded one.
pub fn round_trip(model: &TmtModel) -> Result<TmtModel> {
    let bytes = encode(model, 0)?;
    decode(&bytes)
        .map(|(m, _)| m)
        .map_err(|reason| AppError::format("<memory>", reason))
}
