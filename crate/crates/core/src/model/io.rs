//! Binary model files.
//!
//! Layout: 8 magic bytes, a little-endian `u64` header length, a UTF-8 JSON
//! header, raw little-endian tensor data in manifest order, and a trailing
//! little-endian CRC-32 of everything before it.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ArchConfig, CrnnModel, ModelError, ModelMetadata};
use crate::charset::{Charset, CharsetError};
use crate::nn::{Real, Tensor};

pub const MODEL_MAGIC: &[u8; 8] = b"KLCHMD01";
pub const FORMAT_VERSION: u32 = 1;
/// Registry file extension.
pub const MODEL_EXTENSION: &str = "klch";

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    /// Not a file of the expected kind: magic, version, checksum or header.
    #[error("format error: {0}")]
    Format(String),
    /// Header and payload disagree (typically truncation).
    #[error("corrupt file: {0}")]
    Corruption(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Charset(#[from] CharsetError),
}

/// Serializes a header and payload into the checksummed container.
pub(crate) fn write_container(magic: &[u8; 8], header: &impl Serialize, payload: &[u8]) -> Vec<u8> {
    let header = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Splits a container into its parsed header and payload.
///
/// `payload_len` receives the parsed header and returns the byte count the
/// payload must have, so size mismatches are reported as corruption before
/// the checksum is consulted.
pub(crate) fn read_container<'a, H, F>(
    bytes: &'a [u8],
    magic: &[u8; 8],
    payload_len: F,
) -> Result<(H, &'a [u8]), ModelIoError>
where
    H: for<'de> Deserialize<'de>,
    F: FnOnce(&H) -> Result<usize, ModelIoError>,
{
    if bytes.len() < 8 || &bytes[..8] != magic {
        if bytes.len() < 8 && magic.starts_with(bytes) {
            return Err(ModelIoError::Corruption(format!("file is only {} bytes", bytes.len())));
        }
        return Err(ModelIoError::Format("bad magic bytes".into()));
    }
    if bytes.len() < 20 {
        return Err(ModelIoError::Corruption(format!("file is only {} bytes", bytes.len())));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = usize::try_from(hlen)
        .ok()
        .and_then(|h| h.checked_add(16))
        .filter(|&end| end + 4 <= bytes.len())
        .ok_or_else(|| ModelIoError::Corruption(format!("header length {hlen} exceeds file size {}", bytes.len())))?;
    let body = &bytes[..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let crc_ok = crc32fast::hash(body) == stored_crc;
    let header: H = match serde_json::from_slice(&bytes[16..header_end]) {
        Ok(h) => h,
        Err(e) if crc_ok => return Err(ModelIoError::Format(format!("unreadable header: {e}"))),
        Err(_) => return Err(ModelIoError::Format("checksum mismatch".into())),
    };
    let want = payload_len(&header)?;
    let have = body.len() - header_end;
    if want != have {
        return Err(ModelIoError::Corruption(format!(
            "payload holds {have} bytes, header describes {want}"
        )));
    }
    if !crc_ok {
        return Err(ModelIoError::Format("checksum mismatch".into()));
    }
    Ok((header, &body[header_end..]))
}

/// Writes via a temporary sibling and a rename so readers never observe a
/// partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path.file_name().and_then(|s| s.to_str()).unwrap_or("model");
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format_version: u32,
    name: String,
    arch: ArchConfig,
    charset: Vec<u32>,
    tensors: Vec<(String, Vec<usize>)>,
    #[serde(default)]
    metadata: ModelMetadata,
}

fn check_version(v: u32) -> Result<(), ModelIoError> {
    if v != FORMAT_VERSION {
        return Err(ModelIoError::Format(format!("unsupported format version {v}")));
    }
    Ok(())
}

fn manifest_elems(tensors: &[(String, Vec<usize>)]) -> Result<usize, ModelIoError> {
    tensors.iter().try_fold(0usize, |acc, (_, s)| {
        s.iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| acc.checked_add(n))
            .ok_or_else(|| ModelIoError::Corruption("tensor manifest overflows".into()))
    })
}

/// Encodes a model; parameters are stored as 32-bit floats.
pub fn model_to_bytes<R: Real>(model: &CrnnModel<R>) -> Vec<u8> {
    let header = ModelHeader {
        format_version: FORMAT_VERSION,
        name: model.metadata.name.clone(),
        arch: model.config().clone(),
        charset: model.charset().code_points(),
        tensors: model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect(),
        metadata: model.metadata.clone(),
    };
    let mut payload = Vec::with_capacity(model.num_params() * 4);
    for p in model.params() {
        for v in p.value.data() {
            payload.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    write_container(MODEL_MAGIC, &header, &payload)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<CrnnModel<f32>, ModelIoError> {
    let (header, payload) = read_container::<ModelHeader, _>(bytes, MODEL_MAGIC, |h| {
        check_version(h.format_version)?;
        Ok(manifest_elems(&h.tensors)? * 4)
    })?;
    let charset = Charset::from_code_points(&header.charset)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    for (name, shape) in header.tensors {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = floats.by_ref().take(n).collect();
        let t = Tensor::from_vec(&shape, data).map_err(|e| ModelIoError::Corruption(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    let mut metadata = header.metadata;
    metadata.name = header.name;
    Ok(CrnnModel::from_parts(header.arch, charset, tensors, metadata)?)
}

pub fn save_model<R: Real>(model: &CrnnModel<R>, path: impl AsRef<Path>) -> Result<(), ModelIoError> {
    write_atomic(path.as_ref(), &model_to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<CrnnModel<f32>, ModelIoError> {
    model_from_bytes(&fs::read(path)?)
}
