//! Self-describing parameter archives.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header with the configuration and a tensor table, then every tensor as
//! little-endian `f64` in table order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{HeadParams, ModelParams, Role};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DTPARAMS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in elements.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    /// `None` for an encoder-only archive.
    role: Option<Role>,
    encoder_frozen: bool,
    encoder: EncoderConfig,
    num_classes: Option<usize>,
    tensors: Vec<TensorEntry>,
}

fn encode_archive(header_base: Header, tensors: Vec<(String, Vec<usize>, &[f64])>) -> Result<Vec<u8>> {
    let mut header = header_base;
    let mut offset = 0;
    header.tensors = tensors
        .iter()
        .map(|(name, shape, data)| {
            let entry = TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            };
            offset += data.len();
            entry
        })
        .collect();
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, data) in &tensors {
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode_archive(bytes: &[u8]) -> Result<(Header, Vec<f64>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a parameter archive"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[20..header_end]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let payload = &bytes[header_end..];
    if !payload.len().is_multiple_of(8) {
        return Err(bad("payload is not a whole number of f64 values"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, values))
}

/// Copies archive tensors into `targets`, whose names and shapes must match
/// the table exactly and in order.
fn fill(header: &Header, values: &[f64], expected: Vec<(String, Vec<usize>)>, targets: Vec<&mut [f64]>) -> Result<()> {
    if header.tensors.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "archive holds {} tensors, expected {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let mut end = 0;
    for ((entry, (name, shape)), target) in header.tensors.iter().zip(&expected).zip(targets) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} where {name} {shape:?} was expected",
                entry.name, entry.shape
            )));
        }
        let len: usize = shape.iter().product();
        let src = values
            .get(entry.offset..entry.offset + len)
            .ok_or_else(|| Error::Checkpoint(format!("payload too short for {name}")))?;
        target.copy_from_slice(src);
        end = end.max(entry.offset + len);
    }
    if end != values.len() {
        return Err(Error::Checkpoint("payload has trailing values".into()));
    }
    Ok(())
}

fn names_and_shapes(t: Vec<(String, Vec<usize>, &[f64])>) -> Vec<(String, Vec<usize>)> {
    t.into_iter().map(|(n, s, _)| (n, s)).collect()
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))
}

pub fn encoder_to_bytes(params: &EncoderParams) -> Result<Vec<u8>> {
    let header = Header {
        role: None,
        encoder_frozen: false,
        encoder: params.config,
        num_classes: None,
        tensors: Vec::new(),
    };
    encode_archive(header, params.tensors())
}

pub fn encoder_from_bytes(bytes: &[u8]) -> Result<EncoderParams> {
    let (header, values) = decode_archive(bytes)?;
    if header.role.is_some() {
        return Err(Error::Checkpoint("archive holds a full model, not an encoder".into()));
    }
    header.encoder.validate()?;
    let mut params = EncoderParams::zeros(header.encoder);
    let expected = names_and_shapes(params.tensors());
    fill(&header, &values, expected, params.tensors_mut())?;
    params.validate()?;
    Ok(params)
}

pub fn model_to_bytes(model: &ModelParams) -> Result<Vec<u8>> {
    let header = Header {
        role: Some(model.role()),
        encoder_frozen: model.encoder_frozen(),
        encoder: model.encoder.config,
        num_classes: Some(model.num_classes()),
        tensors: Vec::new(),
    };
    let mut tensors = model.encoder.tensors();
    tensors.extend(model.head.tensors());
    encode_archive(header, tensors)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let (header, values) = decode_archive(bytes)?;
    let (Some(role), Some(num_classes)) = (header.role, header.num_classes) else {
        return Err(Error::Checkpoint("archive holds an encoder only, not a model".into()));
    };
    header.encoder.validate()?;
    let mut encoder = EncoderParams::zeros(header.encoder);
    let mut head = HeadParams::zeros(header.encoder.hidden, num_classes);
    let mut expected = names_and_shapes(encoder.tensors());
    expected.extend(names_and_shapes(head.tensors()));
    let mut targets = encoder.tensors_mut();
    targets.extend(head.tensors_mut());
    fill(&header, &values, expected, targets)?;
    ModelParams::from_parts(encoder, head, role, header.encoder_frozen)
}

pub fn save_encoder(path: &Path, params: &EncoderParams) -> Result<()> {
    write_bytes(path, &encoder_to_bytes(params)?)
}

pub fn load_encoder(path: &Path) -> Result<EncoderParams> {
    encoder_from_bytes(&read_bytes(path)?).map_err(|e| with_path(path, e))
}

pub fn save_model(path: &Path, model: &ModelParams) -> Result<()> {
    write_bytes(path, &model_to_bytes(model)?)
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    model_from_bytes(&read_bytes(path)?).map_err(|e| with_path(path, e))
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{inherit_encoder, init_head};
    use crate::seed::rng_for;

    fn teacher() -> ModelParams {
        let config = EncoderConfig {
            vocab_size: 12,
            max_len: 6,
            hidden: 4,
            layers: 1,
            heads: 2,
            ffn: 8,
        };
        let encoder = EncoderParams::init(config, &mut rng_for(1, "e")).unwrap();
        let head = init_head(4, 3, &mut rng_for(1, "h")).unwrap();
        ModelParams::teacher(Role::MaskedTeacher, encoder, head).unwrap()
    }

    #[test]
    fn model_round_trip_is_bitwise() {
        let m = teacher();
        let back = model_from_bytes(&model_to_bytes(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        let student = inherit_encoder(init_head(4, 3, &mut rng_for(2, "s")).unwrap(), &m).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.params");
        save_model(&path, &student).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, student);
        assert!(back.encoder_frozen());
    }

    #[test]
    fn encoder_round_trip_and_kind_checks() {
        let m = teacher();
        let bytes = encoder_to_bytes(&m.encoder).unwrap();
        assert_eq!(encoder_from_bytes(&bytes).unwrap(), m.encoder);
        assert!(model_from_bytes(&bytes).is_err());
        assert!(encoder_from_bytes(&model_to_bytes(&m).unwrap()).is_err());
    }

    #[test]
    fn corrupt_archives_rejected() {
        let mut bytes = model_to_bytes(&teacher()).unwrap();
        assert!(model_from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(model_from_bytes(b"garbage").is_err());
        bytes[8] = 9;
        let err = model_from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }
}
