//! On-disk format for quantized models: a small binary header followed by a
//! JSON payload. Floats serialize through shortest-round-trip formatting, so
//! a load/save cycle is bit-exact.

use super::{QuantError, QuantizedModel};
use std::io::{Read, Write};
use std::path::Path;

pub const QMAGIC: &[u8; 4] = b"LPRQ";
pub const QVERSION: u32 = 1;

pub fn write_quantized<W: Write>(writer: &mut W, model: &QuantizedModel) -> Result<(), QuantError> {
    let payload = serde_json::to_vec(model)
        .map_err(|e| QuantError::MalformedContainer(format!("serialize: {e}")))?;
    let io_err = |source: std::io::Error| QuantError::Io {
        path: "<writer>".into(),
        source,
    };
    writer.write_all(QMAGIC).map_err(io_err)?;
    writer.write_all(&QVERSION.to_le_bytes()).map_err(io_err)?;
    writer
        .write_all(&(payload.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    writer.write_all(&payload).map_err(io_err)?;
    Ok(())
}

pub fn read_quantized<R: Read>(reader: &mut R) -> Result<QuantizedModel, QuantError> {
    let io_err = |source: std::io::Error| QuantError::Io {
        path: "<reader>".into(),
        source,
    };
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic).map_err(io_err)?;
    if &magic != QMAGIC {
        return Err(QuantError::MalformedContainer("bad magic".into()));
    }
    let mut word = [0u8; 4];
    reader.read_exact(&mut word).map_err(io_err)?;
    let version = u32::from_le_bytes(word);
    if version != QVERSION {
        return Err(QuantError::MalformedContainer(format!(
            "unsupported version {version}"
        )));
    }
    let mut len = [0u8; 8];
    reader.read_exact(&mut len).map_err(io_err)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut payload = vec![0u8; len];
    reader.read_exact(&mut payload).map_err(io_err)?;
    serde_json::from_slice(&payload)
        .map_err(|e| QuantError::MalformedContainer(format!("deserialize: {e}")))
}

pub fn save_quantized(path: &Path, model: &QuantizedModel) -> Result<(), QuantError> {
    let mut file = std::fs::File::create(path).map_err(|source| QuantError::Io {
        path: path.display().to_string(),
        source,
    })?;
    write_quantized(&mut file, model)
}

pub fn load_quantized(path: &Path) -> Result<QuantizedModel, QuantError> {
    let mut file = std::fs::File::open(path).map_err(|source| QuantError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_quantized(&mut file)
}
