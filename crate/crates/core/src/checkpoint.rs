//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | offset   | size  | field                                         |
//! |----------|-------|-----------------------------------------------|
//! | 0        | 8     | magic `FSIGCKPT`                              |
//! | 8        | 4     | format version (`u32`, currently 1)           |
//! | 12       | 4     | header length `H` (`u32`)                     |
//! | 16       | H     | model config as UTF-8 JSON                    |
//! | 16+H     | 8     | parameter count `P` (`u64`)                   |
//! | 24+H     | 8·P   | parameters as `f64`, canonical flatten order  |
//!
//! `P` must equal the parameter count implied by the config and the file
//! must end right after the last parameter.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub const MAGIC: &[u8; 8] = b"FSIGCKPT";
pub const FORMAT_VERSION: u32 = 1;
const MAX_HEADER: usize = 64 * 1024;

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let header = serde_json::to_vec(params.config()).expect("config serializes");
    let flat = params.flatten();
    let mut out = Vec::with_capacity(24 + header.len() + 8 * flat.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint(format!("truncated while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn decode(mut bytes: &[u8]) -> Result<ModelParams> {
    let input = &mut bytes;
    if take(input, 8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(input, 4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let header_len = u32::from_le_bytes(take(input, 4, "header length")?.try_into().expect("4 bytes")) as usize;
    if header_len > MAX_HEADER {
        return Err(Error::Checkpoint(format!("header of {header_len} bytes is too large")));
    }
    let config: ModelConfig = serde_json::from_slice(take(input, header_len, "header")?)
        .map_err(|e| Error::Checkpoint(format!("bad config header: {e}")))?;
    config.validate()?;
    let count = u64::from_le_bytes(take(input, 8, "parameter count")?.try_into().expect("8 bytes"));
    let expected = config.param_count();
    if count != expected as u64 {
        return Err(Error::Checkpoint(format!(
            "header declares {count} parameters, config needs {expected}"
        )));
    }
    if input.len() != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            expected * 8,
            input.len()
        )));
    }
    let flat: Vec<f64> = input
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    ModelParams::unflatten(&flat, &config)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| Error::Io(e).in_file(path))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(e).in_file(path))?;
    decode(&bytes).map_err(|e| e.in_file(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let p = ModelParams::init(&ModelConfig { seed: 9, ..ModelConfig::desk() }).unwrap();
        let bytes = encode(&p);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(decode(&bytes).unwrap(), p);
    }

    #[test]
    fn rejects_damage() {
        let p = ModelParams::init(&ModelConfig::shrunken()).unwrap();
        let bytes = encode(&p);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(decode(&longer).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(decode(&bad_magic).is_err());
        let mut bad_version = bytes.clone();
        bad_version[8] = 2;
        assert!(decode(&bad_version).is_err());
        assert!(decode(&[]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = ModelParams::init(&ModelConfig::shrunken()).unwrap();
        save(&p, &path).unwrap();
        assert_eq!(load(&path).unwrap(), p);
        assert!(load(&dir.path().join("missing")).is_err());
    }

    proptest! {
        #[test]
        fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
            let _ = decode(&bytes);
        }

        #[test]
        fn decode_survives_header_mutation(pos in 0usize..200, byte in any::<u8>()) {
            let p = ModelParams::init(&ModelConfig::shrunken()).unwrap();
            let mut bytes = encode(&p);
            let pos = pos % bytes.len();
            bytes[pos] = byte;
            let _ = decode(&bytes);
        }
    }
}
