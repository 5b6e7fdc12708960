//! Binary checkpoint container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "FLXTSFCK"
//! version    u32      1
//! config     u32 length + UTF-8 text, one `key = value` line per config key
//! seed       u64      seed the parameters were initialized from
//! features   12 × f64 feature standardizer means then stds
//! params     u32 count, then per array:
//!              u32 name length + UTF-8 name
//!              u32 rank, rank × u64 extents
//!              product(extents) × f64, row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::model::{FlexTsf, ModelConfig};
use crate::vtnorm::FeatureStandardizer;

pub const MAGIC: &[u8; 8] = b"FLXTSFCK";
pub const VERSION: u32 = 1;

pub fn config_text(config: &ModelConfig) -> String {
    config.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

fn parse_pairs(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

pub fn to_bytes(model: &FlexTsf, seed: u64) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.write_u32::<LittleEndian>(VERSION).unwrap();
    let cfg = config_text(&model.config);
    b.write_u32::<LittleEndian>(cfg.len() as u32).unwrap();
    b.extend_from_slice(cfg.as_bytes());
    b.write_u64::<LittleEndian>(seed).unwrap();
    for v in model.standardizer.to_array() {
        b.write_f64::<LittleEndian>(v).unwrap();
    }
    b.write_u32::<LittleEndian>(model.params.len() as u32).unwrap();
    for p in model.params.iter() {
        b.write_u32::<LittleEndian>(p.name.len() as u32).unwrap();
        b.extend_from_slice(p.name.as_bytes());
        b.write_u32::<LittleEndian>(p.shape.len() as u32).unwrap();
        for &d in &p.shape {
            b.write_u64::<LittleEndian>(d as u64).unwrap();
        }
        for &v in &p.values {
            b.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    b
}

pub fn save(model: &FlexTsf, seed: u64, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model, seed)).map_err(|e| Error::io(path, e))
}

fn truncated(e: std::io::Error) -> Error {
    Error::Checkpoint(format!("truncated or unreadable: {e}"))
}

fn read_string(c: &mut Cursor<&[u8]>) -> Result<String> {
    let n = c.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let mut buf = vec![0u8; n];
    c.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
}

/// Decodes a checkpoint. With `expected`, every config key must match.
pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<(FlexTsf, u64)> {
    let mut c = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    c.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = c.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let text = read_string(&mut c)?;
    let found = parse_pairs(&text);
    if let Some(exp) = expected {
        let want = exp.to_pairs();
        for key in want.keys().chain(found.keys()) {
            let (a, b) = (want.get(key), found.get(key));
            if a != b {
                let show = |v: Option<&String>| v.cloned().unwrap_or_else(|| "<missing>".into());
                return Err(Error::ConfigMismatch { key: key.clone(), expected: show(a), found: show(b) });
            }
        }
    }
    let config: ModelConfig =
        toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
    let seed = c.read_u64::<LittleEndian>().map_err(truncated)?;
    let mut constants = [0.0; 12];
    for v in &mut constants {
        *v = c.read_f64::<LittleEndian>().map_err(truncated)?;
    }
    let mut model = FlexTsf::new(config, seed)?;
    model.standardizer = FeatureStandardizer::from_array(&constants);
    let count = c.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    if count != model.params.len() {
        return Err(Error::Checkpoint(format!("{count} arrays stored, model has {}", model.params.len())));
    }
    for i in 0..count {
        let name = read_string(&mut c)?;
        let rank = c.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let shape = (0..rank)
            .map(|_| c.read_u64::<LittleEndian>().map(|d| d as usize).map_err(truncated))
            .collect::<Result<Vec<_>>>()?;
        let param = &mut model.params.as_mut_slice()[i];
        if param.name != name || param.shape != shape {
            return Err(Error::Checkpoint(format!(
                "array {i} is `{name}` {shape:?}, model expects `{}` {:?}",
                param.name, param.shape
            )));
        }
        for v in &mut param.values {
            *v = c.read_f64::<LittleEndian>().map_err(truncated)?;
        }
    }
    if (c.position() as usize) != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after parameter arrays".into()));
    }
    Ok((model, seed))
}

pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<(FlexTsf, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, expected)
}
