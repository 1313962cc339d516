//! Versioned checkpoint files: self-describing header, the model config as
//! embedded TOML, then named parameter blobs (big-endian f64).

use std::io::{Read, Write};
use std::path::Path;

use crate::config::ModelConfig;
use crate::numerics::ParamStore;

const MAGIC: &[u8; 4] = b"GVCK";
const VERSION: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic (not a checkpoint file)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u8),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("config: {0}")]
    Config(#[from] crate::config::ConfigError),
}

pub fn save(path: &Path, cfg: &ModelConfig, store: &ParamStore) -> Result<(), CheckpointError> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let cfg_text = cfg.to_toml();
    out.extend_from_slice(&(cfg_text.len() as u32).to_be_bytes());
    out.extend_from_slice(cfg_text.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_be_bytes());
    for (name, entry) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_be_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(entry.shape.len() as u8);
        for &d in &entry.shape {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        for &v in &entry.data {
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelConfig, ParamStore), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|e| CheckpointError::Malformed(format!("config not utf-8: {e}")))?;
    let cfg = ModelConfig::from_toml(cfg_text)?;
    let n = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| CheckpointError::Malformed(format!("name not utf-8: {e}")))?
            .to_string();
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let raw = r.take(8)?;
            data.push(f64::from_be_bytes(raw.try_into().unwrap()));
        }
        store.insert(&name, shape, data);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((cfg, store))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Malformed("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_config_and_params() {
        let dir = std::env::temp_dir().join("gvt_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.gvck");
        let cfg = ModelConfig::toy();
        let mut store = ParamStore::new();
        store.insert("a.w", vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-300, -0.125]);
        store.insert("b", vec![1], vec![42.0]);
        save(&path, &cfg, &store).unwrap();
        let (cfg2, store2) = load(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(store2.len(), 2);
        assert_eq!(store2.get("a.w").data, store.get("a.w").data);
        assert_eq!(store2.get("a.w").shape, vec![2, 3]);
        assert_eq!(store2.get("b").data, vec![42.0]);
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = std::env::temp_dir().join("gvt_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.gvck");
        std::fs::write(&path, b"NOPE").unwrap();
        match load(&path) {
            Err(CheckpointError::BadMagic) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }
}
