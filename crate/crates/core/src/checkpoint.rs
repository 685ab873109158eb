//! Binary parameter files and model checkpoints.
//!
//! Layout, all integers little-endian: `b"SMRT"`, `u32` version, `u32`
//! parameter count, then per parameter a `u16` name length, the UTF-8 name,
//! a `u8` rank, `rank` `u32` dims and the values as raw `f32`. The model
//! config is stored next to the weights as JSON.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real, Tensor};
use crate::transformer::{Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"SMRT";
pub const VERSION: u32 = 1;

pub fn write_params<T: Real, W: Write>(w: &mut W, store: &ParamStore<T>) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for p in store.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[p.value.shape().len() as u8])?;
        for &d in p.value.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in p.value.data() {
            w.write_all(&x.to_f32().unwrap_or(f32::NAN).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> std::result::Result<[u8; N], String> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| format!("truncated file: {e}"))?;
    Ok(buf)
}

pub fn read_params<R: Read>(r: &mut R) -> std::result::Result<ParamStore<f32>, String> {
    if &read_exact::<_, 4>(r)? != MAGIC {
        return Err("bad magic bytes, not a parameter file".into());
    }
    let version = u32::from_le_bytes(read_exact(r)?);
    if version != VERSION {
        return Err(format!("unsupported version {version}, expected {VERSION}"));
    }
    let count = u32::from_le_bytes(read_exact(r)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| format!("truncated file: {e}"))?;
        let name = String::from_utf8(name).map_err(|_| "parameter name is not UTF-8")?;
        let rank = read_exact::<_, 1>(r)?[0] as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| read_exact(r).map(|b| u32::from_le_bytes(b) as usize))
            .collect::<std::result::Result<_, _>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| format!("truncated data for {name}: {e}"))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let value = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        store.insert(name, value).map_err(|e| e.to_string())?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| e.to_string())? != 0 {
        return Err("trailing bytes after the last parameter".into());
    }
    Ok(store)
}

pub fn save_params<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_params(&mut w, store)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<ParamStore<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_params(&mut BufReader::new(file)).map_err(|msg| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg,
    })
}

/// Where the config of the checkpoint at `path` lives.
pub fn config_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_model<T: Real>(path: &Path, model: &Model<T>) -> Result<()> {
    save_params(path, &model.params)?;
    let cfg = config_path(path);
    let text = serde_json::to_string_pretty(&model.config).expect("config serializes") + "\n";
    std::fs::write(&cfg, text).map_err(|e| Error::io(cfg, e))
}

pub fn load_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Loads weights and their config; shapes are checked against the config.
pub fn load_model<T: Real>(path: &Path) -> Result<Model<T>> {
    let config = load_config(&config_path(path))?;
    let params = load_params(path)?;
    Model::from_params(config, params.cast())
}
