//! Self-describing binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"EXCK"
//! version u32 (currently 1)
//! n_kv    u32                      config header
//! n_kv x  { klen u32, key utf-8, vlen u32, value utf-8 }
//! n_t     u32                      tensor table
//! n_t  x  { nlen u32, name utf-8, rows u64, cols u64, rows*cols f32 }
//! ```
//!
//! Tensors are row-major 32-bit floats. The config header carries every
//! `ModelConfig` field as decimal strings, so a reader needs nothing but
//! this file to reconstruct the model.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"EXCK";
const FORMAT_VERSION: u32 = 1;

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;

    let cfg = &params.config;
    let kvs: Vec<(String, String)> = vec![
        ("n_layers".into(), cfg.n_layers.to_string()),
        ("d_model".into(), cfg.d_model.to_string()),
        ("n_heads".into(), cfg.n_heads.to_string()),
        ("vocab_size".into(), cfg.vocab_size.to_string()),
        ("max_seq_len".into(), cfg.max_seq_len.to_string()),
        ("exit_stride".into(), cfg.exit_stride.to_string()),
        ("lora_rank".into(), cfg.lora_rank.to_string()),
    ];
    w.write_all(&(kvs.len() as u32).to_le_bytes())?;
    for (k, v) in &kvs {
        write_str(&mut w, k)?;
        write_str(&mut w, v)?;
    }

    let tensors = params.named_tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        write_str(&mut w, &name)?;
        w.write_all(&(t.rows as u64).to_le_bytes())?;
        w.write_all(&(t.cols as u64).to_le_bytes())?;
        for &v in &t.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }

    let n_kv = read_u32(&mut r)? as usize;
    let mut kvs = std::collections::HashMap::new();
    for _ in 0..n_kv {
        let k = read_str(&mut r)?;
        let v = read_str(&mut r)?;
        kvs.insert(k, v);
    }
    let field = |name: &str| -> Result<usize> {
        kvs.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing config key {name}")))?
            .parse::<usize>()
            .map_err(|_| Error::Checkpoint(format!("bad value for config key {name}")))
    };
    let config = ModelConfig {
        n_layers: field("n_layers")?,
        d_model: field("d_model")?,
        n_heads: field("n_heads")?,
        vocab_size: field("vocab_size")?,
        max_seq_len: field("max_seq_len")?,
        exit_stride: field("exit_stride")?,
        lora_rank: field("lora_rank")?,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invalid config in checkpoint: {e}")))?;

    let n_t = read_u32(&mut r)? as usize;
    let mut tensors = std::collections::HashMap::new();
    for _ in 0..n_t {
        let name = read_str(&mut r)?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let mut data = vec![0.0f64; rows * cols];
        let mut buf = [0u8; 4];
        for v in &mut data {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf) as f64;
        }
        tensors.insert(name, Tensor::from_vec(rows, cols, data));
    }

    // Materialize a zero model with the right shapes, then fill from the table.
    let mut params = ModelParams::init(&config, 0)?;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut missing = Vec::new();
    params.for_each_tensor_mut(|i, t| {
        match tensors.get(&names[i]) {
            Some(src) if src.rows == t.rows && src.cols == t.cols => {
                t.data.copy_from_slice(&src.data);
            }
            Some(_) => missing.push(format!("{} (shape mismatch)", names[i])),
            None => missing.push(names[i].clone()),
        }
    });
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint missing or mismatched tensors: {}",
            missing.join(", ")
        )));
    }
    params.version = 0;
    Ok(params)
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::Checkpoint("unreasonable string length".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("invalid utf-8 in header".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_preserves_f32_values() {
        let config = ModelConfig {
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            vocab_size: 12,
            max_seq_len: 16,
            exit_stride: 1,
            lora_rank: 2,
        };
        let params = ModelParams::init(&config, 9).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&params, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.config, config);
        // values survive as f32; saving again must be byte-identical
        let path2 = dir.path().join("m2.ckpt");
        save(&loaded, &path2).unwrap();
        let a = std::fs::read(&path).unwrap();
        let b = std::fs::read(&path2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
