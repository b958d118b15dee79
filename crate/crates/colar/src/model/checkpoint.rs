//! Versioned binary checkpoints: config, embedding-scale constant,
//! vocabulary hash, step counter, and named f32 tensors (little-endian).

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"CLRCKPT\0";
const VERSION: u32 = 1;

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Writes a checkpoint for f32 parameters.
pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams<f32>,
    vocab_hash: &[u8; 32],
    step: u64,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let f = File::create(path)?;
    let mut w = BufWriter::new(f);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&params.cfg)?;
    write_u64(&mut w, cfg.len() as u64)?;
    w.write_all(&cfg)?;
    w.write_all(&params.sigma_e.to_le_bytes())?;
    w.write_all(vocab_hash)?;
    write_u64(&mut w, step)?;
    let named = params.named();
    write_u64(&mut w, named.len() as u64)?;
    for (name, t) in named {
        write_u64(&mut w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        write_u64(&mut w, t.shape.len() as u64)?;
        for &d in &t.shape {
            write_u64(&mut w, d as u64)?;
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint, rejecting bad magic, unknown versions, tensor
/// name/shape mismatches, and (optionally) a different vocabulary hash.
pub fn load_checkpoint(
    path: &Path,
    expect_vocab_hash: Option<&[u8; 32]>,
) -> Result<(ModelParams<f32>, [u8; 32], u64)> {
    let f = File::open(path)?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb)?;
    let version = u32::from_le_bytes(vb);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", version)));
    }
    let cfg_len = read_u64(&mut r)? as usize;
    let mut cfg_buf = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_buf)?;
    let cfg: ModelConfig = serde_json::from_slice(&cfg_buf)?;
    let mut f8 = [0u8; 8];
    r.read_exact(&mut f8)?;
    let sigma_e = f64::from_le_bytes(f8);
    let mut vocab_hash = [0u8; 32];
    r.read_exact(&mut vocab_hash)?;
    if let Some(expect) = expect_vocab_hash {
        if expect != &vocab_hash {
            return Err(Error::Checkpoint(
                "checkpoint was trained with a different vocabulary".into(),
            ));
        }
    }
    let step = read_u64(&mut r)?;
    let mut params: ModelParams<f32> = ModelParams::init(cfg)?;
    params.sigma_e = sigma_e;
    let n_tensors = read_u64(&mut r)? as usize;
    let expected: Vec<(String, Vec<usize>)> =
        params.named().iter().map(|(n, t)| (n.clone(), t.shape.clone())).collect();
    if n_tensors != expected.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model needs {}",
            n_tensors,
            expected.len()
        )));
    }
    let mut tensors = params.params_mut();
    for i in 0..n_tensors {
        let name_len = read_u64(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        if name != expected[i].0 {
            return Err(Error::Checkpoint(format!(
                "tensor {} is named {:?}, expected {:?}",
                i, name, expected[i].0
            )));
        }
        let ndim = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        if shape != expected[i].1 {
            return Err(Error::Checkpoint(format!(
                "tensor {:?} has shape {:?}, expected {:?}",
                name, shape, expected[i].1
            )));
        }
        let t = &mut tensors[i];
        let mut b4 = [0u8; 4];
        for v in t.data.iter_mut() {
            r.read_exact(&mut b4)?;
            *v = f32::from_le_bytes(b4);
        }
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok((params, vocab_hash, step))
}
