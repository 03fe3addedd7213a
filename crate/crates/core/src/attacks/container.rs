//! Persistence of adversarial batches: a small container with a JSON
//! metadata header and gzip-compressed arrays.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::AttackResult;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LURADV\0\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackMeta {
    pub attack_id: String,
    pub epsilon: f32,
    pub seed: u64,
    pub queries: usize,
    pub n: usize,
    pub d: usize,
}

pub fn save_attack_result(
    res: &AttackResult,
    epsilon: f32,
    seed: u64,
    path: impl AsRef<Path>,
) -> Result<()> {
    let meta = AttackMeta {
        attack_id: res.attack_id.clone(),
        epsilon,
        seed,
        queries: res.queries,
        n: res.x_clean.nrows(),
        d: res.x_clean.ncols(),
    };
    let header = serde_json::to_vec(&meta)?;
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(header.len() as u32)?;
    w.write_all(&header)?;
    let mut enc = GzEncoder::new(w, Compression::default());
    for v in res.x_clean.iter().chain(res.x_adv.iter()) {
        enc.write_all(&v.to_le_bytes())?;
    }
    for &label in &res.y {
        enc.write_all(&(label as u32).to_le_bytes())?;
    }
    enc.finish()?.flush()?;
    Ok(())
}

pub fn load_attack_result(path: impl AsRef<Path>) -> Result<(AttackResult, AttackMeta)> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::DataFormat(format!(
            "{}: not an adversarial container",
            path.as_ref().display()
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::DataFormat(format!(
            "{}: unsupported container version {version}",
            path.as_ref().display()
        )));
    }
    let hlen = r.read_u32::<LittleEndian>()? as usize;
    let mut header = vec![0u8; hlen];
    r.read_exact(&mut header)?;
    let meta: AttackMeta = serde_json::from_slice(&header)?;
    let mut dec = GzDecoder::new(r);
    let mut read_f32s = |count: usize| -> Result<Vec<f32>> {
        let mut buf = vec![0u8; count * 4];
        dec.read_exact(&mut buf).map_err(|_| {
            Error::DataFormat(format!("{}: truncated arrays", path.as_ref().display()))
        })?;
        Ok(buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    };
    let x_clean = Array2::from_shape_vec((meta.n, meta.d), read_f32s(meta.n * meta.d)?)
        .expect("container reshape");
    let x_adv = Array2::from_shape_vec((meta.n, meta.d), read_f32s(meta.n * meta.d)?)
        .expect("container reshape");
    let mut ybuf = vec![0u8; meta.n * 4];
    dec.read_exact(&mut ybuf).map_err(|_| {
        Error::DataFormat(format!("{}: truncated labels", path.as_ref().display()))
    })?;
    let y = ybuf
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
        .collect();
    Ok((
        AttackResult {
            x_clean,
            x_adv,
            y,
            queries: meta.queries,
            attack_id: meta.attack_id.clone(),
        },
        meta,
    ))
}
