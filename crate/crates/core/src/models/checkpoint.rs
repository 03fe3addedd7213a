//! Versioned binary checkpoints: magic, format version, model kind,
//! architecture id, architecture spec, then the f32 parameter arrays.
//! Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Classifier, InputMapper};
use crate::error::{Error, Result};
use crate::nn::{Network, NetworkSpec};

const MAGIC: &[u8; 8] = b"LURCKPT\0";
const VERSION: u32 = 1;

const KIND_CLASSIFIER: u8 = 1;
const KIND_MAPPER: u8 = 2;

fn write_model(
    path: &Path,
    kind: u8,
    arch_id: &str,
    extra: u32,
    net: &Network<f32>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u8(kind)?;
    w.write_u32::<LittleEndian>(extra)?;
    let id = arch_id.as_bytes();
    w.write_u32::<LittleEndian>(id.len() as u32)?;
    w.write_all(id)?;
    let spec = serde_json::to_vec(&net.spec())?;
    w.write_u32::<LittleEndian>(spec.len() as u32)?;
    w.write_all(&spec)?;
    let params = net.params_flat_f64();
    w.write_u64::<LittleEndian>(params.len() as u64)?;
    for v in params {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    w.flush()?;
    Ok(())
}

struct RawCheckpoint {
    kind: u8,
    extra: u32,
    arch_id: String,
    net: Network<f32>,
}

fn read_model(path: &Path) -> Result<RawCheckpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint(format!("{}: file too short for header", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {:?}, not a checkpoint file",
            path.display(),
            magic
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint version {version} (supported: {VERSION})",
            path.display()
        )));
    }
    let kind = r.read_u8()?;
    let extra = r.read_u32::<LittleEndian>()?;
    let id_len = r.read_u32::<LittleEndian>()? as usize;
    let mut id = vec![0u8; id_len];
    r.read_exact(&mut id)?;
    let arch_id = String::from_utf8(id)
        .map_err(|_| Error::Checkpoint(format!("{}: non-utf8 arch id", path.display())))?;
    let spec_len = r.read_u32::<LittleEndian>()? as usize;
    let mut spec_bytes = vec![0u8; spec_len];
    r.read_exact(&mut spec_bytes)?;
    let spec: NetworkSpec = serde_json::from_slice(&spec_bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: corrupt arch spec: {e}", path.display())))?;
    let n_params = r.read_u64::<LittleEndian>()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        params.push(r.read_f32::<LittleEndian>().map_err(|_| {
            Error::Checkpoint(format!(
                "{}: truncated parameter block (expected {n_params} values)",
                path.display()
            ))
        })? as f64);
    }
    // rebuild with zeroed rng-independent params, then overwrite
    let mut seed_rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut net = Network::<f32>::from_spec(&spec, &mut seed_rng);
    if net.param_count() != n_params {
        return Err(Error::Checkpoint(format!(
            "{}: parameter count {} does not match architecture ({} expected)",
            path.display(),
            n_params,
            net.param_count()
        )));
    }
    net.set_params_flat_f64(&params)?;
    Ok(RawCheckpoint {
        kind,
        extra,
        arch_id,
        net,
    })
}

use rand::SeedableRng;

pub fn save_classifier(model: &Classifier, path: impl AsRef<Path>) -> Result<()> {
    write_model(
        path.as_ref(),
        KIND_CLASSIFIER,
        &model.arch_id,
        model.n_classes as u32,
        &model.net,
    )
}

pub fn load_classifier(path: impl AsRef<Path>) -> Result<Classifier> {
    let raw = read_model(path.as_ref())?;
    if raw.kind != KIND_CLASSIFIER {
        return Err(Error::Checkpoint(format!(
            "{}: checkpoint holds a mapper, not a classifier",
            path.as_ref().display()
        )));
    }
    Ok(Classifier::new(raw.net, raw.arch_id, raw.extra as usize))
}

pub fn save_mapper(model: &InputMapper, path: impl AsRef<Path>) -> Result<()> {
    write_model(path.as_ref(), KIND_MAPPER, &model.arch_id, 0, &model.net)
}

pub fn load_mapper(path: impl AsRef<Path>) -> Result<InputMapper> {
    let raw = read_model(path.as_ref())?;
    if raw.kind != KIND_MAPPER {
        return Err(Error::Checkpoint(format!(
            "{}: checkpoint holds a classifier, not a mapper",
            path.as_ref().display()
        )));
    }
    Ok(InputMapper::new(raw.net, raw.arch_id))
}
