//! Model checkpoints: one self-describing binary file.
//!
//! Layout: the version header `GODE-CKPT-v1\n`, a little-endian u32 giving the
//! length of a JSON manifest (the model spec plus named tensor shapes), then
//! the raw tensor values as little-endian f64 in manifest order. Values are
//! stored at full precision regardless of the run precision, so an f32
//! checkpoint round-trips bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GodeError, Result};
use crate::model::{Model, ModelSpec};
use crate::scalar::Scalar;

pub const MAGIC: &[u8] = b"GODE-CKPT-v1\n";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: ModelSpec,
    tensors: Vec<TensorEntry>,
}

pub fn save<S: Scalar>(model: &Model<S>, path: &Path) -> Result<()> {
    let params = model.parameters();
    let manifest = Manifest {
        spec: model.spec.clone(),
        tensors: params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)
        .map_err(|e| GodeError::Checkpoint(format!("manifest encode: {e}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in &params {
        for v in t.data().iter() {
            w.write_all(&v.to_f64().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<Model<S>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = vec![0u8; MAGIC.len()];
    r.read_exact(&mut magic)
        .map_err(|e| GodeError::Checkpoint(format!("{}: {e}", path.display())))?;
    if magic != MAGIC {
        return Err(GodeError::Checkpoint(format!(
            "{}: bad header, not a GODE-CKPT-v1 file",
            path.display()
        )));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let manifest: Manifest = serde_json::from_slice(&json)
        .map_err(|e| GodeError::Checkpoint(format!("manifest decode: {e}")))?;

    let model = Model::<S>::build(&manifest.spec, 0)?;
    let params = model.parameters();
    if params.len() != manifest.tensors.len() {
        return Err(GodeError::Checkpoint(format!(
            "tensor count mismatch: file has {}, spec builds {}",
            manifest.tensors.len(),
            params.len()
        )));
    }
    for ((name, tensor), entry) in params.iter().zip(&manifest.tensors) {
        if *name != entry.name || tensor.shape() != entry.shape.as_slice() {
            return Err(GodeError::Checkpoint(format!(
                "tensor mismatch: expected {name} {:?}, file has {} {:?}",
                tensor.shape(),
                entry.name,
                entry.shape
            )));
        }
        let numel = tensor.numel();
        let mut bytes = vec![0u8; numel * 8];
        r.read_exact(&mut bytes)
            .map_err(|e| GodeError::Checkpoint(format!("truncated tensor {name}: {e}")))?;
        let values: Vec<S> = bytes
            .chunks_exact(8)
            .map(|c| S::from_f64(f64::from_le_bytes(c.try_into().expect("chunk of 8"))))
            .collect();
        tensor.set_data(&values);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(GodeError::Checkpoint(
            "trailing bytes after tensor data".into(),
        ));
    }
    Ok(model)
}
