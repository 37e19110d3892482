//! `manifest.json` (ordered `{name, shape}` list) plus `params.bin`
//! (little-endian f64, concatenated in manifest order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub fn save(dir: &Path, params: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest: Vec<Entry> = params
        .iter()
        .map(|(name, t)| Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let mpath = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&mpath, e))?;
    fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))?;

    let mut bytes = Vec::with_capacity(params.num_scalars() * 8);
    for (_, t) in params.iter() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let ppath = dir.join(PARAMS_FILE);
    fs::write(&ppath, bytes).map_err(|e| Error::io(&ppath, e))
}

pub fn load(dir: &Path) -> Result<ParamStore> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Vec<Entry> = serde_json::from_str(&text).map_err(|e| Error::json(&mpath, e))?;
    let ppath = dir.join(PARAMS_FILE);
    let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let expected: usize = manifest.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if bytes.len() != expected * 8 {
        return Err(Error::Data(format!(
            "{}: expected {} bytes for the manifest, found {}",
            ppath.display(),
            expected * 8,
            bytes.len()
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut store = ParamStore::new();
    for e in manifest {
        let n: usize = e.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        store.add(e.name, Tensor::new(&e.shape, data)?);
    }
    Ok(store)
}

/// Loads into an existing store, requiring identical names and shapes.
pub fn load_into(dir: &Path, store: &mut ParamStore) -> Result<()> {
    let loaded = load(dir)?;
    let same_names = loaded.len() == store.len() && loaded.names().zip(store.names()).all(|(a, b)| a == b);
    if !same_names {
        return Err(Error::Data(format!(
            "{}: checkpoint parameters do not match the model",
            dir.display()
        )));
    }
    store.set_all(loaded.tensors()).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))
}
