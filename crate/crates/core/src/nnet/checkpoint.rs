//! On-disk model format: `model.json` plus one raw little-endian blob per
//! parameter under `params/`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{read_json, write_json, Error, Result};
use crate::nnet::{DualBranchRegressor, ModelConfig};
use crate::Scalar;

pub const MODEL_FILE: &str = "model.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    /// Blob path relative to the checkpoint directory.
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
}

pub fn write_blob<T: Scalar>(path: &Path, data: &[T]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * T::BYTES);
    for &v in data {
        v.push_le(&mut bytes);
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads `len` values stored as `dtype` and converts them to `T`.
pub fn read_blob<T: Scalar>(path: &Path, dtype: &str, len: usize) -> Result<Vec<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let width = match dtype {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Invalid(format!("{}: unknown dtype {other}", path.display()))),
    };
    if bytes.len() != len * width {
        return Err(Error::Invalid(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            len * width,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(width)
        .map(|c| match width {
            4 => T::of(f32::from_le(c) as f64),
            _ => T::of(f64::from_le(c)),
        })
        .collect())
}

fn blob_name(name: &str) -> String {
    format!("params/{name}.bin")
}

pub fn save_model<T: Scalar>(model: &DualBranchRegressor<T>, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::new();
    for (_, p) in model.params().iter() {
        let file = blob_name(&p.name);
        write_blob(&dir.join(&file), p.data())?;
        params.push(ParamEntry {
            name: p.name.clone(),
            group: p.group.clone(),
            shape: p.shape().to_vec(),
            trainable: p.trainable,
            file,
        });
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        config: model.config().clone(),
        params,
    };
    let path = dir.join(MODEL_FILE);
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Loads a checkpoint directory (or its `model.json`) into precision `T`.
pub fn load_model<T: Scalar>(path: &Path) -> Result<DualBranchRegressor<T>> {
    let (dir, file) = if path.is_dir() {
        (path.to_path_buf(), path.join(MODEL_FILE))
    } else {
        (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
    };
    let manifest: CheckpointManifest = read_json(&file)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Invalid(format!(
            "{}: unsupported format version {}",
            file.display(),
            manifest.format_version
        )));
    }
    let mut model = DualBranchRegressor::<T>::new(manifest.config.clone(), 0)?;
    if model.params().len() != manifest.params.len() {
        return Err(Error::Invalid(format!(
            "{}: {} parameters listed, architecture has {}",
            file.display(),
            manifest.params.len(),
            model.params().len()
        )));
    }
    let store = model.params_mut();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (entry, id) in manifest.params.iter().zip(ids) {
        let p = store.get(id);
        if p.name != entry.name || p.shape() != entry.shape.as_slice() {
            return Err(Error::Invalid(format!(
                "{}: parameter {} {:?} does not match architecture {} {:?}",
                file.display(),
                entry.name,
                entry.shape,
                p.name,
                p.shape()
            )));
        }
        let data = read_blob::<T>(&dir.join(&entry.file), &manifest.dtype, p.numel())?;
        store.set_data(id, &data)?;
        store.get_mut(id).trainable = entry.trainable;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = DualBranchRegressor::<f32>::new(ModelConfig::default(), 3).unwrap();
        model.set_frozen(&["stage1"]).unwrap();
        save_model(&model, dir.path()).unwrap();
        let back = load_model::<f32>(dir.path()).unwrap();
        assert_eq!(back.config(), model.config());
        for ((_, a), (_, b)) in model.params().iter().zip(back.params().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            let (x, y): (Vec<u32>, Vec<u32>) = (
                a.data().iter().map(|v| v.to_bits()).collect(),
                b.data().iter().map(|v| v.to_bits()).collect(),
            );
            assert_eq!(x, y, "{}", a.name);
        }
        // re-saving produces identical files
        let dir2 = tempfile::tempdir().unwrap();
        save_model(&back, dir2.path()).unwrap();
        for (_, p) in model.params().iter() {
            let f = blob_name(&p.name);
            assert_eq!(fs::read(dir.path().join(&f)).unwrap(), fs::read(dir2.path().join(&f)).unwrap());
        }
        assert_eq!(
            fs::read(dir.path().join(MODEL_FILE)).unwrap(),
            fs::read(dir2.path().join(MODEL_FILE)).unwrap()
        );
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = DualBranchRegressor::<f64>::new(ModelConfig::default(), 1).unwrap();
        save_model(&model, dir.path()).unwrap();
        let f = dir.path().join(blob_name("head.fc2.bias"));
        fs::write(&f, [0u8; 7]).unwrap();
        assert!(load_model::<f64>(dir.path()).is_err());
    }
}
