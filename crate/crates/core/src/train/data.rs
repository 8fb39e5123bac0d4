use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::datagen::{preprocess_image, read_params, DatasetManifest, MANIFEST_FILE};
use crate::error::{contract, Error, Result};
use crate::nnet::Tensor;
use crate::render::ImageRGB8;
use crate::{Scalar, NUM_CONTROLS};

/// One preprocessed training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    /// `[3, R, R]`
    pub appearance: Tensor<T>,
    /// `[3, R, R]`
    pub normal: Tensor<T>,
    pub params: Vec<T>,
}

pub trait SampleSource<T>: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, index: usize) -> Result<Sample<T>>;
}

/// Stacks samples into `(appearance [B,3,R,R], normal [B,3,R,R], params [B,K])`.
pub fn collate<T: Scalar>(batch: &[Sample<T>]) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    contract!(!batch.is_empty(), "empty batch");
    let a: Vec<_> = batch.iter().map(|s| s.appearance.clone()).collect();
    let n: Vec<_> = batch.iter().map(|s| s.normal.clone()).collect();
    let k = batch[0].params.len();
    let mut p = Vec::with_capacity(batch.len() * k);
    for s in batch {
        contract!(s.params.len() == k, "ragged parameter vectors");
        p.extend_from_slice(&s.params);
    }
    Ok((Tensor::stack(&a)?, Tensor::stack(&n)?, Tensor::new(vec![batch.len(), k], p)?))
}

/// Loads `indices` in parallel, preserving order.
pub fn load_batch<T: Scalar>(src: &dyn SampleSource<T>, indices: &[usize]) -> Result<Vec<Sample<T>>> {
    indices.par_iter().map(|&i| src.get(i)).collect()
}

#[derive(Clone, Debug)]
pub struct MemoryDataset<T> {
    pub samples: Vec<Sample<T>>,
}

impl<T: Scalar> SampleSource<T> for MemoryDataset<T> {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn get(&self, index: usize) -> Result<Sample<T>> {
        self.samples
            .get(index)
            .cloned()
            .ok_or_else(|| Error::Contract(format!("sample {index} out of range")))
    }
}

/// A generated dataset directory, read and preprocessed on demand.
#[derive(Clone, Debug)]
pub struct DiskDataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    /// Network input side length.
    pub resolution: usize,
}

impl DiskDataset {
    /// `path` is the dataset directory or its `manifest.json`.
    pub fn open(path: &Path, resolution: usize) -> Result<Self> {
        let (root, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
        };
        let manifest = DatasetManifest::load(&file)?;
        if manifest.num_controls != NUM_CONTROLS {
            return Err(Error::Invalid(format!(
                "{}: dataset has {} controls, expected {NUM_CONTROLS}",
                file.display(),
                manifest.num_controls
            )));
        }
        Ok(DiskDataset {
            root,
            manifest,
            resolution,
        })
    }

    pub fn sample_dir(&self, index: usize) -> PathBuf {
        self.root.join(&self.manifest.samples[index].dir)
    }

    pub fn images(&self, index: usize) -> Result<(ImageRGB8, ImageRGB8)> {
        let dir = self.sample_dir(index);
        Ok((
            ImageRGB8::read_png(&dir.join("appearance.png"))?,
            ImageRGB8::read_png(&dir.join("normal.png"))?,
        ))
    }

    /// Preprocesses every sample once and keeps the tensors in memory.
    pub fn load_all<T: Scalar>(&self) -> Result<MemoryDataset<T>> {
        let samples = (0..self.manifest.samples.len())
            .into_par_iter()
            .map(|i| SampleSource::<T>::get(self, i))
            .collect::<Result<_>>()?;
        Ok(MemoryDataset { samples })
    }
}

impl<T: Scalar> SampleSource<T> for DiskDataset {
    fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    fn get(&self, index: usize) -> Result<Sample<T>> {
        contract!(index < self.manifest.samples.len(), "sample {index} out of range");
        let (a, n) = self.images(index)?;
        let p = read_params(&self.sample_dir(index).join("params.json"))?;
        Ok(Sample {
            appearance: preprocess_image(&a, self.resolution),
            normal: preprocess_image(&n, self.resolution),
            params: p.values().iter().map(|&v| T::of(v)).collect(),
        })
    }
}
