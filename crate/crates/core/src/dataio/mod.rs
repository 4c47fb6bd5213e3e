//! File formats, slice preprocessing and the synthetic dataset.

mod pgm;
mod preprocess;
mod synth;
mod tensor_file;

use std::path::Path;

pub use pgm::{decode_pgm, encode_pgm, read_mask_pgm, write_gray_pgm, write_mask_pgm};
pub use preprocess::{
    center_crop, drop_empty, preprocess_volume, resize_bilinear, stack_indices, PreprocessSpec, SegSample,
    STACK_OFFSETS,
};
pub use synth::{
    generate_synthetic, split_volumes, synthesize_volume, volume_id, DatasetManifest, Ellipsoid, Split, SynthSpec,
    SynthVolume, VolumeEntry, MANIFEST,
};
pub use tensor_file::{decode_tensor, encode_tensor, read_tensor, write_tensor};

use crate::error::{Error, Result};

/// Preprocessed slices of the train and test volumes, in volume then slice order.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<SegSample>,
    pub test: Vec<SegSample>,
}

impl Dataset {
    /// Slice every volume and route it by the split; nothing is filtered.
    pub fn from_volumes(volumes: &[SynthVolume], split: &Split, prep: &PreprocessSpec) -> Result<Self> {
        let mut ds = Dataset::default();
        for v in volumes {
            let samples = preprocess_volume(&v.image, &v.mask, &v.id, prep)?;
            if split.test.contains(&v.id) {
                ds.test.extend(samples);
            } else if split.train.contains(&v.id) {
                ds.train.extend(samples);
            }
        }
        Ok(ds)
    }

    /// Generate the volumes of `spec` in memory.
    pub fn synthesize(spec: &SynthSpec, prep: &PreprocessSpec) -> Result<Self> {
        let volumes = (0..spec.volumes)
            .map(|i| synthesize_volume(spec, i))
            .collect::<Result<Vec<_>>>()?;
        Self::from_volumes(&volumes, &split_volumes(spec), prep)
    }
}

pub fn read_manifest(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = root.as_ref().join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Read one volume and its mask as `D x H x W` tensors.
pub fn read_volume(root: impl AsRef<Path>, entry: &VolumeEntry, extent: [usize; 3]) -> Result<SynthVolume> {
    let root = root.as_ref();
    let image = read_tensor(root.join(&entry.image))?;
    if image.shape() != extent {
        return Err(Error::Format(format!(
            "{}: extents {:?}, manifest says {extent:?}",
            entry.image,
            image.shape()
        )));
    }
    let mask = read_mask_pgm(root.join(&entry.mask))?
        .reshape(&extent)
        .map_err(|_| Error::Format(format!("{}: mask does not match extents {extent:?}", entry.mask)))?;
    Ok(SynthVolume {
        id: entry.id.clone(),
        image,
        mask,
        lesions: entry.lesions.clone(),
    })
}

/// Load a dataset written by [`generate_synthetic`].
pub fn load_dataset(root: impl AsRef<Path>, prep: &PreprocessSpec) -> Result<(DatasetManifest, Dataset)> {
    let root = root.as_ref();
    let manifest = read_manifest(root)?;
    let volumes = manifest
        .volumes
        .iter()
        .map(|e| read_volume(root, e, manifest.spec.extent))
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset::from_volumes(&volumes, &manifest.split, prep)?;
    Ok((manifest, ds))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_and_memory_datasets_agree() {
        let spec = SynthSpec {
            volumes: 3,
            extent: [5, 12, 12],
            radius_min: [1.0, 2.0, 2.0],
            radius_max: [2.0, 4.0, 4.0],
            ..SynthSpec::default()
        };
        let prep = PreprocessSpec { crop: None, side: 12 };
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&spec, dir.path()).unwrap();
        let (m, disk) = load_dataset(dir.path(), &prep).unwrap();
        let mem = Dataset::synthesize(&spec, &prep).unwrap();
        assert_eq!(m.volumes.len(), 3);
        assert_eq!(disk.train, mem.train);
        assert_eq!(disk.test, mem.test);
        assert_eq!(disk.train.len() + disk.test.len(), 15);
    }
}
