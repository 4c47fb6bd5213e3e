//! Deterministic synthetic lesion volumes.
//!
//! Each volume is a smooth textured background (a few random low-frequency
//! cosine waves plus Gaussian noise) with up to three bright ellipsoids.
//! Masks are the exact ellipsoid interiors sampled at voxel centres, and every
//! mask voxel takes its intensity from the lesion distribution.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::pgm::write_mask_pgm;
use super::tensor_file::write_tensor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub volumes: usize,
    /// `D x H x W`.
    pub extent: [usize; 3],
    pub lesions_min: usize,
    pub lesions_max: usize,
    /// Smallest semi-axes `(z, y, x)` in voxels.
    pub radius_min: [f64; 3],
    pub radius_max: [f64; 3],
    pub background_mean: f64,
    pub background_std: f64,
    pub lesion_mean: f64,
    pub lesion_std: f64,
    /// Amplitude of the smooth background texture.
    pub texture_scale: f64,
    /// Share of volumes held out for testing.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            volumes: 40,
            extent: [24, 96, 96],
            lesions_min: 1,
            lesions_max: 3,
            radius_min: [2.0, 4.0, 4.0],
            radius_max: [5.0, 14.0, 14.0],
            background_mean: 0.35,
            background_std: 0.04,
            lesion_mean: 0.7,
            lesion_std: 0.04,
            texture_scale: 0.15,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.volumes == 0 {
            p.push("volume count must be positive".to_string());
        }
        if self.extent.contains(&0) {
            p.push(format!("extent {:?} must be positive", self.extent));
        }
        if self.extent[0] < 4 {
            p.push(format!("depth {} is below the 4-slice stack", self.extent[0]));
        }
        if self.lesions_min > self.lesions_max || self.lesions_max > 3 {
            p.push(format!(
                "lesion count range {}..={} must lie within 0..=3",
                self.lesions_min, self.lesions_max
            ));
        }
        for a in 0..3 {
            let (lo, hi) = (self.radius_min[a], self.radius_max[a]);
            if !(lo > 0.0 && lo <= hi) {
                p.push(format!(
                    "axis {a}: radius range [{lo}, {hi}] must be positive and ordered"
                ));
            }
            if 2.0 * hi + 1.0 > self.extent[a] as f64 {
                p.push(format!("axis {a}: radius {hi} does not fit extent {}", self.extent[a]));
            }
        }
        for (name, v) in [
            ("background_std", self.background_std),
            ("lesion_std", self.lesion_std),
            ("texture_scale", self.texture_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                p.push(format!("{name} {v} must be finite and nonnegative"));
            }
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            p.push(format!("test fraction {} outside [0, 1)", self.test_fraction));
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    /// `(z, y, x)` in voxel coordinates.
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.radii.iter().product::<f64>()
    }
}

#[derive(Clone, Debug)]
pub struct SynthVolume {
    pub id: String,
    /// `D x H x W` intensities.
    pub image: Tensor<f32>,
    /// `D x H x W` binary mask.
    pub mask: Tensor<f32>,
    pub lesions: Vec<Ellipsoid>,
}

pub fn volume_id(index: usize) -> String {
    format!("vol_{index:03}")
}

/// Volume `index`, drawn from its own generator seeded with `seed + index`.
pub fn synthesize_volume(spec: &SynthSpec, index: usize) -> Result<SynthVolume> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(index as u64));
    let [d, h, w] = spec.extent;

    let n = rng.random_range(spec.lesions_min..=spec.lesions_max);
    let lesions: Vec<Ellipsoid> = (0..n)
        .map(|_| {
            let radii: [f64; 3] = std::array::from_fn(|a| rng.random_range(spec.radius_min[a]..=spec.radius_max[a]));
            let center = std::array::from_fn(|a| {
                let hi = spec.extent[a] as f64 - 1.0 - radii[a];
                rng.random_range(radii[a]..=hi.max(radii[a]))
            });
            Ellipsoid { center, radii }
        })
        .collect();

    const WAVES: usize = 4;
    let waves: Vec<([f64; 3], f64)> = (0..WAVES)
        .map(|_| {
            let freq = std::array::from_fn(|_| {
                let period = rng.random_range(16.0..48.0);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * std::f64::consts::TAU / period
            });
            (freq, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();

    let bg_noise = Normal::new(0.0, spec.background_std).map_err(|e| Error::config(e.to_string()))?;
    let lesion = Normal::new(spec.lesion_mean, spec.lesion_std).map_err(|e| Error::config(e.to_string()))?;
    let mut image = Vec::with_capacity(d * h * w);
    let mut mask = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                if lesions.iter().any(|e| e.contains(p)) {
                    mask.push(1.0);
                    image.push(lesion.sample(&mut rng) as f32);
                } else {
                    let texture: f64 = waves
                        .iter()
                        .map(|(f, phase)| (f[0] * p[0] + f[1] * p[1] + f[2] * p[2] + phase).cos())
                        .sum::<f64>()
                        / WAVES as f64;
                    mask.push(0.0);
                    image
                        .push((spec.background_mean + spec.texture_scale * texture + bg_noise.sample(&mut rng)) as f32);
                }
            }
        }
    }
    Ok(SynthVolume {
        id: volume_id(index),
        image: Tensor::new(&spec.extent, image)?,
        mask: Tensor::new(&spec.extent, mask)?,
        lesions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded partition of the volume ids; at least one volume lands on each side
/// when there are two or more.
pub fn split_volumes(spec: &SynthSpec) -> Split {
    let n = spec.volumes;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_5911_7000_0000);
    idx.shuffle(&mut rng);
    let mut n_test = (n as f64 * spec.test_fraction).round() as usize;
    if n >= 2 {
        n_test = n_test.clamp(1, n - 1);
    } else {
        n_test = 0;
    }
    let mut test: Vec<usize> = idx[..n_test].to_vec();
    let mut train: Vec<usize> = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Split {
        train: train.into_iter().map(volume_id).collect(),
        test: test.into_iter().map(volume_id).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeEntry {
    pub id: String,
    /// Paths relative to the dataset root.
    pub image: String,
    pub mask: String,
    pub lesions: Vec<Ellipsoid>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: SynthSpec,
    pub volumes: Vec<VolumeEntry>,
    pub split: Split,
}

pub const MANIFEST: &str = "manifest.json";

/// Write every volume (`volumes/<id>.tcnt`), its mask as a stacked PGM
/// (`masks/<id>.pgm`, `(D * H) x W`) and `manifest.json` under `root`.
pub fn generate_synthetic(spec: &SynthSpec, root: impl AsRef<Path>) -> Result<DatasetManifest> {
    spec.validate()?;
    let root = root.as_ref();
    for sub in ["volumes", "masks"] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut volumes = Vec::with_capacity(spec.volumes);
    for i in 0..spec.volumes {
        let v = synthesize_volume(spec, i)?;
        let image = format!("volumes/{}.tcnt", v.id);
        let mask = format!("masks/{}.pgm", v.id);
        write_tensor(root.join(&image), &v.image)?;
        write_mask_pgm(root.join(&mask), &v.mask)?;
        log::debug!("wrote {} with {} lesions", v.id, v.lesions.len());
        volumes.push(VolumeEntry {
            id: v.id,
            image,
            mask,
            lesions: v.lesions,
        });
    }
    let manifest = DatasetManifest {
        spec: spec.clone(),
        volumes,
        split: split_volumes(spec),
    };
    let path = root.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
