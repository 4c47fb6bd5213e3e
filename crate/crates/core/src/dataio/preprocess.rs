//! Slice extraction: centre crop, corner-aligned bilinear resize, and
//! four-slice stacking `(z - 2, z - 1, z, z + 1)` with edge clamping.

use serde::{Deserialize, Serialize};

use crate::cpa::{make_coarse_target, CoarseTarget};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Slice offsets stacked as input channels, in channel order.
pub const STACK_OFFSETS: [isize; 4] = [-2, -1, 0, 1];

/// One network input: four neighbouring slices and the mask of the centre slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// `4 x H x W`.
    pub image: Tensor<f32>,
    /// `H x W`, values in {0, 1}.
    pub mask: Tensor<f32>,
    pub patient: String,
    pub slice: usize,
}

impl SegSample {
    pub fn validate(&self) -> Result<()> {
        let s = self.image.shape();
        if s.len() != 3 || s[0] != STACK_OFFSETS.len() || self.mask.shape() != &s[1..] {
            return Err(Error::dim(
                "sample",
                format!("image {s:?} and mask {:?} disagree", self.mask.shape()),
            ));
        }
        if self.mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation(format!(
                "mask of {} slice {} is not binary",
                self.patient, self.slice
            )));
        }
        Ok(())
    }

    pub fn has_lesion(&self) -> bool {
        self.mask.data().iter().any(|&v| v != 0.0)
    }

    /// Patch targets for the five encoder stages (identical grids).
    pub fn coarse_targets(&self, grid: usize) -> Result<Vec<CoarseTarget>> {
        let t = make_coarse_target(&self.mask, grid)?;
        Ok((1..=5).map(|s| t.for_stage(s)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSpec {
    /// Side of the centred square crop; `None` keeps the full slice.
    pub crop: Option<usize>,
    /// Output side after resizing.
    pub side: usize,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self { crop: None, side: 96 }
    }
}

/// Channel `c` of the sample at slice `z` reads slice `clamp(z + STACK_OFFSETS[c], 0, depth - 1)`.
pub fn stack_indices(z: usize, depth: usize) -> [usize; 4] {
    STACK_OFFSETS.map(|o| (z as isize + o).clamp(0, depth as isize - 1) as usize)
}

fn dims3(volume: &Tensor<f32>, what: &str) -> Result<(usize, usize, usize)> {
    match volume.shape() {
        [d, h, w] => Ok((*d, *h, *w)),
        s => Err(Error::dim("preprocess", format!("{what} must be D x H x W, got {s:?}"))),
    }
}

/// Centred `side x side` crop of every slice.
pub fn center_crop(volume: &Tensor<f32>, side: usize) -> Result<Tensor<f32>> {
    let (d, h, w) = dims3(volume, "volume")?;
    if side == 0 || side > h || side > w {
        return Err(Error::dim(
            "center_crop",
            format!("crop {side} does not fit in {h} x {w}"),
        ));
    }
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    let src = volume.data();
    let mut out = Vec::with_capacity(d * side * side);
    for z in 0..d {
        for y in 0..side {
            let row = (z * h + y + y0) * w + x0;
            out.extend_from_slice(&src[row..row + side]);
        }
    }
    Tensor::new(&[d, side, side], out)
}

/// Corner-aligned bilinear resampling of one `h x w` plane: output pixel `i`
/// samples source coordinate `i * (h - 1) / (oh - 1)` (0 when `oh == 1`).
pub fn resize_bilinear(plane: &[f32], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f32> {
    let coord = |i: usize, n: usize, on: usize| -> (usize, usize, f64) {
        if on == 1 || n == 1 {
            return (0, 0, 0.0);
        }
        let s = (i * (n - 1)) as f64 / (on - 1) as f64;
        let lo = (s.floor() as usize).min(n - 1);
        (lo, (lo + 1).min(n - 1), s - lo as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let (y0, y1, fy) = coord(i, h, oh);
        for j in 0..ow {
            let (x0, x1, fx) = coord(j, w, ow);
            let p = |y: usize, x: usize| plane[y * w + x] as f64;
            let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
            let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    out
}

fn resize_volume(volume: &Tensor<f32>, side: usize, binary: bool) -> Result<Tensor<f32>> {
    let (d, h, w) = dims3(volume, "volume")?;
    if (h, w) == (side, side) {
        return Ok(volume.clone());
    }
    let mut out = Vec::with_capacity(d * side * side);
    for z in 0..d {
        let plane = &volume.data()[z * h * w..(z + 1) * h * w];
        let r = resize_bilinear(plane, (h, w), (side, side));
        if binary {
            out.extend(r.into_iter().map(|v| if v >= 0.5 { 1.0 } else { 0.0 }));
        } else {
            out.extend(r);
        }
    }
    Tensor::new(&[d, side, side], out)
}

/// Crop, resize and stack every slice of one patient volume. The mask is
/// resized bilinearly and re-binarised at 0.5.
pub fn preprocess_volume(
    volume: &Tensor<f32>,
    mask: &Tensor<f32>,
    patient: &str,
    spec: &PreprocessSpec,
) -> Result<Vec<SegSample>> {
    let (d, _, _) = dims3(volume, "volume")?;
    if mask.shape() != volume.shape() {
        return Err(Error::dim(
            "preprocess",
            format!("mask {:?} vs volume {:?}", mask.shape(), volume.shape()),
        ));
    }
    if d < STACK_OFFSETS.len() {
        return Err(Error::dim("preprocess", format!("volume depth {d} is below 4")));
    }
    if spec.side == 0 {
        return Err(Error::config("resize side must be positive"));
    }
    let (vol, msk) = match spec.crop {
        Some(c) => (center_crop(volume, c)?, center_crop(mask, c)?),
        None => (volume.clone(), mask.clone()),
    };
    let vol = resize_volume(&vol, spec.side, false)?;
    let msk = resize_volume(&msk, spec.side, true)?;
    let plane = spec.side * spec.side;
    (0..d)
        .map(|z| {
            let mut image = Vec::with_capacity(4 * plane);
            for src in stack_indices(z, d) {
                image.extend_from_slice(&vol.data()[src * plane..(src + 1) * plane]);
            }
            let sample = SegSample {
                image: Tensor::new(&[4, spec.side, spec.side], image)?,
                mask: Tensor::new(&[spec.side, spec.side], msk.data()[z * plane..(z + 1) * plane].to_vec())?,
                patient: patient.to_string(),
                slice: z,
            };
            sample.validate()?;
            Ok(sample)
        })
        .collect()
}

/// Remove lesion-free slices, keeping a deterministic fraction of them: the
/// `k`-th empty slice (0-based, in input order) is kept iff
/// `floor((k + 1) f) > floor(k f)`, so exactly `floor(n_empty f)` survive.
pub fn drop_empty(samples: Vec<SegSample>, keep_empty_fraction: f64) -> Vec<SegSample> {
    let f = keep_empty_fraction.clamp(0.0, 1.0);
    let mut k = 0usize;
    let out: Vec<SegSample> = samples
        .into_iter()
        .filter(|s| {
            if s.has_lesion() {
                return true;
            }
            let keep = ((k + 1) as f64 * f).floor() > (k as f64 * f).floor();
            k += 1;
            keep
        })
        .collect();
    if out.is_empty() {
        log::warn!("every slice was lesion-free; the training set is empty");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn volume(d: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[d, h, w], |_| rng.random())
    }

    #[test]
    fn constant_volume_gives_constant_samples() {
        let v = Tensor::full(&[5, 30, 40], 0.25f32);
        let m = Tensor::zeros(&[5, 30, 40]);
        let spec = PreprocessSpec {
            crop: Some(24),
            side: 12,
        };
        let s = preprocess_volume(&v, &m, "p", &spec).unwrap();
        assert_eq!(s.len(), 5);
        assert!(s.iter().all(|s| s.image.data().iter().all(|&x| x == 0.25)));
        assert_eq!(s[0].image.shape(), &[4, 12, 12]);
    }

    #[test]
    fn edge_clamp_rule() {
        assert_eq!(stack_indices(0, 8), [0, 0, 0, 1]);
        assert_eq!(stack_indices(1, 8), [0, 0, 1, 2]);
        assert_eq!(stack_indices(7, 8), [5, 6, 7, 7]);
        assert_eq!(stack_indices(4, 8), [2, 3, 4, 5]);
    }

    #[test]
    fn channels_match_direct_indexing() {
        let v = volume(8, 6, 6, 0);
        let m = Tensor::zeros(&[8, 6, 6]);
        let samples = preprocess_volume(&v, &m, "p", &PreprocessSpec { crop: None, side: 6 }).unwrap();
        assert_eq!(samples.len(), 8);
        for (z, s) in samples.iter().enumerate() {
            assert_eq!(s.slice, z);
            for c in 0..4 {
                let src = (z as isize + c as isize - 2).clamp(0, 7) as usize;
                for y in 0..6 {
                    for x in 0..6 {
                        assert_eq!(s.image.at(&[c, y, x]), v.at(&[src, y, x]));
                    }
                }
            }
        }
    }

    #[test]
    fn resize_is_idempotent_and_corner_aligned() {
        let v = volume(1, 7, 9, 3);
        let same = resize_bilinear(v.data(), (7, 9), (7, 9));
        assert_eq!(same, v.data());
        let up = resize_bilinear(v.data(), (7, 9), (13, 17));
        assert_eq!(up[0], v.data()[0]);
        assert_eq!(up[16], v.data()[8]);
        assert_eq!(up[13 * 17 - 1], v.data()[62]);
        // midpoint between source rows 0 and 1, columns 0 and 1
        let mid = 0.25 * (v.at(&[0, 0, 0]) + v.at(&[0, 0, 1]) + v.at(&[0, 1, 0]) + v.at(&[0, 1, 1])) as f64;
        assert!((up[17 + 1] as f64 - mid).abs() < 1e-6);
        let again = resize_bilinear(&up, (13, 17), (13, 17));
        assert_eq!(again, up);
    }

    #[test]
    fn crop_errors_and_offsets() {
        let v = volume(4, 10, 12, 1);
        assert!(matches!(center_crop(&v, 11), Err(Error::Dimension { .. })));
        let c = center_crop(&v, 6).unwrap();
        assert_eq!(c.at(&[2, 0, 0]), v.at(&[2, 2, 3]));
        let m = Tensor::zeros(&[3, 10, 12]);
        assert!(preprocess_volume(&volume(3, 10, 12, 1), &m, "p", &PreprocessSpec::default()).is_err());
    }

    fn sample(lesion: bool, z: usize) -> SegSample {
        let mut mask = Tensor::zeros(&[6, 6]);
        if lesion {
            mask.set(&[2, 2], 1.0);
        }
        SegSample {
            image: Tensor::zeros(&[4, 6, 6]),
            mask,
            patient: "p".into(),
            slice: z,
        }
    }

    #[test]
    fn drop_empty_rules() {
        let all: Vec<_> = (0..5).map(|z| sample(true, z)).collect();
        assert_eq!(drop_empty(all.clone(), 0.0), all);
        let none: Vec<_> = (0..5).map(|z| sample(false, z)).collect();
        assert!(drop_empty(none, 0.0).is_empty());

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mixed: Vec<_> = (0..200).map(|z| sample(rng.random::<f64>() < 0.3, z)).collect();
        let lesion = mixed.iter().filter(|s| s.has_lesion()).count();
        let empty = mixed.len() - lesion;
        let kept = drop_empty(mixed, 0.1);
        assert_eq!(kept.len(), lesion + (empty as f64 * 0.1).floor() as usize);
        assert!(kept.windows(2).all(|w| w[0].slice < w[1].slice));
    }
}
