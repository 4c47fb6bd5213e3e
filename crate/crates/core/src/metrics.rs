//! Overlap and surface-distance metrics for binary segmentations.
//!
//! Masks are 2D (`H x W`) or 3D (`D x H x W`). Distances are measured between
//! surface voxels (foreground voxels with a face neighbour outside the
//! foreground, the image border counting as outside) and scaled by the
//! per-axis spacing in millimetres. The Hausdorff distance is the full
//! maximum, not a percentile.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Strictly binary mask of rank 2 or 3.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(shape: &[usize], data: Vec<bool>) -> Result<Self> {
        if !(2..=3).contains(&shape.len()) || shape.contains(&0) {
            return Err(Error::dim(
                "mask",
                format!("expected a positive 2D or 3D shape, got {shape:?}"),
            ));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim(
                "mask",
                format!("shape {shape:?} does not hold {} values", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Rejects any value other than 0 or 1.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let mut data = Vec::with_capacity(t.len());
        for &v in t.data() {
            if v == T::zero() {
                data.push(false);
            } else if v == T::one() {
                data.push(true);
            } else {
                return Err(Error::Validation(format!("mask value {v} is not binary")));
            }
        }
        Self::new(t.shape(), data)
    }

    /// Foreground where `t >= threshold`.
    pub fn threshold<T: Real>(t: &Tensor<T>, threshold: T) -> Result<Self> {
        Self::new(t.shape(), t.data().iter().map(|&v| v >= threshold).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            &self.shape,
            self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask shape is valid")
    }

    /// Stack equally shaped 2D masks along a new leading axis.
    pub fn stack(slices: &[BinaryMask]) -> Result<Self> {
        let first = slices.first().ok_or_else(|| Error::dim("mask stack", "no slices"))?;
        if first.shape.len() != 2 || slices.iter().any(|m| m.shape != first.shape) {
            return Err(Error::dim("mask stack", "slices must share one 2D shape"));
        }
        let data = slices.iter().flat_map(|m| m.data.iter().copied()).collect();
        Self::new(&[slices.len(), first.shape[0], first.shape[1]], data)
    }

    fn dims3(&self) -> [usize; 3] {
        match self.shape[..] {
            [h, w] => [1, h, w],
            [d, h, w] => [d, h, w],
            _ => unreachable!("rank checked on construction"),
        }
    }
}

/// Overlap counts `(tp, fp, fn)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn of(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        same_shape("confusion", pred, gt)?;
        let mut c = Confusion::default();
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                _ => {}
            }
        }
        Ok(c)
    }

    pub fn dsc(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

fn same_shape(op: &'static str, a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::dim(
            op,
            format!("prediction {:?} vs ground truth {:?}", a.shape, b.shape),
        ));
    }
    Ok(())
}

/// `2TP / (2TP + FP + FN)`; two empty masks score 1.
pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(Confusion::of(pred, gt)?.dsc())
}

/// Dice over counts pooled across every pair.
pub fn dsc_global(pairs: &[(&BinaryMask, &BinaryMask)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Validation("global DSC needs at least one pair".into()));
    }
    let mut total = Confusion::default();
    for (p, g) in pairs {
        let c = Confusion::of(p, g)?;
        total.tp += c.tp;
        total.fp += c.fp;
        total.fn_ += c.fn_;
    }
    Ok(total.dsc())
}

/// `(TP / (TP + FN), TP / (TP + FP))`. An empty denominator gives 1 when both
/// masks are empty and 0 otherwise.
pub fn recall_precision(pred: &BinaryMask, gt: &BinaryMask) -> Result<(f64, f64)> {
    let c = Confusion::of(pred, gt)?;
    let both_empty = c.tp + c.fp + c.fn_ == 0;
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            if both_empty {
                1.0
            } else {
                0.0
            }
        } else {
            num as f64 / den as f64
        }
    };
    Ok((ratio(c.tp, c.tp + c.fn_), ratio(c.tp, c.tp + c.fp)))
}

/// Surface voxels in row-major order, as full-rank indices.
pub fn surface(mask: &BinaryMask) -> Vec<Vec<usize>> {
    let [d, h, w] = mask.dims3();
    let rank = mask.shape.len();
    let at = |z: usize, y: usize, x: usize| mask.data[(z * h + y) * w + x];
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(z, y, x) {
                    continue;
                }
                let outside = |dz: isize, dy: isize, dx: isize| {
                    let (nz, ny, nx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                    nz < 0
                        || ny < 0
                        || nx < 0
                        || nz >= d as isize
                        || ny >= h as isize
                        || nx >= w as isize
                        || !at(nz as usize, ny as usize, nx as usize)
                };
                let mut border = outside(0, -1, 0) || outside(0, 1, 0) || outside(0, 0, -1) || outside(0, 0, 1);
                if rank == 3 {
                    border = border || outside(-1, 0, 0) || outside(1, 0, 0);
                }
                if border {
                    out.push(if rank == 3 { vec![z, y, x] } else { vec![y, x] });
                }
            }
        }
    }
    out
}

fn check_spacing(spacing: &[f64], rank: usize) -> Result<()> {
    if spacing.len() != rank || spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Validation(format!(
            "spacing {spacing:?} must hold {rank} positive finite values"
        )));
    }
    Ok(())
}

/// One-dimensional lower envelope of parabolas (Felzenszwalb & Huttenlocher),
/// with the axis step scaled by `w2 = spacing²`.
fn edt_1d(f: &[f64], w2: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else {
        out.fill(f64::INFINITY);
        return;
    };
    v[0] = q0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let inter = |q: usize, p: usize| {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + w2 * qf * qf) - (f[p] + w2 * pf * pf)) / (2.0 * w2 * (qf - pf))
    };
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let mut s = inter(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = inter(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = w2 * d * d + f[v[k]];
    }
}

/// Squared distance (in mm²) from every voxel to the nearest point of `points`.
fn squared_distance_field(dims: [usize; 3], spacing3: [f64; 3], points: &[Vec<usize>]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut f = vec![f64::INFINITY; d * h * w];
    for p in points {
        let (z, y, x) = match p[..] {
            [y, x] => (0, y, x),
            [z, y, x] => (z, y, x),
            _ => unreachable!(),
        };
        f[(z * h + y) * w + x] = 0.0;
    }
    let n = d.max(h).max(w);
    let (mut line, mut out, mut v, mut zb) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
    let strides = [h * w, w, 1];
    for axis in 0..3 {
        let len = dims[axis];
        if len == 1 {
            continue;
        }
        let w2 = spacing3[axis] * spacing3[axis];
        let stride = strides[axis];
        for base in 0..d * h * w {
            if (base / stride) % len != 0 {
                continue;
            }
            for i in 0..len {
                line[i] = f[base + i * stride];
            }
            edt_1d(&line[..len], w2, &mut out[..len], &mut v, &mut zb);
            for i in 0..len {
                f[base + i * stride] = out[i];
            }
        }
    }
    f
}

/// Nearest-surface distances from each surface point of `a` to the surface of `b`.
fn directed(a: &BinaryMask, sa: &[Vec<usize>], sb: &[Vec<usize>], spacing: &[f64]) -> Vec<f64> {
    let dims = a.dims3();
    let sp3 = if spacing.len() == 2 {
        [1.0, spacing[0], spacing[1]]
    } else {
        [spacing[0], spacing[1], spacing[2]]
    };
    let field = squared_distance_field(dims, sp3, sb);
    let [_, h, w] = dims;
    sa.iter()
        .map(|p| {
            let idx = match p[..] {
                [y, x] => y * w + x,
                [z, y, x] => (z * h + y) * w + x,
                _ => unreachable!(),
            };
            field[idx].sqrt()
        })
        .collect()
}

/// Both directed distance lists, or `None` when either surface is empty.
fn surface_distances(pred: &BinaryMask, gt: &BinaryMask, spacing: &[f64]) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    same_shape("surface distance", pred, gt)?;
    check_spacing(spacing, pred.shape.len())?;
    let (sp, sg) = (surface(pred), surface(gt));
    if sp.is_empty() || sg.is_empty() {
        return Ok(None);
    }
    Ok(Some((
        directed(pred, &sp, &sg, spacing),
        directed(gt, &sg, &sp, spacing),
    )))
}

/// Average symmetric surface distance in mm; `None` if either surface is empty.
pub fn assd(pred: &BinaryMask, gt: &BinaryMask, spacing: &[f64]) -> Result<Option<f64>> {
    Ok(surface_distances(pred, gt, spacing)?.map(|(a, b)| {
        let total: f64 = a.iter().sum::<f64>() + b.iter().sum::<f64>();
        total / (a.len() + b.len()) as f64
    }))
}

/// Hausdorff distance in mm; `None` if either surface is empty.
pub fn hd(pred: &BinaryMask, gt: &BinaryMask, spacing: &[f64]) -> Result<Option<f64>> {
    Ok(surface_distances(pred, gt, spacing)?.map(|(a, b)| a.iter().chain(&b).fold(0.0f64, |m, &d| m.max(d))))
}

/// Metrics of one patient volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub dsc: f64,
    pub recall: f64,
    pub precision: f64,
    pub assd_mm: Option<f64>,
    pub hd_mm: Option<f64>,
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            count: v.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: Vec<SampleMetrics>,
    pub dsc: Option<Summary>,
    pub recall: Option<Summary>,
    pub precision: Option<Summary>,
    pub assd_mm: Option<Summary>,
    pub hd_mm: Option<Summary>,
    pub dsc_global: f64,
    /// Samples left out of the distance summaries because a surface was empty.
    pub surface_excluded: usize,
}

impl MetricsReport {
    /// Evaluate `(id, prediction, ground truth)` triples.
    pub fn evaluate(items: &[(String, BinaryMask, BinaryMask)], spacing: &[f64]) -> Result<Self> {
        let mut samples = Vec::with_capacity(items.len());
        for (id, p, g) in items {
            let (recall, precision) = recall_precision(p, g)?;
            let dists = surface_distances(p, g, spacing)?;
            let (assd_mm, hd_mm) = match dists {
                Some((a, b)) => {
                    let total: f64 = a.iter().sum::<f64>() + b.iter().sum::<f64>();
                    let hd = a.iter().chain(&b).fold(0.0f64, |m, &d| m.max(d));
                    (Some(total / (a.len() + b.len()) as f64), Some(hd))
                }
                None => (None, None),
            };
            samples.push(SampleMetrics {
                id: id.clone(),
                dsc: dsc(p, g)?,
                recall,
                precision,
                assd_mm,
                hd_mm,
            });
        }
        let pairs: Vec<_> = items.iter().map(|(_, p, g)| (p, g)).collect();
        let dsc_global = if pairs.is_empty() { 1.0 } else { dsc_global(&pairs)? };
        Ok(Self {
            dsc: Summary::of(samples.iter().map(|s| s.dsc)),
            recall: Summary::of(samples.iter().map(|s| s.recall)),
            precision: Summary::of(samples.iter().map(|s| s.precision)),
            assd_mm: Summary::of(samples.iter().filter_map(|s| s.assd_mm)),
            hd_mm: Summary::of(samples.iter().filter_map(|s| s.hd_mm)),
            surface_excluded: samples.iter().filter(|s| s.assd_mm.is_none()).count(),
            samples,
            dsc_global,
        })
    }

    pub const CSV_HEADER: &'static str = "patient,dsc_global,dsc,recall,precision,assd_mm,hd_mm";

    /// One row per patient, then `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for s in &self.samples {
            out.push_str(&format!(
                "{},,{:.6},{:.6},{:.6},{},{}\n",
                s.id,
                s.dsc,
                s.recall,
                s.precision,
                opt(s.assd_mm),
                opt(s.hd_mm)
            ));
        }
        let pick = |f: fn(&Summary) -> f64| {
            [self.dsc, self.recall, self.precision, self.assd_mm, self.hd_mm].map(|s| opt(s.as_ref().map(f)))
        };
        let [d, r, p, a, h] = pick(|s| s.mean);
        out.push_str(&format!("mean,{:.6},{d},{r},{p},{a},{h}\n", self.dsc_global));
        let [d, r, p, a, h] = pick(|s| s.std);
        out.push_str(&format!("std,,{d},{r},{p},{a},{h}\n"));
        out
    }
}
