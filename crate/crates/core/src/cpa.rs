//! Coarse-grained patch attention.
//!
//! A feature map is split into a `G x G` grid of equal patches (G = 6 by
//! default). The channel-mean of each patch feeds a two-layer perceptron
//! (`G² -> G²/2 -> G²`, ReLU hidden, sigmoid output) whose outputs are the
//! per-patch attention weights. The weights are replicated over their patch,
//! never interpolated across patch borders, and applied residually:
//! `output = map * feature + feature`.
//!
//! The block is supervised with a binary `G x G` target marking the patches
//! of the ground truth that contain any lesion pixel.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::functional::DenseParams;
use crate::nn::params::{Dense, ParamStore, Session};
use crate::nn::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_GRID: usize = 6;

/// Clamp applied to attention weights inside the coarse BCE.
pub const COARSE_BCE_EPS: f64 = 1e-7;

/// Per-patch attention weights of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<T: Real = f32> {
    /// `G x G` weights in (0, 1).
    pub grid: Tensor<T>,
    /// `(H, W)` of the feature map the grid was computed from.
    pub source_shape: (usize, usize),
}

impl<T: Real> PatchGrid<T> {
    pub fn side(&self) -> usize {
        self.grid.shape()[0]
    }

    /// Patch extents `(H / G, W / G)`.
    pub fn patch(&self) -> (usize, usize) {
        (self.source_shape.0 / self.side(), self.source_shape.1 / self.side())
    }
}

#[derive(Clone, Debug)]
pub struct AttentionResult<T: Real = f32> {
    pub grid: PatchGrid<T>,
    /// `1 x H x W` patch-constant expansion of the grid.
    pub map: Tensor<T>,
    /// `C x H x W` attended features.
    pub output: Tensor<T>,
}

/// Binary `G x G` map: a cell is 1 iff its ground-truth patch holds a lesion pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseTarget {
    pub grid: Tensor<f32>,
    /// Encoder stage (1-based) this target supervises.
    pub stage: usize,
}

impl CoarseTarget {
    /// The same target supervises every stage; patch positions are scale free.
    pub fn for_stage(&self, stage: usize) -> Self {
        Self {
            grid: self.grid.clone(),
            stage,
        }
    }
}

/// Parameters of the patch perceptron.
#[derive(Clone, Debug)]
pub struct PatchMlpParams<T: Real = f32> {
    pub hidden: DenseParams<T>,
    pub output: DenseParams<T>,
}

pub fn hidden_width(grid: usize) -> usize {
    (grid * grid).div_ceil(2)
}

fn check_divisible(op: &'static str, h: usize, w: usize, grid: usize) -> Result<()> {
    if grid == 0 {
        return Err(Error::config("patch grid side must be positive"));
    }
    for (axis, n) in [("H", h), ("W", w)] {
        if n % grid != 0 {
            return Err(Error::dim(
                op,
                format!("{axis} = {n} is not divisible by grid side {grid}"),
            ));
        }
    }
    Ok(())
}

/// Mean over channels, then over each patch: `N x C x H x W -> N x 1 x G x G`.
pub fn patch_summary_var<T: Real>(tape: &mut Tape<T>, x: Var, grid: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::dim(
            "patch_summary",
            format!("expected N x C x H x W, got {s:?}"),
        ));
    }
    check_divisible("patch_summary", s[2], s[3], grid)?;
    let mean = tape.mean_axis(x, 1)?;
    let mean = tape.reshape(mean, &[s[0], 1, s[2], s[3]])?;
    let (ph, pw) = (s[2] / grid, s[3] / grid);
    tape.avg_pool(mean, (ph, pw), (ph, pw))
}

/// Patch perceptron on `N x 1 x G x G` summaries, returning sigmoid weights of
/// the same shape.
pub fn patch_mlp_var<T: Real>(tape: &mut Tape<T>, summary: Var, hidden: (Var, Var), output: (Var, Var)) -> Result<Var> {
    let s = tape.shape(summary).to_vec();
    let n = s[0];
    let cells: usize = s[1..].iter().product();
    let flat = tape.reshape(summary, &[n, cells])?;
    let h = tape.linear(flat, hidden.0, Some(hidden.1))?;
    let h = tape.relu(h);
    let o = tape.linear(h, output.0, Some(output.1))?;
    if tape.shape(o)[1] != cells {
        return Err(Error::dim(
            "patch_mlp",
            format!("output layer width {} != {cells} cells", tape.shape(o)[1]),
        ));
    }
    let w = tape.sigmoid(o);
    tape.reshape(w, &s)
}

/// Replicate every grid cell over its `(H / G) x (W / G)` patch.
pub fn expand_var<T: Real>(tape: &mut Tape<T>, grid: Var, source: (usize, usize)) -> Result<Var> {
    let s = tape.shape(grid).to_vec();
    let g = s[s.len() - 1];
    if s[s.len() - 2] != g {
        return Err(Error::dim("expand_patch_map", format!("grid {s:?} is not square")));
    }
    check_divisible("expand_patch_map", source.0, source.1, g)?;
    tape.upsample_nearest(grid, (source.0 / g, source.1 / g))
}

fn unbatched_feature<T: Real>(feature: &Tensor<T>) -> Result<Tensor<T>> {
    if feature.rank() != 3 {
        return Err(Error::dim(
            "cpa",
            format!("expected C x H x W feature, got {:?}", feature.shape()),
        ));
    }
    let mut s = vec![1];
    s.extend_from_slice(feature.shape());
    feature.clone().reshape(&s)
}

/// `C x H x W -> 1 x G x G` patch means of the channel-mean map.
pub fn patch_summary<T: Real>(feature: &Tensor<T>, grid: usize) -> Result<Tensor<T>> {
    let x = unbatched_feature(feature)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = patch_summary_var(&mut tape, xv, grid)?;
    tape.value(y).clone().reshape(&[1, grid, grid])
}

/// `1 x G x G` summary to attention weights; `source_shape` is recorded on the grid.
pub fn patch_mlp<T: Real>(
    summary: &Tensor<T>,
    params: &PatchMlpParams<T>,
    source_shape: (usize, usize),
) -> Result<PatchGrid<T>> {
    let s = summary.shape();
    if s.len() != 3 || s[0] != 1 || s[1] != s[2] {
        return Err(Error::dim(
            "patch_mlp",
            format!("expected 1 x G x G summary, got {s:?}"),
        ));
    }
    let g = s[1];
    let mut tape = Tape::new();
    let x = tape.constant(summary.clone().reshape(&[1, 1, g, g])?);
    let h = (
        tape.constant(params.hidden.weight.clone()),
        tape.constant(bias_or_zero(&params.hidden)),
    );
    let o = (
        tape.constant(params.output.weight.clone()),
        tape.constant(bias_or_zero(&params.output)),
    );
    let w = patch_mlp_var(&mut tape, x, h, o)?;
    Ok(PatchGrid {
        grid: tape.value(w).clone().reshape(&[g, g])?,
        source_shape,
    })
}

fn bias_or_zero<T: Real>(p: &DenseParams<T>) -> Tensor<T> {
    p.bias.clone().unwrap_or_else(|| Tensor::zeros(&[p.weight.shape()[0]]))
}

/// `1 x H x W` map with `A[x*h + m, y*w + n] = grid[x, y]`.
pub fn expand_patch_map<T: Real>(grid: &PatchGrid<T>) -> Result<Tensor<T>> {
    let g = grid.side();
    let mut tape = Tape::new();
    let v = tape.constant(grid.grid.clone().reshape(&[1, 1, g, g])?);
    let m = expand_var(&mut tape, v, grid.source_shape)?;
    let (h, w) = grid.source_shape;
    tape.value(m).clone().reshape(&[1, h, w])
}

/// Full block on one `C x H x W` feature map.
pub fn cpa_forward<T: Real>(
    feature: &Tensor<T>,
    params: &PatchMlpParams<T>,
    grid: usize,
) -> Result<AttentionResult<T>> {
    let summary = patch_summary(feature, grid)?;
    let s = feature.shape();
    let pg = patch_mlp(&summary, params, (s[1], s[2]))?;
    let map = expand_patch_map(&pg)?;
    let mut tape = Tape::new();
    let x = tape.constant(unbatched_feature(feature)?);
    let a = tape.constant(map.clone().reshape(&[1, 1, s[1], s[2]])?);
    let attended = tape.mul_spatial(x, a)?;
    let out = tape.add(attended, x)?;
    Ok(AttentionResult {
        grid: pg,
        map,
        output: tape.value(out).clone().reshape(s)?,
    })
}

/// Patchwise max of a binary mask (`H x W` or `1 x H x W`).
pub fn make_coarse_target<T: Real>(mask: &Tensor<T>, grid: usize) -> Result<CoarseTarget> {
    let s = mask.shape();
    let (h, w) = match s {
        [h, w] | [1, h, w] => (*h, *w),
        _ => {
            return Err(Error::dim(
                "make_coarse_target",
                format!("expected H x W mask, got {s:?}"),
            ))
        }
    };
    check_divisible("make_coarse_target", h, w, grid)?;
    if let Some(v) = mask.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::Validation(format!("mask value {v} is not binary")));
    }
    let mut tape = Tape::new();
    let x = tape.constant(mask.clone().reshape(&[1, 1, h, w])?);
    let (ph, pw) = (h / grid, w / grid);
    let y = tape.max_pool(x, (ph, pw), (ph, pw))?;
    Ok(CoarseTarget {
        grid: tape.value(y).cast::<f32>().reshape(&[grid, grid])?,
        stage: 1,
    })
}

/// Mean clamped binary cross-entropy between attention weights and target.
pub fn coarse_bce_loss<T: Real>(grid: &PatchGrid<T>, target: &CoarseTarget) -> Result<f64> {
    if grid.grid.shape() != target.grid.shape() {
        return Err(Error::dim(
            "coarse_bce_loss",
            format!("grid {:?} vs target {:?}", grid.grid.shape(), target.grid.shape()),
        ));
    }
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(grid.grid.cast());
    let l = tape.bce_prob(p, &target.grid.cast(), COARSE_BCE_EPS)?;
    Ok(tape.value(l).item())
}

/// Trainable patch attention for one encoder stage.
#[derive(Clone, Debug)]
pub struct CpaBlock {
    pub grid: usize,
    pub hidden: Dense,
    pub output: Dense,
}

/// Tape handles of one evaluated attention block.
#[derive(Clone, Copy, Debug)]
pub struct CpaVars {
    pub output: Var,
    /// `N x 1 x G x G` sigmoid weights.
    pub grid: Var,
    /// `N x 1 x H x W` expanded map.
    pub map: Var,
}

impl CpaBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, grid: usize, rng: &mut ChaCha8Rng) -> Self {
        let cells = grid * grid;
        let hidden = hidden_width(grid);
        Self {
            grid,
            hidden: Dense::new(store, &format!("{name}.fc1"), cells, hidden, rng),
            output: Dense::new(store, &format!("{name}.fc2"), hidden, cells, rng),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<CpaVars> {
        let shape = s.tape.shape(x).to_vec();
        let summary = patch_summary_var(&mut s.tape, x, self.grid)?;
        let h = (s.param(self.hidden.weight), s.param(self.hidden.bias));
        let o = (s.param(self.output.weight), s.param(self.output.bias));
        let grid = patch_mlp_var(&mut s.tape, summary, h, o)?;
        let map = expand_var(&mut s.tape, grid, (shape[2], shape[3]))?;
        let attended = s.tape.mul_spatial(x, map)?;
        let output = s.tape.add(attended, x)?;
        Ok(CpaVars { output, grid, map })
    }

    pub fn params<T: Real>(&self, store: &ParamStore<T>) -> PatchMlpParams<T> {
        PatchMlpParams {
            hidden: DenseParams {
                weight: store.get(self.hidden.weight).clone(),
                bias: Some(store.get(self.hidden.bias).clone()),
            },
            output: DenseParams {
                weight: store.get(self.output.weight).clone(),
                bias: Some(store.get(self.output.bias).clone()),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn zero_params(grid: usize, out_bias: f64) -> PatchMlpParams<f64> {
        let cells = grid * grid;
        let hidden = hidden_width(grid);
        PatchMlpParams {
            hidden: DenseParams {
                weight: Tensor::zeros(&[hidden, cells]),
                bias: Some(Tensor::zeros(&[hidden])),
            },
            output: DenseParams {
                weight: Tensor::zeros(&[cells, hidden]),
                bias: Some(Tensor::full(&[cells], out_bias)),
            },
        }
    }

    fn random_params(rng: &mut ChaCha8Rng) -> PatchMlpParams<f64> {
        let mut r = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random::<f64>() - 0.5);
        PatchMlpParams {
            hidden: DenseParams {
                weight: r(&[18, 36]),
                bias: Some(r(&[18])),
            },
            output: DenseParams {
                weight: r(&[36, 18]),
                bias: Some(r(&[36])),
            },
        }
    }

    #[test]
    fn summary_of_ones_is_ones() {
        let f = Tensor::<f64>::full(&[3, 12, 18], 1.0);
        let s = patch_summary(&f, 6).unwrap();
        assert_eq!(s.shape(), &[1, 6, 6]);
        assert!(s.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn summary_of_patch_constant_feature_recovers_values() {
        let f = Tensor::<f64>::from_fn(&[2, 12, 12], |i| {
            let (y, x) = ((i % 144) / 12, i % 12);
            ((y / 2) * 6 + x / 2 + 1) as f64
        });
        let s = patch_summary(&f, 6).unwrap();
        let want: Vec<f64> = (1..=36).map(|v| v as f64).collect();
        assert_eq!(s.data(), want.as_slice());
    }

    #[test]
    fn summary_matches_double_mean_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = Tensor::<f64>::from_fn(&[2, 12, 12], |_| rng.random::<f64>() * 2.0 - 1.0);
        let s = patch_summary(&f, 6).unwrap();
        for gy in 0..6 {
            for gx in 0..6 {
                let mut acc = 0.0;
                for c in 0..2 {
                    for y in 0..2 {
                        for x in 0..2 {
                            acc += f.at(&[c, gy * 2 + y, gx * 2 + x]);
                        }
                    }
                }
                assert!((s.at(&[0, gy, gx]) - acc / 8.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn summary_rejects_indivisible_extent() {
        let f = Tensor::<f64>::zeros(&[1, 13, 12]);
        assert!(matches!(patch_summary(&f, 6), Err(Error::Dimension { .. })));
    }

    #[test]
    fn mlp_limits() {
        let s = Tensor::<f64>::full(&[1, 6, 6], 0.7);
        let g = patch_mlp(&s, &zero_params(6, 0.0), (12, 12)).unwrap();
        assert!(g.grid.data().iter().all(|&v| v == 0.5));
        let g = patch_mlp(&s, &zero_params(6, 20.0), (12, 12)).unwrap();
        assert!(g.grid.data().iter().all(|&v| (1.0 - v) < 1e-8));
    }

    #[test]
    fn mlp_matches_explicit_affine_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = random_params(&mut rng);
        let s = Tensor::<f64>::from_fn(&[1, 6, 6], |_| rng.random::<f64>() * 2.0 - 1.0);
        let g = patch_mlp(&s, &p, (6, 6)).unwrap();
        let x = s.data();
        let (w1, b1) = (p.hidden.weight.data(), p.hidden.bias.as_ref().unwrap().data());
        let (w2, b2) = (p.output.weight.data(), p.output.bias.as_ref().unwrap().data());
        let h: Vec<f64> = (0..18)
            .map(|j| (b1[j] + (0..36).map(|k| w1[j * 36 + k] * x[k]).sum::<f64>()).max(0.0))
            .collect();
        for i in 0..36 {
            let z = b2[i] + (0..18).map(|j| w2[i * 18 + j] * h[j]).sum::<f64>();
            let want = 1.0 / (1.0 + (-z).exp());
            assert!((g.grid.data()[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn expansion_replicates_blocks() {
        let grid = PatchGrid {
            grid: Tensor::new(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap(),
            source_shape: (4, 4),
        };
        let m = expand_patch_map(&grid).unwrap();
        #[rustfmt::skip]
        let want = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(m.data(), &want);

        let half = PatchGrid {
            grid: Tensor::full(&[6, 6], 0.5f64),
            source_shape: (12, 18),
        };
        assert!(expand_patch_map(&half).unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn expansion_index_formula() {
        let grid = PatchGrid {
            grid: Tensor::from_fn(&[6, 6], |i| (i + 1) as f64),
            source_shape: (12, 12),
        };
        let m = expand_patch_map(&grid).unwrap();
        for v in 1..=36 {
            assert_eq!(m.data().iter().filter(|&&x| x == v as f64).count(), 4);
        }
        for y in 0..12 {
            for x in 0..12 {
                assert_eq!(m.at(&[0, y, x]), grid.grid.at(&[y / 2, x / 2]));
            }
        }
    }

    #[test]
    fn residual_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Tensor::<f64>::from_fn(&[3, 12, 12], |_| rng.random::<f64>() * 4.0 - 2.0);
        let off = cpa_forward(&f, &zero_params(6, -40.0), 6).unwrap();
        assert!(off.output.max_abs_diff(&f) < 1e-6);
        let on = cpa_forward(&f, &zero_params(6, 40.0), 6).unwrap();
        assert!(on.output.max_abs_diff(&f.map(|v| 2.0 * v)) < 1e-4);
    }

    #[test]
    fn forward_is_composition_of_sub_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = random_params(&mut rng);
        let f = Tensor::<f64>::from_fn(&[2, 12, 12], |_| rng.random::<f64>() * 2.0 - 1.0);
        let r = cpa_forward(&f, &p, 6).unwrap();
        // independent recomposition with plain loops
        let s = patch_summary(&f, 6).unwrap();
        let g = patch_mlp(&s, &p, (12, 12)).unwrap();
        assert_eq!(g, r.grid);
        for c in 0..2 {
            for y in 0..12 {
                for x in 0..12 {
                    let a = g.grid.at(&[y / 2, x / 2]);
                    let v = f.at(&[c, y, x]);
                    assert!((r.output.at(&[c, y, x]) - (a * v + v)).abs() < 1e-14);
                    assert_eq!(r.map.at(&[0, y, x]), a);
                }
            }
        }
    }

    #[test]
    fn coarse_target_examples() {
        let zero = Tensor::<f32>::zeros(&[192, 192]);
        assert!(make_coarse_target(&zero, 6)
            .unwrap()
            .grid
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let one = Tensor::<f32>::full(&[1, 192, 192], 1.0);
        assert!(make_coarse_target(&one, 6)
            .unwrap()
            .grid
            .data()
            .iter()
            .all(|&v| v == 1.0));
        let mut single = Tensor::<f32>::zeros(&[192, 192]);
        single.set(&[5, 5], 1.0);
        let t = make_coarse_target(&single, 6).unwrap();
        assert_eq!(t.grid.at(&[0, 0]), 1.0);
        assert_eq!(t.grid.sum(), 1.0);
        assert_eq!(t.for_stage(4).stage, 4);
    }

    #[test]
    fn coarse_target_rejects_non_binary() {
        let mut m = Tensor::<f32>::zeros(&[12, 12]);
        m.set(&[0, 0], 0.5);
        assert!(matches!(make_coarse_target(&m, 6), Err(Error::Validation(_))));
    }

    #[test]
    fn coarse_bce_closed_forms() {
        let target = CoarseTarget {
            grid: Tensor::from_fn(&[6, 6], |i| (i % 2) as f32),
            stage: 1,
        };
        let half = PatchGrid {
            grid: Tensor::full(&[6, 6], 0.5f64),
            source_shape: (6, 6),
        };
        assert!((coarse_bce_loss(&half, &target).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let exact = PatchGrid {
            grid: target
                .grid
                .cast::<f64>()
                .map(|v| if v > 0.5 { 1.0 - 1e-12 } else { 1e-12 }),
            source_shape: (6, 6),
        };
        assert!(coarse_bce_loss(&exact, &target).unwrap() < 1e-6);
        let ones = CoarseTarget {
            grid: Tensor::full(&[6, 6], 1.0),
            stage: 1,
        };
        let p8 = PatchGrid {
            grid: Tensor::full(&[6, 6], 0.8f64),
            source_shape: (6, 6),
        };
        assert!((coarse_bce_loss(&p8, &ones).unwrap() - (-(0.8f64).ln())).abs() < 1e-12);
    }
}
