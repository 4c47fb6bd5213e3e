//! Cross-feature fusion of a 2D feature map with the auxiliary 3D branch.
//!
//! The 3D feature `C3 x D x H x W` is squeezed to one channel by a 1x1x1
//! convolution and its depth axis collapsed by an unweighted mean, giving a
//! `1 x H x W` map. `C` 3x3 convolutions turn that into the transformed map
//! `tfm` (`C x H x W`). Global average pools of `tfm` and the 2D feature are
//! concatenated (3D first) into `g` of length `2C`, and two independent
//! perceptrons `2C -> C/8 -> C` with sigmoid outputs give the channel weights
//! `w3` and `w2`. The fused map is `tfm * w3 + f2d * w2`, channelwise.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::conv::ConvSpec;
use crate::nn::functional::{ConvParams, DenseParams};
use crate::nn::params::{Conv, Dense, ParamStore, Session};
use crate::nn::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Per-channel weights for the 2D (`w2`) and transformed 3D (`w3`) maps.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights<T: Real = f32> {
    pub w2: Tensor<T>,
    pub w3: Tensor<T>,
}

/// 1x1x1 squeeze kernel (`[1, C3, 1, 1, 1]`) and the `C` 3x3 transform kernels (`[C, 1, 3, 3]`).
#[derive(Clone, Debug)]
pub struct SqueezeParams<T: Real = f32> {
    pub squeeze: ConvParams<T>,
    pub transform: ConvParams<T>,
}

/// Two-layer perceptron weights.
#[derive(Clone, Debug)]
pub struct MlpParams<T: Real = f32> {
    pub hidden: DenseParams<T>,
    pub output: DenseParams<T>,
}

#[derive(Clone, Debug)]
pub struct FusionMlpParams<T: Real = f32> {
    pub mlp2: MlpParams<T>,
    pub mlp3: MlpParams<T>,
}

/// `C / 8`, rejecting channel counts it does not divide.
pub fn reduced_width(channels: usize) -> Result<usize> {
    if channels == 0 || channels % 8 != 0 {
        return Err(Error::config(format!(
            "fusion channel count {channels} must be a positive multiple of 8"
        )));
    }
    Ok(channels / 8)
}

fn squeeze_spec(c3: usize) -> ConvSpec {
    ConvSpec::new(c3, 1, &[1, 1, 1])
}

fn transform_spec(channels: usize) -> ConvSpec {
    ConvSpec::same2d(1, channels, 3)
}

/// `N x C3 x D x H x W -> N x 1 x H x W`.
pub fn squeeze_var<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 5 {
        return Err(Error::dim(
            "squeeze_3d",
            format!("expected N x C x D x H x W, got {s:?}"),
        ));
    }
    let y = tape.conv(x, w, b, &squeeze_spec(s[1]))?;
    tape.mean_axis(y, 2)
}

/// `N x 1 x H x W -> N x C x H x W` through `C` 3x3 kernels, padding 1.
pub fn transform_var<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let channels = tape.shape(w)[0];
    tape.conv(x, w, b, &transform_spec(channels))
}

fn global_pool_var<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0], s[1], s[2..].iter().product()])?;
    tape.mean_axis(flat, 2)
}

fn mlp_var<T: Real>(tape: &mut Tape<T>, g: Var, w: [Var; 4]) -> Result<Var> {
    let h = tape.linear(g, w[0], Some(w[1]))?;
    let h = tape.relu(h);
    let o = tape.linear(h, w[2], Some(w[3]))?;
    Ok(tape.sigmoid(o))
}

/// The concatenated global descriptor `g = [gap(tfm), gap(f2d)]`, `N x 2C`.
pub fn descriptor_var<T: Real>(tape: &mut Tape<T>, f2d: Var, tfm: Var) -> Result<Var> {
    if tape.shape(f2d) != tape.shape(tfm) {
        return Err(Error::dim(
            "fusion_weights",
            format!(
                "2D map {:?} vs transformed 3D map {:?}",
                tape.shape(f2d),
                tape.shape(tfm)
            ),
        ));
    }
    reduced_width(tape.shape(f2d)[1])?;
    let g3 = global_pool_var(tape, tfm)?;
    let g2 = global_pool_var(tape, f2d)?;
    tape.concat(&[g3, g2])
}

/// Returns `(w2, w3)`, each `N x C`.
pub fn weights_var<T: Real>(
    tape: &mut Tape<T>,
    f2d: Var,
    tfm: Var,
    mlp2: [Var; 4],
    mlp3: [Var; 4],
) -> Result<(Var, Var)> {
    let g = descriptor_var(tape, f2d, tfm)?;
    let w2 = mlp_var(tape, g, mlp2)?;
    let w3 = mlp_var(tape, g, mlp3)?;
    Ok((w2, w3))
}

pub fn fuse_var<T: Real>(tape: &mut Tape<T>, f2d: Var, tfm: Var, w2: Var, w3: Var) -> Result<Var> {
    if tape.shape(f2d) != tape.shape(tfm) {
        return Err(Error::dim(
            "cff_fuse",
            format!(
                "2D map {:?} vs transformed 3D map {:?}",
                tape.shape(f2d),
                tape.shape(tfm)
            ),
        ));
    }
    let a = tape.scale_channels(tfm, w3)?;
    let b = tape.scale_channels(f2d, w2)?;
    tape.add(a, b)
}

fn batch1<T: Real>(t: &Tensor<T>, rank: usize, op: &'static str) -> Result<Tensor<T>> {
    if t.rank() != rank {
        return Err(Error::dim(op, format!("expected rank {rank}, got {:?}", t.shape())));
    }
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    t.clone().reshape(&s)
}

fn conv_vars<T: Real>(tape: &mut Tape<T>, p: &ConvParams<T>) -> (Var, Option<Var>) {
    let w = tape.constant(p.weight.clone());
    let b = p.bias.clone().map(|b| tape.constant(b));
    (w, b)
}

fn mlp_vars<T: Real>(tape: &mut Tape<T>, p: &MlpParams<T>) -> [Var; 4] {
    let zero = |d: &DenseParams<T>| d.bias.clone().unwrap_or_else(|| Tensor::zeros(&[d.weight.shape()[0]]));
    [
        tape.constant(p.hidden.weight.clone()),
        tape.constant(zero(&p.hidden)),
        tape.constant(p.output.weight.clone()),
        tape.constant(zero(&p.output)),
    ]
}

/// `C3 x D x H x W -> 1 x H x W`.
pub fn squeeze_3d<T: Real>(feature3d: &Tensor<T>, params: &SqueezeParams<T>) -> Result<Tensor<T>> {
    let x = batch1(feature3d, 4, "squeeze_3d")?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let (w, b) = conv_vars(&mut tape, &params.squeeze);
    let y = squeeze_var(&mut tape, xv, w, b)?;
    let s = tape.shape(y)[1..].to_vec();
    tape.value(y).clone().reshape(&s)
}

/// `1 x H x W -> C x H x W`.
pub fn transform_3d<T: Real>(squeezed: &Tensor<T>, params: &SqueezeParams<T>) -> Result<Tensor<T>> {
    let x = batch1(squeezed, 3, "transform_3d")?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let (w, b) = conv_vars(&mut tape, &params.transform);
    let y = transform_var(&mut tape, xv, w, b)?;
    let s = tape.shape(y)[1..].to_vec();
    tape.value(y).clone().reshape(&s)
}

pub fn fusion_weights<T: Real>(
    f2d: &Tensor<T>,
    tfm3d: &Tensor<T>,
    params: &FusionMlpParams<T>,
) -> Result<FusionWeights<T>> {
    let mut tape = Tape::new();
    let a = tape.constant(batch1(f2d, 3, "fusion_weights")?);
    let b = tape.constant(batch1(tfm3d, 3, "fusion_weights")?);
    let m2 = mlp_vars(&mut tape, &params.mlp2);
    let m3 = mlp_vars(&mut tape, &params.mlp3);
    let (w2, w3) = weights_var(&mut tape, a, b, m2, m3)?;
    let c = f2d.shape()[0];
    Ok(FusionWeights {
        w2: tape.value(w2).clone().reshape(&[c])?,
        w3: tape.value(w3).clone().reshape(&[c])?,
    })
}

pub fn cff_fuse<T: Real>(f2d: &Tensor<T>, tfm3d: &Tensor<T>, weights: &FusionWeights<T>) -> Result<Tensor<T>> {
    let c = f2d.shape().first().copied().unwrap_or(0);
    if weights.w2.shape() != [c] || weights.w3.shape() != [c] {
        return Err(Error::dim("cff_fuse", format!("weights must have length {c}")));
    }
    let mut tape = Tape::new();
    let a = tape.constant(batch1(f2d, 3, "cff_fuse")?);
    let b = tape.constant(batch1(tfm3d, 3, "cff_fuse")?);
    let w2 = tape.constant(weights.w2.clone().reshape(&[1, c])?);
    let w3 = tape.constant(weights.w3.clone().reshape(&[1, c])?);
    let y = fuse_var(&mut tape, a, b, w2, w3)?;
    tape.value(y).clone().reshape(f2d.shape())
}

/// Trainable fusion block for one encoder stage.
#[derive(Clone, Debug)]
pub struct CffBlock {
    pub channels: usize,
    pub squeeze: Conv,
    pub transform: Conv,
    pub mlp2: [Dense; 2],
    pub mlp3: [Dense; 2],
}

#[derive(Clone, Copy, Debug)]
pub struct CffVars {
    pub output: Var,
    pub transformed: Var,
    /// `N x C` weights of the 2D branch.
    pub w2: Var,
    /// `N x C` weights of the transformed 3D branch.
    pub w3: Var,
}

impl CffBlock {
    /// `channels` is the 2D width at this stage, `channels3d` the 3D width.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        channels3d: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let reduced = reduced_width(channels)?;
        let squeeze = Conv::new(
            store,
            &format!("{name}.squeeze"),
            squeeze_spec(channels3d),
            true,
            false,
            rng,
        )?;
        let transform = Conv::new(
            store,
            &format!("{name}.transform"),
            transform_spec(channels),
            true,
            false,
            rng,
        )?;
        let mut mlp = |branch: &str, rng: &mut ChaCha8Rng| {
            [
                Dense::new(store, &format!("{name}.{branch}.fc1"), 2 * channels, reduced, rng),
                Dense::new(store, &format!("{name}.{branch}.fc2"), reduced, channels, rng),
            ]
        };
        let mlp2 = mlp("mlp2", rng);
        let mlp3 = mlp("mlp3", rng);
        Ok(Self {
            channels,
            squeeze,
            transform,
            mlp2,
            mlp3,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, f2d: Var, f3d: Var) -> Result<CffVars> {
        let s2 = s.tape.shape(f2d).to_vec();
        let s3 = s.tape.shape(f3d).to_vec();
        if s3.len() != 5 || s2.len() != 4 || s3[0] != s2[0] || s3[3..] != s2[2..] {
            return Err(Error::dim(
                "cff",
                format!("3D feature {s3:?} does not match 2D feature {s2:?} on batch and H x W"),
            ));
        }
        let (sw, sb) = (s.param(self.squeeze.weight), self.squeeze.bias.map(|b| s.param(b)));
        let squeezed = squeeze_var(&mut s.tape, f3d, sw, sb)?;
        let (tw, tb) = (s.param(self.transform.weight), self.transform.bias.map(|b| s.param(b)));
        let transformed = transform_var(&mut s.tape, squeezed, tw, tb)?;
        let m2 = self.mlp_vars(s, &self.mlp2);
        let m3 = self.mlp_vars(s, &self.mlp3);
        let (w2, w3) = weights_var(&mut s.tape, f2d, transformed, m2, m3)?;
        let output = fuse_var(&mut s.tape, f2d, transformed, w2, w3)?;
        Ok(CffVars {
            output,
            transformed,
            w2,
            w3,
        })
    }

    fn mlp_vars<T: Real>(&self, s: &mut Session<'_, T>, mlp: &[Dense; 2]) -> [Var; 4] {
        [
            s.param(mlp[0].weight),
            s.param(mlp[0].bias),
            s.param(mlp[1].weight),
            s.param(mlp[1].bias),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn dense(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> DenseParams<f64> {
        DenseParams {
            weight: Tensor::from_fn(&[out, inp], |_| rng.random::<f64>() - 0.5),
            bias: Some(Tensor::from_fn(&[out], |_| rng.random::<f64>() - 0.5)),
        }
    }

    fn random_mlps(rng: &mut ChaCha8Rng, c: usize) -> FusionMlpParams<f64> {
        let mut mlp = || MlpParams {
            hidden: dense(rng, c / 8, 2 * c),
            output: dense(rng, c, c / 8),
        };
        FusionMlpParams {
            mlp2: mlp(),
            mlp3: mlp(),
        }
    }

    fn zero_mlps(c: usize) -> FusionMlpParams<f64> {
        let z = |o: usize, i: usize| DenseParams {
            weight: Tensor::zeros(&[o, i]),
            bias: Some(Tensor::zeros(&[o])),
        };
        let mlp = || MlpParams {
            hidden: z(c / 8, 2 * c),
            output: z(c, c / 8),
        };
        FusionMlpParams {
            mlp2: mlp(),
            mlp3: mlp(),
        }
    }

    /// Oracle: plain loops over the affine chain.
    fn mlp_oracle(p: &MlpParams<f64>, g: &[f64]) -> Vec<f64> {
        let (w1, b1) = (p.hidden.weight.data(), p.hidden.bias.as_ref().unwrap().data());
        let (w2, b2) = (p.output.weight.data(), p.output.bias.as_ref().unwrap().data());
        let (hid, inp) = (b1.len(), g.len());
        let h: Vec<f64> = (0..hid)
            .map(|j| (b1[j] + (0..inp).map(|k| w1[j * inp + k] * g[k]).sum::<f64>()).max(0.0))
            .collect();
        (0..b2.len())
            .map(|i| 1.0 / (1.0 + (-(b2[i] + (0..hid).map(|j| w2[i * hid + j] * h[j]).sum::<f64>())).exp()))
            .collect()
    }

    fn squeeze_params(c3: usize, squeeze_w: Vec<f64>, transform: Tensor<f64>) -> SqueezeParams<f64> {
        SqueezeParams {
            squeeze: ConvParams {
                weight: Tensor::new(&[1, c3, 1, 1, 1], squeeze_w).unwrap(),
                bias: Some(Tensor::zeros(&[1])),
            },
            transform: ConvParams {
                weight: transform.clone(),
                bias: Some(Tensor::zeros(&[transform.shape()[0]])),
            },
        }
    }

    #[test]
    fn squeeze_examples() {
        let p = squeeze_params(2, vec![1.0, 1.0], Tensor::zeros(&[8, 1, 3, 3]));
        let zero = squeeze_3d(&Tensor::<f64>::zeros(&[2, 2, 4, 4]), &p).unwrap();
        assert_eq!(zero.shape(), &[1, 4, 4]);
        assert!(zero.data().iter().all(|&v| v == 0.0));

        // channel 0 constant 1, channel 1 constant 3 -> 4 at every depth
        let f = Tensor::<f64>::from_fn(&[2, 2, 3, 3], |i| if i < 18 { 1.0 } else { 3.0 });
        let m = squeeze_3d(&f, &p).unwrap();
        assert!(m.data().iter().all(|&v| v == 4.0));

        let unit = squeeze_params(1, vec![1.0], Tensor::zeros(&[8, 1, 3, 3]));
        let f = Tensor::<f64>::from_fn(&[1, 1, 3, 4], |i| i as f64 - 2.5);
        assert_eq!(squeeze_3d(&f, &unit).unwrap().data(), f.data());
    }

    #[test]
    fn transform_examples() {
        let mut w = Tensor::<f64>::zeros(&[8, 1, 3, 3]);
        let p = squeeze_params(1, vec![1.0], w.clone());
        let zero = transform_3d(&Tensor::zeros(&[1, 6, 6]), &p).unwrap();
        assert_eq!(zero.shape(), &[8, 6, 6]);
        assert!(zero.data().iter().all(|&v| v == 0.0));

        w.set(&[3, 0, 1, 1], 1.0);
        let p = squeeze_params(1, vec![1.0], w);
        let x = Tensor::<f64>::from_fn(&[1, 6, 6], |i| (i * i) as f64 * 0.1);
        let y = transform_3d(&x, &p).unwrap();
        for i in 0..36 {
            assert_eq!(y.data()[3 * 36 + i], x.data()[i]);
        }
    }

    #[test]
    fn transform_matches_sliding_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = Tensor::<f64>::from_fn(&[8, 1, 3, 3], |_| rng.random::<f64>() - 0.5);
        let x = Tensor::<f64>::from_fn(&[1, 5, 7], |_| rng.random::<f64>() - 0.5);
        let y = transform_3d(&x, &squeeze_params(1, vec![1.0], w.clone())).unwrap();
        for c in 0..8 {
            for i in 0..5 {
                for j in 0..7 {
                    let mut acc = 0.0;
                    for a in 0..3 {
                        for b in 0..3 {
                            let (yi, xj) = (i as isize + a as isize - 1, j as isize + b as isize - 1);
                            if (0..5).contains(&yi) && (0..7).contains(&xj) {
                                acc += w.at(&[c, 0, a, b]) * x.at(&[0, yi as usize, xj as usize]);
                            }
                        }
                    }
                    assert!((y.at(&[c, i, j]) - acc).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn zero_mlps_give_half_weights() {
        let f = Tensor::<f64>::full(&[8, 4, 4], 3.0);
        let w = fusion_weights(&f, &f, &zero_mlps(8)).unwrap();
        assert!(w.w2.data().iter().chain(w.w3.data()).all(|&v| v == 0.5));
    }

    #[test]
    fn descriptor_puts_3d_branch_first() {
        let f2d = Tensor::<f64>::full(&[8, 2, 2], 7.0);
        let tfm = Tensor::<f64>::full(&[8, 2, 2], -3.0);
        let mut tape = Tape::new();
        let a = tape.constant(f2d.reshape(&[1, 8, 2, 2]).unwrap());
        let b = tape.constant(tfm.reshape(&[1, 8, 2, 2]).unwrap());
        let g = descriptor_var(&mut tape, a, b).unwrap();
        let v = tape.value(g).data();
        assert!(v[..8].iter().all(|&x| x == -3.0));
        assert!(v[8..].iter().all(|&x| x == 7.0));
    }

    #[test]
    fn weights_match_affine_chain_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = 16;
        let p = random_mlps(&mut rng, c);
        let f2d = Tensor::<f64>::from_fn(&[c, 3, 3], |_| rng.random::<f64>() * 2.0 - 1.0);
        let tfm = Tensor::<f64>::from_fn(&[c, 3, 3], |_| rng.random::<f64>() * 2.0 - 1.0);
        let w = fusion_weights(&f2d, &tfm, &p).unwrap();
        let gap = |t: &Tensor<f64>| {
            (0..c)
                .map(|ch| t.data()[ch * 9..(ch + 1) * 9].iter().sum::<f64>() / 9.0)
                .collect::<Vec<_>>()
        };
        let mut g = gap(&tfm);
        g.extend(gap(&f2d));
        for (got, want) in w.w2.data().iter().zip(mlp_oracle(&p.mlp2, &g)) {
            assert!((got - want).abs() < 1e-14);
        }
        for (got, want) in w.w3.data().iter().zip(mlp_oracle(&p.mlp3, &g)) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_channels_not_divisible_by_eight() {
        let f = Tensor::<f64>::zeros(&[12, 2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = MlpParams {
            hidden: dense(&mut rng, 1, 24),
            output: dense(&mut rng, 12, 1),
        };
        let params = FusionMlpParams {
            mlp2: p.clone(),
            mlp3: p,
        };
        assert!(matches!(fusion_weights(&f, &f, &params), Err(Error::Config(_))));
        let mut store = ParamStore::<f32>::new();
        assert!(CffBlock::new(&mut store, "cff", 12, 12, &mut rng).is_err());
    }

    #[test]
    fn fuse_limits_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f2d = Tensor::<f64>::from_fn(&[8, 3, 3], |_| rng.random::<f64>() - 0.5);
        let tfm = Tensor::<f64>::from_fn(&[8, 3, 3], |_| rng.random::<f64>() - 0.5);
        let only2d = FusionWeights {
            w2: Tensor::full(&[8], 1.0),
            w3: Tensor::zeros(&[8]),
        };
        assert!(cff_fuse(&f2d, &tfm, &only2d).unwrap().max_abs_diff(&f2d) <= 1e-6);
        let half = FusionWeights {
            w2: Tensor::full(&[8], 0.5),
            w3: Tensor::full(&[8], 0.5),
        };
        let avg = Tensor::from_fn(&[8, 3, 3], |i| (f2d.data()[i] + tfm.data()[i]) / 2.0);
        assert!(cff_fuse(&f2d, &tfm, &half).unwrap().max_abs_diff(&avg) <= 1e-6);

        let w = FusionWeights {
            w2: Tensor::from_fn(&[8], |_| rng.random::<f64>()),
            w3: Tensor::from_fn(&[8], |_| rng.random::<f64>()),
        };
        let y = cff_fuse(&f2d, &tfm, &w).unwrap();
        for c in 0..8 {
            for i in 0..9 {
                let want = w.w3.data()[c] * tfm.data()[c * 9 + i] + w.w2.data()[c] * f2d.data()[c * 9 + i];
                assert_eq!(y.data()[c * 9 + i], want);
            }
        }
    }

    fn dyadic(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-16..=16) as f64 / 8.0)
    }

    /// Relabel channel `c` as `perm[c]` in every tensor the fusion touches.
    fn permute_mlp(p: &MlpParams<f64>, perm: &[usize]) -> MlpParams<f64> {
        let c = perm.len();
        let (hid, inp) = (p.hidden.weight.shape()[0], 2 * c);
        let mut w1 = Tensor::zeros(&[hid, inp]);
        for j in 0..hid {
            for half in 0..2 {
                for k in 0..c {
                    w1.set(&[j, half * c + perm[k]], p.hidden.weight.at(&[j, half * c + k]));
                }
            }
        }
        let mut w2 = Tensor::zeros(&[c, hid]);
        let mut b2 = Tensor::zeros(&[c]);
        let b = p.output.bias.as_ref().unwrap();
        for k in 0..c {
            b2.data_mut()[perm[k]] = b.data()[k];
            for j in 0..hid {
                w2.set(&[perm[k], j], p.output.weight.at(&[k, j]));
            }
        }
        MlpParams {
            hidden: DenseParams {
                weight: w1,
                bias: p.hidden.bias.clone(),
            },
            output: DenseParams {
                weight: w2,
                bias: Some(b2),
            },
        }
    }

    fn permute_channels(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
        let plane = t.len() / perm.len();
        let mut out = Tensor::zeros(t.shape());
        for (c, &pc) in perm.iter().enumerate() {
            out.data_mut()[pc * plane..(pc + 1) * plane].copy_from_slice(&t.data()[c * plane..(c + 1) * plane]);
        }
        out
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn fusion_is_channel_permutation_equivariant(seed in 0u64..10_000, sixteen in proptest::bool::ANY) {
            use rand::seq::SliceRandom;
            let c = if sixteen { 16 } else { 8 };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f2d = dyadic(&mut rng, &[c, 4, 4]);
            let tfm = dyadic(&mut rng, &[c, 4, 4]);
            let mut mlp = || MlpParams {
                hidden: DenseParams { weight: dyadic(&mut rng, &[c / 8, 2 * c]), bias: Some(dyadic(&mut rng, &[c / 8])) },
                output: DenseParams { weight: dyadic(&mut rng, &[c, c / 8]), bias: Some(dyadic(&mut rng, &[c])) },
            };
            let params = FusionMlpParams { mlp2: mlp(), mlp3: mlp() };
            let mut perm: Vec<usize> = (0..c).collect();
            perm.shuffle(&mut rng);

            let y = cff_fuse(&f2d, &tfm, &fusion_weights(&f2d, &tfm, &params).unwrap()).unwrap();
            let (pf, pt) = (permute_channels(&f2d, &perm), permute_channels(&tfm, &perm));
            let pparams = FusionMlpParams { mlp2: permute_mlp(&params.mlp2, &perm), mlp3: permute_mlp(&params.mlp3, &perm) };
            let py = cff_fuse(&pf, &pt, &fusion_weights(&pf, &pt, &pparams).unwrap()).unwrap();
            proptest::prop_assert_eq!(py, permute_channels(&y, &perm));
        }
    }
}
