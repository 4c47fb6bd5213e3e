//! Stateless forward evaluation of the primitive layers on plain tensors.
//!
//! Each function accepts either a single sample or a batch (leading `N` axis)
//! and evaluates through a throwaway [`Tape`], so the arithmetic is the same
//! code path training uses.

use rand::Rng;

use super::conv::ConvSpec;
use super::tape::{BatchStats, BnMode, Tape};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Weights (`[out, in, k...]`, or `[in, out, k...]` when transposed) and optional bias.
#[derive(Clone, Debug)]
pub struct ConvParams<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// `weight` is `M x K`, `bias` has length `M`.
#[derive(Clone, Debug)]
pub struct DenseParams<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct BatchNormParams<T: Real = f32> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Real> BatchNormParams<T> {
    /// Unit scale, zero shift, zero mean and unit variance.
    pub fn identity(channels: usize) -> Self {
        Self {
            scale: Tensor::full(&[channels], T::one()),
            shift: Tensor::zeros(&[channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::from_f64_lossy(1e-5),
            momentum: T::from_f64_lossy(0.1),
        }
    }

    /// Blend batch statistics into the running averages. The variance is
    /// converted to its unbiased estimate first.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        update_running(&mut self.running_mean, &mut self.running_var, stats, self.momentum);
    }
}

pub(crate) fn update_running<T: Real>(mean: &mut [T], var: &mut [T], stats: &BatchStats<T>, momentum: T) {
    let bessel = if stats.count > 1 {
        T::from_usize(stats.count).unwrap() / T::from_usize(stats.count - 1).unwrap()
    } else {
        T::one()
    };
    let keep = T::one() - momentum;
    for c in 0..mean.len() {
        mean[c] = keep * mean[c] + momentum * stats.mean[c];
        var[c] = (keep * var[c] + momentum * stats.var[c] * bessel).max(T::zero());
    }
}

/// Add a unit batch axis when `input` has `unbatched_rank` axes.
fn batched<T: Real>(input: &Tensor<T>, unbatched_rank: usize, op: &'static str) -> Result<(Tensor<T>, bool)> {
    if input.rank() == unbatched_rank {
        let mut s = vec![1];
        s.extend_from_slice(input.shape());
        Ok((input.clone().reshape(&s)?, true))
    } else if input.rank() == unbatched_rank + 1 {
        Ok((input.clone(), false))
    } else {
        Err(Error::dim(
            op,
            format!(
                "expected rank {unbatched_rank} or {}, got {:?}",
                unbatched_rank + 1,
                input.shape()
            ),
        ))
    }
}

fn unbatch<T: Real>(t: Tensor<T>, squeeze: bool) -> Result<Tensor<T>> {
    if squeeze {
        let s = t.shape()[1..].to_vec();
        t.reshape(&s)
    } else {
        Ok(t)
    }
}

fn run_conv<T: Real>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    params: &ConvParams<T>,
    spatial: usize,
    transposed: bool,
    op: &'static str,
) -> Result<Tensor<T>> {
    if spec.spatial_rank() != spatial {
        return Err(Error::dim(
            op,
            format!("kernel has {} spatial axes, expected {spatial}", spec.spatial_rank()),
        ));
    }
    let (x, squeeze) = batched(input, spatial + 1, op)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let w = tape.constant(params.weight.clone());
    let b = params.bias.clone().map(|b| tape.constant(b));
    let y = if transposed {
        tape.transposed_conv(xv, w, b, spec)?
    } else {
        tape.conv(xv, w, b, spec)?
    };
    unbatch(tape.value(y).clone(), squeeze)
}

/// `C x H x W` or `N x C x H x W` input.
pub fn conv2d<T: Real>(input: &Tensor<T>, spec: &ConvSpec, params: &ConvParams<T>) -> Result<Tensor<T>> {
    run_conv(input, spec, params, 2, false, "conv2d")
}

/// `C x D x H x W` or `N x C x D x H x W` input.
pub fn conv3d<T: Real>(input: &Tensor<T>, spec: &ConvSpec, params: &ConvParams<T>) -> Result<Tensor<T>> {
    run_conv(input, spec, params, 3, false, "conv3d")
}

pub fn transposed_conv2d<T: Real>(input: &Tensor<T>, spec: &ConvSpec, params: &ConvParams<T>) -> Result<Tensor<T>> {
    run_conv(input, spec, params, 2, true, "transposed_conv2d")
}

fn run_unary<T: Real>(
    input: &Tensor<T>,
    f: impl FnOnce(&mut Tape<T>, super::tape::Var) -> Result<super::tape::Var>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = f(&mut tape, x)?;
    Ok(tape.value(y).clone())
}

pub fn max_pool2d<T: Real>(input: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    run_unary(input, |t, x| t.max_pool(x, (window, window), (stride, stride)))
}

pub fn avg_pool2d<T: Real>(input: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    run_unary(input, |t, x| t.avg_pool(x, (window, window), (stride, stride)))
}

/// `C x H x W -> C`, or `N x C x H x W -> N x C`.
pub fn global_avg_pool<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (x, squeeze) = batched(input, 3, "global_avg_pool")?;
    let s = x.shape().to_vec();
    let flat = x.reshape(&[s[0], s[1], s[2] * s[3]])?;
    let y = run_unary(&flat, |t, v| t.mean_axis(v, 2))?;
    unbatch(y, squeeze)
}

/// `C x H x W -> 1 x H x W`, or the batched analogue.
pub fn channel_mean<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (x, squeeze) = batched(input, 3, "channel_mean")?;
    let s = x.shape().to_vec();
    let y = run_unary(&x, |t, v| t.mean_axis(v, 1))?.reshape(&[s[0], 1, s[2], s[3]])?;
    unbatch(y, squeeze)
}

/// `K -> M` or `N x K -> N x M`.
pub fn dense<T: Real>(input: &Tensor<T>, params: &DenseParams<T>) -> Result<Tensor<T>> {
    let (x, squeeze) = batched(input, 1, "dense")?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let w = tape.constant(params.weight.clone());
    let b = params.bias.clone().map(|b| tape.constant(b));
    let y = tape.linear(xv, w, b)?;
    unbatch(tape.value(y).clone(), squeeze)
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn sigmoid<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    run_unary(input, |t, x| Ok(t.sigmoid(x))).expect("sigmoid is shape preserving")
}

/// Inverted dropout; the identity outside training.
pub fn dropout<T: Real, R: Rng + ?Sized>(input: &Tensor<T>, p: f64, training: bool, rng: &mut R) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("dropout rate {p} outside [0, 1)")));
    }
    if !training {
        return Ok(input.clone());
    }
    run_unary(input, |t, x| t.dropout(x, p, rng))
}

/// Batch normalization over axis 1 of an `N x C x ...` tensor. Training mode
/// normalizes with batch statistics and updates the running averages.
pub fn batch_norm<T: Real>(input: &Tensor<T>, params: &mut BatchNormParams<T>, training: bool) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let g = tape.constant(params.scale.clone());
    let b = tape.constant(params.shift.clone());
    let mode = if training {
        BnMode::Batch
    } else {
        BnMode::Frozen {
            mean: &params.running_mean,
            var: &params.running_var,
        }
    };
    let (y, stats) = tape.batch_norm(x, g, b, params.eps, mode)?;
    let out = tape.value(y).clone();
    if let Some(stats) = stats {
        params.update_running(&stats);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn ones_kernel(out: usize, inp: usize, k: usize) -> ConvParams<f64> {
        ConvParams {
            weight: Tensor::full(&[out, inp, k, k], 1.0),
            bias: None,
        }
    }

    #[test]
    fn conv2d_of_zeros_is_zero() {
        let x = Tensor::<f64>::zeros(&[1, 3, 3]);
        let y = conv2d(&x, &ConvSpec::same2d(1, 2, 3), &ones_kernel(2, 1, 3)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_unit_pointwise_kernel_is_identity() {
        let x = Tensor::<f64>::from_fn(&[1, 4, 5], |i| i as f64 * 0.5 - 3.0);
        let y = conv2d(&x, &ConvSpec::new(1, 1, &[1, 1]), &ones_kernel(1, 1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv2d_sliding_window_sum() {
        let x = Tensor::<f64>::from_fn(&[1, 4, 4], |i| (i + 1) as f64);
        let y = conv2d(&x, &ConvSpec::new(1, 1, &[3, 3]), &ones_kernel(1, 1, 3)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[54.0, 63.0, 90.0, 99.0]);
    }

    #[test]
    fn conv2d_names_channel_axis_on_mismatch() {
        let x = Tensor::<f64>::zeros(&[2, 4, 4]);
        let err = conv2d(&x, &ConvSpec::same2d(3, 1, 3), &ones_kernel(1, 3, 3)).unwrap_err();
        assert!(err.to_string().contains("axis 1"), "{err}");
    }

    #[test]
    fn conv3d_zero_and_identity() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        let p = ConvParams {
            weight: Tensor::full(&[1, 1, 1, 1, 1], 1.0),
            bias: None,
        };
        let spec = ConvSpec::new(1, 1, &[1, 1, 1]);
        assert!(conv3d(&x, &spec, &p).unwrap().data().iter().all(|&v| v == 0.0));
        let x = Tensor::<f64>::from_fn(&[1, 2, 3, 2], |i| i as f64);
        assert_eq!(conv3d(&x, &spec, &p).unwrap(), x);
    }

    #[test]
    fn conv3d_affine_pointwise() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 2, 2], |i| (i + 1) as f64);
        let p = ConvParams {
            weight: Tensor::full(&[1, 1, 1, 1, 1], 2.0),
            bias: Some(Tensor::full(&[1], 1.0)),
        };
        let y = conv3d(&x, &ConvSpec::new(1, 1, &[1, 1, 1]), &p).unwrap();
        let want: Vec<f64> = (1..=8).map(|v| 2.0 * v as f64 + 1.0).collect();
        assert_eq!(y.data(), want.as_slice());
    }

    #[test]
    fn transposed_conv_single_input_pixel() {
        // Output o receives kernel tap o + padding of the lone input: (0,0) gets
        // the centre tap, the others the taps right/below of it. All ones -> v.
        let v = 2.5;
        let x = t(&[1, 1, 1], &[v]);
        let spec = ConvSpec::new(1, 1, &[3, 3])
            .with_stride(2)
            .with_padding(1)
            .with_output_padding(1);
        let y = transposed_conv2d(&x, &spec, &ones_kernel(1, 1, 3)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[v, v, v, v]);
    }

    #[test]
    fn transposed_conv_zero_and_extent() {
        let spec = ConvSpec::new(2, 3, &[5, 5])
            .with_stride(2)
            .with_padding(2)
            .with_output_padding(1);
        let p = ConvParams {
            weight: Tensor::full(&[2, 3, 5, 5], 0.3),
            bias: None,
        };
        let y = transposed_conv2d(&Tensor::<f64>::zeros(&[2, 12, 12]), &spec, &p).unwrap();
        assert_eq!(y.shape(), &[3, 24, 24]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transposed_conv_rejects_nonpositive_extent() {
        let spec = ConvSpec::new(1, 1, &[1, 1]).with_stride(1).with_padding(3);
        let p = ConvParams {
            weight: Tensor::full(&[1, 1, 1, 1], 1.0),
            bias: None,
        };
        assert!(matches!(
            transposed_conv2d(&Tensor::<f64>::zeros(&[1, 2, 2]), &spec, &p),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn pools_on_small_inputs() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(max_pool2d(&x, 2, 2).unwrap().data(), &[4.0]);
        assert_eq!(avg_pool2d(&x, 2, 2).unwrap().data(), &[2.5]);
        let c = Tensor::<f64>::full(&[2, 4, 4], 7.0);
        assert!(max_pool2d(&c, 2, 2).unwrap().data().iter().all(|&v| v == 7.0));
        assert!(avg_pool2d(&c, 2, 2).unwrap().data().iter().all(|&v| v == 7.0));
        let x = Tensor::<f64>::from_fn(&[1, 4, 4], |i| (i + 1) as f64);
        assert_eq!(avg_pool2d(&x, 2, 2).unwrap().data(), &[3.5, 5.5, 11.5, 13.5]);
    }

    #[test]
    fn pool_rejects_indivisible_extent() {
        let x = Tensor::<f64>::zeros(&[1, 5, 4]);
        let err = max_pool2d(&x, 2, 2).unwrap_err();
        assert!(err.to_string().contains("axis 1"), "{err}");
    }

    #[test]
    fn global_pool_and_channel_mean() {
        let x = t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 8.0]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5, 2.0]);
        assert_eq!(
            global_avg_pool(&Tensor::<f64>::full(&[1, 3, 3], 4.0)).unwrap().data(),
            &[4.0]
        );
        let m = channel_mean(&t(&[2, 1, 1], &[1.0, 3.0])).unwrap();
        assert_eq!(m.shape(), &[1, 1, 1]);
        assert_eq!(m.data(), &[2.0]);
        let single = Tensor::<f64>::from_fn(&[1, 2, 3], |i| i as f64);
        assert_eq!(channel_mean(&single).unwrap(), single);
    }

    #[test]
    fn channel_mean_matches_per_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::from_fn(&[3, 5, 4], |_| rng.random::<f64>() * 2.0 - 1.0);
        let m = channel_mean(&x).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let want = (0..3).map(|c| x.at(&[c, i, j])).sum::<f64>() / 3.0;
                assert!((m.at(&[0, i, j]) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dense_sigmoid_dropout() {
        let p = DenseParams {
            weight: t(&[2, 3], &[1.0, 0.0, -1.0, 0.5, 0.5, 0.5]),
            bias: Some(t(&[2], &[0.0, 1.0])),
        };
        let y = dense(&t(&[3], &[1.0, 2.0, 3.0]), &p).unwrap();
        assert_eq!(y.data(), &[-2.0, 4.0]);
        assert_eq!(sigmoid(&Tensor::<f64>::zeros(&[1])).item(), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::from_fn(&[10], |i| i as f64);
        assert_eq!(dropout(&x, 0.5, false, &mut rng).unwrap(), x);
        assert!(dropout(&x, 1.0, false, &mut rng).is_err());
        let d = dropout(&Tensor::<f64>::full(&[1000], 1.0), 0.25, true, &mut rng).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
    }

    #[test]
    fn batch_norm_uses_batch_statistics() {
        // values 1 and 5 per channel: mean 3, population variance 4.
        let x = t(&[2, 1, 1], &[1.0, 5.0]);
        let mut p = BatchNormParams::identity(1);
        p.eps = 0.0;
        let y = batch_norm(&x, &mut p, true).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
        // running stats moved toward (3, unbiased 8)
        assert!((p.running_mean[0] - 0.3).abs() < 1e-12);
        assert!((p.running_var[0] - (0.9 + 0.8)).abs() < 1e-12);
        let frozen = batch_norm(&x, &mut p.clone(), false).unwrap();
        assert!((frozen.data()[0] - (1.0 - 0.3) / 1.7f64.sqrt()).abs() < 1e-12);
    }
}
