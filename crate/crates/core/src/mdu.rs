//! Multi-scale deconvolution upsampling.
//!
//! Four parallel stride-2 transposed convolutions with kernels 3, 5, 7, 9
//! (paddings 1, 2, 3, 4, output padding 1), each followed by batch-norm,
//! ReLU and dropout, each producing `C'/4` channels at twice the input
//! resolution. The branch outputs are concatenated in kernel order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv::ConvSpec;
use crate::nn::functional::{BatchNormParams, ConvParams};
use crate::nn::params::{BatchNorm, Conv, ParamStore, Session};
use crate::nn::tape::{BnMode, Tape, Var};
use crate::tensor::{Real, Tensor};

/// `(kernel, padding)` of each branch, in concatenation order.
pub const BRANCHES: [(usize, usize); 4] = [(3, 1), (5, 2), (7, 3), (9, 4)];

pub const DEFAULT_DROPOUT: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MduSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Dropout rate per branch, in kernel order.
    pub dropout: [f64; 4],
}

impl MduSpec {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            dropout: [DEFAULT_DROPOUT; 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.in_channels == 0 {
            problems.push("MDU input channels must be positive".to_string());
        }
        if self.out_channels == 0 || self.out_channels % 4 != 0 {
            problems.push(format!(
                "MDU output channels {} must be a positive multiple of 4",
                self.out_channels
            ));
        }
        for (i, &p) in self.dropout.iter().enumerate() {
            if !(0.0..1.0).contains(&p) {
                problems.push(format!("MDU branch {i} dropout {p} outside [0, 1)"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Transposed-convolution spec of branch `i`.
    pub fn branch_spec(&self, i: usize) -> ConvSpec {
        let (k, p) = BRANCHES[i];
        ConvSpec::new(self.in_channels, self.out_channels / 4, &[k, k])
            .with_stride(2)
            .with_padding(p)
            .with_output_padding(1)
    }
}

/// Explicit per-branch parameters for [`mdu_forward`].
#[derive(Clone, Debug)]
pub struct MduParams<T: Real = f32> {
    pub branches: Vec<(ConvParams<T>, BatchNormParams<T>)>,
}

impl<T: Real> MduParams<T> {
    /// Deterministic pseudo-random weights, zero biases, identity batch-norm.
    pub fn seeded(spec: &MduSpec, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let branches = (0..4)
            .map(|i| {
                let s = spec.branch_spec(i);
                let std = (2.0 / (s.in_channels * s.kernel_volume()) as f64).sqrt();
                let weight = Tensor::from_fn(&s.transposed_weight_shape(), |_| {
                    T::from_f64_lossy((rng.random::<f64>() * 2.0 - 1.0) * std)
                });
                let conv = ConvParams {
                    weight,
                    bias: Some(Tensor::zeros(&[s.out_channels])),
                };
                (conv, BatchNormParams::identity(s.out_channels))
            })
            .collect();
        Self { branches }
    }
}

/// One branch: transposed conv, batch-norm, ReLU, then dropout when a rate is given.
#[allow(clippy::too_many_arguments)]
fn branch_var<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    spec: &ConvSpec,
    conv: (Var, Option<Var>),
    bn: (Var, Var),
    eps: T,
    mode: BnMode<'_, T>,
    dropout: Option<(f64, &mut R)>,
) -> Result<(Var, Option<crate::nn::tape::BatchStats<T>>)> {
    let y = tape.transposed_conv(x, conv.0, conv.1, spec)?;
    let (y, stats) = tape.batch_norm(y, bn.0, bn.1, eps, mode)?;
    let mut y = tape.relu(y);
    if let Some((p, rng)) = dropout {
        if p > 0.0 {
            y = tape.dropout(y, p, rng)?;
        }
    }
    Ok((y, stats))
}

/// Evaluate the block on `C x h x w` (or `N x C x h x w`) input. In training
/// mode batch-norm uses batch statistics (running averages are updated) and
/// dropout draws from `rng`.
pub fn mdu_forward<T: Real>(
    input: &Tensor<T>,
    spec: &MduSpec,
    params: &mut MduParams<T>,
    training: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor<T>> {
    spec.validate()?;
    if params.branches.len() != 4 {
        return Err(Error::config("MDU needs exactly four branches"));
    }
    let squeeze = input.rank() == 3;
    let x = if squeeze {
        let mut s = vec![1];
        s.extend_from_slice(input.shape());
        input.clone().reshape(&s)?
    } else {
        input.clone()
    };
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let mut outs = Vec::with_capacity(4);
    let mut all_stats = Vec::new();
    for (i, (conv, bn)) in params.branches.iter().enumerate() {
        let w = tape.constant(conv.weight.clone());
        let b = conv.bias.clone().map(|b| tape.constant(b));
        let g = tape.constant(bn.scale.clone());
        let s = tape.constant(bn.shift.clone());
        let mode = if training {
            BnMode::Batch
        } else {
            BnMode::Frozen {
                mean: &bn.running_mean,
                var: &bn.running_var,
            }
        };
        let drop = match (&mut rng, training) {
            (Some(r), true) => Some((spec.dropout[i], &mut **r)),
            _ => None,
        };
        let (y, stats) = branch_var(&mut tape, xv, &spec.branch_spec(i), (w, b), (g, s), bn.eps, mode, drop)?;
        outs.push(y);
        all_stats.push(stats);
    }
    let y = tape.concat(&outs)?;
    let mut out = tape.value(y).clone();
    for ((_, bn), stats) in params.branches.iter_mut().zip(all_stats) {
        if let Some(stats) = stats {
            bn.update_running(&stats);
        }
    }
    if squeeze {
        let s = out.shape()[1..].to_vec();
        out = out.reshape(&s)?;
    }
    Ok(out)
}

/// Trainable block for the decoder.
#[derive(Clone, Debug)]
pub struct MduBlock {
    pub spec: MduSpec,
    pub branches: Vec<(Conv, BatchNorm)>,
}

impl MduBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, spec: MduSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let mut branches = Vec::with_capacity(4);
        for (i, (k, _)) in BRANCHES.iter().enumerate() {
            let bs = spec.branch_spec(i);
            let out = bs.out_channels;
            let conv = Conv::new(store, &format!("{name}.k{k}.deconv"), bs, true, true, rng)?;
            let bn = BatchNorm::new(store, &format!("{name}.k{k}.bn"), out);
            branches.push((conv, bn));
        }
        Ok(Self { spec, branches })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(4);
        for (i, (conv, bn)) in self.branches.iter().enumerate() {
            let y = conv.forward(s, x)?;
            let y = bn.forward(s, y)?;
            let y = s.tape.relu(y);
            outs.push(s.dropout(y, self.spec.dropout[i])?);
        }
        s.tape.concat(&outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn output_shape_and_branch_order() {
        let spec = MduSpec::new(8, 16);
        let mut p = MduParams::<f64>::seeded(&spec, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::from_fn(&[8, 12, 12], |_| rng.random::<f64>() - 0.5);
        let y = mdu_forward(&x, &spec, &mut p, false, None).unwrap();
        assert_eq!(y.shape(), &[16, 24, 24]);

        // channels 0..4 equal the k=3 branch evaluated alone
        let single = {
            let s = spec.branch_spec(0);
            let t = crate::nn::functional::transposed_conv2d(&x, &s, &p.branches[0].0).unwrap();
            let mut bn = p.branches[0].1.clone();
            crate::nn::functional::relu(
                &crate::nn::functional::batch_norm(&t.reshape(&[1, 4, 24, 24]).unwrap(), &mut bn, false).unwrap(),
            )
        };
        assert_eq!(&y.data()[..4 * 576], single.data());
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let spec = MduSpec::new(4, 8);
        let mut p = MduParams::<f64>::seeded(&spec, 1);
        for (_, bn) in &mut p.branches {
            bn.running_var.fill(1.0);
        }
        let y = mdu_forward(&Tensor::zeros(&[4, 6, 6]), &spec, &mut p, false, None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_output_width() {
        let spec = MduSpec::new(4, 10);
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        let mut p = MduParams::<f64>::seeded(&MduSpec::new(4, 8), 1);
        assert!(mdu_forward(&Tensor::zeros(&[4, 6, 6]), &spec, &mut p, false, None).is_err());
    }

    #[test]
    fn every_branch_doubles_extent() {
        for (i, &(k, p)) in BRANCHES.iter().enumerate() {
            let spec = MduSpec::new(2, 4).branch_spec(i);
            for h in [1, 6, 7, 12] {
                assert_eq!(spec.transposed_output_extent(0, h).unwrap(), 2 * h, "k={k} p={p}");
            }
        }
    }

    #[test]
    fn seeded_dropout_is_reproducible() {
        let spec = MduSpec::new(4, 8);
        let x = Tensor::<f64>::from_fn(&[2, 4, 6, 6], |i| (i as f64 * 0.37).sin());
        let run = || {
            let mut p = MduParams::<f64>::seeded(&spec, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            mdu_forward(&x, &spec, &mut p, true, Some(&mut rng)).unwrap()
        };
        assert_eq!(run(), run());
    }
}
