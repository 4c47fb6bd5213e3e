use serde::{Deserialize, Serialize};

use super::config::STAGES;
use super::network::{ForwardTrace, TraceVars};
use crate::cpa::{CoarseTarget, COARSE_BCE_EPS};
use crate::error::{Error, Result};
use crate::nn::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Additive smoothing of the soft Dice term.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub dice: f64,
    pub bce: f64,
    /// Mean coarse patch loss over the stages; absent without patch attention.
    pub coarse: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub dice: Var,
    pub bce: Var,
    pub coarse: Option<Var>,
}

impl LossVars {
    pub fn components<T: Real>(&self, tape: &Tape<T>) -> LossComponents {
        let v = |x: Var| tape.value(x).item().as_f64();
        LossComponents {
            total: v(self.total),
            dice: v(self.dice),
            bce: v(self.bce),
            coarse: self.coarse.map(v),
        }
    }
}

/// `N x 1 x G x G` stack of per-sample coarse targets.
pub fn coarse_batch<T: Real>(targets: &[CoarseTarget]) -> Result<Tensor<T>> {
    let first = targets
        .first()
        .ok_or_else(|| Error::dim("coarse targets", "empty batch"))?;
    let g = first.grid.shape()[0];
    let mut data = Vec::with_capacity(targets.len() * g * g);
    for t in targets {
        if t.grid.shape() != [g, g] {
            return Err(Error::dim("coarse targets", "grids differ in size"));
        }
        data.extend(t.grid.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Tensor::new(&[targets.len(), 1, g, g], data)
}

/// Loss graph from logits and stage grids:
/// `dice + bce + lambda * mean_stage(coarse_bce)`, where the Dice term is the
/// per-sample soft Dice loss on sigmoid probabilities and the BCE is computed
/// from logits. `mask` is `N x 1 x H x W`, `coarse` is `N x 1 x G x G`.
pub fn loss_vars<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    grids: &[Option<Var>],
    mask: &Tensor<T>,
    coarse: Option<&Tensor<T>>,
    lambda: f64,
) -> Result<LossVars> {
    if let Some(v) = mask.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::Validation(format!("mask value {v} is not binary")));
    }
    let prob = tape.sigmoid(logits);
    let dice = tape.soft_dice(prob, mask, T::from_f64_lossy(DICE_SMOOTH))?;
    let bce = tape.bce_with_logits(logits, mask)?;
    let mut total = tape.add(dice, bce)?;
    let present: Vec<Var> = grids.iter().flatten().copied().collect();
    let coarse_var = if present.is_empty() {
        None
    } else {
        let target = coarse.ok_or_else(|| Error::Validation("patch attention needs coarse targets".into()))?;
        let eps = T::from_f64_lossy(COARSE_BCE_EPS);
        let mut sum: Option<Var> = None;
        for g in &present {
            let l = tape.bce_prob(*g, target, eps)?;
            sum = Some(match sum {
                None => l,
                Some(s) => tape.add(s, l)?,
            });
        }
        let mean = tape.scale(sum.expect("at least one stage"), T::from_f64_lossy(1.0 / STAGES as f64));
        let weighted = tape.scale(mean, T::from_f64_lossy(lambda));
        total = tape.add(total, weighted)?;
        Some(mean)
    };
    Ok(LossVars {
        total,
        dice,
        bce,
        coarse: coarse_var,
    })
}

/// Convenience wrapper over a recorded forward pass.
pub fn trace_loss_vars<T: Real>(
    tape: &mut Tape<T>,
    trace: &TraceVars,
    mask: &Tensor<T>,
    coarse: Option<&Tensor<T>>,
    lambda: f64,
) -> Result<LossVars> {
    loss_vars(tape, trace.logits, &trace.grids, mask, coarse, lambda)
}

/// Loss of an evaluated trace. `gt_mask` is `N x 1 x H x W` (or `N x H x W`),
/// `coarse` holds one target per sample.
pub fn total_loss<T: Real>(
    trace: &ForwardTrace<T>,
    gt_mask: &Tensor<T>,
    coarse: &[CoarseTarget],
    lambda: f64,
) -> Result<LossComponents> {
    let n = trace.batch();
    if gt_mask.len() != trace.logits.len() {
        return Err(Error::dim(
            "total_loss",
            format!("mask {:?} vs logits {:?}", gt_mask.shape(), trace.logits.shape()),
        ));
    }
    let mask = gt_mask.clone().reshape(trace.logits.shape())?;
    let mut tape = Tape::<T>::new();
    let logits = tape.constant(trace.logits.clone());
    let grids: Vec<Option<Var>> = trace
        .attention
        .iter()
        .map(|a| {
            a.as_ref().map(|a| {
                let g = a.grid.shape()[1];
                tape.constant(a.grid.clone().reshape(&[n, 1, g, g]).expect("grid is N x G x G"))
            })
        })
        .collect();
    let target = if grids.iter().any(|g| g.is_some()) {
        if coarse.len() != n {
            return Err(Error::dim(
                "total_loss",
                format!("{} coarse targets for batch {n}", coarse.len()),
            ));
        }
        Some(coarse_batch::<T>(coarse)?)
    } else {
        None
    };
    let v = loss_vars(&mut tape, logits, &grids, &mask, target.as_ref(), lambda)?;
    Ok(v.components(&tape))
}

#[cfg(test)]
mod tests {
    use super::super::network::StageAttention;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trace(logits: Tensor<f64>, grid: Option<Tensor<f64>>) -> ForwardTrace<f64> {
        let probs = logits.map(|z| 1.0 / (1.0 + (-z).exp()));
        let attention = (0..5)
            .map(|_| {
                grid.clone().map(|g| StageAttention {
                    grid: g,
                    map: Tensor::zeros(&[1]),
                    output: Tensor::zeros(&[1]),
                })
            })
            .collect();
        ForwardTrace {
            attention,
            fusion: vec![None; 5],
            logits,
            probs,
        }
    }

    fn target(grid: Tensor<f32>) -> CoarseTarget {
        CoarseTarget { grid, stage: 1 }
    }

    #[test]
    fn saturated_perfect_prediction_has_tiny_loss() {
        let mask = Tensor::<f64>::from_fn(&[1, 1, 12, 12], |i| ((i / 12) < 6 && (i % 12) < 6) as u8 as f64);
        let logits = mask.map(|m| if m == 1.0 { 40.0 } else { -40.0 });
        let tgrid = Tensor::<f32>::from_fn(&[6, 6], |i| ((i / 6) < 3 && (i % 6) < 3) as u8 as f32);
        let grid = tgrid.cast::<f64>().reshape(&[1, 6, 6]).unwrap();
        let l = total_loss(&trace(logits, Some(grid)), &mask, &[target(tgrid)], 0.25).unwrap();
        assert!(l.total < 1e-3, "{l:?}");
    }

    #[test]
    fn half_probabilities_give_ln2_terms() {
        let mask = Tensor::<f64>::from_fn(&[2, 1, 12, 12], |i| (i % 5 == 0) as u8 as f64);
        let grid = Tensor::<f64>::full(&[2, 6, 6], 0.5);
        let tg = Tensor::<f32>::from_fn(&[6, 6], |i| (i % 3 == 0) as u8 as f32);
        let l = total_loss(
            &trace(Tensor::zeros(&[2, 1, 12, 12]), Some(grid)),
            &mask,
            &[target(tg.clone()), target(tg)],
            0.25,
        )
        .unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((l.bce - ln2).abs() < 1e-12);
        assert!((l.coarse.unwrap() - ln2).abs() < 1e-12);
        assert!((l.total - (l.dice + ln2 + 0.25 * ln2)).abs() < 1e-12);
    }

    #[test]
    fn components_match_independent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (n, h) = (2, 12);
        let logits = Tensor::<f64>::from_fn(&[n, 1, h, h], |_| rng.random::<f64>() * 6.0 - 3.0);
        let mask = Tensor::<f64>::from_fn(&[n, 1, h, h], |_| (rng.random::<f64>() < 0.3) as u8 as f64);
        let grid = Tensor::<f64>::from_fn(&[n, 6, 6], |_| rng.random::<f64>());
        let tgs: Vec<_> = (0..n)
            .map(|_| target(Tensor::from_fn(&[6, 6], |_| (rng.random::<f64>() < 0.5) as u8 as f32)))
            .collect();
        let l = total_loss(&trace(logits.clone(), Some(grid.clone())), &mask, &tgs, 0.4).unwrap();

        let per = h * h;
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let mut dice = 0.0;
        for s in 0..n {
            let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
            for i in 0..per {
                let (p, g) = (sig(logits.data()[s * per + i]), mask.data()[s * per + i]);
                inter += p * g;
                sp += p;
                sg += g;
            }
            dice += 1.0 - (2.0 * inter + 1.0) / (sp + sg + 1.0);
        }
        dice /= n as f64;
        let bce = logits
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&z, &g)| -(g * sig(z).ln() + (1.0 - g) * (1.0 - sig(z)).ln()))
            .sum::<f64>()
            / (n * per) as f64;
        let mut coarse_stage = 0.0;
        for s in 0..n {
            for c in 0..36 {
                let (p, t) = (grid.data()[s * 36 + c], tgs[s].grid.data()[c] as f64);
                coarse_stage -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            }
        }
        coarse_stage /= (n * 36) as f64;
        assert!((l.dice - dice).abs() < 1e-12);
        assert!((l.bce - bce).abs() < 1e-12);
        assert!((l.coarse.unwrap() - coarse_stage).abs() < 1e-12);
        assert!((l.total - (dice + bce + 0.4 * coarse_stage)).abs() < 1e-12);
    }

    #[test]
    fn no_attention_means_no_coarse_term() {
        let mask = Tensor::<f64>::zeros(&[1, 1, 12, 12]);
        let l = total_loss(&trace(Tensor::zeros(&[1, 1, 12, 12]), None), &mask, &[], 0.25).unwrap();
        assert!(l.coarse.is_none());
        assert_eq!(l.total, l.dice + l.bce);
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        let mask = Tensor::<f64>::full(&[1, 1, 12, 12], 0.5);
        assert!(total_loss(&trace(Tensor::zeros(&[1, 1, 12, 12]), None), &mask, &[], 0.25).is_err());
    }
}
