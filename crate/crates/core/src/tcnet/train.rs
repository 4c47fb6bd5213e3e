use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::config::TrainConfig;
use super::loss::{coarse_batch, trace_loss_vars, LossComponents};
use super::network::Network;
use crate::cpa::make_coarse_target;
use crate::dataio::{drop_empty, Dataset, SegSample};
use crate::error::{Error, Result};
use crate::metrics::{BinaryMask, Confusion, MetricsReport};
use crate::nn::params::{apply_bn_updates, fork_rng, ParamId, ParamStore, Session};
use crate::tensor::{Real, Tensor};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T: Real = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.ids().map(|id| vec![T::zero(); store.get(id).len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Vec<T>)], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - self.beta1), T::from_f64_lossy(1.0 - self.beta2));
        let step = T::from_f64_lossy(lr / c1);
        let c2 = T::from_f64_lossy(c2);
        let eps = T::from_f64_lossy(self.eps);
        for (id, g) in grads {
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(*id).data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                p[i] -= step * m[i] / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Stacked network input, mask and coarse targets of a batch.
pub struct Batch<T: Real = f32> {
    /// `N x 4 x H x W`.
    pub image: Tensor<T>,
    /// `N x 1 x H x W`.
    pub mask: Tensor<T>,
    /// `N x 1 x G x G`.
    pub coarse: Tensor<T>,
}

pub fn make_batch<T: Real>(samples: &[&SegSample], grid: usize) -> Result<Batch<T>> {
    let first = samples.first().ok_or_else(|| Error::dim("batch", "no samples"))?;
    let (h, w) = (first.mask.shape()[0], first.mask.shape()[1]);
    let n = samples.len();
    let mut image = Vec::with_capacity(n * 4 * h * w);
    let mut mask = Vec::with_capacity(n * h * w);
    let mut targets = Vec::with_capacity(n);
    for s in samples {
        s.validate()?;
        if s.mask.shape() != [h, w] {
            return Err(Error::dim("batch", "samples differ in extent"));
        }
        image.extend(s.image.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
        mask.extend(s.mask.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
        targets.push(make_coarse_target(&s.mask, grid)?);
    }
    Ok(Batch {
        image: Tensor::new(&[n, 4, h, w], image)?,
        mask: Tensor::new(&[n, 1, h, w], mask)?,
        coarse: coarse_batch(&targets)?,
    })
}

/// One optimisation step on `batch`; returns the loss before the update.
pub fn train_step<T: Real>(
    net: &mut Network<T>,
    adam: &mut Adam<T>,
    batch: &Batch<T>,
    lr: f64,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossComponents> {
    let (grads, updates, loss) = {
        let mut s = Session::new(&net.store, true, Some(fork_rng(rng)));
        let x = s.tape.constant(batch.image.clone());
        let trace = net.forward_vars(&mut s, x)?;
        let lv = trace_loss_vars(&mut s.tape, &trace, &batch.mask, Some(&batch.coarse), lambda)?;
        let loss = lv.components(&s.tape);
        if !loss.total.is_finite() {
            return Err(Error::Numeric(format!("training loss is {}", loss.total)));
        }
        let g = s.tape.backward(lv.total)?;
        let grads = s.param_grads(&g);
        (grads, s.take_bn_updates(), loss)
    };
    if grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric("non-finite parameter gradient".into()));
    }
    adam.update(&mut net.store, &grads, lr);
    apply_bn_updates(&mut net.store, &updates);
    Ok(loss)
}

/// Eval-mode probability maps (`H x W`), one per sample, in input order.
pub fn predict<T: Real>(net: &Network<T>, samples: &[SegSample], batch_size: usize) -> Result<Vec<Tensor<T>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        let b = make_batch::<T>(&refs, net.config.patch_grid)?;
        let t = net.forward(&b.image, false)?;
        for i in 0..chunk.len() {
            out.push(t.prob_map(i)?);
        }
    }
    Ok(out)
}

/// Prediction and ground truth volumes, grouped by patient in first-seen order.
pub fn volume_pairs<T: Real>(
    samples: &[SegSample],
    probs: &[Tensor<T>],
    threshold: f64,
) -> Result<Vec<(String, BinaryMask, BinaryMask)>> {
    let mut order: Vec<String> = Vec::new();
    for s in samples {
        if !order.contains(&s.patient) {
            order.push(s.patient.clone());
        }
    }
    order
        .into_iter()
        .map(|pid| {
            let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].patient == pid).collect();
            idx.sort_by_key(|&i| samples[i].slice);
            let pred = idx
                .iter()
                .map(|&i| BinaryMask::threshold(&probs[i], T::from_f64_lossy(threshold)))
                .collect::<Result<Vec<_>>>()?;
            let gt = idx
                .iter()
                .map(|&i| BinaryMask::from_tensor(&samples[i].mask))
                .collect::<Result<Vec<_>>>()?;
            Ok((pid, BinaryMask::stack(&pred)?, BinaryMask::stack(&gt)?))
        })
        .collect()
}

/// Per-patient metrics on the restacked volumes.
pub fn evaluate<T: Real>(
    net: &Network<T>,
    samples: &[SegSample],
    batch_size: usize,
    threshold: f64,
    spacing: &[f64; 3],
) -> Result<MetricsReport> {
    let probs = predict(net, samples, batch_size)?;
    let items = volume_pairs(samples, &probs, threshold)?;
    MetricsReport::evaluate(&items, spacing)
}

/// Mean per-patient DSC and the pooled DSC.
pub fn volume_dsc<T: Real>(
    net: &Network<T>,
    samples: &[SegSample],
    batch_size: usize,
    threshold: f64,
) -> Result<(f64, f64)> {
    let probs = predict(net, samples, batch_size)?;
    let items = volume_pairs(samples, &probs, threshold)?;
    let mut total = Confusion::default();
    let mut sum = 0.0;
    for (_, p, g) in &items {
        let c = Confusion::of(p, g)?;
        sum += c.dsc();
        total.tp += c.tp;
        total.fp += c.fp;
        total.fn_ += c.fn_;
    }
    Ok((sum / items.len().max(1) as f64, total.dsc()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub dice: f64,
    pub bce: f64,
    pub coarse: Option<f64>,
    /// Mean per-patient DSC on the held-out volumes.
    pub val_dsc: Option<f64>,
    pub val_dsc_global: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_dsc: Option<f64>,
    pub stopped_early: bool,
    /// Loss of every optimisation step, in order.
    pub step_losses: Vec<f64>,
}

impl History {
    pub fn loss_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.9}")).unwrap_or_default();
        let mut s = String::from("epoch,loss,dice,bce,coarse,val_dsc,val_dsc_global\n");
        for r in &self.epochs {
            s.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{},{},{}\n",
                r.epoch,
                r.loss,
                r.dice,
                r.bce,
                opt(r.coarse),
                opt(r.val_dsc),
                opt(r.val_dsc_global)
            ));
        }
        s
    }

    pub fn lr_csv(&self) -> String {
        let mut s = String::from("epoch,lr\n");
        for r in &self.epochs {
            s.push_str(&format!("{},{:e}\n", r.epoch, r.lr));
        }
        s
    }
}

/// Train on `data.train` (lesion-free slices filtered per `tc`), validating on
/// `data.test` after each epoch. On return `net` holds the parameters of the
/// best validation epoch (the last epoch without a test split). With
/// `checkpoint_dir`, those parameters are also written there whenever they
/// improve; a divergent step aborts with the last written checkpoint in place.
pub fn train(
    net: &mut Network<f32>,
    data: &Dataset,
    tc: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<History> {
    tc.validate()?;
    let train_set = drop_empty(data.train.clone(), tc.keep_empty_fraction);
    if train_set.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut adam = Adam::new(&net.store, tc.beta1, tc.beta2, tc.eps);
    let mut history = History::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best_store = None;
    for epoch in 0..tc.epochs {
        let lr = tc.learning_rate(epoch);
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut has_coarse = false;
        let mut count = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            let refs: Vec<&SegSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = make_batch::<f32>(&refs, net.config.patch_grid)?;
            let l = train_step(net, &mut adam, &batch, lr, tc.lambda_cpa, &mut rng).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!(
                    "epoch {epoch}, step {}: {m}; last good checkpoint kept",
                    adam.steps() + 1
                )),
                other => other,
            })?;
            let k = chunk.len() as f64;
            sums.0 += l.total * k;
            sums.1 += l.dice * k;
            sums.2 += l.bce * k;
            if let Some(c) = l.coarse {
                sums.3 += c * k;
                has_coarse = true;
            }
            count += chunk.len();
            history.step_losses.push(l.total);
        }
        let n = count as f64;
        let (val_dsc, val_global) = if data.test.is_empty() {
            (None, None)
        } else {
            let (m, g) = volume_dsc(net, &data.test, tc.batch_size, tc.threshold)?;
            (Some(m), Some(g))
        };
        let record = EpochRecord {
            epoch,
            lr,
            loss: sums.0 / n,
            dice: sums.1 / n,
            bce: sums.2 / n,
            coarse: has_coarse.then_some(sums.3 / n),
            val_dsc,
            val_dsc_global: val_global,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.3e} loss {:.4} val dsc {}",
            record.loss,
            val_dsc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
        );
        history.epochs.push(record);
        let improved = match (val_dsc, history.best_val_dsc) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            history.best_epoch = Some(epoch);
            history.best_val_dsc = val_dsc;
            best_store = Some(net.store.clone());
            if let Some(dir) = checkpoint_dir {
                save_checkpoint(net, dir, epoch, &history)?;
            }
        }
        if let (Some(target), Some(v)) = (tc.target_dsc, val_dsc) {
            if v >= target {
                history.stopped_early = true;
                log::info!("validation DSC {v:.4} reached target {target}; stopping");
                break;
            }
        }
    }
    if let Some(best) = best_store {
        net.store = best;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{PreprocessSpec, SynthSpec};
    use crate::tcnet::NetworkConfig;

    fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            input_side: 48,
            patch_grid: 3,
            ..NetworkConfig::compact()
        }
    }

    fn tiny_data() -> Dataset {
        let spec = SynthSpec {
            volumes: 3,
            extent: [6, 48, 48],
            radius_min: [1.5, 4.0, 4.0],
            radius_max: [2.5, 8.0, 8.0],
            test_fraction: 0.34,
            ..SynthSpec::default()
        };
        Dataset::synthesize(&spec, &PreprocessSpec { crop: None, side: 48 }).unwrap()
    }

    fn lesion_batch(data: &Dataset, n: usize) -> Batch<f32> {
        let refs: Vec<&SegSample> = data.train.iter().filter(|s| s.has_lesion()).take(n).collect();
        make_batch(&refs, 3).unwrap()
    }

    #[test]
    fn lambda_zero_makes_steps_independent_of_coarse_targets() {
        let data = tiny_data();
        let batch = lesion_batch(&data, 2);
        let flipped = Batch {
            coarse: batch.coarse.map(|v| 1.0 - v),
            image: batch.image.clone(),
            mask: batch.mask.clone(),
        };
        let step = |b: &Batch<f32>, lambda: f64| {
            let mut net = Network::<f32>::build(&tiny_config(), 3).unwrap();
            let mut adam = Adam::new(&net.store, 0.9, 0.999, 1e-8);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            train_step(&mut net, &mut adam, b, 1e-3, lambda, &mut rng).unwrap();
            net.store.checksum()
        };
        assert_eq!(step(&batch, 0.0), step(&flipped, 0.0));
        assert_ne!(step(&batch, 0.25), step(&flipped, 0.25));
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_data();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let mut net = Network::<f32>::build(&tiny_config(), 1).unwrap();
            let h = train(&mut net, &data, &tc, None).unwrap();
            (net.store.checksum(), h)
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert_eq!(ha.epochs.len(), 2);
        assert_eq!(ha.epochs[1].lr, 1e-3 * 0.96);
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let data = tiny_data();
        let batch = lesion_batch(&data, 4);
        let mut net = Network::<f32>::build(&tiny_config(), 2).unwrap();
        let mut adam = Adam::new(&net.store, 0.9, 0.999, 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let losses: Vec<f64> = (0..40)
            .map(|_| {
                train_step(&mut net, &mut adam, &batch, 3e-3, 0.25, &mut rng)
                    .unwrap()
                    .total
            })
            .collect();
        let head: f64 = losses[..10].iter().sum();
        let tail: f64 = losses[30..].iter().sum();
        assert!(tail < 0.8 * head, "{losses:?}");
    }

    #[test]
    fn non_finite_input_is_a_numeric_error() {
        let data = tiny_data();
        let mut batch = lesion_batch(&data, 1);
        batch.image.data_mut()[7] = f32::NAN;
        let mut net = Network::<f32>::build(&tiny_config(), 2).unwrap();
        let before = net.store.checksum();
        let mut adam = Adam::new(&net.store, 0.9, 0.999, 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = train_step(&mut net, &mut adam, &batch, 1e-3, 0.25, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
        assert_eq!(net.store.checksum(), before);
    }

    #[test]
    fn volumes_are_restacked_by_patient_and_slice() {
        let data = tiny_data();
        let mut samples = data.test.clone();
        samples.reverse();
        let probs: Vec<Tensor<f32>> = samples.iter().map(|s| s.mask.clone()).collect();
        let pairs = volume_pairs(&samples, &probs, 0.5).unwrap();
        assert_eq!(pairs.len(), 1);
        let (_, p, g) = &pairs[0];
        assert_eq!(p, g);
        assert_eq!(p.shape(), &[6, 48, 48]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let mut adam = Adam::new(&store, 0.9, 0.999, 1e-8);
        adam.update(&mut store, &[(id, vec![0.3, -4.0, 1e-3])], 0.01);
        let p = store.get(id).data();
        // with bias correction the first step is lr * sign(g) (up to eps)
        assert!((p[0] - 0.99).abs() < 1e-7);
        assert!((p[1] + 1.99).abs() < 1e-7);
        assert!((p[2] - 0.49).abs() < 1e-5);
    }

    #[test]
    fn adam_matches_reference_recursion() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::new(&[1], vec![0.7]).unwrap(), true);
        let mut adam = Adam::new(&store, 0.9, 0.999, 1e-8);
        let (mut m, mut v, mut p) = (0.0f64, 0.0f64, 0.7f64);
        for t in 1..=5 {
            let g = 2.0 * p - 0.3 * t as f64;
            adam.update(&mut store, &[(id, vec![g])], 1e-2);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            p -= 1e-2 * mh / (vh.sqrt() + 1e-8);
            assert!((store.get(id).data()[0] - p).abs() < 1e-12);
        }
    }

    #[test]
    fn history_csvs() {
        let h = History {
            epochs: vec![EpochRecord {
                epoch: 0,
                lr: 1e-3,
                loss: 1.5,
                dice: 0.5,
                bce: 0.75,
                coarse: None,
                val_dsc: Some(0.25),
                val_dsc_global: None,
            }],
            ..History::default()
        };
        assert_eq!(h.lr_csv(), "epoch,lr\n0,1e-3\n");
        assert!(h
            .loss_csv()
            .ends_with("0,1.500000000,0.500000000,0.750000000,,0.250000000,\n"));
    }
}
