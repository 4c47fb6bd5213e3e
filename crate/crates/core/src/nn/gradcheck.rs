//! Central finite-difference verification of the tape's analytic gradients.
//!
//! The error for one input tensor is
//! `max_i |analytic_i - numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|)`
//! over the checked coordinates, i.e. the sup-norm error relative to the
//! gradient's own scale. The report's error is the maximum over inputs.
//!
//! A coordinate whose one-sided difference quotients disagree by far more than
//! curvature allows sits on a kink (a ReLU at zero, a max-pool tie). Such
//! coordinates are excluded from the error and counted in the report, so the
//! caller can re-sample the evaluation point.
//!
//! Deep compositions mix coordinates whose gradients differ by many orders of
//! magnitude; no single step suits them all. With a step ladder, each
//! coordinate uses the adjacent pair of central differences that agree best,
//! and is reported as a kink only when no pair agrees to within half the
//! tolerance.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Perturbation for central differences.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Check at most this many coordinates per input (chosen by `seed`);
    /// `None` checks every coordinate.
    pub coords_per_input: Option<usize>,
    pub seed: u64,
    /// Decreasing steps to choose from per coordinate; overrides `step`.
    pub step_ladder: Option<Vec<f64>>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
            coords_per_input: None,
            seed: 0,
            step_ladder: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub index: usize,
    pub checked: usize,
    pub kinks: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub inputs: Vec<InputReport>,
    pub max_rel_error: f64,
    pub kinks: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

enum Gap {
    OneSided(f64),
    Ladder(f64),
}

/// Compare the analytic gradient of the scalar `f(inputs)` with central
/// differences. `f` must build its graph from the provided leaf vars only.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let f0 = tape.value(out).item();
    let grads = tape.backward(out)?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = cfg.step;
    let mut point: Vec<Tensor<f64>> = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let n = inputs[i].len();
        let analytic = grads.get_raw(*var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = match cfg.coords_per_input {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut pairs = Vec::with_capacity(coords.len());
        let mut gaps = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = point[i].data()[c];
            let central = |point: &mut [Tensor<f64>], h: f64| -> Result<(f64, f64)> {
                point[i].data_mut()[c] = orig + h;
                let fp = evaluate(&f, point)?;
                point[i].data_mut()[c] = orig - h;
                let fm = evaluate(&f, point)?;
                point[i].data_mut()[c] = orig;
                Ok(((fp - fm) / (2.0 * h), ((fp - f0) / h - (f0 - fm) / h).abs()))
            };
            match &cfg.step_ladder {
                None => {
                    let (numeric, gap) = central(&mut point, h)?;
                    pairs.push((analytic[c], numeric));
                    gaps.push(Gap::OneSided(gap));
                }
                Some(ladder) => {
                    let d = ladder
                        .iter()
                        .map(|&h| central(&mut point, h).map(|r| r.0))
                        .collect::<Result<Vec<_>>>()?;
                    let (k, gap) = d.windows(2).map(|w| (w[1] - w[0]).abs()).enumerate().fold(
                        (0, f64::INFINITY),
                        |best, (k, g)| if g < best.1 { (k, g) } else { best },
                    );
                    pairs.push((analytic[c], d[k + 1]));
                    gaps.push(Gap::Ladder(gap));
                }
            }
        }
        let scale = pairs
            .iter()
            .fold(0.0f64, |m, &(a, b)| m.max(a.abs()).max(b.abs()))
            .max(f64::MIN_POSITIVE);
        let mut kinks = 0;
        let mut worst = 0.0f64;
        for (&(a, num), gap) in pairs.iter().zip(&gaps) {
            let kink = match *gap {
                Gap::OneSided(g) => g > 1e-3 * (scale + num.abs()),
                Gap::Ladder(g) => g > 0.5 * cfg.tolerance * scale,
            };
            if kink {
                kinks += 1;
                continue;
            }
            worst = worst.max((a - num).abs() / scale);
        }
        reports.push(InputReport {
            index: i,
            checked: coords.len(),
            kinks,
            max_rel_error: worst,
        });
    }
    let max_rel_error = reports.iter().fold(0.0f64, |m, r| m.max(r.max_rel_error));
    let kinks = reports.iter().map(|r| r.kinks).sum();
    Ok(GradReport {
        inputs: reports,
        max_rel_error,
        kinks,
        tolerance: cfg.tolerance,
        passed: max_rel_error < cfg.tolerance && kinks == 0,
    })
}

/// Run [`gradcheck`] at points drawn by `sample_point(attempt)` until one is
/// free of kinks (or `attempts` run out); returns the last report.
pub fn gradcheck_resampled<F, S>(
    f: F,
    mut sample_point: S,
    cfg: &GradCheckConfig,
    attempts: usize,
) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    S: FnMut(usize) -> Vec<Tensor<f64>>,
{
    let mut last = None;
    for attempt in 0..attempts.max(1) {
        let point = sample_point(attempt);
        let report = gradcheck(&f, &point, cfg)?;
        if report.kinks == 0 {
            return Ok(report);
        }
        log::info!(
            "gradcheck attempt {attempt}: {} kink coordinates, re-sampling",
            report.kinks
        );
        last = Some(report);
    }
    Ok(last.expect("at least one attempt"))
}

/// Reduce `y` to a scalar through a fixed random projection, so every output
/// element contributes a distinct weight to the checked gradient.
pub fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let r = Tensor::from_fn(tape.shape(y), |_| rng.random::<f64>() * 2.0 - 1.0);
    let r = tape.constant(r);
    let prod = tape.mul(y, r)?;
    Ok(tape.sum(prod))
}
