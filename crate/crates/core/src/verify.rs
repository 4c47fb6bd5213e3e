//! Finite-difference gradient suite over every layer and block, in `f64`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cff::CffBlock;
use crate::cpa::{make_coarse_target, CpaBlock};
use crate::error::Result;
use crate::mdu::{MduBlock, MduSpec};
use crate::nn::conv::ConvSpec;
use crate::nn::gradcheck::{gradcheck_resampled, project, GradCheckConfig, GradReport};
use crate::nn::params::{BatchNorm, ParamId, ParamStore, Session};
use crate::nn::tape::{BnMode, Tape, Var};
use crate::tcnet::{coarse_batch, loss_vars, Network, NetworkConfig};
use crate::tensor::Tensor;

pub const LAYER_TOLERANCE: f64 = 1e-5;
pub const BLOCK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseKind {
    Layer,
    Block,
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub kind: CaseKind,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub checked: usize,
    pub kinks: usize,
    pub passed: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub cases: Vec<CaseReport>,
    pub passed: bool,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("case,kind,tolerance,max_rel_error,checked,kinks,passed\n");
        for c in &self.cases {
            s.push_str(&format!(
                "{},{},{:e},{:e},{},{},{}\n",
                c.name,
                if c.kind == CaseKind::Layer { "layer" } else { "block" },
                c.tolerance,
                c.max_rel_error,
                c.checked,
                c.kinks,
                c.passed
            ));
        }
        s
    }
}

/// Steps tried per coordinate of the full network.
pub const NETWORK_LADDER: [f64; 4] = [1e-3, 1e-4, 1e-5, 1e-6];
/// Coordinates checked per parameter tensor of the full network.
pub const NETWORK_COORDS: usize = 2;

const ATTEMPTS: usize = 4;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
}

fn config(tolerance: f64, coords: Option<usize>) -> GradCheckConfig {
    GradCheckConfig {
        tolerance,
        coords_per_input: coords,
        ..GradCheckConfig::default()
    }
}

fn finish(name: &str, kind: CaseKind, r: GradReport, start: Instant) -> CaseReport {
    CaseReport {
        name: name.to_string(),
        kind,
        tolerance: r.tolerance,
        max_rel_error: r.max_rel_error,
        checked: r.inputs.iter().map(|i| i.checked).sum(),
        kinks: r.kinks,
        passed: r.passed,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Check a single-layer graph at random points drawn from `shapes`.
fn layer_case<F>(name: &str, seed: u64, shapes: &[&[usize]], f: F) -> Result<CaseReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let start = Instant::now();
    let report = gradcheck_resampled(
        |t, v| {
            let y = f(t, v)?;
            project(t, y, seed)
        },
        |attempt| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(attempt as u64));
            shapes.iter().map(|s| uniform(&mut rng, s, 1.0)).collect()
        },
        &config(LAYER_TOLERANCE, None),
        ATTEMPTS,
    )?;
    Ok(finish(name, CaseKind::Layer, report, start))
}

/// Check a parameterised module: gradients with respect to `inputs` and every
/// trainable parameter of `store`, in eval mode.
fn module_case<B>(
    name: &str,
    store: &ParamStore<f64>,
    inputs: Vec<Tensor<f64>>,
    coords: Option<usize>,
    step_ladder: Option<Vec<f64>>,
    seed: u64,
    build: B,
) -> Result<CaseReport>
where
    B: Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var>,
{
    let start = Instant::now();
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    let n_in = inputs.len();
    let f = |tape: &mut Tape<f64>, vars: &[Var]| {
        let t = std::mem::replace(tape, Tape::new());
        let mut s = Session::with_tape(t, store, false, None);
        for (k, &id) in ids.iter().enumerate() {
            s.bind(id, vars[n_in + k]);
        }
        let out = build(&mut s, &vars[..n_in]);
        *tape = s.into_tape();
        out
    };
    let report = gradcheck_resampled(
        f,
        |attempt| {
            let mut point = inputs.clone();
            if attempt > 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ attempt as u64);
                for t in &mut point {
                    for v in t.data_mut() {
                        *v += rng.random::<f64>() * 0.02 - 0.01;
                    }
                }
            }
            // parameters move off their initial values so that zero biases
            // on dead inputs do not sit exactly on a ReLU kink
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000 + attempt as u64));
            point.extend(ids.iter().map(|&id| {
                let mut p = store.get(id).clone();
                for v in p.data_mut() {
                    *v += rng.random::<f64>() * 0.1 - 0.05;
                }
                p
            }));
            point
        },
        &GradCheckConfig {
            seed,
            step_ladder,
            ..config(BLOCK_TOLERANCE, coords)
        },
        ATTEMPTS,
    )?;
    for r in &report.inputs {
        let label = if r.index < n_in {
            format!("input {}", r.index)
        } else {
            store.name(ids[r.index - n_in]).to_string()
        };
        log::debug!("{name}: {label}: {:.2e}, {} kinks", r.max_rel_error, r.kinks);
    }
    Ok(finish(name, CaseKind::Block, report, start))
}

fn layer_cases() -> Result<Vec<CaseReport>> {
    let conv2d = ConvSpec::new(2, 3, &[3, 3]).with_stride(2).with_padding(1);
    let conv3d = ConvSpec::new(2, 2, &[3, 3, 3]).with_padding(1);
    let pointwise3d = ConvSpec::new(3, 1, &[1, 1, 1]);
    let deconv = ConvSpec::new(2, 3, &[5, 5])
        .with_stride(2)
        .with_padding(2)
        .with_output_padding(1);
    let deconv3d = ConvSpec::new(2, 2, &[3, 3, 3])
        .with_stride(2)
        .with_padding(1)
        .with_output_padding(1);

    let mut out = vec![
        layer_case("conv2d", 1, &[&[2, 2, 7, 6], &conv2d.weight_shape(), &[3]], |t, v| {
            t.conv(v[0], v[1], Some(v[2]), &conv2d)
        })?,
        layer_case(
            "conv3d",
            2,
            &[&[1, 2, 3, 5, 4], &conv3d.weight_shape(), &[2]],
            |t, v| t.conv(v[0], v[1], Some(v[2]), &conv3d),
        )?,
        layer_case(
            "conv3d_pointwise",
            3,
            &[&[2, 3, 2, 3, 3], &pointwise3d.weight_shape()],
            |t, v| t.conv(v[0], v[1], None, &pointwise3d),
        )?,
        layer_case(
            "transposed_conv2d",
            4,
            &[&[2, 2, 3, 4], &deconv.transposed_weight_shape(), &[3]],
            |t, v| t.transposed_conv(v[0], v[1], Some(v[2]), &deconv),
        )?,
        layer_case(
            "transposed_conv3d",
            5,
            &[&[1, 2, 2, 3, 2], &deconv3d.transposed_weight_shape()],
            |t, v| t.transposed_conv(v[0], v[1], None, &deconv3d),
        )?,
        layer_case("max_pool", 6, &[&[2, 2, 6, 6]], |t, v| t.max_pool(v[0], (2, 2), (2, 2)))?,
        layer_case("max_pool_3d", 7, &[&[1, 2, 3, 4, 4]], |t, v| {
            t.max_pool(v[0], (2, 2), (2, 2))
        })?,
        layer_case("avg_pool", 8, &[&[2, 2, 6, 6]], |t, v| t.avg_pool(v[0], (3, 3), (3, 3)))?,
        layer_case("upsample_nearest", 9, &[&[1, 2, 3, 3]], |t, v| {
            t.upsample_nearest(v[0], (2, 2))
        })?,
        layer_case("depth_mean", 10, &[&[2, 2, 4, 3, 3]], |t, v| t.mean_axis(v[0], 2))?,
        layer_case("dense", 11, &[&[3, 5], &[4, 5], &[4]], |t, v| {
            t.linear(v[0], v[1], Some(v[2]))
        })?,
    ];
    let mean = [0.3, -0.2, 0.1];
    let var = [0.5, 1.5, 2.0];
    out.push(layer_case(
        "batch_norm_frozen",
        12,
        &[&[2, 3, 4, 4], &[3], &[3]],
        |t, v| {
            let mode = BnMode::Frozen { mean: &mean, var: &var };
            Ok(t.batch_norm(v[0], v[1], v[2], 1e-5, mode)?.0)
        },
    )?);
    out.push(layer_case(
        "batch_norm_batch_stats",
        13,
        &[&[3, 2, 3, 3], &[2], &[2]],
        |t, v| Ok(t.batch_norm(v[0], v[1], v[2], 1e-5, BnMode::Batch)?.0),
    )?);
    out.push(layer_case(
        "sigmoid_relu_chain",
        14,
        &[&[2, 3, 4], &[2, 3, 4]],
        |t, v| {
            let a = t.relu(v[0]);
            let b = t.sigmoid(v[1]);
            let c = t.mul(a, b)?;
            let c = t.relu(c);
            Ok(t.sigmoid(c))
        },
    )?);
    out.push(layer_case(
        "channel_and_spatial_scaling",
        15,
        &[&[2, 3, 4, 4], &[2, 3], &[2, 1, 4, 4]],
        |t, v| {
            let y = t.scale_channels(v[0], v[1])?;
            t.mul_spatial(y, v[2])
        },
    )?);
    out.push(layer_case("concat", 16, &[&[2, 1, 3, 3], &[2, 2, 3, 3]], |t, v| {
        t.concat(&[v[0], v[1]])
    })?);

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mask = Tensor::from_fn(&[2, 1, 4, 4], |_| (rng.random::<f64>() < 0.4) as u8 as f64);
    out.push(layer_case("bce_with_logits", 17, &[&[2, 1, 4, 4]], |t, v| {
        t.bce_with_logits(v[0], &mask)
    })?);
    out.push(layer_case("soft_dice", 18, &[&[2, 1, 4, 4]], |t, v| {
        let p = t.sigmoid(v[0]);
        t.soft_dice(p, &mask, 1.0)
    })?);
    out.push(layer_case("bce_prob", 19, &[&[2, 1, 4, 4]], |t, v| {
        let p = t.sigmoid(v[0]);
        t.bce_prob(p, &mask, 1e-7)
    })?);
    Ok(out)
}

fn block_cases() -> Result<Vec<CaseReport>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(100);

    let mut store = ParamStore::<f64>::new();
    let cpa = CpaBlock::new(&mut store, "cpa", 3, &mut rng);
    let x = uniform(&mut rng, &[2, 2, 6, 6], 1.0);
    out.push(module_case("cpa", &store, vec![x], None, None, 101, |s, v| {
        let c = cpa.forward(s, v[0])?;
        let a = project(&mut s.tape, c.output, 1)?;
        let b = project(&mut s.tape, c.grid, 2)?;
        s.tape.add(a, b)
    })?);

    let mut store = ParamStore::<f64>::new();
    let cff = CffBlock::new(&mut store, "cff", 8, 4, &mut rng)?;
    let f2d = uniform(&mut rng, &[2, 8, 3, 3], 1.0);
    let f3d = uniform(&mut rng, &[2, 4, 2, 3, 3], 1.0);
    out.push(module_case("cff", &store, vec![f2d, f3d], None, None, 102, |s, v| {
        let c = cff.forward(s, v[0], v[1])?;
        project(&mut s.tape, c.output, 3)
    })?);

    let mut store = ParamStore::<f64>::new();
    let mdu = MduBlock::new(&mut store, "mdu", MduSpec::new(3, 8), &mut rng)?;
    randomize_bn(
        &mut store,
        &mdu.branches.iter().map(|b| b.1.clone()).collect::<Vec<_>>(),
        &mut rng,
    );
    let x = uniform(&mut rng, &[2, 3, 3, 3], 1.0);
    out.push(module_case("mdu", &store, vec![x], None, None, 103, |s, v| {
        let y = mdu.forward(s, v[0])?;
        project(&mut s.tape, y, 4)
    })?);

    out.push(network_case()?);
    Ok(out)
}

fn randomize_bn(store: &mut ParamStore<f64>, bns: &[BatchNorm], rng: &mut ChaCha8Rng) {
    for bn in bns {
        for v in store.get_mut(bn.running_mean).data_mut() {
            *v = rng.random::<f64>() * 0.2 - 0.1;
        }
        for v in store.get_mut(bn.running_var).data_mut() {
            *v = 0.5 + rng.random::<f64>();
        }
    }
}

/// Configuration of the network instance checked by the suite: compact
/// widths at a 32 x 32 input with a 2 x 2 patch grid.
pub fn desk_check_config() -> NetworkConfig {
    NetworkConfig {
        input_side: 32,
        patch_grid: 2,
        ..NetworkConfig::compact()
    }
}

/// The full training objective of a network, differentiated with respect to
/// the input and a sample of coordinates from every trainable tensor.
fn network_case() -> Result<CaseReport> {
    let config = desk_check_config();
    let net = Network::<f32>::build(&config, 7)?.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let side = config.input_side;
    let n = 1;
    let x = uniform(&mut rng, &[n, config.in_slices, side, side], 1.0);
    let mask = Tensor::<f32>::from_fn(&[side, side], |i| {
        let (r, c) = (i / side, i % side);
        ((r as f64 - 12.0).powi(2) + (c as f64 - 19.0).powi(2) < 30.0) as u8 as f32
    });
    let coarse = coarse_batch::<f64>(&[make_coarse_target(&mask, config.patch_grid)?])?;
    let mask = Tensor::from_fn(&[n, 1, side, side], |i| mask.data()[i % (side * side)] as f64);
    module_case(
        "network",
        &net.store,
        vec![x],
        Some(NETWORK_COORDS),
        Some(NETWORK_LADDER.to_vec()),
        201,
        |s, v| {
            let trace = net.forward_vars(s, v[0])?;
            Ok(loss_vars(&mut s.tape, trace.logits, &trace.grids, &mask, Some(&coarse), 0.25)?.total)
        },
    )
}

/// Run every case; the suite passes when all cases do.
pub fn gradient_suite() -> Result<SuiteReport> {
    let start = Instant::now();
    let mut cases = layer_cases()?;
    cases.extend(block_cases()?);
    for c in &cases {
        log::info!(
            "{:<28} {:>9.2e} (tol {:.0e}) {} coords, {} kinks: {}",
            c.name,
            c.max_rel_error,
            c.tolerance,
            c.checked,
            c.kinks,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    Ok(SuiteReport {
        passed: cases.iter().all(|c| c.passed),
        cases,
        seconds: start.elapsed().as_secs_f64(),
    })
}
