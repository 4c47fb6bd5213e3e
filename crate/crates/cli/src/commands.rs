use std::fs;
use std::path::{Path, PathBuf};

use tcnet_core::dataio::{
    generate_synthetic, load_dataset, preprocess_volume, read_tensor, write_gray_pgm, write_mask_pgm, write_tensor,
    Dataset, SegSample,
};
use tcnet_core::metrics::{MetricsReport, Summary};
use tcnet_core::tcnet::{self as net, load_checkpoint, Network};
use tcnet_core::verify::gradient_suite;
use tcnet_core::{Error, Result, Tensor};

use crate::config::RunConfig;

pub const CHECKPOINT_DIR: &str = "checkpoint";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write(&dir.join("config.json"), cfg.to_json()?)
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let (manifest, data) = load_dataset(&cfg.paths.data_dir, &cfg.preprocess)?;
    if manifest.spec != cfg.data {
        log::warn!(
            "dataset at {} was generated with a different spec than this config",
            cfg.paths.data_dir.display()
        );
    }
    Ok(data)
}

pub fn generate(cfg: &RunConfig) -> Result<()> {
    let m = generate_synthetic(&cfg.data, &cfg.paths.data_dir)?;
    println!(
        "wrote {} volumes ({} train, {} test) to {}",
        m.volumes.len(),
        m.split.train.len(),
        m.split.test.len(),
        cfg.paths.data_dir.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let run = &cfg.paths.run_dir;
    create_dir(run)?;
    echo_config(cfg, run)?;
    let data = load_data(cfg)?;
    let mut network = Network::<f32>::build(&cfg.network, cfg.train.seed)?;
    log::info!("{} trainable parameters", network.parameter_count());
    let history = net::train(&mut network, &data, &cfg.train, Some(&run.join(CHECKPOINT_DIR)))?;
    write(&run.join("loss.csv"), history.loss_csv())?;
    write(&run.join("lr.csv"), history.lr_csv())?;
    write(&run.join("history.json"), serde_json::to_string_pretty(&history)?)?;
    match (history.best_epoch, history.best_val_dsc) {
        (Some(e), Some(d)) => println!("best validation DSC {d:.4} at epoch {e}"),
        _ => println!("trained {} epochs", history.epochs.len()),
    }
    Ok(())
}

fn checkpoint_dir(cfg: &RunConfig, checkpoint: Option<&Path>) -> PathBuf {
    checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.run_dir.join(CHECKPOINT_DIR))
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let (network, _) = load_checkpoint(&checkpoint_dir(cfg, checkpoint))?;
    let data = load_data(cfg)?;
    let report = net::evaluate(
        &network,
        &data.test,
        cfg.train.batch_size,
        cfg.train.threshold,
        &cfg.spacing_mm,
    )?;
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.run_dir.join("metrics.csv"));
    write(&out, report.to_csv())?;
    print_summary(&report);
    Ok(())
}

fn fmt_summary(s: &Option<Summary>) -> String {
    s.as_ref()
        .map(|s| format!("{:.4} ± {:.4}", s.mean, s.std))
        .unwrap_or_else(|| "n/a".into())
}

fn print_summary(r: &MetricsReport) {
    println!("patients      {}", r.samples.len());
    println!("DSC           {}", fmt_summary(&r.dsc));
    println!("DSC (global)  {:.4}", r.dsc_global);
    println!("recall        {}", fmt_summary(&r.recall));
    println!("precision     {}", fmt_summary(&r.precision));
    println!("ASSD (mm)     {}", fmt_summary(&r.assd_mm));
    println!("HD (mm)       {}", fmt_summary(&r.hd_mm));
    if r.surface_excluded > 0 {
        println!(
            "{} patients without a surface excluded from ASSD/HD",
            r.surface_excluded
        );
    }
}

/// Read a `D x H x W` volume and preprocess it without a ground truth.
fn volume_samples(cfg: &RunConfig, input: &Path) -> Result<Vec<SegSample>> {
    let volume = read_tensor(input)?;
    let mask = Tensor::zeros(volume.shape());
    let id = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    preprocess_volume(&volume, &mask, &id, &cfg.preprocess)
}

pub fn predict(cfg: &RunConfig, checkpoint: Option<&Path>, input: &Path, out_dir: &Path) -> Result<()> {
    let (network, _) = load_checkpoint(&checkpoint_dir(cfg, checkpoint))?;
    let samples = volume_samples(cfg, input)?;
    let probs = net::predict(&network, &samples, cfg.train.batch_size)?;
    let side = cfg.preprocess.side;
    let mut data = Vec::with_capacity(probs.len() * side * side);
    for p in &probs {
        data.extend_from_slice(p.data());
    }
    let probs = Tensor::new(&[samples.len(), side, side], data)?;
    let threshold = cfg.train.threshold as f32;
    let mask = probs.map(|p| if p >= threshold { 1.0 } else { 0.0 });
    create_dir(out_dir)?;
    write_tensor(out_dir.join("probs.tcnt"), &probs)?;
    write_mask_pgm(out_dir.join("mask.pgm"), &mask)?;
    println!(
        "{} slices, {} foreground voxels -> {}",
        samples.len(),
        mask.data().iter().filter(|&&v| v > 0.0).count(),
        out_dir.display()
    );
    Ok(())
}

pub fn ablation(cfg: &RunConfig, epochs: usize, out: Option<&Path>) -> Result<()> {
    let dir = cfg.paths.run_dir.join("ablation");
    create_dir(&dir)?;
    echo_config(cfg, &dir)?;
    let data = load_data(cfg)?;
    let rows = net::run_ablation(&cfg.network, &cfg.train, &data, epochs, &cfg.spacing_mm, Some(&dir))?;
    let csv = net::ablation_csv(&rows);
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| dir.join("ablation.csv"));
    write(&out, &csv)?;
    print!("{csv}");
    Ok(())
}

/// Returns whether every case passed.
pub fn gradcheck(out: Option<&Path>) -> Result<bool> {
    let report = gradient_suite()?;
    for c in &report.cases {
        println!(
            "{:<28} {:>10.3e}  tol {:.0e}  {:>5} coords  {}",
            c.name,
            c.max_rel_error,
            c.tolerance,
            c.checked,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    println!("{:.1} s", report.seconds);
    if let Some(out) = out {
        write(out, report.to_csv())?;
    }
    Ok(report.passed)
}

pub fn inspect_attention(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    input: &Path,
    slice: usize,
    out_dir: &Path,
) -> Result<()> {
    let (network, _) = load_checkpoint(&checkpoint_dir(cfg, checkpoint))?;
    let samples = volume_samples(cfg, input)?;
    let sample = samples.get(slice).ok_or_else(|| {
        Error::Validation(format!(
            "slice {slice} is out of range for a volume of depth {}",
            samples.len()
        ))
    })?;
    let side = cfg.preprocess.side;
    let image = sample.image.clone().reshape(&[1, 4, side, side])?;
    let trace = network.forward(&image, false)?;
    create_dir(out_dir)?;

    let center = Tensor::new(
        &[side, side],
        sample.image.data()[2 * side * side..3 * side * side].to_vec(),
    )?;
    write_gray_pgm(out_dir.join("image.pgm"), &center, 0.0, 1.0)?;
    write_gray_pgm(out_dir.join("probability.pgm"), &trace.prob_map(0)?, 0.0, 1.0)?;
    for stage in 0..trace.attention.len() {
        let Some(a) = trace.attention_result(stage, 0)? else {
            continue;
        };
        let g = a.grid.grid.shape()[0];
        let mut csv = String::new();
        for r in 0..g {
            let row: Vec<String> = (0..g)
                .map(|c| format!("{:.6}", a.grid.grid.data()[r * g + c]))
                .collect();
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        write(&out_dir.join(format!("stage{}_grid.csv", stage + 1)), csv)?;
        let (h, w) = (a.map.shape()[1], a.map.shape()[2]);
        write_gray_pgm(
            out_dir.join(format!("stage{}_map.pgm", stage + 1)),
            &a.map.clone().reshape(&[h, w])?,
            0.0,
            1.0,
        )?;
    }
    let mut csv = String::from("stage,channel,w2,w3\n");
    for (stage, f) in trace.fusion.iter().enumerate() {
        if let Some(f) = f {
            let c = f.w2.len() / trace.batch();
            for ch in 0..c {
                csv.push_str(&format!(
                    "{},{ch},{:.6},{:.6}\n",
                    stage + 1,
                    f.w2.data()[ch],
                    f.w3.data()[ch]
                ));
            }
        }
    }
    write(&out_dir.join("cff_weights.csv"), csv)?;
    println!("attention of slice {slice} written to {}", out_dir.display());
    Ok(())
}
