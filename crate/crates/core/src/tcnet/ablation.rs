use std::path::Path;

use super::config::{ablate, NetworkConfig, TrainConfig, ABLATION_ROWS};
use super::network::Network;
use super::train::{evaluate, train};
use crate::dataio::Dataset;
use crate::error::Result;
use crate::metrics::{MetricsReport, Summary};

/// One trained and evaluated module combination.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: String,
    pub parameters: usize,
    pub best_epoch: Option<usize>,
    pub report: MetricsReport,
}

pub const ABLATION_HEADER: &str =
    "model,parameters,best_epoch,dsc_global,dsc_mean,dsc_std,recall_mean,precision_mean,assd_mean,assd_std,hd_mean,hd_std";

impl AblationRow {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        let mean = |s: &Option<Summary>| opt(s.map(|s| s.mean));
        let std = |s: &Option<Summary>| opt(s.map(|s| s.std));
        let r = &self.report;
        format!(
            "{},{},{},{:.6},{},{},{},{},{},{},{},{}",
            self.label,
            self.parameters,
            self.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
            r.dsc_global,
            mean(&r.dsc),
            std(&r.dsc),
            mean(&r.recall),
            mean(&r.precision),
            mean(&r.assd_mm),
            std(&r.assd_mm),
            mean(&r.hd_mm),
            std(&r.hd_mm),
        )
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Train every module combination for `epochs` from the same seed and
/// evaluate its best-validation parameters on `data.test`. Checkpoints go to
/// `<checkpoint_root>/<label>/` when a root is given.
pub fn run_ablation(
    network: &NetworkConfig,
    tc: &TrainConfig,
    data: &Dataset,
    epochs: usize,
    spacing: &[f64; 3],
    checkpoint_root: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let tc = TrainConfig { epochs, ..tc.clone() };
    ABLATION_ROWS
        .iter()
        .map(|&flags| {
            let label = flags.label();
            let mut net = Network::<f32>::build(&ablate(network, flags), tc.seed)?;
            let parameters = net.parameter_count();
            let dir = checkpoint_root.map(|r| r.join(label.replace('+', "_")));
            let history = train(&mut net, data, &tc, dir.as_deref())?;
            let report = evaluate(&net, &data.test, tc.batch_size, tc.threshold, spacing)?;
            log::info!(
                "{label}: DSC {}",
                report
                    .dsc
                    .map(|s| format!("{:.4}", s.mean))
                    .unwrap_or_else(|| "-".into())
            );
            Ok(AblationRow {
                label,
                parameters,
                best_epoch: history.best_epoch,
                report,
            })
        })
        .collect()
}
