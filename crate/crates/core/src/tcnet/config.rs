use serde::{Deserialize, Serialize};

use crate::cpa::DEFAULT_GRID;
use crate::error::{Error, Result};
use crate::mdu::DEFAULT_DROPOUT;

pub const STAGES: usize = 5;

/// Which contextual blocks are present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModuleFlags {
    pub cpa: bool,
    pub cff: bool,
    pub mdu: bool,
}

impl Default for ModuleFlags {
    fn default() -> Self {
        Self::ALL
    }
}

impl ModuleFlags {
    pub const ALL: Self = Self {
        cpa: true,
        cff: true,
        mdu: true,
    };
    pub const BASELINE: Self = Self {
        cpa: false,
        cff: false,
        mdu: false,
    };

    /// `Baseline`, `Baseline+CPA`, ... in the fixed order CPA, CFF, MDU.
    pub fn label(&self) -> String {
        let mut s = String::from("Baseline");
        for (on, name) in [(self.cpa, "CPA"), (self.cff, "CFF"), (self.mdu, "MDU")] {
            if on {
                s.push('+');
                s.push_str(name);
            }
        }
        s
    }

    pub fn from_label(label: &str) -> Option<Self> {
        ABLATION_ROWS.iter().copied().find(|f| f.label() == label).or_else(|| {
            let mut parts = label.split('+');
            if parts.next()? != "Baseline" {
                return None;
            }
            let mut f = Self::BASELINE;
            for p in parts {
                match p {
                    "CPA" => f.cpa = true,
                    "CFF" => f.cff = true,
                    "MDU" => f.mdu = true,
                    _ => return None,
                }
            }
            Some(f)
        })
    }
}

/// The six module combinations of the ablation table, in row order.
pub const ABLATION_ROWS: [ModuleFlags; 6] = [
    ModuleFlags::BASELINE,
    ModuleFlags {
        cpa: true,
        cff: false,
        mdu: false,
    },
    ModuleFlags {
        cpa: false,
        cff: true,
        mdu: false,
    },
    ModuleFlags {
        cpa: false,
        cff: false,
        mdu: true,
    },
    ModuleFlags {
        cpa: true,
        cff: true,
        mdu: false,
    },
    ModuleFlags::ALL,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Input height and width.
    pub input_side: usize,
    /// Stacked slices: input channels of the 2D path, depth of the 3D path.
    pub in_slices: usize,
    /// 2D encoder widths, one per stage.
    pub stage_channels: Vec<usize>,
    /// 3D encoder widths, one per stage.
    pub channels_3d: Vec<usize>,
    /// 1-based encoder stages that fuse the 3D branch.
    pub cff_stages: Vec<usize>,
    /// Output width of each upsampling stage, deepest first.
    pub decoder_channels: Vec<usize>,
    pub patch_grid: usize,
    /// Dropout of each upsampling branch (kernels 3, 5, 7, 9).
    pub mdu_dropout: [f64; 4],
    pub modules: ModuleFlags,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_side: 96,
            in_slices: 4,
            stage_channels: vec![8, 16, 32, 64, 128],
            channels_3d: vec![4, 8, 16, 64, 128],
            cff_stages: vec![4, 5],
            decoder_channels: vec![64, 32, 16, 8],
            patch_grid: DEFAULT_GRID,
            mdu_dropout: [DEFAULT_DROPOUT; 4],
            modules: ModuleFlags::ALL,
        }
    }
}

impl NetworkConfig {
    /// Narrow widths at the default resolution, for quick experiments.
    pub fn compact() -> Self {
        Self {
            stage_channels: vec![4, 8, 8, 8, 16],
            channels_3d: vec![2, 2, 4, 8, 16],
            decoder_channels: vec![8, 8, 4, 4],
            ..Self::default()
        }
    }

    /// Every violated constraint, as one config error.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        let h = self.input_side;
        let g = self.patch_grid;
        if g == 0 {
            p.push("patch_grid must be positive".to_string());
        }
        if g > 0 && (h == 0 || h % (16 * g) != 0) {
            p.push(format!(
                "input_side {h}: {h}/16 = {} is not a positive multiple of patch_grid {g}",
                h as f64 / 16.0
            ));
        }
        if self.in_slices != 4 {
            p.push(format!("in_slices {} must be 4", self.in_slices));
        }
        if self.stage_channels.len() != STAGES || self.stage_channels.contains(&0) {
            p.push(format!(
                "stage_channels {:?} must hold 5 positive widths",
                self.stage_channels
            ));
        }
        if self.channels_3d.len() != STAGES || self.channels_3d.contains(&0) {
            p.push(format!(
                "channels_3d {:?} must hold 5 positive widths",
                self.channels_3d
            ));
        }
        let mut seen = [false; STAGES + 1];
        for &s in &self.cff_stages {
            if !(1..=STAGES).contains(&s) {
                p.push(format!("cff stage {s} outside 1..=5"));
            } else if std::mem::replace(&mut seen[s], true) {
                p.push(format!("cff stage {s} listed twice"));
            } else if self.stage_channels.len() == STAGES {
                let c = self.stage_channels[s - 1];
                if c % 8 != 0 {
                    p.push(format!("stage {s} width {c} must be divisible by 8 for fusion"));
                }
                if self.channels_3d.len() == STAGES && self.channels_3d[s - 1] != c {
                    p.push(format!(
                        "stage {s}: 3D width {} must equal the 2D width {c} at a fused stage",
                        self.channels_3d[s - 1]
                    ));
                }
            }
        }
        if self.decoder_channels.len() != STAGES - 1 {
            p.push(format!(
                "decoder_channels {:?} must hold 4 widths",
                self.decoder_channels
            ));
        }
        for &c in &self.decoder_channels {
            if c == 0 || c % 4 != 0 {
                p.push(format!("decoder width {c} must be a positive multiple of 4"));
            }
        }
        for &d in &self.mdu_dropout {
            if !(0.0..1.0).contains(&d) {
                p.push(format!("dropout {d} outside [0, 1)"));
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Spatial side of encoder stage `i` (0-based).
    pub fn stage_side(&self, i: usize) -> usize {
        self.input_side >> i
    }

    /// Whether 0-based stage `i` fuses the 3D branch in this configuration.
    pub fn fuses(&self, i: usize) -> bool {
        self.modules.cff && self.cff_stages.contains(&(i + 1))
    }

    /// Number of 3D encoder stages evaluated (up to the deepest fused one).
    pub fn depth_3d(&self) -> usize {
        if self.modules.cff {
            self.cff_stages.iter().copied().max().unwrap_or(0)
        } else {
            0
        }
    }
}

/// `config` with the given blocks switched on or off.
pub fn ablate(config: &NetworkConfig, flags: ModuleFlags) -> NetworkConfig {
    NetworkConfig {
        modules: flags,
        ..config.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Multiplicative learning-rate factor per epoch.
    pub decay: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight of the mean coarse patch loss.
    pub lambda_cpa: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// Share of lesion-free training slices kept.
    pub keep_empty_fraction: f64,
    /// Stop once the validation DSC reaches this value.
    pub target_dsc: Option<f64>,
    /// Probability threshold for binary predictions.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            decay: 0.96,
            epochs: 60,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda_cpa: 0.25,
            seed: 0,
            batch_size: 8,
            keep_empty_fraction: 0.0,
            target_dsc: None,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            p.push(format!("lr0 {} must be positive", self.lr0));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            p.push(format!("decay {} outside (0, 1]", self.decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            p.push(format!(
                "Adam betas ({}, {}) must lie in [0, 1)",
                self.beta1, self.beta2
            ));
        }
        if !(self.eps > 0.0) {
            p.push(format!("Adam eps {} must be positive", self.eps));
        }
        if !(self.lambda_cpa >= 0.0 && self.lambda_cpa.is_finite()) {
            p.push(format!("lambda_cpa {} must be nonnegative", self.lambda_cpa));
        }
        if self.batch_size == 0 {
            p.push("batch_size must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.keep_empty_fraction) {
            p.push(format!(
                "keep_empty_fraction {} outside [0, 1]",
                self.keep_empty_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            p.push(format!("threshold {} outside [0, 1]", self.threshold));
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// `lr0 * decay^epoch`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay.powi(epoch as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_configs_are_valid() {
        NetworkConfig::default().validate().unwrap();
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn side_100_is_rejected() {
        let c = NetworkConfig {
            input_side: 100,
            ..NetworkConfig::default()
        };
        match c.validate() {
            Err(Error::Config(p)) => assert!(p.iter().any(|m| m.contains("100")), "{p:?}"),
            other => panic!("{other:?}"),
        }
        for side in [192, 288] {
            let c = NetworkConfig {
                input_side: side,
                ..NetworkConfig::default()
            };
            c.validate().unwrap();
        }
        let c = NetworkConfig {
            input_side: 160,
            ..NetworkConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn every_violation_is_listed() {
        let c = NetworkConfig {
            stage_channels: vec![8, 16, 32, 60, 128],
            decoder_channels: vec![64, 30, 16, 8],
            cff_stages: vec![4, 4, 9],
            ..NetworkConfig::default()
        };
        match c.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 5, "{p:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn learning_rate_schedule() {
        let t = TrainConfig::default();
        assert_eq!(t.learning_rate(0), 1e-3);
        assert!((t.learning_rate(10) - 6.648e-4).abs() < 1e-7);
    }

    #[test]
    fn ablation_labels() {
        let labels: Vec<_> = ABLATION_ROWS.iter().map(|f| f.label()).collect();
        assert_eq!(
            labels,
            [
                "Baseline",
                "Baseline+CPA",
                "Baseline+CFF",
                "Baseline+MDU",
                "Baseline+CPA+CFF",
                "Baseline+CPA+CFF+MDU"
            ]
        );
        for f in ABLATION_ROWS {
            assert_eq!(ModuleFlags::from_label(&f.label()), Some(f));
        }
        assert_eq!(ModuleFlags::from_label("Baseline+XYZ"), None);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<NetworkConfig>(r#"{"input_side": 96, "bogus": 1}"#).is_err());
        let t: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(t.epochs, 3);
        assert_eq!(t.lr0, 1e-3);
    }
}
