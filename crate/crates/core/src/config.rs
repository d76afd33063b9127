//! Run configuration: one TOML document drives dataset generation, training,
//! and evaluation.
//!
//! Every knob that distinguishes the reported pipeline variants (method, M,
//! sensor count, tau, gamma, loss weights, learning rate, batch size, epochs,
//! network widths) is settable here without code changes. Training writes the
//! fully-resolved document beside its checkpoints so a run directory is
//! self-contained.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamConfig;
use crate::dataset::DatasetManifest;
use crate::loss::LossConfig;
use crate::networks::NetworkSpec;
use crate::{Error, Result};

/// The three pipeline variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// One localizer consuming the sparse transformed map directly.
    SingleStage,
    /// Occupancy net first; its raw logits map feeds the localizer.
    TwoStageLogit,
    /// Occupancy net first; its binarized map feeds the localizer.
    TwoStageBinary,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::SingleStage => "single_stage",
            Method::TwoStageLogit => "two_stage_logit",
            Method::TwoStageBinary => "two_stage_binary",
        }
    }

    pub fn is_two_stage(self) -> bool {
        !matches!(self, Method::SingleStage)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_stage" | "single-stage" => Ok(Method::SingleStage),
            "two_stage_logit" | "two-stage-logit" => Ok(Method::TwoStageLogit),
            "two_stage_binary" | "two-stage-binary" => Ok(Method::TwoStageBinary),
            other => Err(Error::Config(format!(
                "unknown method {other:?}; expected single_stage, two_stage_logit, or two_stage_binary"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Where the dataset lives and how to (re)generate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    pub dir: PathBuf,
    /// Base preset; overrides below are applied on top.
    pub preset: String,
    pub master_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_sensors: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_dbm: Option<f64>,
    /// Square grid override; the preset's cell size in metres is kept.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_size: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_size: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_size: Option<u64>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            dir: PathBuf::from("data/desk-freespace"),
            preset: "desk-freespace".to_string(),
            master_seed: 1,
            m: None,
            n_sensors: None,
            tau_dbm: None,
            grid: None,
            train_size: None,
            val_size: None,
            test_size: None,
        }
    }
}

impl DatasetSection {
    /// The manifest this section describes: preset plus overrides.
    pub fn manifest(&self) -> Result<DatasetManifest> {
        let mut m = DatasetManifest::preset(&self.preset, self.master_seed)?;
        if let Some(grid) = self.grid {
            let cell_m = m.region.cell_width();
            m = m.with_region(crate::grid::Region::square(grid as f64 * cell_m, grid)?);
        }
        if let Some(k) = self.m {
            m.m = k;
        }
        if let Some(n) = self.n_sensors {
            m.n_sensors = n;
        }
        if let Some(tau) = self.tau_dbm {
            m.tau_dbm = tau;
        }
        if let Some(n) = self.train_size {
            m.train_size = n;
        }
        if let Some(n) = self.val_size {
            m.val_size = n;
        }
        if let Some(n) = self.test_size {
            m.test_size = n;
        }
        m.validate()?;
        Ok(m)
    }
}

/// Channel width profiles. Defaults land the documented parameter budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSection {
    pub occupancy_widths: [usize; 3],
    pub single_widths: [usize; 3],
    pub stage2_widths: [usize; 3],
    /// When true, stage-2 localizers see the occupancy map concatenated with
    /// the transformed sensor map as a second channel. Off by default: the
    /// pipeline feeds stage 2 the occupancy map alone.
    pub stage2_concat_input: bool,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            occupancy_widths: [8, 16, 32],
            single_widths: [14, 24, 48],
            stage2_widths: [10, 20, 44],
            stage2_concat_input: false,
        }
    }
}

/// Optimization settings shared by all training entry points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    /// Frozen occupancy checkpoint consumed by two-stage localizer training.
    /// Defaults to `occupancy/best.ckpt` under the checkpoint dir's parent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub occupancy_checkpoint: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            method: Method::SingleStage,
            epochs: 100,
            batch_size: 64,
            learning_rate: 5e-4,
            seed: 1,
            checkpoint_dir: PathBuf::from("runs/run"),
            occupancy_checkpoint: None,
        }
    }
}

/// Evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Existence threshold; slots with strictly larger probability count.
    pub gamma: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { gamma: crate::metrics::DEFAULT_GAMMA }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub network: NetworkSection,
    pub train: TrainSection,
    pub loss: LossConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            what: format!("config {}", path.display()),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Write the fully-resolved document (for provenance next to checkpoints).
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Parse {
            what: format!("config {}", path.display()),
            detail: e.to_string(),
        })?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".to_string()));
        }
        if !(self.train.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.train.learning_rate
            )));
        }
        if !(self.eval.gamma > 0.0 && self.eval.gamma < 1.0) {
            return Err(Error::Config(format!(
                "gamma must lie strictly inside (0, 1), got {}",
                self.eval.gamma
            )));
        }
        self.loss.validate()?;
        self.dataset.manifest()?;
        self.occupancy_spec().validate()?;
        self.localizer_spec()?.validate()?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.train.learning_rate, ..AdamConfig::default() }
    }

    pub fn occupancy_spec(&self) -> NetworkSpec {
        NetworkSpec::occupancy_with_widths(self.network.occupancy_widths)
    }

    /// Localizer spec for the configured method, sized for the dataset's M.
    pub fn localizer_spec(&self) -> Result<NetworkSpec> {
        let m = self.dataset.manifest()?.m;
        Ok(match self.train.method {
            Method::SingleStage => {
                NetworkSpec::localizer_single_with_widths(1, self.network.single_widths, m)
            }
            Method::TwoStageLogit | Method::TwoStageBinary => {
                let channels = if self.network.stage2_concat_input { 2 } else { 1 };
                NetworkSpec::localizer_stage2_with_widths(channels, self.network.stage2_widths, m)
            }
        })
    }

    /// Where two-stage training finds its frozen occupancy weights.
    pub fn occupancy_checkpoint_path(&self) -> PathBuf {
        match &self.train.occupancy_checkpoint {
            Some(p) => p.clone(),
            None => self
                .train
                .checkpoint_dir
                .parent()
                .unwrap_or(Path::new("."))
                .join("occupancy")
                .join("best.ckpt"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_documented_hyperparameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train.epochs, 100);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.train.learning_rate, 5e-4);
        assert_eq!(cfg.loss.lambda_b, 0.1);
        assert_eq!(cfg.loss.lambda_xy, 0.9);
        assert_eq!(cfg.eval.gamma, 0.5);
        cfg.validate().unwrap();

        let manifest = cfg.dataset.manifest().unwrap();
        assert_eq!(manifest.tau_dbm, -45.0);
        assert_eq!(manifest.m, 3);
        assert_eq!(manifest.n_sensors, 10);
    }

    #[test]
    fn minimal_toml_round_trips() {
        let text = r#"
            [dataset]
            dir = "data/x"
            preset = "desk-freespace"
            master_seed = 9

            [train]
            method = "two_stage_logit"
            epochs = 30
            checkpoint_dir = "runs/logit"
        "#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.train.method, Method::TwoStageLogit);
        assert_eq!(cfg.train.epochs, 30);
        assert_eq!(cfg.train.batch_size, 64, "unset fields fall back to defaults");
        cfg.validate().unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resolved.toml");
        cfg.save(&path).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_flow_into_the_manifest() {
        let mut cfg = RunConfig::default();
        cfg.dataset.grid = Some(16);
        cfg.dataset.m = Some(2);
        cfg.dataset.n_sensors = Some(5);
        cfg.dataset.tau_dbm = Some(-50.0);
        cfg.dataset.train_size = Some(64);
        let m = cfg.dataset.manifest().unwrap();
        assert_eq!(m.region.grid_h, 16);
        // Desk preset cells are 2 m; a 16-cell grid spans 32 m.
        assert_eq!(m.region.width_m, 32.0);
        assert_eq!((m.m, m.n_sensors, m.tau_dbm), (2, 5, -50.0));
        assert_eq!(m.train_size, 64);
    }

    #[test]
    fn method_strings_parse_and_display() {
        for (s, want) in [
            ("single_stage", Method::SingleStage),
            ("two-stage-logit", Method::TwoStageLogit),
            ("two_stage_binary", Method::TwoStageBinary),
        ] {
            assert_eq!(s.parse::<Method>().unwrap(), want);
        }
        assert!("one_stage".parse::<Method>().is_err());
        assert_eq!(Method::TwoStageLogit.to_string(), "two_stage_logit");
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.train.epochs = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.eval.gamma = 1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.dataset.preset = "lunar".to_string();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn localizer_spec_tracks_method_and_widths() {
        let mut cfg = RunConfig::default();
        cfg.train.method = Method::SingleStage;
        let spec = cfg.localizer_spec().unwrap();
        assert_eq!(spec.widths(), [14, 24, 48]);
        assert_eq!(spec.in_channels(), 1);

        cfg.train.method = Method::TwoStageBinary;
        let spec = cfg.localizer_spec().unwrap();
        assert_eq!(spec.widths(), [10, 20, 44]);
        assert_eq!(spec.in_channels(), 1);

        cfg.network.stage2_concat_input = true;
        let spec = cfg.localizer_spec().unwrap();
        assert_eq!(spec.in_channels(), 2);
    }

    #[test]
    fn occupancy_checkpoint_path_defaults_beside_the_run() {
        let mut cfg = RunConfig::default();
        cfg.train.checkpoint_dir = PathBuf::from("runs/sweep/logit");
        assert_eq!(
            cfg.occupancy_checkpoint_path(),
            PathBuf::from("runs/sweep/occupancy/best.ckpt")
        );
        cfg.train.occupancy_checkpoint = Some(PathBuf::from("elsewhere/occ.ckpt"));
        assert_eq!(cfg.occupancy_checkpoint_path(), PathBuf::from("elsewhere/occ.ckpt"));
    }
}
