//! Run configuration: one JSON file, every key optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetSpec, SeverityMode};
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::scenes::DomainParams;
use crate::trainer::TrainConfig;
use crate::variance::Combine;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub division: DivisionConfig,
    pub eval: EvalConfig,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            detector: DetectorConfig::default(),
            train: TrainConfig::default(),
            division: DivisionConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_source: usize,
    pub n_target: usize,
    pub severity: SeverityMode,
    pub scene: DomainParams,
    /// Dataset directories; `<out_dir>/data/{source,target}` when unset.
    pub source_dir: Option<PathBuf>,
    pub target_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_source: 1000,
            n_target: 500,
            severity: SeverityMode::Uniform,
            scene: DomainParams::default(),
            source_dir: None,
            target_dir: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matching {
    #[default]
    Anchor,
    IouGreedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DivisionConfig {
    /// Stochastic passes per image.
    pub mc_passes: usize,
    pub sigma: f64,
    /// Confidence that selects the reference detections.
    pub tau_det: f64,
    pub combine: Combine,
    /// External prediction dump used instead of in-process passes.
    pub dump: Option<PathBuf>,
    pub matching: Matching,
    /// Pass counts compared against `mc_passes` by the ablation.
    pub mc_sweep: Vec<usize>,
}

impl Default for DivisionConfig {
    fn default() -> Self {
        DivisionConfig {
            mc_passes: 10,
            sigma: 0.7,
            tau_det: 0.5,
            combine: Combine::Product,
            dump: None,
            matching: Matching::Anchor,
            mc_sweep: vec![2, 5, 20],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Lowest confidence kept in predictions used for AP.
    pub conf: f64,
    /// Confidence at which recall is reported.
    pub recall_conf: f64,
    pub iou: f64,
    pub nms_iou: f64,
    /// Variance groups of the correlation report.
    pub groups: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            conf: 0.01,
            recall_conf: 0.5,
            iou: 0.5,
            nms_iou: 0.5,
            groups: 10,
        }
    }
}

fn bad<T>(key: &str, msg: impl Into<String>) -> Result<T> {
    Err(Error::Config {
        key: key.into(),
        msg: msg.into(),
    })
}

impl StageConfig {
    /// Parses JSON text; type errors and unknown keys name the offending path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: StageConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            Error::Config {
                key: if key == "." { "<root>".into() } else { key },
                msg: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Pretty JSON of every resolved value; reloading it gives `self` back.
    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let d = &self.data;
        if d.n_source == 0 {
            return bad("data.n_source", "must be positive");
        }
        if d.n_target == 0 {
            return bad("data.n_target", "must be positive");
        }
        d.scene.validate()?;
        self.detector.validate()?;
        let det = &self.detector;
        if det.height != d.scene.height || det.width != d.scene.width {
            return bad(
                "detector.height",
                format!(
                    "detector input {}x{} differs from scene {}x{}",
                    det.height, det.width, d.scene.height, d.scene.width
                ),
            );
        }
        if det.num_classes != d.scene.num_classes {
            return bad("detector.num_classes", "must equal data.scene.num_classes");
        }
        if det.channels != 1 {
            return bad("detector.channels", "scenes are single-channel");
        }
        self.train.validate()?;
        let v = &self.division;
        if !(v.sigma > 0.0 && v.sigma < 1.0) {
            return bad("division.sigma", format!("{} is outside (0, 1)", v.sigma));
        }
        if v.mc_passes < 2 {
            return bad("division.mc_passes", "at least 2 passes are needed");
        }
        if v.mc_sweep.iter().any(|&m| m < 2) {
            return bad("division.mc_sweep", "every pass count must be at least 2");
        }
        if !unit(v.tau_det) {
            return bad("division.tau_det", "must lie in [0, 1]");
        }
        let e = &self.eval;
        if !unit(e.conf) || !unit(e.recall_conf) {
            return bad("eval.conf", "confidences must lie in [0, 1]");
        }
        if !unit(e.iou) || !unit(e.nms_iou) {
            return bad("eval.iou", "IoU thresholds must lie in [0, 1]");
        }
        if e.groups < 2 {
            return bad("eval.groups", "at least 2 groups are needed");
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: self.seed,
            n_source: self.data.n_source,
            n_target: self.data.n_target,
            scene: self.data.scene.clone(),
            severity: self.data.severity,
        }
    }

    pub fn source_dir(&self) -> PathBuf {
        self.data
            .source_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("data/source"))
    }

    pub fn target_dir(&self) -> PathBuf {
        self.data
            .target_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("data/target"))
    }
}
