//! Experiment configuration files and run manifests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, load_flatfile, FullData, Profile, Role, SessionPlan, SyntheticSpec,
    DEFAULT_SHOTS,
};
use crate::error::{Error, Result};
use crate::nn::{ExtractorConfig, TrainConfig};
use crate::numcore::Rng;
use crate::session::{NovelTrainConfig, ProtocolConfig, UpdateMode};

pub const MANIFEST_FORMAT: &str = "fscil-manifest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanProfile {
    CifarLike,
    CubLike,
    MiniLike,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub profile: PlanProfile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ways: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sessions: Option<usize>,
    #[serde(default = "default_shots")]
    pub shots: usize,
    /// Seeds the data generator; run seeds are separate.
    #[serde(default)]
    pub data_seed: u64,
}

fn default_shots() -> usize {
    DEFAULT_SHOTS
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            profile: PlanProfile::CifarLike,
            base_classes: None,
            ways: None,
            sessions: None,
            shots: DEFAULT_SHOTS,
            data_seed: 0,
        }
    }
}

impl PlanConfig {
    pub fn resolve(&self) -> Result<SessionPlan> {
        let named = match self.profile {
            PlanProfile::CifarLike => Some(Profile::CifarLike),
            PlanProfile::CubLike => Some(Profile::CubLike),
            PlanProfile::MiniLike => Some(Profile::MiniLike),
            PlanProfile::Custom => None,
        };
        let counts = [self.base_classes, self.ways, self.sessions];
        match named {
            Some(p) => {
                if counts.iter().any(Option::is_some) {
                    return Err(Error::Config(
                        "plan: base_classes/ways/sessions are only allowed with profile = \"custom\"".into(),
                    ));
                }
                SessionPlan::from_profile(p, self.shots, self.data_seed)
            }
            None => match counts {
                [Some(k), Some(n), Some(s)] => {
                    SessionPlan::new(k, n, self.shots, s, self.data_seed)
                }
                _ => Err(Error::Config(
                    "plan: custom profile needs base_classes, ways and sessions".into(),
                )),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic(SyntheticSpec),
    Csv { train: PathBuf, test: PathBuf },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SyntheticSpec::default())
    }
}

/// Extractor shape; the input width comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub norm_momentum: f64,
    pub final_relu: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let e = ExtractorConfig::default();
        Self {
            hidden: e.hidden,
            feature_dim: e.feature_dim,
            norm_momentum: e.norm_momentum,
            final_relu: e.final_relu,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

fn default_mode() -> UpdateMode {
    UpdateMode::NoNpc
}

fn default_modes() -> Vec<UpdateMode> {
    vec![
        UpdateMode::M1,
        UpdateMode::M2,
        UpdateMode::M3,
        UpdateMode::M4,
        UpdateMode::M5,
    ]
}

pub fn default_smoothing() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

fn default_probes() -> Vec<usize> {
    vec![0, 1, 2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Mode used by `run`.
    #[serde(default = "default_mode")]
    pub mode: UpdateMode,
    /// Modes used by `compare-modes`.
    #[serde(default = "default_modes")]
    pub modes: Vec<UpdateMode>,
    /// ε values used by `sweep-smoothing`.
    #[serde(default = "default_smoothing")]
    pub smoothing: Vec<f64>,
    #[serde(default = "default_probes")]
    pub probe_classes: Vec<usize>,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub base: TrainConfig,
    #[serde(default)]
    pub novel: NovelTrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config is valid")
    }
}

/// Written next to every set of artifacts; loading it as a config
/// reproduces them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: String,
    pub command: String,
    pub plan: SessionPlan,
    pub artifacts: Vec<String>,
    pub config: ExperimentConfig,
}

/// A fully resolved experiment: plan, data and protocol settings.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub plan: SessionPlan,
    pub data: FullData,
    pub protocol: ProtocolConfig,
}

impl ExperimentConfig {
    pub fn parse_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    /// Reads a TOML config or a JSON manifest (by extension).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg = if is_json {
            let m: Manifest = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if m.format != MANIFEST_FORMAT {
                return Err(Error::Config(format!(
                    "{}: not a run manifest",
                    path.display()
                )));
            }
            let mut c = m.config;
            if c.output.is_none() {
                c.output = path.parent().map(Path::to_path_buf);
            }
            c
        } else {
            Self::parse_toml(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.check()?;
        Ok(cfg)
    }

    /// Validation that needs no data.
    pub fn check(&self) -> Result<()> {
        self.plan.resolve()?;
        self.base.validate()?;
        self.novel.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("modes must not be empty".into()));
        }
        if self.smoothing.is_empty() {
            return Err(Error::Config("smoothing must not be empty".into()));
        }
        if let Some(e) = self.smoothing.iter().find(|e| !(0.0..1.0).contains(*e)) {
            return Err(Error::Config(format!("smoothing value {e} outside [0, 1)")));
        }
        let m = &self.model;
        if m.feature_dim == 0 || m.hidden.contains(&0) {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        Ok(())
    }

    pub fn resolve(&self) -> Result<Resolved> {
        self.check()?;
        let plan = self.plan.resolve()?;
        let data = match &self.data {
            DataConfig::Synthetic(spec) => {
                generate_synthetic(spec, &plan, &mut Rng::new(plan.seed))?
            }
            DataConfig::Csv { train, test } => FullData {
                train: load_flatfile(train, Role::Train)?,
                test: load_flatfile(test, Role::Test)?,
            },
        };
        data.check_against(&plan)?;
        if let Some(&p) = self.probe_classes.iter().find(|&&p| p >= plan.base_classes) {
            return Err(Error::Config(format!(
                "probe class {p} is not a base class (K={})",
                plan.base_classes
            )));
        }
        let extractor = ExtractorConfig {
            input_dim: data.train.dim(),
            hidden: self.model.hidden.clone(),
            feature_dim: self.model.feature_dim,
            norm_momentum: self.model.norm_momentum,
            final_relu: self.model.final_relu,
        };
        extractor.validate()?;
        Ok(Resolved {
            plan,
            data,
            protocol: ProtocolConfig {
                extractor,
                base: self.base.clone(),
                novel: self.novel.clone(),
                probe_classes: self.probe_classes.clone(),
            },
        })
    }
}
