use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use shadow_defense::augment::{AugmentConfig, TransformRanges};
use shadow_defense::data::{generate_synthetic, load_dataset, Dataset, SyntheticSpec};
use shadow_defense::eval::KSweep;
use shadow_defense::model::TrainConfig;
use shadow_defense::profiles::{ProfileKind, ProfileSettings};
use shadow_defense::shadow::PsoConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Defense {
    /// Plain three-channel model.
    #[default]
    None,
    /// Adaptive-threshold profile channel.
    #[value(name = "adathresh")]
    AdaThresh,
    /// Canny edge-map profile channel.
    Edges,
}

impl Defense {
    pub fn profile(self) -> Option<ProfileKind> {
        match self {
            Defense::None => None,
            Defense::AdaThresh => Some(ProfileKind::AdaThresh),
            Defense::Edges => Some(ProfileKind::Edges),
        }
    }

    pub fn label(self) -> &'static str {
        self.profile().map_or("Undefended", ProfileKind::label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    #[default]
    Synthetic,
    Manifest,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: SourceKind,
    pub synthetic: SyntheticSpec,
    /// Manifest CSV, required when `source = "manifest"`.
    pub manifest: Option<PathBuf>,
    /// Directory image paths are resolved against; the manifest's directory
    /// when absent.
    pub root: Option<PathBuf>,
}

impl DatasetConfig {
    pub fn load(&self) -> CliResult<Dataset> {
        match self.source {
            SourceKind::Synthetic => Ok(generate_synthetic(&self.synthetic)?),
            SourceKind::Manifest => {
                let manifest = self.manifest.as_ref().expect("validated");
                let root = match &self.root {
                    Some(r) => r.clone(),
                    None => manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
                };
                Ok(load_dataset(&root, manifest)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub adv: bool,
    pub transform: bool,
    pub k_range: [f64; 2],
    pub transform_ranges: TransformRanges,
    pub margin: f64,
    pub seed: u64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let d = AugmentConfig::default();
        Self {
            adv: d.adv,
            transform: d.transform,
            k_range: d.k_range,
            transform_ranges: d.transform_ranges,
            margin: d.margin,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub k_values: KSweep,
    pub trials: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            k_values: KSweep::default(),
            trials: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundcheckSection {
    pub samples: usize,
    pub seed: u64,
    /// Shadow polygons get this many vertices.
    pub vertices: usize,
}

impl Default for BoundcheckSection {
    fn default() -> Self {
        Self {
            samples: 1000,
            seed: 0,
            vertices: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub defense: Defense,
    pub dataset: DatasetConfig,
    pub profile: ProfileSettings,
    pub augment: AugmentSection,
    pub train: TrainConfig,
    pub pso: PsoConfig,
    pub eval: EvalSection,
    pub boundcheck: BoundcheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            defense: Defense::None,
            dataset: DatasetConfig::default(),
            profile: ProfileSettings::default(),
            augment: AugmentSection::default(),
            train: TrainConfig::default(),
            pso: PsoConfig::default(),
            eval: EvalSection::default(),
            boundcheck: BoundcheckSection::default(),
        }
    }
}

impl RunConfig {
    /// Reads a TOML file, or returns the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn augment_config(&self) -> AugmentConfig {
        let a = &self.augment;
        AugmentConfig {
            profile_kind: self.defense.profile().unwrap_or(ProfileKind::AdaThresh),
            profile: self.profile,
            adv: a.adv,
            transform: a.transform,
            k_range: a.k_range,
            transform_ranges: a.transform_ranges,
            margin: a.margin,
            seed: a.seed,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.dataset.source == SourceKind::Manifest && self.dataset.manifest.is_none() {
            return Err(CliError::Config("dataset.manifest is required when dataset.source = \"manifest\"".into()));
        }
        self.dataset.synthetic.validate()?;
        self.augment_config().validate()?;
        self.train.validate()?;
        self.pso.validate()?;
        self.eval.k_values.validate()?;
        if self.eval.trials == 0 {
            return Err(CliError::Config("eval.trials must be at least 1".into()));
        }
        if self.boundcheck.samples == 0 {
            return Err(CliError::Config("boundcheck.samples must be at least 1".into()));
        }
        if self.boundcheck.vertices < 3 {
            return Err(CliError::Config("boundcheck.vertices must be at least 3".into()));
        }
        if self.profile.window % 2 == 0 || self.profile.window == 0 {
            return Err(CliError::Config("profile.window must be a positive odd number".into()));
        }
        Ok(())
    }
}
