//! Run configuration: one TOML file with `[model]`, `[train]` and `[data]`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use voxseg::data::DataManifest;
use voxseg::nn::ModelConfig;
use voxseg::synth::{gen_dataset, SynthSpec};
use voxseg::train::{CaseSet, TrainConfig};

use crate::failure::{CmdResult, Context, Failure};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Where cases come from: a manifest file or the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticData>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub count: usize,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub noise_std: f32,
    pub seed: u64,
}

impl SyntheticData {
    pub fn spec(&self) -> SynthSpec {
        SynthSpec {
            dims: self.dims,
            spacing: self.spacing,
            noise_std: self.noise_std,
            seed: self.seed,
        }
    }
}

impl RunConfig {
    /// Parse and validate a config file. A relative manifest path is taken
    /// relative to the file.
    pub fn load(path: &Path) -> CmdResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|e| Failure::config(format!("config {}: {e}", path.display())))?;
        if let Some(m) = &mut config.data.manifest {
            if m.is_relative() {
                *m = path.parent().unwrap_or(Path::new(".")).join(&*m);
            }
        }
        config
            .validate()
            .context(format!("config {}", path.display()))?;
        Ok(config)
    }

    pub fn validate(&self) -> CmdResult {
        self.model.validate()?;
        self.train.validate(self.model.divisor())?;
        self.data.validate()
    }
}

impl DataConfig {
    pub fn from_manifest(path: PathBuf) -> Self {
        Self {
            manifest: Some(path),
            synthetic: None,
        }
    }

    fn validate(&self) -> CmdResult {
        match (&self.manifest, &self.synthetic) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(Failure::config(
                "[data] needs exactly one of `manifest` or `synthetic`",
            )),
        }
    }

    /// Load every case into memory.
    pub fn load(&self) -> CmdResult<CaseSet> {
        self.validate()?;
        let set = match (&self.manifest, &self.synthetic) {
            (Some(path), _) => {
                let manifest = DataManifest::load(path)?;
                CaseSet::load(&manifest)?
            }
            (_, Some(s)) => CaseSet::new(gen_dataset(&s.spec(), s.count)?)?,
            _ => unreachable!("checked by validate"),
        };
        if set.is_empty() {
            return Err(Failure::data("the case list is empty"));
        }
        Ok(set)
    }
}
