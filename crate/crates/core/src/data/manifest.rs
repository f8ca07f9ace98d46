//! Dataset manifests.
//!
//! The native format is JSON `{"cases": [{"id", "image", "label"}]}` with paths
//! relative to the manifest. A Medical Segmentation Decathlon `dataset.json`
//! (its `training` list) is accepted as well.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{load_labels, load_volume, stem_id, LabelMap, Volume, NUM_CLASSES};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataManifest {
    pub cases: Vec<CaseEntry>,
}

#[derive(Deserialize)]
struct DecathlonEntry {
    image: PathBuf,
    label: PathBuf,
}

#[derive(Deserialize)]
struct Decathlon {
    training: Vec<DecathlonEntry>,
}

impl DataManifest {
    /// Parse a manifest; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("manifest {} is not valid JSON: {e}", path.display())))?;
        let bad = |e: serde_json::Error| Error::Data(format!("manifest {}: {e}", path.display()));
        let mut m = if value.get("cases").is_some() {
            serde_json::from_value::<DataManifest>(value).map_err(bad)?
        } else if value.get("training").is_some() {
            let d: Decathlon = serde_json::from_value(value).map_err(bad)?;
            DataManifest {
                cases: d
                    .training
                    .into_iter()
                    .map(|e| CaseEntry {
                        id: stem_id(&e.image),
                        image: e.image,
                        label: Some(e.label),
                    })
                    .collect(),
            }
        } else {
            return Err(Error::Data(format!(
                "manifest {} has neither \"cases\" nor \"training\"",
                path.display()
            )));
        };
        let base = path.parent().unwrap_or(Path::new("."));
        for c in &mut m.cases {
            c.image = base.join(&c.image);
            if let Some(l) = &mut c.label {
                *l = base.join(&*l);
            }
        }
        m.check_unique()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    fn check_unique(&self) -> Result<()> {
        let mut ids: Vec<&str> = self.cases.iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        match ids.windows(2).find(|w| w[0] == w[1]) {
            Some(w) => Err(Error::Data(format!("duplicate case id {:?} in manifest", w[0]))),
            None => Ok(()),
        }
    }

    pub fn ids(&self) -> Vec<String> {
        self.cases.iter().map(|c| c.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Result<&CaseEntry> {
        self.cases
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::Data(format!("case {id:?} not in manifest")))
    }
}

/// Load and validate an image/label pair.
pub fn load_case(entry: &CaseEntry) -> Result<(Volume, LabelMap)> {
    let label = entry
        .label
        .as_ref()
        .ok_or_else(|| Error::Data(format!("case {} has no label file", entry.id)))?;
    let mut v = load_volume(&entry.image)?;
    let mut l = load_labels(label)?;
    v.id = entry.id.clone();
    l.id = entry.id.clone();
    l.check_pairs_with(&v)?;
    l.check_classes(NUM_CLASSES)?;
    Ok((v, l))
}
