use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{parse_recording, AppLabel, Recording, UserId};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub user: UserId,
    pub app: AppLabel,
    pub session: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub duration_s: f64,
    /// Half-open range of 30 FPS frames this entry is restricted to
    /// (set by temporal splits).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_range: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths resolve against. Not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            entries,
            base_dir: base_dir.into(),
        }
    }

    pub fn check_unique(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert((&e.user, &e.app, &e.session)) {
                return Err(Error::InvalidManifest(format!(
                    "duplicate entry ({}, {}, {})",
                    e.user, e.app, e.session
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    /// Loads and checks a manifest: schema version, unique identities and
    /// that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::InvalidManifest(format!(
                "unsupported schema_version {}",
                m.schema_version
            )));
        }
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.check_unique()?;
        for e in &m.entries {
            let p = m.resolve(e);
            if !p.is_file() {
                return Err(Error::InvalidManifest(format!(
                    "missing recording file {}",
                    p.display()
                )));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_entry(&self, entry: &ManifestEntry) -> Result<Recording> {
        parse_recording(
            &self.resolve(entry),
            entry.user.clone(),
            entry.app.clone(),
            entry.session.clone(),
        )
    }

    pub fn users(&self) -> Vec<UserId> {
        let set: BTreeSet<_> = self.entries.iter().map(|e| e.user.clone()).collect();
        set.into_iter().collect()
    }

    pub fn apps(&self) -> Vec<AppLabel> {
        let set: BTreeSet<_> = self.entries.iter().map(|e| e.app.clone()).collect();
        set.into_iter().collect()
    }
}
