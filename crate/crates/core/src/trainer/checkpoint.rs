use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::Algo;
use super::memory::MemoryState;
use super::TrainError;
use crate::policy::TabularSnapshot;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub env: String,
    pub algo: Algo,
    pub iteration: usize,
    pub memory: MemoryState,
    /// Absent for rollout-only backends.
    pub policy: Option<TabularSnapshot>,
    pub reference: Option<TabularSnapshot>,
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

impl Checkpoint {
    /// Writes to a sibling temporary file and renames it into place, so a
    /// crash never leaves a torn checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let io = |source| TrainError::Checkpoint { path: path.to_path_buf(), reason: format!("{source}") };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let tmp = tmp_path(path);
        let body = serde_json::to_vec_pretty(self).expect("checkpoint serializes");
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(&body).map_err(io)?;
        f.sync_all().map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let err = |reason: String| TrainError::Checkpoint { path: path.to_path_buf(), reason };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(err(format!("unsupported version {} (expected {CHECKPOINT_VERSION})", ck.version)));
        }
        Ok(ck)
    }
}
