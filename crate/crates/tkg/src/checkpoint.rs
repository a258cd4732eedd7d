//! Checkpoint files: model parameters plus (optionally) dynamic states and
//! event-history tables, versioned and byte-exact on round trip.

use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Result, TkgError};
use crate::model::{ExportedState, Model};
use crate::store::TrackerEntries;
use crate::tape::ExportedParams;

pub const CHECKPOINT_VERSION: &str = "tkg.v1";

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub config: ModelConfig,
    pub num_entities: usize,
    pub num_relations: usize,
    pub params: ExportedParams,
    pub dynamic: Option<ExportedState>,
    pub tracker: Option<TrackerEntries>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Self {
            version: CHECKPOINT_VERSION.to_string(),
            config: model.cfg.clone(),
            num_entities: model.num_entities,
            num_relations: model.num_relations,
            params: model.params.export(),
            dynamic: None,
            tracker: None,
        }
    }

    pub fn with_state(mut self, dynamic: ExportedState, tracker: TrackerEntries) -> Self {
        self.dynamic = Some(dynamic);
        self.tracker = Some(tracker);
        self
    }

    /// Rebuilds the model; the checkpoint fully determines architecture.
    pub fn into_model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.clone(), self.num_entities, self.num_relations)?;
        model.params.import(&self.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string(self)
            .map_err(|e| TkgError::Validation(format!("checkpoint serialization: {e}")))?;
        fs::write(path, body).map_err(|e| TkgError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| TkgError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let ckpt: Checkpoint = serde_json::from_str(&body)
            .map_err(|e| TkgError::Parse {
                line: 0,
                msg: format!("checkpoint {}: {e}", path.display()),
            })?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(TkgError::Validation(format!(
                "checkpoint version '{}' unsupported (expected '{CHECKPOINT_VERSION}')",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}
