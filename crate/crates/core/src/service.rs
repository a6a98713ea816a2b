//! Transport-independent explanation service: a read-only snapshot of
//! loaded checkpoints and the request/response types served over HTTP.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chess::Position;
use crate::explain::{explain_position, ExplainError, MoveProb, DEFAULT_TOP_K};
use crate::network::checkpoint::{list_checkpoints, Checkpoint, CheckpointError};
use crate::network::{MaskerNet, NetworkError, PolicyValueNet};

/// Bumped whenever the response shape changes.
pub const SCHEMA_VERSION: u32 = 1;

/// JSON schema of [`ExplainResponse`], committed alongside the code.
pub const RESPONSE_SCHEMA: &str = include_str!("../../../schema/explain_response.schema.json");
pub const REQUEST_SCHEMA: &str = include_str!("../../../schema/explain_request.schema.json");
pub const ERROR_SCHEMA: &str = include_str!("../../../schema/error.schema.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainRequest {
    pub fen: String,
    /// Checkpoint id; the latest loaded checkpoint when absent.
    #[serde(default)]
    pub checkpoint: Option<String>,
    /// Sample a binary mask from P and predict on the masked input.
    #[serde(default)]
    pub sample_mask: bool,
    /// Seed for the sampled mask; 0 when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub top_k: Option<usize>,
}

impl ExplainRequest {
    pub fn new(fen: impl Into<String>) -> Self {
        ExplainRequest {
            fen: fen.into(),
            checkpoint: None,
            sample_mask: false,
            seed: None,
            top_k: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub checkpoint: String,
    pub step: u64,
    pub lambda_mask: f32,
    pub residual_blocks: usize,
    pub filters: usize,
    pub history_length: usize,
    pub teacher: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainResponse {
    pub schema_version: u32,
    pub fen: String,
    pub policy: Vec<MoveProb>,
    pub legal_moves: usize,
    pub value: Option<f32>,
    #[serde(rename = "P")]
    pub p: Vec<Vec<Vec<f32>>>,
    pub collapsed: Vec<Vec<f32>>,
    #[serde(rename = "P_bin", skip_serializing_if = "Option::is_none")]
    pub p_bin: Option<Vec<Vec<Vec<f32>>>>,
    pub best_move_arrow: String,
    pub sample_mask: bool,
    pub seed: Option<u64>,
    pub model: ModelInfo,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServiceError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("unknown checkpoint {0:?}")]
    UnknownCheckpoint(String),
    #[error("position has no legal moves ({0})")]
    Terminal(String),
    #[error("no checkpoint loaded")]
    NoCheckpoint,
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::BadRequest(_) => 400,
            ServiceError::UnknownCheckpoint(_) => 404,
            ServiceError::Terminal(_) => 422,
            ServiceError::NoCheckpoint => 503,
            ServiceError::Internal(_) => 500,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::UnknownCheckpoint(_) => "unknown_checkpoint",
            ServiceError::Terminal(_) => "terminal_position",
            ServiceError::NoCheckpoint => "no_checkpoint",
            ServiceError::Internal(_) => "internal",
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            error: self.kind().to_string(),
            detail: self.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub detail: String,
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("{0} has no masker weights")]
    NoMasker(PathBuf),
    #[error("no checkpoints found in {0}")]
    Empty(PathBuf),
}

pub struct LoadedModel {
    pub info: ModelInfo,
    pub net: PolicyValueNet,
    pub masker: MaskerNet,
}

impl LoadedModel {
    pub fn from_checkpoint(id: &str, ckpt: &Checkpoint) -> Result<LoadedModel, LoadError> {
        let (net, masker) = ckpt.to_models()?;
        let masker = masker.ok_or_else(|| LoadError::NoMasker(PathBuf::from(id)))?;
        let info = ModelInfo {
            checkpoint: id.to_string(),
            step: ckpt.meta.step,
            lambda_mask: ckpt.meta.lambda_mask,
            residual_blocks: ckpt.model.residual_blocks,
            filters: ckpt.model.filters,
            history_length: ckpt.model.encoding.history_length,
            teacher: ckpt.meta.teacher.clone(),
        };
        Ok(LoadedModel { info, net, masker })
    }
}

/// Immutable set of loaded models. Requests run against one snapshot.
#[derive(Default)]
pub struct Snapshot {
    pub models: BTreeMap<String, Arc<LoadedModel>>,
    /// Id of the highest-step checkpoint.
    pub latest: Option<String>,
}

impl Snapshot {
    /// Loads every `*.ckpt` in `dir`; ids are file stems.
    pub fn load_dir(dir: &Path) -> Result<Snapshot, LoadError> {
        let mut snap = Snapshot::default();
        let mut best_step = None;
        for path in list_checkpoints(dir)? {
            let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let ckpt = Checkpoint::load(&path)?;
            let model = LoadedModel::from_checkpoint(&id, &ckpt)?;
            if best_step.is_none_or(|s| model.info.step >= s) {
                best_step = Some(model.info.step);
                snap.latest = Some(id.clone());
            }
            snap.models.insert(id, Arc::new(model));
        }
        if snap.models.is_empty() {
            return Err(LoadError::Empty(dir.to_path_buf()));
        }
        Ok(snap)
    }

    pub fn from_models(models: Vec<LoadedModel>) -> Snapshot {
        let mut snap = Snapshot::default();
        for m in models {
            if snap
                .latest
                .as_ref()
                .is_none_or(|l| snap.models[l].info.step <= m.info.step)
            {
                snap.latest = Some(m.info.checkpoint.clone());
            }
            snap.models.insert(m.info.checkpoint.clone(), Arc::new(m));
        }
        snap
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint: Option<String>,
}

/// Shared service state. Handlers clone the current snapshot `Arc` and
/// never hold the lock while computing.
pub struct ExplainService {
    snapshot: RwLock<Arc<Snapshot>>,
    default_top_k: usize,
}

impl ExplainService {
    pub fn new(snapshot: Snapshot) -> Self {
        ExplainService {
            snapshot: RwLock::new(Arc::new(snapshot)),
            default_top_k: DEFAULT_TOP_K,
        }
    }

    pub fn with_default_top_k(mut self, k: usize) -> Self {
        self.default_top_k = k.max(1);
        self
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Replaces the snapshot; requests already running keep the old one.
    pub fn swap(&self, next: Snapshot) {
        *self.snapshot.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(next);
    }

    pub fn health(&self) -> Health {
        let snap = self.snapshot();
        Health {
            status: if snap.latest.is_some() { "ok" } else { "empty" }.to_string(),
            checkpoint: snap.latest.clone(),
        }
    }

    pub fn checkpoints(&self) -> Vec<ModelInfo> {
        self.snapshot().models.values().map(|m| m.info.clone()).collect()
    }

    pub fn handle_explain(&self, req: &ExplainRequest) -> Result<ExplainResponse, ServiceError> {
        let snap = self.snapshot();
        let model = match &req.checkpoint {
            Some(id) => snap
                .models
                .get(id)
                .ok_or_else(|| ServiceError::UnknownCheckpoint(id.clone()))?,
            None => {
                let id = snap.latest.as_ref().ok_or(ServiceError::NoCheckpoint)?;
                &snap.models[id]
            }
        };
        let pos = Position::from_fen(req.fen.trim()).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        let top_k = match req.top_k {
            Some(0) => return Err(ServiceError::BadRequest("top_k must be at least 1".into())),
            Some(k) => k,
            None => self.default_top_k,
        };
        let seed = req.sample_mask.then(|| req.seed.unwrap_or(0));
        let e = explain_position(&model.net, &model.masker, &pos, top_k, seed).map_err(|e| match e {
            ExplainError::Terminal(why) => ServiceError::Terminal(why),
            other => ServiceError::Internal(other.to_string()),
        })?;
        Ok(ExplainResponse {
            schema_version: SCHEMA_VERSION,
            fen: e.fen,
            best_move_arrow: e.best_move,
            policy: e.policy,
            legal_moves: e.legal_moves,
            value: e.value,
            p: e.p,
            collapsed: e.collapsed,
            p_bin: e.p_bin,
            sample_mask: req.sample_mask,
            seed,
            model: model.info.clone(),
        })
    }

    /// Parses a raw JSON body and answers it; malformed bodies are 400s.
    pub fn handle_explain_json(&self, body: &[u8]) -> Result<ExplainResponse, ServiceError> {
        let req: ExplainRequest =
            serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("request body: {e}")))?;
        self.handle_explain(&req)
    }
}
