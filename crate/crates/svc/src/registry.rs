//! Model registry backed by a directory of artifacts.
//!
//! Each model is stored as `<id>.json` (the artifact) and `<id>.meta.json`
//! (its registry entry). Files are written to a temporary name and renamed,
//! so a crash never leaves a half-written artifact under a real id.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use qrgmm::artifact;
use qrgmm::datagen::{FieldKind, FieldSchema};
use qrgmm::generator::ConditionalSampler;
use qrgmm::model::{AnyModel, ModelKind, QuantileModel};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSummary {
    pub name: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<String>>,
}

pub fn schema_summary(schema: &FieldSchema) -> Vec<FieldSummary> {
    schema
        .fields()
        .iter()
        .map(|f| match &f.kind {
            FieldKind::Categorical { levels } => FieldSummary {
                name: f.name.clone(),
                kind: "categorical".into(),
                levels: Some(levels.clone()),
            },
            FieldKind::Continuous => FieldSummary {
                name: f.name.clone(),
                kind: "continuous".into(),
                levels: None,
            },
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRegistryEntry {
    pub id: String,
    pub kind: ModelKind,
    pub schema: Vec<FieldSummary>,
    pub m: usize,
    /// RFC 3339 timestamp.
    pub created_at: String,
    pub artifact: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// A registered model with its sampler (and curve cache).
pub struct Registered {
    pub entry: ModelRegistryEntry,
    pub sampler: ConditionalSampler<AnyModel>,
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error(transparent)]
    Model(#[from] qrgmm::Error),
    #[error("registry io: {0}")]
    Io(#[from] std::io::Error),
    #[error("registry entry {path}: {source}")]
    Entry {
        path: PathBuf,
        source: serde_json::Error,
    },
}

pub struct Registry {
    dir: PathBuf,
    models: RwLock<HashMap<String, Arc<Registered>>>,
}

pub fn now_rfc3339() -> String {
    time::OffsetDateTime::now_utc()
        .format(&time::format_description::well_known::Rfc3339)
        .unwrap_or_default()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!("tmp-{}", uuid::Uuid::new_v4()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

impl Registry {
    /// Opens (creating if needed) a registry directory and loads every
    /// model found in it.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, RegistryError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut models = HashMap::new();
        for e in fs::read_dir(&dir)? {
            let path = e?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            let Some(id) = name.strip_suffix(".meta.json") else {
                continue;
            };
            let entry: ModelRegistryEntry =
                serde_json::from_slice(&fs::read(&path)?).map_err(|source| {
                    RegistryError::Entry {
                        path: path.clone(),
                        source,
                    }
                })?;
            let model = artifact::load(&dir.join(format!("{id}.json")))?;
            models.insert(
                id.to_string(),
                Arc::new(Registered {
                    entry,
                    sampler: ConditionalSampler::new(model),
                }),
            );
        }
        Ok(Registry {
            dir,
            models: RwLock::new(models),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Registers a model under its content id. Registering the same model
    /// twice returns the existing entry.
    pub fn insert(
        &self,
        model: AnyModel,
        dataset_hash: Option<String>,
        seed: Option<u64>,
    ) -> Result<Arc<Registered>, RegistryError> {
        let id = artifact::model_id(&model)?;
        let mut models = self.models.write().expect("registry lock poisoned");
        if let Some(existing) = models.get(&id) {
            return Ok(Arc::clone(existing));
        }
        let path = self.dir.join(format!("{id}.json"));
        write_atomic(&path, &artifact::to_bytes(&model)?)?;
        let entry = ModelRegistryEntry {
            id: id.clone(),
            kind: model.kind(),
            schema: schema_summary(model.schema()),
            m: model.grid().m(),
            created_at: now_rfc3339(),
            artifact: path,
            dataset_hash,
            seed,
        };
        let meta = serde_json::to_vec_pretty(&entry).map_err(qrgmm::Error::from)?;
        write_atomic(&self.dir.join(format!("{id}.meta.json")), &meta)?;
        let reg = Arc::new(Registered {
            entry,
            sampler: ConditionalSampler::new(model),
        });
        models.insert(id, Arc::clone(&reg));
        Ok(reg)
    }

    pub fn get(&self, id: &str) -> Option<Arc<Registered>> {
        self.models
            .read()
            .expect("registry lock poisoned")
            .get(id)
            .cloned()
    }

    /// Entries sorted by id.
    pub fn list(&self) -> Vec<ModelRegistryEntry> {
        let mut v: Vec<_> = self
            .models
            .read()
            .expect("registry lock poisoned")
            .values()
            .map(|r| r.entry.clone())
            .collect();
        v.sort_by(|a, b| a.id.cmp(&b.id));
        v
    }
}
