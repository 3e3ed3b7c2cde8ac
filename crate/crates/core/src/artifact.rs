//! Versioned JSON container for fitted models.
//!
//! ```json
//! { "format": "qrgmm-model", "version": 1, "kind": "linear_qr",
//!   "model": { ... } }
//! ```
//!
//! `model` holds the schema (including every categorical level, so scoring
//! reuses the training encoding), the grid, and the kind-specific
//! parameters. Floats are written with shortest round-trip formatting, so
//! loading reproduces the model bit for bit. The model id is the first 16
//! hex digits of the SHA-256 of the serialized model.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{AnyModel, ModelKind};

pub const FORMAT: &str = "qrgmm-model";
pub const VERSION: u32 = 1;

#[derive(Serialize)]
struct Envelope<'a> {
    format: &'a str,
    version: u32,
    kind: ModelKind,
    model: serde_json::Value,
}

#[derive(Deserialize)]
struct EnvelopeIn {
    format: String,
    version: u32,
    kind: ModelKind,
    model: serde_json::Value,
}

fn inner_value(model: &AnyModel) -> Result<serde_json::Value> {
    Ok(match model {
        AnyModel::LinearQr(m) => serde_json::to_value(m)?,
        AnyModel::DeepFm(m) => serde_json::to_value(m)?,
    })
}

pub fn model_id(model: &AnyModel) -> Result<String> {
    let bytes = serde_json::to_vec(&inner_value(model)?)?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
}

pub fn to_bytes(model: &AnyModel) -> Result<Vec<u8>> {
    let env = Envelope {
        format: FORMAT,
        version: VERSION,
        kind: model.kind(),
        model: inner_value(model)?,
    };
    Ok(serde_json::to_vec(&env)?)
}

pub fn from_bytes(bytes: &[u8]) -> Result<AnyModel> {
    let env: EnvelopeIn = serde_json::from_slice(bytes)?;
    if env.format != FORMAT {
        return Err(Error::Artifact(format!(
            "unknown artifact format {:?}",
            env.format
        )));
    }
    if env.version != VERSION {
        return Err(Error::Artifact(format!(
            "unsupported artifact version {}",
            env.version
        )));
    }
    let model = match env.kind {
        ModelKind::LinearQr => {
            let m: crate::quantreg::LinearQuantileModel = serde_json::from_value(env.model)?;
            let p = m.schema.width();
            if m.beta.len() != m.grid.len() * p {
                return Err(Error::Artifact(format!(
                    "beta has {} entries, expected {} x {p}",
                    m.beta.len(),
                    m.grid.len()
                )));
            }
            AnyModel::LinearQr(m)
        }
        ModelKind::DeepFm => {
            let m: crate::deepfm::DeepFmQuantileModel = serde_json::from_value(env.model)?;
            m.validate()?;
            AnyModel::DeepFm(m)
        }
    };
    Ok(model)
}

/// Writes the artifact and returns the model id.
pub fn save(model: &AnyModel, path: &Path) -> Result<String> {
    fs::write(path, to_bytes(model)?)?;
    model_id(model)
}

pub fn load(path: &Path) -> Result<AnyModel> {
    from_bytes(&fs::read(path)?)
}
