//! Versioned JSON checkpoints. Reals round-trip bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::incremental::Learner;

pub const CHECKPOINT_SCHEMA: &str = "inloc-checkpoint v1";

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    schema: String,
    learner: T,
}

pub fn to_json(learner: &Learner) -> Result<String> {
    serde_json::to_string(&Envelope {
        schema: CHECKPOINT_SCHEMA.to_string(),
        learner,
    })
    .map_err(|e| Error::Serde(e.to_string()))
}

pub fn from_json(text: &str) -> Result<Learner> {
    let env: Envelope<Learner> =
        serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
    if env.schema != CHECKPOINT_SCHEMA {
        return Err(Error::Schema(format!(
            "checkpoint schema {:?}, expected {CHECKPOINT_SCHEMA:?}",
            env.schema
        )));
    }
    env.learner.config.validate()?;
    Ok(env.learner)
}

pub fn save(learner: &Learner, path: &Path) -> Result<()> {
    fs::write(path, to_json(learner)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Learner> {
    from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
