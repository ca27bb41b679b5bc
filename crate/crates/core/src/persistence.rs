//! Versioned JSON envelopes for learned artifacts.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::allocator::AllocatorState;
use crate::discovery::FailureModeSet;
use crate::error::{Error, Result};
use crate::precondition::PreconditionSet;
use crate::recovery::RecoveryLibrary;
use crate::skill_graph::SymbolicGraph;

pub const SCHEMA_VERSION: u32 = 1;
pub const EXTENSION: &str = "rfj";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArtifactKind {
    PreconditionSet,
    FailureModeSet,
    RecoveryLibrary,
    SymbolicGraph,
    AllocatorState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEnvelope {
    pub schema_version: u32,
    pub kind: ArtifactKind,
    pub payload: serde_json::Value,
    pub created_with_seed: u64,
}

/// An artifact type that can live in an envelope.
pub trait Persist: Serialize + DeserializeOwned {
    const KIND: ArtifactKind;
    fn check(&self) -> Result<()>;
}

impl Persist for PreconditionSet {
    const KIND: ArtifactKind = ArtifactKind::PreconditionSet;
    fn check(&self) -> Result<()> {
        self.validate()
    }
}

impl Persist for FailureModeSet {
    const KIND: ArtifactKind = ArtifactKind::FailureModeSet;
    fn check(&self) -> Result<()> {
        self.validate()
    }
}

impl Persist for RecoveryLibrary {
    const KIND: ArtifactKind = ArtifactKind::RecoveryLibrary;
    fn check(&self) -> Result<()> {
        self.validate()
    }
}

impl Persist for SymbolicGraph {
    const KIND: ArtifactKind = ArtifactKind::SymbolicGraph;
    fn check(&self) -> Result<()> {
        self.validate()
    }
}

impl Persist for AllocatorState {
    const KIND: ArtifactKind = ArtifactKind::AllocatorState;
    fn check(&self) -> Result<()> {
        self.validate()
    }
}

impl ArtifactEnvelope {
    pub fn wrap<T: Persist>(artifact: &T, seed: u64) -> Result<Self> {
        artifact.check()?;
        Ok(ArtifactEnvelope {
            schema_version: SCHEMA_VERSION,
            kind: T::KIND,
            payload: serde_json::to_value(artifact).map_err(|e| Error::Schema(e.to_string()))?,
            created_with_seed: seed,
        })
    }

    /// Decodes and validates the payload as `T`.
    pub fn unwrap_as<T: Persist>(&self) -> Result<T> {
        if self.kind != T::KIND {
            return Err(Error::Schema(format!("expected a {:?} artifact, found {:?}", T::KIND, self.kind)));
        }
        let x: T = serde_json::from_value(self.payload.clone()).map_err(|e| Error::Schema(e.to_string()))?;
        x.check().map_err(|e| match e {
            Error::InvariantViolation(m) => Error::InvariantViolation(m),
            other => Error::InvariantViolation(other.to_string()),
        })?;
        Ok(x)
    }

    /// Version check plus the kind-specific invariants of the payload.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "schema_version {} is not supported (this build reads version {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        match self.kind {
            ArtifactKind::PreconditionSet => self.unwrap_as::<PreconditionSet>().map(drop),
            ArtifactKind::FailureModeSet => self.unwrap_as::<FailureModeSet>().map(drop),
            ArtifactKind::RecoveryLibrary => self.unwrap_as::<RecoveryLibrary>().map(drop),
            ArtifactKind::SymbolicGraph => self.unwrap_as::<SymbolicGraph>().map(drop),
            ArtifactKind::AllocatorState => self.unwrap_as::<AllocatorState>().map(drop),
        }
    }
}

/// Writes the envelope through a temporary file in the target directory and
/// renames it into place.
pub fn save(envelope: &ArtifactEnvelope, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let text = serde_json::to_string_pretty(envelope).map_err(|e| Error::Schema(e.to_string()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ArtifactEnvelope> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let env: ArtifactEnvelope = serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    env.validate()?;
    Ok(env)
}

pub fn save_artifact<T: Persist>(artifact: &T, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    save(&ArtifactEnvelope::wrap(artifact, seed)?, path)
}

/// Loads a `T` and the seed it was created with.
pub fn load_artifact<T: Persist>(path: impl AsRef<Path>) -> Result<(T, u64)> {
    let env = load(path)?;
    Ok((env.unwrap_as()?, env.created_with_seed))
}
