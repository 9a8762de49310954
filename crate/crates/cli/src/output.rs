//! Atomic output writing and the run manifest.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::run::{Artifact, Overrides};
use crate::scenario::{Kind, SCHEMA_VERSION};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize)]
struct OutputEntry<'a> {
    name: &'a str,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    kind: &'static str,
    schema_version: &'static str,
    meanstop_version: &'static str,
    core_version: &'static str,
    scenario_sha256: String,
    seed: Option<u64>,
    overrides: &'a Overrides,
    outputs: Vec<OutputEntry<'a>>,
}

/// The manifest artifact describing a run.
pub fn manifest(
    kind: Kind,
    scenario: &[u8],
    seed: Option<u64>,
    overrides: &Overrides,
    artifacts: &[Artifact],
) -> Artifact {
    let m = Manifest {
        kind: kind.name(),
        schema_version: SCHEMA_VERSION,
        meanstop_version: env!("CARGO_PKG_VERSION"),
        core_version: meanstop_core::VERSION,
        scenario_sha256: sha256_hex(scenario),
        seed,
        overrides,
        outputs: artifacts
            .iter()
            .map(|a| OutputEntry {
                name: &a.name,
                sha256: sha256_hex(&a.bytes),
            })
            .collect(),
    };
    let mut bytes = serde_json::to_vec_pretty(&m).expect("serializable manifest");
    bytes.push(b'\n');
    Artifact {
        name: "manifest.json".into(),
        bytes,
    }
}

/// Writes every artifact through a temporary file renamed into place.
pub fn write_all(dir: &Path, artifacts: &[Artifact]) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for a in artifacts {
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&a.bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(dir.join(&a.name)).map_err(|e| e.error)?;
    }
    Ok(())
}
