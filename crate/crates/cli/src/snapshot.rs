use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sonic::fields::RNG_ALGORITHM;

use crate::args::Command;
use crate::common::{at, write_json};

pub const FILE_NAME: &str = "run.json";

/// Everything needed to re-run a command: resolved flags (seeds included),
/// the random stream algorithm and the code version.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: String,
    pub rng: String,
    #[serde(flatten)]
    pub command: Command,
}

impl Snapshot {
    pub fn new(command: Command) -> Self {
        Snapshot {
            version: env!("CARGO_PKG_VERSION").to_string(),
            rng: RNG_ALGORITHM.to_string(),
            command,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(FILE_NAME), self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| at(path))?;
        serde_json::from_str(&text).with_context(|| at(path))
    }
}
