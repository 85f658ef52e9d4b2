//! `run.json`: what produced the artifacts in a directory.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use episeg::io::write_atomic;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::failure::CmdResult;

pub const RUN_FILE: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub phantom: u64,
    pub training: u64,
    pub inference: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub version: String,
    pub config_sha256: String,
    pub seeds: Seeds,
    pub args: BTreeMap<String, String>,
    /// Wall clock; the only field that differs between identical runs.
    pub unix_time: u64,
    pub config: RunConfig,
}

impl RunRecord {
    pub fn new(config: &RunConfig, command: &str, args: BTreeMap<String, String>) -> Self {
        RunRecord {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_sha256: config.sha256(),
            seeds: Seeds {
                phantom: config.phantom.seed,
                training: config.training.seed,
                inference: config.inference.seed,
            },
            args,
            unix_time: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            config: config.clone(),
        }
    }
}

pub fn write_run_record(
    config: &RunConfig,
    command: &str,
    dir: &Path,
    args: BTreeMap<String, String>,
) -> CmdResult<RunRecord> {
    let record = RunRecord::new(config, command, args);
    let json = serde_json::to_string_pretty(&record).map_err(episeg::Error::from)?;
    write_atomic(&dir.join(RUN_FILE), json.as_bytes())?;
    Ok(record)
}
