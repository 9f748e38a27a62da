use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use rlhf_core::data::io::{read_jsonl, write_jsonl};
use rlhf_core::reward::ScalarHeadModel;
use rlhf_core::tinylm::Checkpoint;
use rlhf_core::ModelParams;

use crate::config::{PathsConfig, RunConfig};
use crate::CliError;

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_sha256: String,
    seed: u64,
    inputs: &'a [String],
    outputs: &'a [String],
}

/// Tracks the files one command touches under the work directory.
pub(crate) struct Workspace<'a> {
    pub cfg: &'a RunConfig,
    root: PathBuf,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl<'a> Workspace<'a> {
    pub fn new(cfg: &'a RunConfig) -> Self {
        Workspace { cfg, root: PathBuf::from(&cfg.paths.work_dir), inputs: Vec::new(), outputs: Vec::new() }
    }

    pub fn input(&mut self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.root.join(rel);
        if !p.is_file() {
            return Err(CliError::MissingInput(p.display().to_string()));
        }
        self.inputs.push(rel.to_string());
        Ok(p)
    }

    pub fn output(&mut self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.root.join(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        self.outputs.push(rel.to_string());
        Ok(p)
    }

    pub fn read_jsonl<T: DeserializeOwned>(&mut self, rel: &str) -> Result<Vec<T>, CliError> {
        Ok(read_jsonl(self.input(rel)?)?)
    }

    pub fn write_jsonl<T: Serialize>(&mut self, rel: &str, records: &[T]) -> Result<(), CliError> {
        Ok(write_jsonl(self.output(rel)?, records)?)
    }

    pub fn read_text(&mut self, rel: &str) -> Result<String, CliError> {
        Ok(std::fs::read_to_string(self.input(rel)?)?)
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> Result<(), CliError> {
        Ok(std::fs::write(self.output(rel)?, text)?)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value).map_err(rlhf_core::Error::from)?;
        s.push('\n');
        self.write_text(rel, &s)
    }

    pub fn load_lm(&mut self, name: &str) -> Result<ModelParams, CliError> {
        let ck = Checkpoint::load(self.input(&format!("models/{name}.ckpt"))?)?;
        Ok(ModelParams::from_checkpoint(&ck)?)
    }

    pub fn load_head(&mut self, name: &str) -> Result<ScalarHeadModel, CliError> {
        let ck = Checkpoint::load(self.input(&format!("models/{name}.ckpt"))?)?;
        Ok(ScalarHeadModel::from_checkpoint(&ck)?)
    }

    pub fn save_model(&mut self, name: &str, ck: &Checkpoint) -> Result<(), CliError> {
        Ok(ck.save(self.output(&format!("models/{name}.ckpt"))?)?)
    }

    /// Writes `manifests/<command>.json`. The hash covers the config with
    /// the work directory blanked, so relocated runs hash the same.
    pub fn finish(mut self, command: &str) -> Result<(), CliError> {
        let mut c = self.cfg.clone();
        c.paths = PathsConfig::default();
        let hash = hex::encode(Sha256::digest(c.canonical().as_bytes()));
        let rel = format!("manifests/{command}.json");
        let path = self.output(&rel)?;
        self.outputs.pop();
        let m = Manifest {
            command,
            config_sha256: hash,
            seed: self.cfg.seed,
            inputs: &self.inputs,
            outputs: &self.outputs,
        };
        let mut s = serde_json::to_string_pretty(&m).map_err(rlhf_core::Error::from)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }
}
