//! Checkpoint format: a UTF-8 manifest of `key value...` lines, one blank
//! line, then the parameter block as little-endian f64.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::model::ModelConfig;
use crate::error::{Error, Result};

const MAGIC: &str = "tinylm-checkpoint 1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl LayoutEntry {
    pub fn new(name: &str, offset: usize, len: usize) -> Self {
        LayoutEntry { name: name.to_string(), offset, len }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Training stage tag, e.g. `sft`, `rm`, `ppo`.
    pub stage: String,
    pub seed: u64,
    pub layout: Vec<LayoutEntry>,
    pub data: Vec<f64>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, stage: &str, seed: u64, layout: Vec<LayoutEntry>, data: Vec<f64>) -> Result<Self> {
        let ck = Checkpoint { config, stage: stage.to_string(), seed, layout, data };
        ck.check()?;
        Ok(ck)
    }

    fn check(&self) -> Result<()> {
        self.config.validate()?;
        if self.stage.is_empty() || self.stage.contains(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("invalid stage tag {:?}", self.stage)));
        }
        let mut next = 0;
        for e in &self.layout {
            if e.offset != next || e.name.is_empty() || e.name.contains(char::is_whitespace) {
                return Err(Error::Checkpoint(format!("layout entry {:?} is not contiguous", e.name)));
            }
            next += e.len;
        }
        if next != self.data.len() {
            return Err(Error::Checkpoint(format!("layout covers {next} values but block has {}", self.data.len())));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(512 + 8 * self.data.len());
        let mut head = String::new();
        head.push_str(MAGIC);
        head.push('\n');
        head.push_str(&format!("stage {}\nseed {}\n", self.stage, self.seed));
        head.push_str(&format!(
            "vocab_size {}\ncontext_window {}\nembed_dim {}\nhidden_dim {}\nmax_len {}\n",
            c.vocab_size, c.context_window, c.embed_dim, c.hidden_dim, c.max_len
        ));
        for e in &self.layout {
            head.push_str(&format!("layout {} {} {}\n", e.name, e.offset, e.len));
        }
        head.push_str(&format!("params {}\n\n", self.data.len()));
        out.extend_from_slice(head.as_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| Error::Checkpoint("missing manifest terminator".into()))?;
        let head =
            std::str::from_utf8(&bytes[..split]).map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
        let body = &bytes[split + 2..];
        let mut lines = head.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::Checkpoint("bad magic line".into()));
        }
        let mut config = ModelConfig::default();
        let mut stage = None;
        let mut seed = None;
        let mut layout = Vec::new();
        let mut count = None;
        let num = |s: Option<&str>, key: &str| -> Result<usize> {
            s.and_then(|v| v.parse().ok()).ok_or_else(|| Error::Checkpoint(format!("bad value for {key}")))
        };
        for line in lines {
            let mut parts = line.split(' ');
            let key = parts.next().unwrap_or("");
            match key {
                "stage" => stage = parts.next().map(str::to_string),
                "seed" => seed = Some(num(parts.next(), key)? as u64),
                "vocab_size" => config.vocab_size = num(parts.next(), key)?,
                "context_window" => config.context_window = num(parts.next(), key)?,
                "embed_dim" => config.embed_dim = num(parts.next(), key)?,
                "hidden_dim" => config.hidden_dim = num(parts.next(), key)?,
                "max_len" => config.max_len = num(parts.next(), key)?,
                "layout" => {
                    let name = parts.next().ok_or_else(|| Error::Checkpoint("layout name".into()))?;
                    let offset = num(parts.next(), key)?;
                    let len = num(parts.next(), key)?;
                    layout.push(LayoutEntry::new(name, offset, len));
                }
                "params" => count = Some(num(parts.next(), key)?),
                other => return Err(Error::Checkpoint(format!("unknown manifest key {other:?}"))),
            }
        }
        let count = count.ok_or_else(|| Error::Checkpoint("missing params line".into()))?;
        if body.len() != count * 8 {
            return Err(Error::Checkpoint(format!("parameter block has {} bytes, expected {}", body.len(), count * 8)));
        }
        let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        Checkpoint::new(
            config,
            &stage.ok_or_else(|| Error::Checkpoint("missing stage".into()))?,
            seed.ok_or_else(|| Error::Checkpoint("missing seed".into()))?,
            layout,
            data,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}
