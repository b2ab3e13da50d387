//! Self-describing checkpoint files.
//!
//! ```text
//! qfuse-checkpoint v1 arch=<architecture hash> config=<config hash>
//! {"config": {...}, "model": {...}}
//! ```
//!
//! The body is JSON with exact float round-trip. The header can be read without parsing
//! the body, which is how architecture mismatches are refused early.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{bytes_hash, TrainConfig};
use crate::error::{Error, Result};
use crate::model::ToyDetector;

pub const MAGIC: &str = "qfuse-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: ToyDetector,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub architecture: String,
    pub config: String,
}

impl Header {
    fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("malformed header `{line}`"));
        let mut parts = line.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(bad());
        }
        let version = parts
            .next()
            .and_then(|v| v.strip_prefix('v'))
            .and_then(|v| v.parse().ok())
            .ok_or_else(bad)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let architecture = parts
            .next()
            .and_then(|v| v.strip_prefix("arch="))
            .ok_or_else(bad)?
            .to_string();
        let config = parts
            .next()
            .and_then(|v| v.strip_prefix("config="))
            .ok_or_else(bad)?
            .to_string();
        Ok(Header {
            version,
            architecture,
            config,
        })
    }
}

impl Checkpoint {
    pub fn new(config: TrainConfig, model: ToyDetector) -> Self {
        Checkpoint { config, model }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let body = serde_json::to_string(self).expect("checkpoint serializes");
        format!(
            "{MAGIC} v{VERSION} arch={} config={}\n{body}\n",
            self.model.config.architecture_hash(),
            self.config.hash()
        )
        .into_bytes()
    }

    /// Content hash of the serialized checkpoint.
    pub fn digest(&self) -> String {
        bytes_hash(&self.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|_| Error::Checkpoint("not UTF-8".into()))?;
        let (head, body) = text
            .split_once('\n')
            .ok_or_else(|| Error::Checkpoint("missing body".into()))?;
        let header = Header::parse(head)?;
        let ckpt: Checkpoint =
            serde_json::from_str(body.trim_end()).map_err(|e| Error::Checkpoint(format!("corrupt body: {e}")))?;
        let arch = ckpt.model.config.architecture_hash();
        if arch != header.architecture {
            return Err(Error::Checkpoint(format!(
                "header says arch={} but body has arch={arch}",
                header.architecture
            )));
        }
        if ckpt.config.hash() != header.config {
            return Err(Error::Checkpoint("config hash in header does not match body".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Read only the header line of a checkpoint file.
pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    use std::io::BufRead;
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut line = String::new();
    std::io::BufReader::new(file)
        .read_line(&mut line)
        .map_err(|e| Error::io(path, e))?;
    Header::parse(line.trim_end())
}
