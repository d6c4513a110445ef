//! Checkpoint files.
//!
//! ```text
//! GLMASK1
//! [config]
//! model.d_ff=256
//! ...
//! [layout]
//! dec.0.cross.wk 64,64
//! ...
//! [state]            (optional)
//! step=4800
//! ...
//! [data]
//! <little-endian f64: parameters in layout order, then first and second
//!  moments when the state section says moments=1>
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::{LayoutEntry, ParameterSet};
use crate::data::StreamPosition;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const MAGIC: &str = "GLMASK1";
const DATA_MARKER: &[u8] = b"[data]\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Main,
    Finetune,
}

impl Phase {
    fn as_str(self) -> &'static str {
        match self {
            Phase::Main => "main",
            Phase::Finetune => "finetune",
        }
    }
}

/// Everything beyond the parameters needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub step: u64,
    /// Number of optimizer updates applied (skipped steps excluded).
    pub updates: u64,
    pub phase: Phase,
    /// Step at which the current phase began.
    pub phase_start: u64,
    pub train_position: StreamPosition,
    pub clean_position: StreamPosition,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParameterSet,
    pub state: Option<TrainingState>,
}

fn bad(path: &str, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.into(),
        msg: msg.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = String::new();
        head.push_str(MAGIC);
        head.push_str("\n[config]\n");
        for (k, v) in self.config.to_kv() {
            let _ = writeln!(head, "{k}={v}");
        }
        head.push_str("[layout]\n");
        for e in self.params.layout().iter() {
            let dims: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            let dims = if dims.is_empty() { "-".to_string() } else { dims.join(",") };
            let _ = writeln!(head, "{} {}", e.name, dims);
        }
        if let Some(s) = &self.state {
            head.push_str("[state]\n");
            let _ = writeln!(head, "step={}", s.step);
            let _ = writeln!(head, "updates={}", s.updates);
            let _ = writeln!(head, "phase={}", s.phase.as_str());
            let _ = writeln!(head, "phase_start={}", s.phase_start);
            let _ = writeln!(head, "train_epoch={}", s.train_position.epoch);
            let _ = writeln!(head, "train_cursor={}", s.train_position.cursor);
            let _ = writeln!(head, "clean_epoch={}", s.clean_position.epoch);
            let _ = writeln!(head, "clean_cursor={}", s.clean_position.cursor);
            head.push_str("moments=1\n");
        }
        let mut out = head.into_bytes();
        out.extend_from_slice(DATA_MARKER);
        let mut push = |vals: &[f64]| {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        push(&self.params.flatten());
        if let Some(s) = &self.state {
            push(&s.first_moment);
            push(&s.second_moment);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let split = bytes
            .windows(DATA_MARKER.len())
            .position(|w| w == DATA_MARKER)
            .ok_or_else(|| bad(path, "missing [data] section"))?;
        let head = std::str::from_utf8(&bytes[..split]).map_err(|_| bad(path, "header is not UTF-8"))?;
        let data = &bytes[split + DATA_MARKER.len()..];
        let mut lines = head.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad(path, format!("missing {MAGIC} magic")));
        }
        let mut section = "";
        let mut config = BTreeMap::new();
        let mut layout = Vec::new();
        let mut state = BTreeMap::new();
        for line in lines {
            if line.starts_with('[') {
                section = line;
                continue;
            }
            match section {
                "[config]" | "[state]" => {
                    let (k, v) = line
                        .split_once('=')
                        .ok_or_else(|| bad(path, format!("malformed line {line:?}")))?;
                    let target = if section == "[config]" { &mut config } else { &mut state };
                    target.insert(k.to_string(), v.to_string());
                }
                "[layout]" => {
                    let (name, dims) = line
                        .split_once(' ')
                        .ok_or_else(|| bad(path, format!("malformed layout line {line:?}")))?;
                    let shape = if dims == "-" {
                        Vec::new()
                    } else {
                        dims.split(',')
                            .map(|d| d.parse::<usize>().map_err(|_| bad(path, format!("bad dims {dims:?}"))))
                            .collect::<Result<Vec<_>>>()?
                    };
                    layout.push(LayoutEntry {
                        name: name.to_string(),
                        shape,
                    });
                }
                other => return Err(bad(path, format!("unknown section {other:?}"))),
            }
        }
        let config = ModelConfig::from_kv(&config)?;
        if !data.len().is_multiple_of(8) {
            return Err(bad(path, "data section is not a whole number of f64 values"));
        }
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let n: usize = layout.iter().map(LayoutEntry::numel).sum();
        let moments = state.get("moments").map(String::as_str) == Some("1");
        let expected = if moments { 3 * n } else { n };
        if values.len() != expected {
            return Err(bad(
                path,
                format!("expected {expected} values, found {}", values.len()),
            ));
        }
        let params = ParameterSet::from_flat(&layout, &values[..n])?;
        let state = if state.is_empty() {
            None
        } else {
            let num = |k: &str| -> Result<u64> {
                state
                    .get(k)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(path, format!("state field {k} missing or invalid")))
            };
            let phase = match state.get("phase").map(String::as_str) {
                Some("main") => Phase::Main,
                Some("finetune") => Phase::Finetune,
                other => return Err(bad(path, format!("bad phase {other:?}"))),
            };
            if !moments {
                return Err(bad(path, "state section without moments"));
            }
            Some(TrainingState {
                step: num("step")?,
                updates: num("updates")?,
                phase,
                phase_start: num("phase_start")?,
                train_position: StreamPosition {
                    epoch: num("train_epoch")?,
                    cursor: num("train_cursor")? as usize,
                },
                clean_position: StreamPosition {
                    epoch: num("clean_epoch")?,
                    cursor: num("clean_cursor")? as usize,
                },
                first_moment: values[n..2 * n].to_vec(),
                second_moment: values[2 * n..].to_vec(),
            })
        };
        Ok(Checkpoint {
            config,
            params,
            state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| bad(&path.display().to_string(), e.to_string()))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn small() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            num_heads: 2,
            d_model: 4,
            d_ff: 6,
            src_vocab_size: 7,
            trg_vocab_size: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trips_with_and_without_state() {
        let cfg = small();
        let params = init_model(&cfg, 1).unwrap();
        let n = params.numel();
        let plain = Checkpoint {
            config: cfg.clone(),
            params: params.clone(),
            state: None,
        };
        let back = Checkpoint::from_bytes(&plain.to_bytes(), "x").unwrap();
        assert_eq!(back, plain);
        let full = Checkpoint {
            state: Some(TrainingState {
                step: 17,
                updates: 15,
                phase: Phase::Finetune,
                phase_start: 10,
                train_position: StreamPosition { epoch: 2, cursor: 5 },
                clean_position: StreamPosition { epoch: 0, cursor: 3 },
                first_moment: (0..n).map(|i| i as f64 * 0.5).collect(),
                second_moment: (0..n).map(|i| (i as f64).sqrt()).collect(),
            }),
            ..plain
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        full.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), full);
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"GLMASK1\n[config]\n"));
        assert_eq!(file_sha256(&path).unwrap(), sha256_hex(&full.to_bytes()));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ckpt = Checkpoint {
            config: small(),
            params: init_model(&small(), 1).unwrap(),
            state: None,
        };
        let mut bytes = ckpt.to_bytes();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes, "x").is_err());
        let mut bytes = ckpt.to_bytes();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes, "x").is_err());
        assert!(Checkpoint::load(Path::new("/nonexistent/ckpt")).is_err());
    }

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
