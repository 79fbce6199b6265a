//! Portable checkpoint container.
//!
//! ```text
//! SRNLAB1\n
//! key=value\n            model configuration, one per line
//! name RxC f32 offset length\n   one line per tensor, payload order
//! \n                     blank line ends the manifest
//! <payload>              little-endian f32, row-major, contiguous
//! ```
//!
//! Values are rounded to f32 on save and widened on load, so a
//! load/save cycle reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::tensor::{Matrix, Parameter};

pub const MAGIC: &[u8] = b"SRNLAB1\n";
const ITEM_TARGETS: &str = "item_targets";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Frozen item embeddings the embedding head is ranked against.
    pub item_targets: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: (usize, usize),
    pub dtype: String,
    pub byte_offset: usize,
    pub byte_length: usize,
}

impl TensorEntry {
    fn to_line(&self) -> String {
        format!(
            "{} {}x{} {} {} {}",
            self.name, self.shape.0, self.shape.1, self.dtype, self.byte_offset, self.byte_length
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub config: Vec<(String, String)>,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.config {
            out.push_str(&format!("{k}={v}\n"));
        }
        for t in &self.tensors {
            out.push_str(&t.to_line());
            out.push('\n');
        }
        out
    }
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            item_targets: None,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    fn tensors(&self) -> Vec<(&str, &Matrix)> {
        let mut out: Vec<(&str, &Matrix)> = self
            .model
            .params
            .iter()
            .into_iter()
            .map(|p| (p.name.as_str(), &p.value))
            .collect();
        if let Some(t) = &self.item_targets {
            out.push((ITEM_TARGETS, t));
        }
        out
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0;
        let tensors = self
            .tensors()
            .into_iter()
            .map(|(name, m)| {
                let len = m.len() * 4;
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: m.shape(),
                    dtype: "f32".into(),
                    byte_offset: offset,
                    byte_length: len,
                };
                offset += len;
                e
            })
            .collect();
        Manifest {
            config: self.model.config.to_pairs(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(self.manifest().to_text().as_bytes());
        out.push(b'\n');
        for (_, m) in self.tensors() {
            for &v in m.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, payload) = parse_container(bytes)?;
        let config = ModelConfig::from_pairs(
            manifest
                .config
                .iter()
                .map(|(k, v)| (k.as_str(), v.as_str())),
        )?;

        let mut params = Vec::new();
        let mut item_targets = None;
        for t in &manifest.tensors {
            let raw = &payload[t.byte_offset..t.byte_offset + t.byte_length];
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            let m = Matrix::from_vec(t.shape.0, t.shape.1, data)?;
            if t.name == ITEM_TARGETS {
                if m.shape() != (config.vocab_size_with_pad, config.embed_dim) {
                    return Err(Error::checkpoint(format!(
                        "{ITEM_TARGETS} has shape {:?}, config implies {:?}",
                        m.shape(),
                        (config.vocab_size_with_pad, config.embed_dim)
                    )));
                }
                item_targets = Some(m);
            } else {
                params.push(Parameter::new(t.name.clone(), m));
            }
        }
        let params = ModelParams::from_vec(&config, params)?;
        Ok(Checkpoint {
            model: Model::from_params(config, params)?,
            item_targets,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    /// Fails naming the first field that differs from `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        for ((k, have), (_, want)) in self.model.config.to_pairs().iter().zip(expected.to_pairs()) {
            if *have != want {
                return Err(Error::checkpoint(format!(
                    "{k} is {have} in the checkpoint but {want} was requested"
                )));
            }
        }
        Ok(())
    }
}

/// Reads only the manifest, validating byte ranges against the payload.
pub fn read_manifest(bytes: &[u8]) -> Result<Manifest> {
    parse_container(bytes).map(|(m, _)| m)
}

fn parse_container(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::checkpoint("bad magic"))?;
    let end = rest
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::checkpoint("manifest is not terminated"))?;
    let text = std::str::from_utf8(&rest[..end + 1])
        .map_err(|_| Error::checkpoint("manifest is not valid UTF-8"))?;
    let payload = &rest[end + 2..];

    let mut config = Vec::new();
    let mut tensors = Vec::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            if !tensors.is_empty() {
                return Err(Error::checkpoint(format!("config line after tensors: {line}")));
            }
            config.push((k.to_string(), v.to_string()));
            continue;
        }
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() != 5 {
            return Err(Error::checkpoint(format!("bad manifest line {line:?}")));
        }
        let (r, c) = fields[1]
            .split_once('x')
            .and_then(|(r, c)| Some((r.parse().ok()?, c.parse().ok()?)))
            .ok_or_else(|| Error::checkpoint(format!("bad shape in {line:?}")))?;
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::checkpoint(format!("bad number in {line:?}")))
        };
        tensors.push(TensorEntry {
            name: fields[0].to_string(),
            shape: (r, c),
            dtype: fields[2].to_string(),
            byte_offset: num(fields[3])?,
            byte_length: num(fields[4])?,
        });
    }

    let mut expected_offset = 0;
    for t in &tensors {
        if t.dtype != "f32" {
            return Err(Error::checkpoint(format!("{}: unsupported dtype {}", t.name, t.dtype)));
        }
        if t.byte_offset != expected_offset {
            return Err(Error::checkpoint(format!(
                "{}: offset {} but previous tensor ends at {}",
                t.name, t.byte_offset, expected_offset
            )));
        }
        if t.byte_length != t.shape.0 * t.shape.1 * 4 {
            return Err(Error::checkpoint(format!(
                "{}: length {} does not match shape {}x{}",
                t.name, t.byte_length, t.shape.0, t.shape.1
            )));
        }
        expected_offset += t.byte_length;
    }
    if payload.len() != expected_offset {
        return Err(Error::checkpoint(format!(
            "payload is {} bytes, manifest describes {}",
            payload.len(),
            expected_offset
        )));
    }
    Ok((Manifest { config, tensors }, payload))
}
