//! Checkpoint files.
//!
//! Layout: the magic `STMXCKPT`, a little-endian `u32` format version, a
//! little-endian `u64` header length, the UTF-8 header, the SHA-256 of the
//! header, the SHA-256 of the payload, then the payload of little-endian
//! `f64` values. The header holds the training config as `key = value`
//! lines followed by one `name<TAB>dims<TAB>byte offset<TAB>count` line
//! per tensor. Query-bank rows are stored as `bank/v{video}/c{clip}`.

use std::path::Path;

use sha2::{Digest, Sha256};
use stmixer_tensor::Tensor;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::longterm::QueryBank;
use crate::model::StMixer;

pub const MAGIC: &[u8; 8] = b"STMXCKPT";
pub const VERSION: u32 = 1;
const CONFIG_MARK: &str = "[config]";
const ENTRIES_MARK: &str = "[entries]";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: Vec<(String, Tensor)>,
    pub bank: Option<QueryBank>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn bank_name(v: usize, c: usize) -> String {
    format!("bank/v{v}/c{c}")
}

impl Checkpoint {
    pub fn from_model(model: &StMixer, bank: Option<&QueryBank>) -> Self {
        Self {
            config: model.cfg.clone(),
            params: model
                .store
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            bank: bank.cloned(),
        }
    }

    /// Rebuilds the model and loads every parameter by name.
    pub fn into_model(self) -> Result<(StMixer, Option<QueryBank>)> {
        let mut model = StMixer::new(&self.config)?;
        model.store.load_values(self.params)?;
        Ok((model, self.bank))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut entries: Vec<(String, &Tensor)> = self.params.iter().map(|(n, t)| (n.clone(), t)).collect();
        if let Some(bank) = &self.bank {
            for (v, clips) in bank.videos.iter().enumerate() {
                for (c, t) in clips.iter().enumerate() {
                    entries.push((bank_name(v, c), t));
                }
            }
        }
        let mut header = format!("{CONFIG_MARK}\n{}{ENTRIES_MARK}\n", self.config.to_text());
        let mut payload = Vec::new();
        for (name, t) in &entries {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!("{name}\t{}\t{}\t{}\n", dims.join(","), payload.len(), t.len()));
            for x in t.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(8 + 4 + 8 + header.len() + 64 + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&Sha256::digest(header.as_bytes()));
        out.extend_from_slice(&Sha256::digest(&payload));
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fmt_err("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(fmt_err(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < header_len.saturating_add(64) {
            return Err(fmt_err("truncated checkpoint"));
        }
        let (header, rest) = body.split_at(header_len);
        let (digests, payload) = rest.split_at(64);
        if Sha256::digest(header)[..] != digests[..32] {
            return Err(fmt_err("header digest mismatch"));
        }
        if Sha256::digest(payload)[..] != digests[32..] {
            return Err(fmt_err("payload digest mismatch"));
        }
        let header = std::str::from_utf8(header).map_err(|_| fmt_err("header is not UTF-8"))?;
        let (config_text, entries_text) = header
            .strip_prefix(CONFIG_MARK)
            .and_then(|h| h.split_once(ENTRIES_MARK))
            .ok_or_else(|| fmt_err("header sections missing"))?;
        let config = TrainConfig::from_text(config_text)?;

        let mut params = Vec::new();
        let mut bank_rows: Vec<(usize, usize, Tensor)> = Vec::new();
        let mut expected_offset = 0usize;
        for line in entries_text.lines().filter(|l| !l.is_empty()) {
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, dims, offset, count] = fields[..] else {
                return Err(fmt_err(format!("bad entry line `{line}`")));
            };
            let parse = |s: &str| s.parse::<usize>().map_err(|_| fmt_err(format!("bad number in `{line}`")));
            let shape = if dims.is_empty() {
                Vec::new()
            } else {
                dims.split(',').map(parse).collect::<Result<Vec<_>>>()?
            };
            let (offset, count) = (parse(offset)?, parse(count)?);
            if offset != expected_offset || shape.iter().product::<usize>() != count {
                return Err(fmt_err(format!("entry `{name}` has inconsistent offset or size")));
            }
            let end = offset + 8 * count;
            let raw = payload
                .get(offset..end)
                .ok_or_else(|| fmt_err(format!("entry `{name}` runs past the payload")))?;
            expected_offset = end;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let tensor = Tensor::new(shape, data)?;
            match name.strip_prefix("bank/") {
                Some(rest) => {
                    let (v, c) = rest
                        .strip_prefix('v')
                        .and_then(|r| r.split_once("/c"))
                        .and_then(|(v, c)| Some((v.parse().ok()?, c.parse().ok()?)))
                        .ok_or_else(|| fmt_err(format!("bad bank entry name `{name}`")))?;
                    bank_rows.push((v, c, tensor));
                }
                None => params.push((name.to_string(), tensor)),
            }
        }
        if expected_offset != payload.len() {
            return Err(fmt_err("payload length does not match the entries"));
        }
        Ok(Self {
            config,
            params,
            bank: assemble_bank(bank_rows)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.encode())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn assemble_bank(rows: Vec<(usize, usize, Tensor)>) -> Result<Option<QueryBank>> {
    let Some(first) = rows.first() else {
        return Ok(None);
    };
    let shape = first.2.shape().to_vec();
    if shape.len() != 2 {
        return Err(fmt_err("bank rows must be rank 2"));
    }
    let mut bank = QueryBank::new(shape[0], shape[1]);
    for (v, c, t) in rows {
        if t.shape() != shape.as_slice() {
            return Err(fmt_err("bank rows differ in shape"));
        }
        if v > bank.videos.len() || (v == bank.videos.len()) != (c == 0) {
            return Err(fmt_err("bank entries out of order"));
        }
        if v == bank.videos.len() {
            bank.videos.push(Vec::new());
        }
        if c != bank.videos[v].len() {
            return Err(fmt_err("bank entries out of order"));
        }
        bank.videos[v].push(t);
    }
    Ok(Some(bank))
}

/// SHA-256 of the payload section of an encoded checkpoint, hex encoded.
pub fn payload_digest(bytes: &[u8]) -> Result<String> {
    Checkpoint::decode(bytes)?;
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let d = &bytes[20 + header_len + 32..20 + header_len + 64];
    Ok(d.iter().map(|b| format!("{b:02x}")).collect())
}
