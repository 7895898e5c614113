//! Model checkpoints: one JSON header line followed by the parameters of
//! every network as little-endian `f64`, in header order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::net::{GainNetConfig, RecurrentGainNet};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "slamkn-checkpoint";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetEntry {
    name: String,
    config: GainNetConfig,
    parameters: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    tag: String,
    nets: Vec<NetEntry>,
    meta: Value,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub tag: String,
    pub nets: Vec<(String, RecurrentGainNet)>,
    /// Free-form model metadata (normalization statistics, routing, ...).
    pub meta: Value,
}

impl Checkpoint {
    pub fn net(&self, name: &str) -> Result<&RecurrentGainNet> {
        self.nets
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, net)| net)
            .ok_or_else(|| Error::Format { record: 0, reason: format!("checkpoint has no network named {name}") })
    }
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    tag: &str,
    nets: &[(&str, &RecurrentGainNet)],
    meta: &impl Serialize,
) -> Result<()> {
    let header = Header {
        format: FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        tag: tag.to_string(),
        nets: nets
            .iter()
            .map(|(name, net)| NetEntry {
                name: name.to_string(),
                config: net.config().clone(),
                parameters: net.parameter_count(),
            })
            .collect(),
        meta: serde_json::to_value(meta).map_err(|e| Error::invalid(format!("unserializable metadata: {e}")))?,
    };
    let line = serde_json::to_string(&header).map_err(|e| Error::invalid(e.to_string()))?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    for (_, net) in nets {
        for v in net.to_flat() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint and checks its tag against `expected_tag`.
pub fn read_checkpoint<R: Read>(r: R, expected_tag: &str) -> Result<Checkpoint> {
    let mut reader = BufReader::new(r);
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Err(Error::Format { record: 0, reason: "empty checkpoint".into() });
    }
    let header: Header = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Format { record: 0, reason: format!("malformed header: {e}") })?;
    if header.format != FORMAT {
        return Err(Error::Format { record: 0, reason: format!("unknown format {:?}", header.format) });
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Version { expected: CHECKPOINT_VERSION, found: header.version });
    }
    if header.tag != expected_tag {
        return Err(Error::Format {
            record: 0,
            reason: format!("checkpoint tagged {:?}, expected {expected_tag:?}", header.tag),
        });
    }
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    let total: usize = header.nets.iter().map(|n| n.parameters).sum();
    if payload.len() != total * 8 {
        return Err(Error::Format {
            record: 1,
            reason: format!("payload holds {} bytes, expected {}", payload.len(), total * 8),
        });
    }
    let values: Vec<f64> =
        payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    let mut offset = 0;
    let mut nets = Vec::new();
    for (i, entry) in header.nets.into_iter().enumerate() {
        let slice = &values[offset..offset + entry.parameters];
        offset += entry.parameters;
        let net = RecurrentGainNet::from_flat(entry.config, slice)
            .map_err(|e| Error::Format { record: i + 1, reason: e.to_string() })?;
        nets.push((entry.name, net));
    }
    Ok(Checkpoint { tag: header.tag, nets, meta: header.meta })
}

pub fn save_checkpoint(
    path: &Path,
    tag: &str,
    nets: &[(&str, &RecurrentGainNet)],
    meta: &impl Serialize,
) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), tag, nets, meta)
}

pub fn load_checkpoint(path: &Path, expected_tag: &str) -> Result<Checkpoint> {
    read_checkpoint(File::open(path)?, expected_tag)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(seed: u64) -> RecurrentGainNet {
        RecurrentGainNet::new(GainNetConfig::new(3, 4, 2, 2), seed, 0).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let (a, b) = (net(1), net(2));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "A4", &[("g1", &a), ("g2", &b)], &serde_json::json!({"k": 1.5})).unwrap();
        let ck = read_checkpoint(buf.as_slice(), "A4").unwrap();
        assert_eq!(ck.net("g1").unwrap().params(), a.params());
        assert_eq!(ck.net("g2").unwrap().params(), b.params());
        assert_eq!(ck.meta["k"], 1.5);
    }

    #[test]
    fn wrong_tag_version_and_truncation_are_rejected() {
        let a = net(1);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "A3", &[("gain", &a)], &()).unwrap();
        assert!(read_checkpoint(buf.as_slice(), "A4").is_err());
        assert!(matches!(read_checkpoint(&buf[..buf.len() - 3], "A3"), Err(Error::Format { .. })));
        let text = String::from_utf8_lossy(&buf).replace("\"version\":1", "\"version\":9");
        let mut bumped = text.lines().next().unwrap().as_bytes().to_vec();
        bumped.push(b'\n');
        assert!(matches!(read_checkpoint(bumped.as_slice(), "A3"), Err(Error::Version { found: 9, .. })));
        assert!(read_checkpoint(&b""[..], "A3").is_err());
    }
}
