//! Dataset files: a JSON header line followed by one JSON line per trajectory.
//!
//! ```text
//! {"format":"slamkn-dataset","version":1,"trajectories":L,"meta":{...}}
//! {"index":0,"trajectory":{...}}
//! ...
//! {"index":L-1,"trajectory":{...}}
//! ```
//!
//! Record 0 is the header; trajectory `i` is record `i + 1`. Floats are written
//! in shortest round-trip form, so loading reproduces every `f64` bit-for-bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetMeta, Trajectory};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "slamkn-dataset";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    trajectories: usize,
    meta: DatasetMeta,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    index: usize,
    trajectory: &'a Trajectory,
}

#[derive(Deserialize)]
struct RecordIn {
    index: usize,
    trajectory: Trajectory,
}

pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    let header = Header {
        format: FORMAT_TAG.to_string(),
        version: FORMAT_VERSION,
        trajectories: ds.trajectories.len(),
        meta: ds.meta.clone(),
    };
    let to_io = |e: serde_json::Error| Error::Io(e.into());
    serde_json::to_writer(&mut w, &header).map_err(to_io)?;
    w.write_all(b"\n")?;
    for (index, trajectory) in ds.trajectories.iter().enumerate() {
        serde_json::to_writer(&mut w, &RecordOut { index, trajectory }).map_err(to_io)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(r: R) -> Result<Dataset> {
    let mut lines = BufReader::new(r).lines();
    let first = match lines.next() {
        Some(line) => line?,
        None => return Err(Error::Format { record: 0, reason: "empty file, missing header".into() }),
    };
    let value: serde_json::Value = serde_json::from_str(&first)
        .map_err(|e| Error::Format { record: 0, reason: format!("malformed header: {e}") })?;
    if value.get("format").and_then(|f| f.as_str()) != Some(FORMAT_TAG) {
        return Err(Error::Format { record: 0, reason: format!("not a {FORMAT_TAG} file") });
    }
    let found = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(Error::Version { expected: FORMAT_VERSION, found });
    }
    let header: Header = serde_json::from_value(value)
        .map_err(|e| Error::Format { record: 0, reason: format!("malformed header: {e}") })?;

    let mut trajectories = Vec::with_capacity(header.trajectories);
    for i in 0..header.trajectories {
        let record = i + 1;
        let line = match lines.next() {
            Some(line) => line?,
            None => {
                return Err(Error::Format {
                    record,
                    reason: format!("truncated: header announces {} trajectories, found {i}", header.trajectories),
                })
            }
        };
        let rec: RecordIn = serde_json::from_str(&line)
            .map_err(|e| Error::Format { record, reason: format!("malformed trajectory: {e}") })?;
        if rec.index != i {
            return Err(Error::Format { record, reason: format!("expected index {i}, found {}", rec.index) });
        }
        check_shapes(&rec.trajectory, &header.meta).map_err(|reason| Error::Format { record, reason })?;
        trajectories.push(rec.trajectory);
    }
    if let Some(extra) = lines.find(|l| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true)) {
        extra?;
        return Err(Error::Format {
            record: header.trajectories + 1,
            reason: "unexpected data after the announced trajectories".into(),
        });
    }
    Ok(Dataset { meta: header.meta, trajectories })
}

fn check_shapes(t: &Trajectory, meta: &DatasetMeta) -> std::result::Result<(), String> {
    let m = meta.scenario.landmarks;
    let horizon = meta.scenario.horizon;
    let (n, p) = (3 + 2 * m, 2 * m);
    let per_step_ok = t.states.len() == horizon
        && t.inputs.len() == horizon
        && t.measurements.len() == horizon
        && t.process_noise.len() == horizon
        && t.measurement_noise.len() == horizon;
    if !per_step_ok {
        return Err(format!("expected {horizon} steps in every per-step field"));
    }
    if t.initial_state.len() != n || t.states.iter().any(|s| s.len() != n) {
        return Err(format!("state vectors must have length {n}"));
    }
    if t.init_measurement.len() != p || t.measurements.iter().any(|y| y.len() != p) {
        return Err(format!("measurement vectors must have length {p}"));
    }
    if t.landmark_truth.len() != m {
        return Err(format!("expected {m} landmarks"));
    }
    if !t.swaps.is_empty() && t.swaps.len() != horizon {
        return Err("swap log length does not match horizon".into());
    }
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_dataset(ds, BufWriter::new(File::create(path)?))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(File::open(path)?)
}
