//! Trial CSVs and JSON summaries.
//!
//! Summaries carry run-specific fields (timestamps) under a top-level
//! `metadata` key so reruns can be compared after [`strip_metadata`].

use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::Result;
use crate::experiment::TrialResult;

pub const TRIAL_COLUMNS: [&str; 9] = [
    "k",
    "eta",
    "seed",
    "round",
    "val_error",
    "test_error",
    "ce",
    "epochs",
    "threshold",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// One row per trial; absent values are empty cells.
pub fn write_trials_csv<W: Write>(out: W, trials: &[TrialResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRIAL_COLUMNS)?;
    for t in trials {
        w.write_record([
            t.k.to_string(),
            t.eta.to_string(),
            t.seed.to_string(),
            opt(t.round),
            opt(t.val_error),
            opt(t.test_error),
            opt(t.cross_entropy),
            t.epochs.to_string(),
            opt(t.threshold),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_trials_csv(path: &Path, trials: &[TrialResult]) -> Result<()> {
    write_trials_csv(std::fs::File::create(path)?, trials)
}

/// Serializes `body` (must be a JSON object) and adds `metadata`.
pub fn summary_json<T: Serialize>(body: &T, command: &str) -> Result<Value> {
    let mut value = serde_json::to_value(body)?;
    let unix_seconds = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut metadata = Map::new();
    metadata.insert("command".into(), Value::from(command));
    metadata.insert("created_unix".into(), Value::from(unix_seconds));
    metadata.insert("version".into(), Value::from(env!("CARGO_PKG_VERSION")));
    match &mut value {
        Value::Object(map) => {
            map.insert("metadata".into(), Value::Object(metadata));
        }
        other => {
            let mut map = Map::new();
            map.insert("result".into(), other.take());
            map.insert("metadata".into(), Value::Object(metadata));
            value = Value::Object(map);
        }
    }
    Ok(value)
}

pub fn save_summary<T: Serialize>(path: &Path, body: &T, command: &str) -> Result<()> {
    let value = summary_json(body, command)?;
    let mut file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut file, &value)?;
    file.write_all(b"\n")?;
    Ok(())
}

/// Drops the top-level `metadata` key.
pub fn strip_metadata(mut value: Value) -> Value {
    if let Value::Object(map) = &mut value {
        map.remove("metadata");
    }
    value
}
