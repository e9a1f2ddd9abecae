//! Report envelope and CSV helpers shared by every output.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const TOOL_NAME: &str = "vitprune";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Any report body plus the provenance needed to compare runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub tool: String,
    pub tool_version: String,
    pub kind: String,
    pub config_hash: String,
    pub body: T,
}

impl<T: Serialize> Envelope<T> {
    pub fn new(kind: &str, config_hash: String, body: T) -> Self {
        Self {
            tool: TOOL_NAME.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            kind: kind.to_string(),
            config_hash,
            body,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

impl<T: DeserializeOwned> Envelope<T> {
    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

/// Header row from the field names, one row per record.
pub fn to_csv<T: Serialize>(rows: &[T]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("flat record serializes to CSV");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("CSV is UTF-8")
}
