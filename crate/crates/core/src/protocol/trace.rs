//! JSON-lines trace files: one header line, then one record per slot.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{ProtocolError, SessionConfig};
use crate::phydec::SlotEvent;

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub version: u32,
    pub seed: u64,
    pub config: SessionConfig,
}

/// Message and packet index sent by one node in a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxEntry {
    pub node: usize,
    pub msg: u64,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub slot: usize,
    pub pair: usize,
    /// `None` for single-user slots.
    pub event: Option<SlotEvent>,
    pub index: usize,
    pub tx: Vec<TxEntry>,
    /// Hex of the wire form of every packet the PHY delivered, before bridging.
    pub packets: Vec<String>,
    pub channel_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), ProtocolError> {
        let line = |v: &dyn erased::Json| v.to_line();
        writeln!(w, "{}", line(&self.header))?;
        for r in &self.records {
            writeln!(w, "{}", line(r))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Trace, ProtocolError> {
        let mut lines = r.lines().enumerate().filter_map(|(i, l)| match l {
            Ok(l) if l.trim().is_empty() => None,
            other => Some((i + 1, other)),
        });
        let (line, first) = lines.next().ok_or(ProtocolError::TraceFormat { line: 1, message: "empty trace".into() })?;
        let header: TraceHeader = serde_json::from_str(&first?)
            .map_err(|e| ProtocolError::TraceFormat { line, message: format!("bad header: {e}") })?;
        if header.version != TRACE_VERSION {
            return Err(ProtocolError::TraceFormat {
                line,
                message: format!("unsupported trace version {} (expected {TRACE_VERSION})", header.version),
            });
        }
        if header.seed != header.config.seed {
            return Err(ProtocolError::TraceFormat { line, message: "header seed disagrees with config seed".into() });
        }
        let mut records = Vec::new();
        for (line, text) in lines {
            let text = text?;
            let record: TraceRecord = serde_json::from_str(&text).map_err(|e| {
                // Name the slot when the record got far enough to have one.
                let slot = serde_json::from_str::<serde_json::Value>(&text)
                    .ok()
                    .and_then(|v| v.get("slot").and_then(|s| s.as_u64()));
                match slot {
                    Some(slot) => ProtocolError::TraceSlot { slot: slot as usize, message: format!("malformed record: {e}") },
                    None => ProtocolError::TraceFormat { line, message: format!("malformed record: {e}") },
                }
            })?;
            records.push(record);
        }
        Ok(Trace { header, records })
    }
}

mod erased {
    pub trait Json {
        fn to_line(&self) -> String;
    }

    impl<T: serde::Serialize> Json for T {
        fn to_line(&self) -> String {
            serde_json::to_string(self).expect("trace types serialize")
        }
    }
}
