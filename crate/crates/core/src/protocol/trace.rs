//! Offline trace files: a `{"version":1}` header line followed by one
//! record per line.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::selection::AttentionVector;

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: record `{id}` violates an invariant: {message}")]
    InvariantViolation { line: usize, id: String, message: String },
    #[error("unsupported trace version {0}")]
    UnsupportedVersion(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub label: String,
    /// Logit from the original-image pass.
    pub base: f64,
    /// Logit from the negative pass.
    pub negative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    pub n_tokens: usize,
    pub att1: Vec<f64>,
    pub att2: Vec<f64>,
    pub candidates: Vec<Candidate>,
    pub gold: String,
}

impl TraceRecord {
    pub fn validate(&self) -> Result<(), String> {
        for (name, att) in [("att1", &self.att1), ("att2", &self.att2)] {
            if att.len() != self.n_tokens {
                return Err(format!(
                    "{name} has {} entries, n_tokens is {}",
                    att.len(),
                    self.n_tokens
                ));
            }
            AttentionVector::new(att.clone()).map_err(|e| format!("{name}: {e}"))?;
        }
        if self.candidates.is_empty() {
            return Err("candidate list is empty".into());
        }
        if let Some(c) = self
            .candidates
            .iter()
            .find(|c| !c.base.is_finite() || !c.negative.is_finite())
        {
            return Err(format!("candidate `{}` has a non-finite logit", c.label));
        }
        Ok(())
    }

    pub fn attention(&self) -> (AttentionVector, AttentionVector) {
        // validated on read
        (
            AttentionVector::new(self.att1.clone()).expect("validated att1"),
            AttentionVector::new(self.att2.clone()).expect("validated att2"),
        )
    }

    pub fn base_logits(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.base).collect()
    }

    pub fn negative_logits(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.negative).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
}

/// Streaming reader over a trace file. An empty file yields no records.
pub struct TraceReader<R> {
    lines: io::Lines<R>,
    line_no: usize,
    header_seen: bool,
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(reader: R) -> Self {
        Self {
            lines: reader.lines(),
            line_no: 0,
            header_seen: false,
        }
    }

    fn next_line(&mut self) -> Option<io::Result<String>> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            match line {
                Ok(l) if l.trim().is_empty() => continue,
                other => return Some(other),
            }
        }
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<TraceRecord, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        if !self.header_seen {
            let line = match self.next_line()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.header_seen = true;
            match serde_json::from_str::<Header>(&line) {
                Ok(h) if h.version == TRACE_VERSION => {}
                Ok(h) => return Some(Err(TraceError::UnsupportedVersion(h.version))),
                Err(e) => {
                    return Some(Err(TraceError::Parse {
                        line: self.line_no,
                        message: format!("expected version header: {e}"),
                    }))
                }
            }
        }
        let line = match self.next_line()? {
            Ok(l) => l,
            Err(e) => return Some(Err(e.into())),
        };
        let record: TraceRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                return Some(Err(TraceError::Parse {
                    line: self.line_no,
                    message: e.to_string(),
                }))
            }
        };
        Some(
            record
                .validate()
                .map(|_| record.clone())
                .map_err(|message| TraceError::InvariantViolation {
                    line: self.line_no,
                    id: record.id,
                    message,
                }),
        )
    }
}

pub fn read_traces(path: impl AsRef<Path>) -> Result<TraceReader<BufReader<File>>, TraceError> {
    Ok(TraceReader::new(BufReader::new(File::open(path)?)))
}

pub fn write_traces_to<'a, W, I>(mut w: W, records: I) -> Result<(), TraceError>
where
    W: Write,
    I: IntoIterator<Item = &'a TraceRecord>,
{
    let header = serde_json::to_string(&Header { version: TRACE_VERSION }).map_err(io::Error::other)?;
    writeln!(w, "{header}")?;
    for r in records {
        let line = serde_json::to_string(r).map_err(io::Error::other)?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_traces<'a, I>(records: I, path: impl AsRef<Path>) -> Result<(), TraceError>
where
    I: IntoIterator<Item = &'a TraceRecord>,
{
    write_traces_to(BufWriter::new(File::create(path)?), records)
}
