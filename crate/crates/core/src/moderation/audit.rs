//! Append-only, hash-chained audit log.
//!
//! Each event's hash is `sha256(prev_hash || payload)` over the exact payload
//! bytes, hex-encoded. The on-disk form is a magic header followed by pairs of
//! length-prefixed frames (`u32` LE length, bytes): first the envelope JSON
//! (`seq`, `kind`, `prev_hash`, `hash`), then the payload JSON.

use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const GENESIS_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";
pub const FILE_MAGIC: &[u8; 8] = b"HITLAUD\x01";

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("sequence gap: expected {expected}, found {found}")]
    SequenceGap { expected: u64, found: u64 },
    #[error("event {seq}: prev_hash does not match the previous event")]
    BrokenLink { seq: u64 },
    #[error("event {seq}: hash does not match its payload")]
    BadHash { seq: u64 },
    #[error("audit file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("event {seq}: payload does not decode: {reason}")]
    Decode { seq: u64, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub seq: u64,
    pub kind: String,
    pub prev_hash: String,
    pub hash: String,
    /// Canonical payload JSON, hashed byte for byte.
    #[serde(skip)]
    pub payload: String,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    seq: u64,
    kind: String,
    prev_hash: String,
    hash: String,
}

pub fn chain_hash(prev_hash: &str, payload: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(prev_hash.as_bytes());
    h.update(payload);
    hex::encode(h.finalize())
}

#[derive(Debug, Default)]
pub struct AuditLog {
    events: Vec<AuditEvent>,
    sink: Option<BufWriter<File>>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens (or creates) a log file and returns the events already in it.
    /// New events are appended to the same file.
    pub fn open(path: &Path) -> Result<(Self, Vec<AuditEvent>), AuditError> {
        let existing = if path.exists() { read_file(path)? } else { Vec::new() };
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if existing.is_empty() && file.metadata()?.len() == 0 {
            file.write_all(FILE_MAGIC)?;
            file.flush()?;
        }
        Ok((Self { events: Vec::new(), sink: Some(BufWriter::new(file)) }, existing))
    }

    pub fn events(&self) -> &[AuditEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn head_hash(&self) -> &str {
        self.events.last().map(|e| e.hash.as_str()).unwrap_or(GENESIS_HASH)
    }

    pub fn next_seq(&self) -> u64 {
        self.events.last().map(|e| e.seq + 1).unwrap_or(1)
    }

    pub fn append(&mut self, kind: &str, payload: String) -> Result<&AuditEvent, AuditError> {
        let prev_hash = self.head_hash().to_owned();
        let hash = chain_hash(&prev_hash, payload.as_bytes());
        let event = AuditEvent { seq: self.next_seq(), kind: kind.to_owned(), prev_hash, hash, payload };
        if let Some(sink) = self.sink.as_mut() {
            write_record(sink, &event)?;
            sink.flush()?;
        }
        self.events.push(event);
        Ok(self.events.last().expect("just pushed"))
    }

    /// Re-adds an already verified event (used while replaying a file into a fresh log).
    pub(crate) fn push_verified(&mut self, event: AuditEvent) {
        self.events.push(event);
    }

    pub fn verify(&self) -> Result<(), AuditError> {
        verify_chain(&self.events)
    }

    /// One JSON object per line, with the payload inlined as JSON.
    pub fn export_jsonl(&self, out: &mut impl Write) -> Result<(), AuditError> {
        export_jsonl(&self.events, out)
    }
}

pub fn verify_chain(events: &[AuditEvent]) -> Result<(), AuditError> {
    let mut prev = GENESIS_HASH;
    for (i, e) in events.iter().enumerate() {
        let expected = i as u64 + 1;
        if e.seq != expected {
            return Err(AuditError::SequenceGap { expected, found: e.seq });
        }
        if e.prev_hash != prev {
            return Err(AuditError::BrokenLink { seq: e.seq });
        }
        if chain_hash(&e.prev_hash, e.payload.as_bytes()) != e.hash {
            return Err(AuditError::BadHash { seq: e.seq });
        }
        prev = &e.hash;
    }
    Ok(())
}

fn write_frame(out: &mut impl Write, bytes: &[u8]) -> io::Result<()> {
    let len = u32::try_from(bytes.len()).map_err(|_| io::Error::other("audit record over 4 GiB"))?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(bytes)
}

fn write_record(out: &mut impl Write, e: &AuditEvent) -> io::Result<()> {
    let envelope = Envelope { seq: e.seq, kind: e.kind.clone(), prev_hash: e.prev_hash.clone(), hash: e.hash.clone() };
    write_frame(out, serde_json::to_string(&envelope).expect("envelope serializes").as_bytes())?;
    write_frame(out, e.payload.as_bytes())
}

/// Writes a complete log file (magic plus records).
pub fn write_file(path: &Path, events: &[AuditEvent]) -> Result<(), AuditError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(FILE_MAGIC)?;
    for e in events {
        write_record(&mut out, e)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads and verifies a log file.
pub fn read_file(path: &Path) -> Result<Vec<AuditEvent>, AuditError> {
    let corrupt = |reason: String| AuditError::Corrupt { path: path.to_owned(), reason };
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let rest = bytes.strip_prefix(FILE_MAGIC.as_slice()).ok_or_else(|| corrupt("bad magic".into()))?;

    let mut pos = 0usize;
    let frame = |pos: &mut usize| -> Result<&[u8], AuditError> {
        let header = rest.get(*pos..*pos + 4).ok_or_else(|| corrupt(format!("truncated length at byte {pos}")))?;
        let len = u32::from_le_bytes(header.try_into().unwrap()) as usize;
        let body =
            rest.get(*pos + 4..*pos + 4 + len).ok_or_else(|| corrupt(format!("truncated frame at byte {pos}")))?;
        *pos += 4 + len;
        Ok(body)
    };
    let mut events = Vec::new();
    while pos < rest.len() {
        let envelope: Envelope =
            serde_json::from_slice(frame(&mut pos)?).map_err(|e| corrupt(format!("envelope: {e}")))?;
        let payload = std::str::from_utf8(frame(&mut pos)?)
            .map_err(|_| corrupt(format!("event {} payload is not UTF-8", envelope.seq)))?
            .to_owned();
        events.push(AuditEvent {
            seq: envelope.seq,
            kind: envelope.kind,
            prev_hash: envelope.prev_hash,
            hash: envelope.hash,
            payload,
        });
    }
    verify_chain(&events)?;
    Ok(events)
}

pub fn export_jsonl(events: &[AuditEvent], out: &mut impl Write) -> Result<(), AuditError> {
    for e in events {
        let payload: serde_json::Value = serde_json::from_str(&e.payload)
            .map_err(|err| AuditError::Decode { seq: e.seq, reason: err.to_string() })?;
        let line = serde_json::json!({
            "seq": e.seq,
            "kind": e.kind,
            "prev_hash": e.prev_hash,
            "hash": e.hash,
            "payload": payload,
        });
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> AuditLog {
        let mut log = AuditLog::new();
        for i in 0..5 {
            log.append("note", format!("{{\"n\":{i}}}")).unwrap();
        }
        log
    }

    #[test]
    fn chain_links() {
        let log = sample();
        assert_eq!(log.events()[0].prev_hash, GENESIS_HASH);
        assert_eq!(log.events()[0].seq, 1);
        for w in log.events().windows(2) {
            assert_eq!(w[1].prev_hash, w[0].hash);
            assert_eq!(w[1].seq, w[0].seq + 1);
        }
        log.verify().unwrap();
        // sha256 of 64 zeros followed by the payload
        assert_eq!(log.events()[0].hash, chain_hash(GENESIS_HASH, b"{\"n\":0}"));
        assert_eq!(chain_hash("", b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn tampering_detected() {
        let mut events = sample().events().to_vec();
        events[2].payload = "{\"n\":99}".into();
        assert!(matches!(verify_chain(&events), Err(AuditError::BadHash { seq: 3 })));

        let mut events = sample().events().to_vec();
        events.remove(1);
        assert!(matches!(verify_chain(&events), Err(AuditError::SequenceGap { .. })));

        let mut events = sample().events().to_vec();
        events[3].prev_hash = GENESIS_HASH.into();
        assert!(matches!(verify_chain(&events), Err(AuditError::BrokenLink { seq: 4 })));
    }

    #[test]
    fn file_round_trip_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.log");
        {
            let (mut log, existing) = AuditLog::open(&path).unwrap();
            assert!(existing.is_empty());
            log.append("a", "{}".into()).unwrap();
            log.append("b", "{\"x\":1}".into()).unwrap();
        }
        let events = read_file(&path).unwrap();
        assert_eq!(events.len(), 2);
        {
            let (mut log, existing) = AuditLog::open(&path).unwrap();
            for e in existing {
                log.push_verified(e);
            }
            log.append("c", "[]".into()).unwrap();
        }
        let events = read_file(&path).unwrap();
        assert_eq!(events.iter().map(|e| e.kind.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);

        let copy = dir.path().join("copy.log");
        write_file(&copy, &events).unwrap();
        assert_eq!(std::fs::read(&copy).unwrap(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.log");
        write_file(&path, sample().events()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_file(&path), Err(AuditError::Corrupt { .. })));
        std::fs::write(&path, b"nonsense").unwrap();
        assert!(matches!(read_file(&path), Err(AuditError::Corrupt { .. })));
    }

    #[test]
    fn export_lines() {
        let mut buf = Vec::new();
        sample().export_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[4]["payload"]["n"], 4);
        assert_eq!(lines[4]["seq"], 5);
    }
}
