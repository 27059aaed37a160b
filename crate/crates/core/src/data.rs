//! Session and attribute ingestion.
//!
//! Sessions CSV: header `session_id,timestamp,item_id`, timestamps in epoch
//! seconds. Attributes CSV: header `item_id,attribute_type,attribute_value`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{KsttError, Result};

/// Sessions longer than this keep only their most recent clicks.
pub const MAX_SESSION_LEN: usize = 50;
pub const MIN_SESSION_LEN: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Click {
    pub item: String,
    pub timestamp: i64,
}

impl Click {
    pub fn new(item: impl Into<String>, timestamp: i64) -> Self {
        Click {
            item: item.into(),
            timestamp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub id: String,
    pub events: Vec<Click>,
}

impl Session {
    pub fn new(id: impl Into<String>, events: Vec<Click>) -> Self {
        Session {
            id: id.into(),
            events,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn start(&self) -> Option<i64> {
        self.events.first().map(|c| c.timestamp)
    }
}

/// Item → set of `(attribute type, attribute value)`.
pub type AttributeMap = BTreeMap<String, BTreeSet<(String, String)>>;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestSummary {
    pub rows: usize,
    pub sessions_kept: usize,
    pub sessions_dropped_short: usize,
    pub sessions_truncated: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AttributeSummary {
    pub rows: usize,
    pub duplicates: usize,
    pub dropped_unknown_item: usize,
}

fn open(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| KsttError::io(path, e))?;
    Ok(buf)
}

fn check_header(reader: &mut csv::Reader<&[u8]>, expected: &[&str], source: &str) -> Result<()> {
    let header = reader
        .headers()
        .map_err(|e| KsttError::Ingestion(format!("{source}: unreadable header: {e}")))?;
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(KsttError::Ingestion(format!(
            "{source} line 1: expected header {}, found {}",
            expected.join(","),
            got.join(",")
        )));
    }
    Ok(())
}

/// Trimmed rows paired with their 1-based line numbers.
fn records(
    reader: &mut csv::Reader<&[u8]>,
    width: usize,
    source: &str,
) -> Result<Vec<(u64, Vec<String>)>> {
    reader
        .records()
        .map(|rec| {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                KsttError::Ingestion(format!("{source} line {line}: malformed row: {e}"))
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != width {
                return Err(KsttError::Ingestion(format!(
                    "{source} line {line}: expected {width} fields, found {}",
                    rec.len()
                )));
            }
            let fields: Vec<String> = rec.iter().map(|f| f.trim().to_string()).collect();
            if fields.iter().any(String::is_empty) {
                return Err(KsttError::Ingestion(format!(
                    "{source} line {line}: empty field"
                )));
            }
            Ok((line, fields))
        })
        .collect()
}

fn reader(bytes: &[u8]) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().flexible(true).from_reader(bytes)
}

/// Groups rows by session, sorts each session by timestamp (stable, so equal
/// timestamps keep file order), drops sessions shorter than two clicks and
/// truncates longer than fifty to the most recent fifty. Sessions are
/// returned in order of first appearance in the file.
pub fn parse_sessions(bytes: &[u8], source: &str) -> Result<(Vec<Session>, IngestSummary)> {
    let mut rdr = reader(bytes);
    check_header(&mut rdr, &["session_id", "timestamp", "item_id"], source)?;
    let mut groups: IndexMap<String, Vec<Click>> = IndexMap::new();
    let mut summary = IngestSummary::default();
    for (line, f) in records(&mut rdr, 3, source)? {
        let timestamp: i64 = f[1].parse().map_err(|_| {
            KsttError::Ingestion(format!(
                "{source} line {line}: timestamp {:?} is not an integer",
                f[1]
            ))
        })?;
        summary.rows += 1;
        groups
            .entry(f[0].clone())
            .or_default()
            .push(Click::new(f[2].clone(), timestamp));
    }
    let mut sessions = Vec::with_capacity(groups.len());
    for (id, mut events) in groups {
        if events.len() < MIN_SESSION_LEN {
            summary.sessions_dropped_short += 1;
            continue;
        }
        events.sort_by_key(|c| c.timestamp);
        if events.len() > MAX_SESSION_LEN {
            events.drain(..events.len() - MAX_SESSION_LEN);
            summary.sessions_truncated += 1;
        }
        sessions.push(Session { id, events });
    }
    summary.sessions_kept = sessions.len();
    Ok((sessions, summary))
}

pub fn load_sessions(path: &Path) -> Result<(Vec<Session>, IngestSummary)> {
    parse_sessions(&open(path)?, &path.display().to_string())
}

/// Parses attribute rows, collapsing duplicates. When `known_items` is given,
/// rows for other items are dropped and counted.
pub fn parse_attributes(
    bytes: &[u8],
    source: &str,
    known_items: Option<&HashSet<String>>,
) -> Result<(AttributeMap, AttributeSummary)> {
    let mut map = AttributeMap::new();
    let mut summary = AttributeSummary::default();
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok((map, summary));
    }
    let mut rdr = reader(bytes);
    check_header(
        &mut rdr,
        &["item_id", "attribute_type", "attribute_value"],
        source,
    )?;
    for (line, f) in records(&mut rdr, 3, source)? {
        summary.rows += 1;
        if f[1].contains(':') || f[1] == "seq" {
            return Err(KsttError::Ingestion(format!(
                "{source} line {line}: attribute type {:?} is reserved or contains ':'",
                f[1]
            )));
        }
        if known_items.is_some_and(|k| !k.contains(&f[0])) {
            summary.dropped_unknown_item += 1;
            continue;
        }
        let fresh = map
            .entry(f[0].clone())
            .or_default()
            .insert((f[1].clone(), f[2].clone()));
        if !fresh {
            summary.duplicates += 1;
        }
    }
    Ok((map, summary))
}

pub fn load_attributes(
    path: &Path,
    known_items: Option<&HashSet<String>>,
) -> Result<(AttributeMap, AttributeSummary)> {
    parse_attributes(&open(path)?, &path.display().to_string(), known_items)
}

pub fn session_items(sessions: &[Session]) -> HashSet<String> {
    sessions
        .iter()
        .flat_map(|s| s.events.iter().map(|c| c.item.clone()))
        .collect()
}

pub fn write_sessions(out: &mut impl Write, sessions: &[Session]) -> std::io::Result<()> {
    writeln!(out, "session_id,timestamp,item_id")?;
    for s in sessions {
        for c in &s.events {
            writeln!(out, "{},{},{}", s.id, c.timestamp, c.item)?;
        }
    }
    Ok(())
}

pub fn write_attributes(out: &mut impl Write, attributes: &AttributeMap) -> std::io::Result<()> {
    writeln!(out, "item_id,attribute_type,attribute_value")?;
    for (item, attrs) in attributes {
        for (ty, val) in attrs {
            writeln!(out, "{item},{ty},{val}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sessions_are_grouped_and_sorted() {
        let csv = "session_id,timestamp,item_id\ns1,30,c\ns1,10,a\ns1,20,b\n";
        let (sessions, summary) = parse_sessions(csv.as_bytes(), "t").unwrap();
        assert_eq!(sessions.len(), 1);
        let items: Vec<_> = sessions[0].events.iter().map(|c| c.item.as_str()).collect();
        assert_eq!(items, ["a", "b", "c"]);
        assert_eq!(summary.rows, 3);
    }

    #[test]
    fn short_sessions_dropped_long_truncated() {
        let mut csv = String::from("session_id,timestamp,item_id\nlone,5,x\n");
        for i in 0..60 {
            csv.push_str(&format!("big,{i},i{i}\n"));
        }
        let (sessions, summary) = parse_sessions(csv.as_bytes(), "t").unwrap();
        assert_eq!(summary.sessions_dropped_short, 1);
        assert_eq!(summary.sessions_truncated, 1);
        assert_eq!(sessions.len(), 1);
        assert_eq!(sessions[0].len(), 50);
        assert_eq!(sessions[0].events[0].item, "i10");
        assert_eq!(sessions[0].events[49].item, "i59");
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let csv = "session_id,timestamp,item_id\ns1,1,a\ns1,notanumber,b\n";
        let err = parse_sessions(csv.as_bytes(), "log.csv")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 3") && err.contains("log.csv"), "{err}");

        let csv = "session_id,timestamp,item_id\ns1,1\n";
        let err = parse_sessions(csv.as_bytes(), "log.csv")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2"), "{err}");

        let err = parse_sessions(b"a,b,c\n", "log.csv")
            .unwrap_err()
            .to_string();
        assert!(err.contains("header"), "{err}");
    }

    #[test]
    fn attributes_dedup_and_filter() {
        let csv = "item_id,attribute_type,attribute_value\ni1,category,c7\ni1,category,c7\ni1,brand,b1\nghost,category,c1\n";
        let known: HashSet<String> = ["i1".to_string()].into();
        let (map, summary) = parse_attributes(csv.as_bytes(), "a", Some(&known)).unwrap();
        assert_eq!(map["i1"].len(), 2);
        assert!(map["i1"].contains(&("category".into(), "c7".into())));
        assert_eq!(summary.duplicates, 1);
        assert_eq!(summary.dropped_unknown_item, 1);

        let (empty, _) = parse_attributes(b"", "a", None).unwrap();
        assert!(empty.is_empty());
        let (empty, _) =
            parse_attributes(b"item_id,attribute_type,attribute_value\n", "a", None).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn ingestion_is_deterministic() {
        let csv = "session_id,timestamp,item_id\nb,2,x\na,1,y\nb,1,z\na,3,x\n";
        let dump = |bytes: &[u8]| {
            let (s, _) = parse_sessions(bytes, "t").unwrap();
            let mut out = Vec::new();
            write_sessions(&mut out, &s).unwrap();
            out
        };
        let first = dump(csv.as_bytes());
        assert_eq!(first, dump(csv.as_bytes()));
        // dump → parse → dump is a fixed point
        assert_eq!(first, dump(&first));
    }
}
