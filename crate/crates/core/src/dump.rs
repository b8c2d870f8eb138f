//! JSON-lines serialization of a replicated page-table.
//!
//! ```text
//! {"kind":"roots","roots":[f0,f1,...]}
//! {"kind":"node","replica_socket":s,"level":L,"frame":f,"socket":σ,"entries":[{"i":idx,"frame":f2,"socket":σ2,"p":1,"w":1,"h":0,"a":0,"d":0},...]}
//! ```
//!
//! The roots line comes first, one node per following line. Only present
//! entries are listed. Field order is fixed.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ParseError {
    fn at(line: usize, msg: impl Into<String>) -> Self {
        ParseError::Line {
            line,
            msg: msg.into(),
        }
    }

    /// 1-based line of the failure, if it was a content error.
    pub fn line(&self) -> Option<usize> {
        match self {
            ParseError::Line { line, .. } => Some(*line),
            ParseError::Io(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpEntry {
    pub i: u16,
    pub frame: u64,
    pub socket: usize,
    pub p: u8,
    pub w: u8,
    pub h: u8,
    pub a: u8,
    pub d: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpNode {
    pub replica_socket: usize,
    pub level: u8,
    pub frame: u64,
    pub socket: usize,
    pub entries: Vec<DumpEntry>,
}

impl DumpNode {
    /// Entries that terminate a translation: every level-1 entry and huge level-2 entries.
    pub fn leaf_entries(&self) -> impl Iterator<Item = &DumpEntry> {
        let level = self.level;
        self.entries
            .iter()
            .filter(move |e| level == 1 || (level == 2 && e.h == 1))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line {
    Roots { roots: Vec<u64> },
    Node(DumpNode),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SnapshotDump {
    /// Root frame used by each socket.
    pub roots: Vec<u64>,
    pub nodes: Vec<DumpNode>,
}

impl SnapshotDump {
    pub fn socket_count(&self) -> usize {
        self.roots.len()
    }

    /// Replica tree walked by threads on `observer`.
    pub fn replica_for(&self, observer: usize) -> Option<usize> {
        let root = *self.roots.get(observer)?;
        self.nodes
            .iter()
            .find(|n| n.frame == root)
            .map(|n| n.replica_socket)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> io::Result<()> {
        let roots = Line::Roots {
            roots: self.roots.clone(),
        };
        serde_json::to_writer(&mut out, &roots)?;
        out.write_all(b"\n")?;
        for node in &self.nodes {
            // Serializing a borrowed view avoids cloning every node.
            #[derive(Serialize)]
            struct NodeLine<'a> {
                kind: &'static str,
                #[serde(flatten)]
                node: &'a DumpNode,
            }
            serde_json::to_writer(&mut out, &NodeLine { kind: "node", node })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("JSON output is UTF-8")
    }

    pub fn parse<R: BufRead>(input: R) -> Result<Self, ParseError> {
        let mut dump: Option<SnapshotDump> = None;
        for (idx, line) in input.lines().enumerate() {
            let lineno = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line)
                .map_err(|e| ParseError::at(lineno, e.to_string()))?;
            match (parsed, dump.as_mut()) {
                (Line::Roots { roots }, None) => {
                    if roots.is_empty() {
                        return Err(ParseError::at(lineno, "empty roots array"));
                    }
                    dump = Some(SnapshotDump {
                        roots,
                        nodes: Vec::new(),
                    });
                }
                (Line::Roots { .. }, Some(_)) => {
                    return Err(ParseError::at(lineno, "duplicate roots line"))
                }
                (Line::Node(_), None) => {
                    return Err(ParseError::at(lineno, "expected roots line first"))
                }
                (Line::Node(node), Some(d)) => {
                    validate_node(&node, d.roots.len()).map_err(|m| ParseError::at(lineno, m))?;
                    d.nodes.push(node);
                }
            }
        }
        dump.ok_or_else(|| ParseError::at(1, "missing roots line"))
    }

    pub fn from_jsonl(text: &str) -> Result<Self, ParseError> {
        Self::parse(text.as_bytes())
    }
}

fn validate_node(node: &DumpNode, sockets: usize) -> Result<(), String> {
    if !(1..=4).contains(&node.level) {
        return Err(format!("level {} out of range", node.level));
    }
    if node.socket >= sockets || node.replica_socket >= sockets {
        return Err("socket out of range".into());
    }
    for e in &node.entries {
        if e.i >= 512 {
            return Err(format!("entry index {} out of range", e.i));
        }
        if e.socket >= sockets {
            return Err("entry socket out of range".into());
        }
        if [e.p, e.w, e.h, e.a, e.d].iter().any(|&b| b > 1) {
            return Err("flag values must be 0 or 1".into());
        }
        if e.h == 1 && node.level != 2 {
            return Err("huge entry outside level 2".into());
        }
    }
    Ok(())
}
