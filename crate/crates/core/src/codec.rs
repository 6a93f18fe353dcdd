//! Self-describing text container for adapter checkpoints, federation
//! payloads and dataset dumps.
//!
//! ```text
//! fedalt-container 1
//! kind upload
//! client 3
//! round 7
//! layers 0 1
//! meta strategy fedalt
//! entry 0 A_L 2 4
//! 0.125 -1.5 3 0
//! 2.5e-7 1 0 -0
//! end
//! ```
//!
//! Matrix values are written with Rust's shortest round-trip `f64` formatting,
//! one matrix row per line, so decoding reproduces every bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

const MAGIC: &str = "fedalt-container";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub layer: usize,
    pub role: String,
    pub matrix: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub client: usize,
    pub round: usize,
    pub layers: Vec<usize>,
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn new(kind: impl Into<String>, client: usize, round: usize) -> Self {
        Container {
            kind: kind.into(),
            client,
            round,
            layers: Vec::new(),
            meta: BTreeMap::new(),
            entries: Vec::new(),
        }
    }

    /// Appends a matrix and registers its layer in the header.
    pub fn push(&mut self, layer: usize, role: impl Into<String>, matrix: Matrix) {
        if !self.layers.contains(&layer) {
            self.layers.push(layer);
            self.layers.sort_unstable();
        }
        self.entries.push(Entry {
            layer,
            role: role.into(),
            matrix,
        });
    }

    pub fn get(&self, layer: usize, role: &str) -> Option<&Matrix> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.role == role)
            .map(|e| &e.matrix)
    }

    pub fn roles(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.role.as_str())
    }

    pub fn encode(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC} {VERSION}");
        let _ = writeln!(out, "kind {}", self.kind);
        let _ = writeln!(out, "client {}", self.client);
        let _ = writeln!(out, "round {}", self.round);
        out.push_str("layers");
        for id in &self.layers {
            let _ = write!(out, " {id}");
        }
        out.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for e in &self.entries {
            let _ = writeln!(out, "entry {} {} {} {}", e.layer, e.role, e.matrix.rows(), e.matrix.cols());
            for i in 0..e.matrix.rows() {
                let row: Vec<String> = e.matrix.row(i).iter().map(|v| format!("{v}")).collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn decode(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| -> Result<(usize, &str)> {
            lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                reason: format!("unexpected end of input, expected {what}"),
            })
        };

        let (n, header) = next("magic")?;
        if header != format!("{MAGIC} {VERSION}") {
            return Err(parse_err(n, format!("bad magic line `{header}`")));
        }
        let kind = field(next("kind")?, "kind")?.to_string();
        let client = parse_num(next("client")?, "client")?;
        let round = parse_num(next("round")?, "round")?;
        let (n, layers_line) = next("layers")?;
        let layers: Vec<usize> = match layers_line.strip_prefix("layers") {
            Some(rest) => rest
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| parse_err(n, format!("bad layer id `{t}`"))))
                .collect::<Result<_>>()?,
            None => return Err(parse_err(n, "expected `layers`")),
        };

        let mut meta = BTreeMap::new();
        let mut entries = Vec::new();
        loop {
            let (n, line) = next("entry or end")?;
            let mut toks = line.split_whitespace();
            match toks.next() {
                Some("end") => break,
                Some("meta") => {
                    let key = toks.next().ok_or_else(|| parse_err(n, "meta without key"))?;
                    let value: Vec<&str> = toks.collect();
                    meta.insert(key.to_string(), value.join(" "));
                }
                Some("entry") => {
                    let toks: Vec<&str> = toks.collect();
                    if toks.len() != 4 {
                        return Err(parse_err(n, "entry needs: layer role rows cols"));
                    }
                    let layer: usize = toks[0].parse().map_err(|_| parse_err(n, "bad layer id"))?;
                    if !layers.contains(&layer) {
                        return Err(parse_err(n, format!("layer {layer} not declared in header")));
                    }
                    let role = toks[1].to_string();
                    let rows: usize = toks[2].parse().map_err(|_| parse_err(n, "bad row count"))?;
                    let cols: usize = toks[3].parse().map_err(|_| parse_err(n, "bad column count"))?;
                    let mut data = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        let (n, row) = next("matrix row")?;
                        let before = data.len();
                        for t in row.split_whitespace() {
                            let v: f64 = t.parse().map_err(|_| parse_err(n, format!("bad number `{t}`")))?;
                            if !v.is_finite() {
                                return Err(parse_err(n, "non-finite value"));
                            }
                            data.push(v);
                        }
                        if data.len() - before != cols {
                            return Err(parse_err(n, format!("expected {cols} values")));
                        }
                    }
                    entries.push(Entry {
                        layer,
                        role,
                        matrix: Matrix::from_vec(rows, cols, data)?,
                    });
                }
                _ => return Err(parse_err(n, format!("unexpected line `{line}`"))),
            }
        }
        Ok(Container {
            kind,
            client,
            round,
            layers,
            meta,
            entries,
        })
    }
}

fn parse_err(line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        line,
        reason: reason.into(),
    }
}

fn field<'a>((n, line): (usize, &'a str), key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .map(str::trim)
        .ok_or_else(|| parse_err(n, format!("expected `{key}`")))
}

fn parse_num((n, line): (usize, &str), key: &str) -> Result<usize> {
    field((n, line), key)?
        .parse()
        .map_err(|_| parse_err(n, format!("bad value for `{key}`")))
}
