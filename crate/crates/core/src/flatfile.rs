//! Flat float files: one UTF-8 header line of `key=value` fields followed by
//! little-endian `f64` values.
//!
//! ```text
//! muco-flat v1 kind=encoder count=2048 dim=8 ...\n<2048 * 8 bytes>
//! ```
//!
//! Encoder checkpoints and embedding buffer dumps share this layout, so a
//! dump written by one language binding can be read back by another.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{EmbeddingMatrix, RowLabel};

const MAGIC: &str = "muco-flat";
const VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq)]
pub struct FlatFile {
    /// Header fields in write order; `count` is managed automatically.
    pub fields: Vec<(String, String)>,
    pub values: Vec<f64>,
}

impl FlatFile {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            fields: Vec::new(),
            values,
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.fields.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::MalformedFile(format!("missing header field `{key}`")))
    }

    pub fn require_usize(&self, key: &str) -> Result<usize> {
        let v = self.require(key)?;
        v.parse()
            .map_err(|_| Error::MalformedFile(format!("field `{key}` is not an integer: `{v}`")))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut header = format!("{MAGIC} {VERSION} count={}", self.values.len());
        for (k, v) in &self.fields {
            if k == "count" || k.is_empty() || k.contains([' ', '=', '\n']) || v.contains([' ', '\n']) {
                return Err(Error::MalformedFile(format!("unencodable header field `{k}={v}`")));
            }
            header.push_str(&format!(" {k}={v}"));
        }
        header.push('\n');
        w.write_all(header.as_bytes())?;
        let mut buf = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let line = line
            .strip_suffix('\n')
            .ok_or_else(|| Error::MalformedFile("header line is not terminated".into()))?;
        let mut parts = line.split(' ');
        if parts.next() != Some(MAGIC) || parts.next() != Some(VERSION) {
            return Err(Error::MalformedFile("bad magic or version".into()));
        }
        let mut count = None;
        let mut fields = Vec::new();
        for part in parts {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::MalformedFile(format!("bad header field `{part}`")))?;
            if k == "count" {
                count = Some(
                    v.parse::<usize>()
                        .map_err(|_| Error::MalformedFile(format!("bad count `{v}`")))?,
                );
            } else {
                fields.push((k.to_string(), v.to_string()));
            }
        }
        let count = count.ok_or_else(|| Error::MalformedFile("missing count".into()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != count * 8 {
            return Err(Error::MalformedFile(format!(
                "expected {} payload bytes, found {}",
                count * 8,
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self { fields, values })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Buffer dump of an embedding matrix: `kind=embeddings rows= dim= labels=`.
pub fn embeddings_to_flat(m: &EmbeddingMatrix) -> FlatFile {
    let labels: Vec<String> = m.rows().iter().map(RowLabel::encode).collect();
    FlatFile::new(m.values().to_vec())
        .with("kind", "embeddings")
        .with("rows", m.len())
        .with("dim", m.dim())
        .with("labels", labels.join(","))
}

pub fn embeddings_from_flat(f: &FlatFile) -> Result<EmbeddingMatrix> {
    if f.get("kind") != Some("embeddings") {
        return Err(Error::MalformedFile("not an embedding dump".into()));
    }
    let rows = f.require_usize("rows")?;
    let dim = f.require_usize("dim")?;
    let labels_field = f.require("labels")?;
    let labels: Vec<RowLabel> = if labels_field.is_empty() {
        Vec::new()
    } else {
        labels_field
            .split(',')
            .map(|s| RowLabel::decode(s).ok_or_else(|| Error::MalformedFile(format!("bad row label `{s}`"))))
            .collect::<Result<_>>()?
    };
    if labels.len() != rows {
        return Err(Error::MalformedFile(format!("{} labels for {rows} rows", labels.len())));
    }
    EmbeddingMatrix::new(labels, dim, f.values.clone())
}
