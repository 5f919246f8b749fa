//! Pretrained embedding tables in the word2vec text format.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{io_err, Error, Result};

/// Which annotation an embedding table is keyed by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableKind {
    Word,
    Lemma,
    Concept,
}

/// Key → fixed-dimension vector map. Absent keys resolve to the all-zero
/// padding vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    kind: TableKind,
    dim: usize,
    keys: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<f32>,
    padding: Vec<f32>,
}

impl EmbeddingTable {
    pub fn new(kind: TableKind, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("embedding dimension must be positive".into()));
        }
        Ok(Self {
            kind,
            dim,
            keys: Vec::new(),
            index: HashMap::new(),
            values: Vec::new(),
            padding: vec![0.0; dim],
        })
    }

    pub fn insert(&mut self, key: impl Into<String>, vector: &[f32]) -> Result<()> {
        let key = key.into();
        if vector.len() != self.dim {
            return Err(Error::Validation(format!(
                "vector for {key} has {} values, table dimension is {}",
                vector.len(),
                self.dim
            )));
        }
        if self.index.contains_key(&key) {
            return Err(Error::Validation(format!("duplicate embedding key {key}")));
        }
        self.index.insert(key.clone(), self.keys.len());
        self.keys.push(key);
        self.values.extend_from_slice(vector);
        Ok(())
    }

    /// Reads a table whose first line is `count dim` and whose remaining
    /// lines are `key v1 … v_dim`.
    pub fn load(path: impl AsRef<Path>, kind: TableKind) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, path, kind)
    }

    pub fn parse(text: &str, path: &Path, kind: TableKind) -> Result<Self> {
        let parse_err = |line: usize, detail: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            detail,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| parse_err(1, "missing `count dim` header".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let (count, dim) = match fields.as_slice() {
            [c, d] => (
                c.parse::<usize>().map_err(|e| parse_err(1, format!("bad count: {e}")))?,
                d.parse::<usize>().map_err(|e| parse_err(1, format!("bad dimension: {e}")))?,
            ),
            _ => return Err(parse_err(1, format!("header must be `count dim`, got {header:?}"))),
        };
        let mut table = Self::new(kind, dim).map_err(|_| parse_err(1, "dimension must be positive".into()))?;
        let mut row = Vec::with_capacity(dim);
        for (i, line) in lines {
            let mut fields = line.split_whitespace();
            let key = fields.next().unwrap_or_default();
            row.clear();
            for f in fields {
                let v = f
                    .parse::<f32>()
                    .map_err(|e| parse_err(i + 1, format!("row {key}: bad value {f:?}: {e}")))?;
                row.push(v);
            }
            if row.len() != dim {
                return Err(parse_err(
                    i + 1,
                    format!("row {key}: {} values, header declares {dim}", row.len()),
                ));
            }
            table.insert(key, &row)?;
        }
        if table.len() != count {
            return Err(parse_err(1, format!("header declares {count} rows, file has {}", table.len())));
        }
        Ok(table)
    }

    /// Writes the table in the format accepted by [`EmbeddingTable::load`].
    /// Values use the shortest representation that parses back exactly.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = format!("{} {}\n", self.len(), self.dim);
        for (i, key) in self.keys.iter().enumerate() {
            out.push_str(key);
            for v in self.row(i) {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(io_err(path))
    }

    pub fn kind(&self) -> TableKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.index.get(key).map(|&i| self.row(i))
    }

    /// Like [`get`](Self::get) but absent keys yield the zero vector.
    pub fn lookup(&self, key: &str) -> &[f32] {
        self.get(key).unwrap_or(&self.padding)
    }

    /// Row of `key` in [`to_matrix`](Self::to_matrix); 0 when absent.
    pub fn row_id(&self, key: &str) -> usize {
        self.index.get(key).map_or(0, |&i| i + 1)
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// `[len + 1, dim]` matrix whose row 0 is the zero padding vector and
    /// whose row `i + 1` holds the `i`-th key.
    pub fn to_matrix(&self) -> Tensor<f32> {
        let mut data = vec![0.0; self.dim];
        data.extend_from_slice(&self.values);
        Tensor::new([self.len() + 1, self.dim], data).expect("table matrix is consistent")
    }
}

/// Pretrained tables registered for caption encoding.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainedTables {
    pub word: Option<EmbeddingTable>,
    pub lemma: Option<EmbeddingTable>,
    pub concept: Option<EmbeddingTable>,
}

impl PretrainedTables {
    pub fn get(&self, kind: TableKind) -> Option<&EmbeddingTable> {
        match kind {
            TableKind::Word => self.word.as_ref(),
            TableKind::Lemma => self.lemma.as_ref(),
            TableKind::Concept => self.concept.as_ref(),
        }
    }
}
