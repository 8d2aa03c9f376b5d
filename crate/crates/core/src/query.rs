//! Query conditioning vectors: a trainable closed-vocabulary table plus a
//! loader for externally computed embeddings.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default table width for desk-scale models.
pub const DEFAULT_DIM: usize = 64;

const NORM_TOLERANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Table,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding {
    vector: Vec<f64>,
    source: EmbeddingSource,
}

impl QueryEmbedding {
    /// Wraps a raw vector, rejecting empty or non-finite input.
    pub fn new(vector: Vec<f64>, source: EmbeddingSource) -> Result<Self> {
        if vector.is_empty() {
            return Err(Error::InvalidConfig("empty embedding".into()));
        }
        if let Some(i) = vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding entry {i}")));
        }
        Ok(Self { vector, source })
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn source(&self) -> EmbeddingSource {
        self.source
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Scales to unit L2 norm. A zero vector cannot be normalized.
    pub fn normalize(mut self) -> Result<Self> {
        let n = self.norm();
        if n <= NORM_TOLERANCE_FLOOR {
            return Err(Error::NonFinite("zero-norm embedding".into()));
        }
        self.vector.iter_mut().for_each(|v| *v /= n);
        Ok(self)
    }
}

/// Lowercase, trim, and collapse internal whitespace runs to one space.
pub fn canonicalize(query: &str) -> String {
    query
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Canonical query keys and their |V|×D embedding table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    entries: Vec<String>,
    table: Tensor,
}

impl Vocabulary {
    /// Builds from already-canonical unique keys and a matching table.
    pub fn from_parts(entries: Vec<String>, table: Tensor) -> Result<Self> {
        let (rows, _) = if table.shape().len() == 2 {
            table.dims2()
        } else {
            return Err(Error::ShapeMismatch(format!(
                "embedding table shape {:?}",
                table.shape()
            )));
        };
        if rows != entries.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} keys for {rows} table rows",
                entries.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if *e != canonicalize(e) {
                return Err(Error::InvalidConfig(format!("key {e:?} is not canonical")));
            }
            if !seen.insert(e) {
                return Err(Error::InvalidConfig(format!("duplicate key {e:?}")));
            }
        }
        Ok(Self { entries, table })
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut Tensor {
        &mut self.table
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Row index of a query after canonicalization.
    pub fn index_of(&self, query: &str) -> Option<usize> {
        let key = canonicalize(query);
        self.entries.iter().position(|e| *e == key)
    }

    /// Writes the vocabulary as a JSON table file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: Vocabulary = serde_json::from_str(&text)?;
        Self::from_parts(raw.entries, raw.table)
    }

    /// A vocabulary whose rows are the given (already normalized) vectors.
    pub fn from_embeddings(map: &BTreeMap<String, QueryEmbedding>) -> Result<Self> {
        let dim = map.values().next().map_or(0, QueryEmbedding::dim);
        let mut data = Vec::with_capacity(map.len() * dim);
        for (k, v) in map {
            if v.dim() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "embedding {k:?} has dim {}, expected {dim}",
                    v.dim()
                )));
            }
            data.extend_from_slice(v.vector());
        }
        Self::from_parts(
            map.keys().cloned().collect(),
            Tensor::from_vec(&[map.len(), dim], data),
        )
    }
}

/// Deduplicated canonical vocabulary with a U(−1/√d, 1/√d) table drawn from `seed`.
/// Keys keep first-appearance order.
pub fn build_vocab(labels: &[impl AsRef<str>], d: usize, seed: u64) -> Result<Vocabulary> {
    if labels.is_empty() {
        return Err(Error::InvalidConfig("empty label list".into()));
    }
    if d == 0 {
        return Err(Error::InvalidConfig("embedding dimension must be positive".into()));
    }
    let mut entries: Vec<String> = Vec::new();
    for l in labels {
        let key = canonicalize(l.as_ref());
        if key.is_empty() {
            return Err(Error::InvalidConfig("blank label".into()));
        }
        if !entries.contains(&key) {
            entries.push(key);
        }
    }
    let bound = 1.0 / (d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..entries.len() * d)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    let table = Tensor::from_vec(&[entries.len(), d], data);
    Vocabulary::from_parts(entries, table)
}

/// L2-normalized table row for `query`.
pub fn embed_query(vocab: &Vocabulary, query: &str) -> Result<QueryEmbedding> {
    let i = vocab
        .index_of(query)
        .ok_or_else(|| Error::UnknownQuery(query.to_string()))?;
    let d = vocab.dim();
    let row = vocab.table.data()[i * d..(i + 1) * d].to_vec();
    QueryEmbedding::new(row, EmbeddingSource::Table)?.normalize()
}

#[derive(Deserialize)]
struct EmbeddingLine {
    key: String,
    vec: Vec<f64>,
}

/// Reads `{"key": ..., "vec": [...]}` lines. Keys are canonicalized and vectors
/// normalized; every vector must share one dimension.
pub fn load_external_embeddings(path: &Path) -> Result<BTreeMap<String, QueryEmbedding>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_external_embeddings(&text)
}

pub fn parse_external_embeddings(text: &str) -> Result<BTreeMap<String, QueryEmbedding>> {
    let mut out = BTreeMap::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::EmbeddingFile { line: line_no, msg };
        let parsed: EmbeddingLine = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let expected = *dim.get_or_insert(parsed.vec.len());
        if parsed.vec.len() != expected {
            return Err(err(format!(
                "dimension {} differs from {expected}",
                parsed.vec.len()
            )));
        }
        let key = canonicalize(&parsed.key);
        if key.is_empty() {
            return Err(err("blank key".into()));
        }
        let emb = QueryEmbedding::new(parsed.vec, EmbeddingSource::External)
            .and_then(QueryEmbedding::normalize)
            .map_err(|e| err(e.to_string()))?;
        if out.insert(key.clone(), emb).is_some() {
            return Err(err(format!("duplicate key {key:?}")));
        }
    }
    Ok(out)
}
