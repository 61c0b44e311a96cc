use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fallback for tokens missing from the table. Both variants are
/// deterministic per token.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum OovPolicy {
    /// Zero vector; neutral under mean pooling.
    Zeros,
    /// Token-hash-seeded uniform vector in [-0.1, 0.1].
    HashedUniform { seed: u64 },
}

/// Token -> dense vector map with a deterministic out-of-vocabulary
/// fallback.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    dim: usize,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<f64>,
    oov: OovPolicy,
}

impl EmbeddingTable {
    pub fn new(dim: usize, oov: OovPolicy) -> Self {
        EmbeddingTable {
            dim,
            tokens: Vec::new(),
            index: HashMap::new(),
            vectors: Vec::new(),
            oov,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn oov_policy(&self) -> OovPolicy {
        self.oov
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Insert a vector for `token`. Duplicates keep the first occurrence;
    /// returns whether the entry was inserted.
    pub fn insert(&mut self, token: &str, vector: Vec<f64>) -> Result<bool> {
        if vector.len() != self.dim {
            return Err(Error::Dimension {
                op: "embedding-insert",
                lhs: vec![self.dim],
                rhs: vec![vector.len()],
            });
        }
        if self.index.contains_key(token) {
            return Ok(false);
        }
        self.index.insert(token.to_string(), self.tokens.len());
        self.tokens.push(token.to_string());
        self.vectors.extend_from_slice(&vector);
        Ok(true)
    }

    /// Vector for a known token.
    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index
            .get(token)
            .map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    /// Vector for any token, applying the OOV policy when missing.
    pub fn lookup(&self, token: &str) -> Vec<f64> {
        match self.get(token) {
            Some(v) => v.to_vec(),
            None => self.oov_vector(token),
        }
    }

    fn oov_vector(&self, token: &str) -> Vec<f64> {
        match self.oov {
            OovPolicy::Zeros => vec![0.0; self.dim],
            OovPolicy::HashedUniform { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token) ^ seed);
                (0..self.dim).map(|_| rng.gen_range(-0.1..0.1)).collect()
            }
        }
    }
}

/// FNV-1a; stable across platforms and builds, unlike the std hasher.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Load a word2vec-style text file: one `token v1 ... vD` line per token.
/// A leading `count dim` header line is tolerated and skipped.
pub fn load_embeddings(path: impl AsRef<Path>, oov: OovPolicy) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| Error::data(format!("cannot open embeddings {}: {e}", path.display())))?;
    let reader = BufReader::new(file);

    let mut table: Option<EmbeddingTable> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().expect("non-empty line has a first field");
        let values: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let values = match values {
            Ok(v) => v,
            Err(_) if lineno == 0 => continue, // not parseable; treat as header
            Err(e) => {
                return Err(Error::data(format!(
                    "{}:{}: malformed embedding value: {e}",
                    path.display(),
                    lineno + 1
                )))
            }
        };
        // word2vec text files open with a "count dim" header.
        if lineno == 0 && values.len() == 1 && token.parse::<usize>().is_ok() {
            continue;
        }
        let table = table.get_or_insert_with(|| EmbeddingTable::new(values.len(), oov));
        table.insert(token, values).map_err(|_| {
            Error::data(format!(
                "{}:{}: vector length differs from dimension {} established earlier",
                path.display(),
                lineno + 1,
                table.dim
            ))
        })?;
    }
    table.ok_or_else(|| Error::data(format!("embeddings file {} is empty", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_small_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vec.txt");
        std::fs::write(&path, "book 1.0 0.0 0.5\nplay 0.0 1.0 -0.5\n").unwrap();
        let table = load_embeddings(&path, OovPolicy::Zeros).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(table.dim(), 3);
        assert_eq!(table.get("book").unwrap(), &[1.0, 0.0, 0.5]);
    }

    #[test]
    fn header_line_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vec.txt");
        std::fs::write(&path, "2 3\nbook 1.0 0.0 0.5\nplay 0.0 1.0 -0.5\n").unwrap();
        let table = load_embeddings(&path, OovPolicy::Zeros).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(table.dim(), 3);
    }

    #[test]
    fn inconsistent_dimension_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vec.txt");
        std::fs::write(&path, "book 1.0 0.0 0.5\nplay 0.0 1.0\n").unwrap();
        let err = load_embeddings(&path, OovPolicy::Zeros).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn duplicates_keep_first() {
        let mut t = EmbeddingTable::new(2, OovPolicy::Zeros);
        assert!(t.insert("a", vec![1.0, 2.0]).unwrap());
        assert!(!t.insert("a", vec![9.0, 9.0]).unwrap());
        assert_eq!(t.get("a").unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn oov_zeros_policy() {
        let t = EmbeddingTable::new(3, OovPolicy::Zeros);
        assert_eq!(t.lookup("missing"), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn oov_hashed_uniform_is_deterministic_per_token() {
        let t = EmbeddingTable::new(4, OovPolicy::HashedUniform { seed: 7 });
        let a = t.lookup("missing");
        let b = t.lookup("missing");
        let c = t.lookup("other");
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|v| v.abs() <= 0.1));
    }
}
