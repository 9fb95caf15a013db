//! GloVe-format word vectors, the tokenizer, and cosine similarity.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use thiserror::Error;

pub const DEFAULT_STOPWORDS: &str = include_str!("../assets/stopwords.txt");

/// Norms below this make a vector count as zero for cosine similarity.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: duplicate word {word:?} (first seen on line {first_line})")]
    DuplicateWord {
        word: String,
        line: usize,
        first_line: usize,
    },
    #[error("line {line}: expected {expected} values after the word, found {found}")]
    FieldCount {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: cannot parse {token:?} as a float")]
    BadFloat { line: usize, token: String },
    #[error("embedding file has no vectors")]
    Empty,
    #[error("vector dimensions differ: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
}

/// Immutable word -> vector table.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    words: Vec<String>,
    index: HashMap<String, usize>,
    matrix: Vec<f64>,
}

impl EmbeddingStore {
    pub fn from_rows(rows: Vec<(String, Vec<f64>)>) -> Result<Self, EmbeddingError> {
        let dim = rows.first().map(|(_, v)| v.len()).ok_or(EmbeddingError::Empty)?;
        let mut store = Self {
            dim,
            words: Vec::with_capacity(rows.len()),
            index: HashMap::with_capacity(rows.len()),
            matrix: Vec::with_capacity(rows.len() * dim),
        };
        for (line, (word, vec)) in rows.into_iter().enumerate() {
            store.push(word, vec, line + 1)?;
        }
        Ok(store)
    }

    fn push(&mut self, word: String, vec: Vec<f64>, line: usize) -> Result<(), EmbeddingError> {
        if vec.len() != self.dim {
            return Err(EmbeddingError::FieldCount {
                line,
                expected: self.dim,
                found: vec.len(),
            });
        }
        if let Some(&first) = self.index.get(&word) {
            return Err(EmbeddingError::DuplicateWord {
                word,
                line,
                first_line: first + 1,
            });
        }
        self.index.insert(word.clone(), self.words.len());
        self.words.push(word);
        self.matrix.extend(vec);
        Ok(())
    }

    /// Parse GloVe text: `word v1 v2 ... vd` per line, dimension taken from
    /// the first line. Blank lines are ignored.
    pub fn from_reader(reader: impl Read) -> Result<Self, EmbeddingError> {
        let mut store: Option<Self> = None;
        let mut first_lines: HashMap<String, usize> = HashMap::new();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            let mut fields = line.split(' ').filter(|f| !f.is_empty());
            let Some(word) = fields.next() else {
                continue;
            };
            let values = fields
                .map(|tok| {
                    tok.parse::<f64>().map_err(|_| EmbeddingError::BadFloat {
                        line: line_no,
                        token: tok.to_string(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let store = store.get_or_insert_with(|| Self {
                dim: values.len(),
                words: Vec::new(),
                index: HashMap::new(),
                matrix: Vec::new(),
            });
            if values.len() != store.dim {
                return Err(EmbeddingError::FieldCount {
                    line: line_no,
                    expected: store.dim,
                    found: values.len(),
                });
            }
            if let Some(&first_line) = first_lines.get(word) {
                return Err(EmbeddingError::DuplicateWord {
                    word: word.to_string(),
                    line: line_no,
                    first_line,
                });
            }
            first_lines.insert(word.to_string(), line_no);
            store.push(word.to_string(), values, line_no)?;
        }
        match store {
            Some(s) if s.dim > 0 => Ok(s),
            _ => Err(EmbeddingError::Empty),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// The stored row for `word`, or `None` when out of vocabulary.
    pub fn lookup(&self, word: &str) -> Option<&[f64]> {
        self.index
            .get(word)
            .map(|&i| &self.matrix[i * self.dim..(i + 1) * self.dim])
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingStore, EmbeddingError> {
    EmbeddingStore::from_reader(File::open(path)?)
}

/// Stop-word list applied after lowercasing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizerConfig {
    stopwords: BTreeSet<String>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self::from_word_list(DEFAULT_STOPWORDS)
    }
}

impl TokenizerConfig {
    /// One word per line; entries are lowercased so the set is closed under
    /// the tokenizer's own normalization.
    pub fn from_word_list(text: &str) -> Self {
        let stopwords = text
            .lines()
            .map(|l| l.trim().to_lowercase())
            .filter(|l| !l.is_empty())
            .collect();
        Self { stopwords }
    }

    pub fn without_stopwords() -> Self {
        Self {
            stopwords: BTreeSet::new(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        Ok(Self::from_word_list(&std::fs::read_to_string(path)?))
    }

    pub fn is_stopword(&self, word: &str) -> bool {
        self.stopwords.contains(word)
    }

    pub fn stopwords(&self) -> impl Iterator<Item = &str> {
        self.stopwords.iter().map(String::as_str)
    }
}

/// Lowercase, split on runs of non-alphanumeric characters, drop stop-words.
/// Order and duplicates are preserved.
pub fn tokenize(text: &str, config: &TokenizerConfig) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty() && !config.is_stopword(t))
        .map(str::to_string)
        .collect()
}

/// Cosine similarity; 0 when either vector is (numerically) zero.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, EmbeddingError> {
    if u.len() != v.len() {
        return Err(EmbeddingError::DimMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let (nu, nv) = (nu.sqrt(), nv.sqrt());
    if nu < COSINE_NORM_FLOOR || nv < COSINE_NORM_FLOOR {
        return Ok(0.0);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}
