//! Question/answer samples and their validation against a knowledge base.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{normalize_entity, FactId, KnowledgeBase, Relation};
use crate::numerics::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerSource {
    X,
    Y,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaSample {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub concepts: Vec<String>,
    pub fact_id: FactId,
    pub answer: String,
    pub answer_source: AnswerSource,
}

impl QaSample {
    /// Normalized ground-truth answer.
    pub fn normalized_answer(&self) -> String {
        normalize_entity(&self.answer).unwrap_or_default()
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed JSON: {message}")]
    Json { line: usize, message: String },
    #[error("sample {id}: duplicate id (first seen at line {first_line})")]
    DuplicateId { id: String, first_line: usize },
    #[error("sample {id}: fact {fact_id} is not in the knowledge base")]
    DanglingFact { id: String, fact_id: FactId },
    #[error("sample {id}: answer {answer:?} does not match side {side:?} of fact {fact_id} ({expected:?})")]
    AnswerMismatch {
        id: String,
        fact_id: FactId,
        side: AnswerSource,
        answer: String,
        expected: String,
    },
    #[error("empty dataset")]
    Empty,
}

/// Parse `qa.jsonl`. Blank lines are skipped.
pub fn read_samples(reader: impl Read) -> Result<Vec<QaSample>, DatasetError> {
    let mut out = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let s: QaSample = serde_json::from_str(&line).map_err(|e| DatasetError::Json {
            line: lineno,
            message: e.to_string(),
        })?;
        if let Some(&first_line) = seen.get(&s.id) {
            return Err(DatasetError::DuplicateId { id: s.id, first_line });
        }
        seen.insert(s.id.clone(), lineno);
        out.push(s);
    }
    Ok(out)
}

pub fn load_samples(path: impl AsRef<Path>) -> Result<Vec<QaSample>, DatasetError> {
    read_samples(File::open(path)?)
}

pub fn write_samples(samples: &[QaSample], mut w: impl Write) -> std::io::Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Every sample must reference an existing fact and answer with the side it
/// declares.
pub fn validate_samples(samples: &[QaSample], kb: &KnowledgeBase) -> Result<(), DatasetError> {
    for s in samples {
        let fact = kb.get(s.fact_id).ok_or_else(|| DatasetError::DanglingFact {
            id: s.id.clone(),
            fact_id: s.fact_id,
        })?;
        let expected = match s.answer_source {
            AnswerSource::X => &fact.x,
            AnswerSource::Y => &fact.y,
        };
        let expected = normalize_entity(expected).unwrap_or_default();
        if s.normalized_answer() != expected {
            return Err(DatasetError::AnswerMismatch {
                id: s.id.clone(),
                fact_id: s.fact_id,
                side: s.answer_source,
                answer: s.answer.clone(),
                expected,
            });
        }
    }
    Ok(())
}

/// `(question, relation of its ground-truth fact)` pairs.
pub fn relation_pairs(samples: &[QaSample], kb: &KnowledgeBase) -> Vec<(String, Relation)> {
    samples
        .iter()
        .filter_map(|s| kb.get(s.fact_id).map(|f| (s.question.clone(), f.r)))
        .collect()
}

/// Shuffled split into `(train, test)` index lists; `test_fraction` is
/// rounded to the nearest sample count.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut idx);
    let n_test = ((n as f64) * test_fraction.clamp(0.0, 1.0)).round() as usize;
    let train = idx.split_off(n_test);
    let mut test = idx;
    test.sort_unstable();
    let mut train = train;
    train.sort_unstable();
    (train, test)
}

/// `k` disjoint test folds covering `0..n` after a seeded shuffle.
pub fn k_folds(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(k >= 1, "need at least one fold");
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut idx);
    let mut folds = vec![Vec::new(); k];
    for (pos, i) in idx.into_iter().enumerate() {
        folds[pos % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    folds
}
