//! Seeded generator of a small, self-consistent knowledge base, question set
//! and word-embedding file.
//!
//! Every word is a generated pseudo-word. Facts pair a concept word `x` with
//! a one- or two-word attribute `y` drawn from a small pool of values per
//! relation; each `(x, relation)` pair occurs at most once. Questions name their relation through a per-relation cue word
//! and mention the side of the fact that is not the answer. Embeddings are
//! random unit vectors plus a shared offset per word class (concepts,
//! attributes, everything else) and one per relation (its values and its cue
//! word), loosely imitating the clustering of real word vectors.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{write_samples, AnswerSource, QaSample};
use crate::embeddings::{EmbeddingStore, TokenizerConfig};
use crate::kb::{Fact, KnowledgeBase, Relation, NUM_RELATIONS};
use crate::numerics::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_facts: usize,
    pub n_questions: usize,
    /// Concept (`x`-side) vocabulary size; also the visual-concept count.
    pub n_concepts: usize,
    pub embedding_dim: usize,
    /// Probability that an attribute entity has two words.
    pub two_word_fraction: f64,
    /// Size of the shared pool of `y` values per relation; 0 gives every
    /// fact a fresh value.
    pub values_per_relation: usize,
    /// Probability that a question asks for the `y` side.
    pub answer_y_fraction: f64,
    /// Whether `y`-side questions name the concept; when false they say
    /// "this" and only the visual concepts identify it.
    pub question_mentions_concept: bool,
    /// Extra random concepts added to each sample's concept list.
    pub distractor_concepts: usize,
    /// Name visual concepts by detector labels that differ from the entity
    /// words and have no word vector, so they add nothing to retrieval.
    pub opaque_concept_labels: bool,
    /// Length of the offset shared by all words of one type (concepts,
    /// attributes, other words).
    pub type_offset: f64,
    /// Length of the extra offset shared by the values and the cue word of
    /// one relation.
    pub relation_offset: f64,
    pub test_fraction: f64,
    /// Number of cross-validation folds to emit (0 = none).
    pub folds: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_facts: 2000,
            n_questions: 1000,
            n_concepts: 200,
            embedding_dim: 100,
            two_word_fraction: 0.5,
            values_per_relation: 12,
            answer_y_fraction: 0.5,
            question_mentions_concept: true,
            distractor_concepts: 0,
            opaque_concept_labels: false,
            type_offset: 0.5,
            relation_offset: 1.0,
            test_fraction: 0.2,
            folds: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("need at least {NUM_RELATIONS} facts, got {0}")]
    TooFewFacts(usize),
    #[error("{n_facts} facts need at least {needed} concepts (one fact per concept and relation), got {n_concepts}")]
    TooFewConcepts {
        n_facts: usize,
        n_concepts: usize,
        needed: usize,
    },
    #[error("{distractors} distractor concepts leave no room in a vocabulary of {n_concepts}")]
    TooManyDistractors { distractors: usize, n_concepts: usize },
    #[error("{0} must lie in [0, 1]")]
    Fraction(&'static str),
    #[error("embedding offsets must be finite and non-negative, got {0}")]
    Offset(f64),
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("cannot split {n} samples into {folds} folds")]
    Folds { n: usize, folds: usize },
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        if self.n_facts < NUM_RELATIONS {
            return Err(SpecError::TooFewFacts(self.n_facts));
        }
        let needed = self.n_facts.div_ceil(NUM_RELATIONS);
        if self.n_concepts < needed {
            return Err(SpecError::TooFewConcepts {
                n_facts: self.n_facts,
                n_concepts: self.n_concepts,
                needed,
            });
        }
        if self.distractor_concepts >= self.n_concepts {
            return Err(SpecError::TooManyDistractors {
                distractors: self.distractor_concepts,
                n_concepts: self.n_concepts,
            });
        }
        for (v, name) in [
            (self.two_word_fraction, "two_word_fraction"),
            (self.answer_y_fraction, "answer_y_fraction"),
            (self.test_fraction, "test_fraction"),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SpecError::Fraction(name));
            }
        }
        for v in [self.type_offset, self.relation_offset] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SpecError::Offset(v));
            }
        }
        if self.embedding_dim == 0 {
            return Err(SpecError::ZeroDim);
        }
        if self.folds > 0 && self.folds > self.n_questions {
            return Err(SpecError::Folds {
                n: self.n_questions,
                folds: self.folds,
            });
        }
        Ok(())
    }
}

/// Word used by `x`-side questions in place of the concept.
pub const OBJECT_WORD: &str = "object";

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub kb: KnowledgeBase,
    pub samples: Vec<QaSample>,
    pub embeddings: Vec<(String, Vec<f64>)>,
    pub concepts: Vec<String>,
    pub cue_words: Vec<String>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub folds: Vec<Vec<usize>>,
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st",
];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];

struct Lexicon {
    used: HashSet<String>,
}

impl Lexicon {
    fn new(tok: &TokenizerConfig) -> Self {
        let mut used: HashSet<String> = tok.stopwords().map(str::to_string).collect();
        used.insert(OBJECT_WORD.to_string());
        used.insert("this".to_string());
        Self { used }
    }

    fn fresh(&mut self, rng: &mut Rng) -> String {
        loop {
            let syllables = 2 + rng.below(3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS[rng.below(ONSETS.len())]);
                w.push_str(VOWELS[rng.below(VOWELS.len())]);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn unit_vector(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Generate a dataset. Deterministic in `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData, SpecError> {
    spec.validate()?;
    let tok = TokenizerConfig::default();
    let mut rng = Rng::new(spec.seed);
    let mut lex = Lexicon::new(&tok);

    let concepts: Vec<String> = (0..spec.n_concepts).map(|_| lex.fresh(&mut rng)).collect();
    let cue_words: Vec<String> = (0..NUM_RELATIONS).map(|_| lex.fresh(&mut rng)).collect();

    // Distinct (concept, relation) pairs; the first 13 cover every relation.
    let mut pairs: Vec<(usize, usize)> = (0..spec.n_concepts)
        .flat_map(|c| (0..NUM_RELATIONS).map(move |r| (c, r)))
        .collect();
    rng.shuffle(&mut pairs);
    let mut chosen: Vec<(usize, usize)> = Vec::with_capacity(spec.n_facts);
    let mut covered = [false; NUM_RELATIONS];
    for &(c, r) in &pairs {
        if !covered[r] {
            covered[r] = true;
            chosen.push((c, r));
        }
    }
    let mut in_chosen: HashSet<(usize, usize)> = chosen.iter().copied().collect();
    for &p in &pairs {
        if chosen.len() >= spec.n_facts {
            break;
        }
        if in_chosen.insert(p) {
            chosen.push(p);
        }
    }
    rng.shuffle(&mut chosen);

    let mut attribute_words: Vec<(String, usize)> = Vec::new();
    let mut new_value = |r: usize, rng: &mut Rng| -> String {
        let n_words = if rng.bernoulli(spec.two_word_fraction) { 2 } else { 1 };
        let words: Vec<String> = (0..n_words).map(|_| lex.fresh(rng)).collect();
        attribute_words.extend(words.iter().map(|w| (w.clone(), r)));
        words.join(" ")
    };
    let pools: Vec<Vec<String>> = (0..NUM_RELATIONS)
        .map(|r| (0..spec.values_per_relation).map(|_| new_value(r, &mut rng)).collect())
        .collect();
    let mut facts = Vec::with_capacity(spec.n_facts);
    for (id, &(c, r)) in chosen.iter().enumerate() {
        let y = if pools[r].is_empty() {
            new_value(r, &mut rng)
        } else {
            pools[r][rng.below(pools[r].len())].clone()
        };
        let fact = Fact::new(
            id as u64,
            &concepts[c],
            Relation::from_code(r).expect("relation code in range"),
            &y,
            "synthetic",
        )
        .expect("generated entities are non-empty");
        facts.push(fact);
    }

    // Word vectors: a unit vector plus a type offset.
    let dim = spec.embedding_dim;
    let scaled = |len: f64, rng: &mut Rng| -> Vec<f64> {
        unit_vector(dim, rng).into_iter().map(|x| x * len).collect()
    };
    let type_offsets: Vec<Vec<f64>> = (0..3).map(|_| scaled(spec.type_offset, &mut rng)).collect();
    let relation_offsets: Vec<Vec<f64>> = (0..NUM_RELATIONS)
        .map(|_| scaled(spec.relation_offset, &mut rng))
        .collect();
    let mut embeddings = Vec::new();
    let mut push = |word: &str, kind: usize, relation: Option<usize>, rng: &mut Rng| {
        let mut v = unit_vector(dim, rng);
        for (x, o) in v.iter_mut().zip(&type_offsets[kind]) {
            *x += o;
        }
        if let Some(r) = relation {
            for (x, o) in v.iter_mut().zip(&relation_offsets[r]) {
                *x += o;
            }
        }
        embeddings.push((word.to_string(), v));
    };
    for w in &concepts {
        push(w, 0, None, &mut rng);
    }
    for (w, r) in &attribute_words {
        push(w, 1, Some(*r), &mut rng);
    }
    // A cue word sits near the values of its relation, like "colour" and "red".
    for (r, w) in cue_words.iter().enumerate() {
        push(w, 2, Some(r), &mut rng);
    }
    push(OBJECT_WORD, 2, None, &mut rng);
    drop(push);

    let labels: Vec<String> = if spec.opaque_concept_labels {
        (0..concepts.len()).map(|_| lex.fresh(&mut rng)).collect()
    } else {
        concepts.clone()
    };
    let concept_index: std::collections::HashMap<&str, usize> =
        concepts.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();

    let mut fact_order: Vec<usize> = (0..facts.len()).collect();
    rng.shuffle(&mut fact_order);
    let mut samples = Vec::with_capacity(spec.n_questions);
    for q in 0..spec.n_questions {
        let fi = if spec.n_questions <= facts.len() {
            fact_order[q]
        } else {
            rng.below(facts.len())
        };
        let f = &facts[fi];
        let cue = &cue_words[f.r.code()];
        let (question, answer, source) = if rng.bernoulli(spec.answer_y_fraction) {
            let subject = if spec.question_mentions_concept { format!("the {}", f.x) } else { "this".to_string() };
            (format!("What is the {cue} of {subject}?"), f.y.clone(), AnswerSource::Y)
        } else {
            (format!("Which {OBJECT_WORD} has the {cue} {}?", f.y), f.x.clone(), AnswerSource::X)
        };
        let mut sample_concepts = vec![labels[concept_index[f.x.as_str()]].clone()];
        while sample_concepts.len() < 1 + spec.distractor_concepts {
            let c = &labels[rng.below(labels.len())];
            if !sample_concepts.contains(c) {
                sample_concepts.push(c.clone());
            }
        }
        rng.shuffle(&mut sample_concepts);
        samples.push(QaSample {
            id: format!("q{q:05}"),
            question,
            concepts: sample_concepts,
            fact_id: f.id,
            answer,
            answer_source: source,
        });
    }

    let (train, test) = crate::dataset::split_indices(samples.len(), spec.test_fraction, spec.seed ^ 0x5eed);
    let folds = if spec.folds > 0 {
        crate::dataset::k_folds(samples.len(), spec.folds, spec.seed ^ 0xf01d)
    } else {
        Vec::new()
    };
    Ok(SyntheticData {
        kb: KnowledgeBase::from_facts(facts).expect("generated ids are unique"),
        samples,
        embeddings,
        concepts: labels,
        cue_words,
        train,
        test,
        folds,
    })
}

impl SyntheticData {
    pub fn embedding_store(&self) -> EmbeddingStore {
        EmbeddingStore::from_rows(self.embeddings.clone()).expect("generated words are unique")
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<QaSample> {
        idx.iter().map(|&i| self.samples[i].clone()).collect()
    }

    /// Write `facts.jsonl`, `qa.jsonl`, `train.jsonl`, `test.jsonl`,
    /// `fold_<k>.jsonl`, `embeddings.txt` and `concepts.txt` into `dir`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> std::io::Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut buf = Vec::new();
        self.kb.write_jsonl(&mut buf)?;
        fs::write(dir.join("facts.jsonl"), &buf)?;
        let write_qa = |name: &str, samples: &[QaSample]| -> std::io::Result<()> {
            let mut buf = Vec::new();
            write_samples(samples, &mut buf)?;
            fs::write(dir.join(name), buf)
        };
        write_qa("qa.jsonl", &self.samples)?;
        write_qa("train.jsonl", &self.subset(&self.train))?;
        write_qa("test.jsonl", &self.subset(&self.test))?;
        for (k, fold) in self.folds.iter().enumerate() {
            write_qa(&format!("fold_{k}.jsonl"), &self.subset(fold))?;
        }
        let mut text = String::new();
        for (w, v) in &self.embeddings {
            text.push_str(w);
            for x in v {
                write!(text, " {x:.6}").unwrap();
            }
            text.push('\n');
        }
        fs::write(dir.join("embeddings.txt"), text)?;
        let mut names = self.concepts.join("\n");
        names.push('\n');
        fs::write(dir.join("concepts.txt"), names)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::validate_samples;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_facts: 60,
            n_questions: 40,
            n_concepts: 10,
            embedding_dim: 8,
            ..Default::default()
        }
    }

    #[test]
    fn sizes_and_consistency() {
        let d = generate(&small()).unwrap();
        assert_eq!(d.kb.len(), 60);
        assert_eq!(d.samples.len(), 40);
        validate_samples(&d.samples, &d.kb).unwrap();
        let store = d.embedding_store();
        let tok = TokenizerConfig::default();
        for f in d.kb.facts() {
            for w in crate::embeddings::tokenize(&format!("{} {}", f.x, f.y), &tok) {
                assert!(store.contains(&w), "{w} missing");
            }
        }
        let rels: HashSet<_> = d.kb.facts().map(|f| f.r).collect();
        assert_eq!(rels.len(), NUM_RELATIONS);
        assert_eq!(d.train.len() + d.test.len(), 40);
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let spec = SyntheticSpec {
            n_facts: 12,
            ..small()
        };
        assert_eq!(generate(&spec).unwrap_err(), SpecError::TooFewFacts(12));
        let spec = SyntheticSpec {
            n_concepts: 4,
            ..small()
        };
        assert!(matches!(generate(&spec), Err(SpecError::TooFewConcepts { .. })));
    }

    #[test]
    fn same_seed_same_output() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.embeddings, b.embeddings);
    }
}
