//! Vocabulary construction and checkpoint glue for the two models.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::answer_model::{AnswerModel, AnswerModelConfig};
use crate::dataset::QaSample;
use crate::embeddings::{tokenize, TokenizerConfig};
use crate::encoders::{TextEncoderConfig, VisualConceptVocab, Vocab};
use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;
use crate::relation_model::RelationClassifier;

use super::checkpoint::Checkpoint;

/// Question-side vocabulary: every token of every question text.
pub fn question_vocab(samples: &[QaSample], tok: &TokenizerConfig) -> Vocab {
    Vocab::build(samples.iter().flat_map(|s| tokenize(&s.question, tok)))
}

/// Entity-side vocabulary: every token of every KB entity.
pub fn entity_vocab(kb: &KnowledgeBase, tok: &TokenizerConfig) -> Vocab {
    Vocab::build(kb.facts().flat_map(|f| {
        let mut t = tokenize(&f.x, tok);
        t.extend(tokenize(&f.y, tok));
        t
    }))
}

#[derive(Serialize, Deserialize)]
struct RelationMeta {
    kind: String,
    text: TextEncoderConfig,
    vocab: Vocab,
}

#[derive(Serialize, Deserialize)]
struct AnswerMeta {
    kind: String,
    model: AnswerModelConfig,
    concepts: VisualConceptVocab,
    question_vocab: Vocab,
    entity_vocab: Vocab,
}

pub fn relation_checkpoint(model: &RelationClassifier, seed: u64) -> Result<Checkpoint> {
    let meta = RelationMeta {
        kind: "relation".into(),
        text: *model.encoder().config(),
        vocab: model.encoder().vocab().clone(),
    };
    Ok(Checkpoint::from_store(model.store(), seed, serde_json::to_value(meta).map_err(json)?))
}

pub fn relation_from_checkpoint(ck: &Checkpoint) -> Result<RelationClassifier> {
    expect_kind(&ck.config, "relation")?;
    let meta: RelationMeta = serde_json::from_value(ck.config.clone()).map_err(json)?;
    RelationClassifier::from_store(ck.to_store(), meta.vocab, meta.text)
}

pub fn answer_checkpoint(model: &AnswerModel, seed: u64) -> Result<Checkpoint> {
    let meta = AnswerMeta {
        kind: "answer".into(),
        model: model.config().clone(),
        concepts: model.concepts().clone(),
        question_vocab: model.question_encoder().vocab().clone(),
        entity_vocab: model.entity_encoder().vocab().clone(),
    };
    Ok(Checkpoint::from_store(model.store(), seed, serde_json::to_value(meta).map_err(json)?))
}

pub fn answer_from_checkpoint(ck: &Checkpoint) -> Result<AnswerModel> {
    expect_kind(&ck.config, "answer")?;
    let meta: AnswerMeta = serde_json::from_value(ck.config.clone()).map_err(json)?;
    AnswerModel::from_store(
        ck.to_store(),
        meta.model,
        meta.concepts,
        meta.question_vocab,
        meta.entity_vocab,
    )
}

pub fn save_relation(model: &RelationClassifier, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    Ok(relation_checkpoint(model, seed)?.save(path)?)
}

pub fn load_relation(path: impl AsRef<Path>) -> Result<RelationClassifier> {
    relation_from_checkpoint(&Checkpoint::load(path)?)
}

pub fn save_answer(model: &AnswerModel, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    Ok(answer_checkpoint(model, seed)?.save(path)?)
}

pub fn load_answer(path: impl AsRef<Path>) -> Result<AnswerModel> {
    answer_from_checkpoint(&Checkpoint::load(path)?)
}

fn expect_kind(config: &Value, kind: &str) -> Result<()> {
    match config.get("kind").and_then(Value::as_str) {
        Some(k) if k == kind => Ok(()),
        other => Err(Error::Validation(format!(
            "expected a {kind} checkpoint, found {}",
            other.unwrap_or("an unlabelled one")
        ))),
    }
}

fn json(e: serde_json::Error) -> Error {
    Error::Validation(format!("checkpoint config: {e}"))
}
