//! Node-representation parts: the visual-concept multi-hot vector and the
//! LSTM text encoders used for questions and entities.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{tokenize, EmbeddingStore, TokenizerConfig};
use crate::kb::normalize_entity;
use crate::numerics::{
    glorot_uniform, ones_row, zeros_row, BatchNormIds, BnMode, NumericsError, ParamId, ParamStore,
    Rng, Tape, Tensor, Var,
};

pub const UNK: &str = "<unk>";

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown visual concept {0:?}")]
    UnknownConcept(String),
    #[error("visual concept {name:?} on line {line} duplicates line {first_line}")]
    DuplicateConcept {
        name: String,
        line: usize,
        first_line: usize,
    },
    #[error("empty concept name on line {0}")]
    EmptyConcept(usize),
    #[error("word embeddings have dimension {found}, encoder expects {expected}")]
    EmbeddingDim { expected: usize, found: usize },
    #[error("parameter {0:?} missing from store")]
    MissingParam(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Ordered visual-concept names; a concept's index is its position.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct VisualConceptVocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for VisualConceptVocab {
    fn from(names: Vec<String>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, index }
    }
}

impl From<VisualConceptVocab> for Vec<String> {
    fn from(v: VisualConceptVocab) -> Self {
        v.names
    }
}

impl VisualConceptVocab {
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self, EncoderError> {
        let mut out = Vec::with_capacity(names.len());
        let mut index: HashMap<String, usize> = HashMap::new();
        for (i, raw) in names.iter().enumerate() {
            let name = normalize_entity(raw.as_ref()).map_err(|_| EncoderError::EmptyConcept(i + 1))?;
            if let Some(&first) = index.get(&name) {
                return Err(EncoderError::DuplicateConcept {
                    name,
                    line: i + 1,
                    first_line: first + 1,
                });
            }
            index.insert(name.clone(), i);
            out.push(name);
        }
        Ok(Self { names: out, index })
    }

    /// `concepts.txt`: one name per line.
    pub fn parse(text: &str) -> Result<Self, EncoderError> {
        let lines: Vec<&str> = text.lines().collect();
        Self::from_names(&lines)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EncoderError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        normalize_entity(name)
            .ok()
            .and_then(|n| self.index.get(&n).copied())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHot {
    pub vector: Vec<f64>,
    /// Concepts skipped because they are not in the vocabulary.
    pub unknown: usize,
}

/// Multi-hot image vector. In strict mode an unknown concept is an error; in
/// lenient mode it is skipped and counted.
pub fn multi_hot(
    concepts: &[String],
    vocab: &VisualConceptVocab,
    strict: bool,
) -> Result<MultiHot, EncoderError> {
    let mut vector = vec![0.0; vocab.len()];
    let mut unknown = 0;
    for c in concepts {
        match vocab.index_of(c) {
            Some(i) => vector[i] = 1.0,
            None if strict => return Err(EncoderError::UnknownConcept(c.clone())),
            None => unknown += 1,
        }
    }
    if unknown > 0 {
        warn!("skipped {unknown} unknown visual concept(s)");
    }
    Ok(MultiHot { vector, unknown })
}

/// Word list of a text encoder; row 0 is the unknown-word row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    /// `<unk>` followed by the distinct words in first-seen order.
    pub fn build<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list = vec![UNK.to_string()];
        let mut index = HashMap::from([(UNK.to_string(), 0)]);
        for w in words {
            let w = w.into();
            if !index.contains_key(&w) {
                index.insert(w.clone(), list.len());
                list.push(w);
            }
        }
        Self { words: list, index }
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

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Stochastic behaviour of one forward pass.
///
/// `rng = None` disables dropout. `batch_stats` selects per-batch batch-norm
/// statistics where a layer sees at least two rows; otherwise the stored
/// running statistics are used.
pub struct Pass<'r> {
    rng: Option<&'r mut Rng>,
    batch_stats: bool,
}

impl<'r> Pass<'r> {
    pub fn infer() -> Self {
        Self {
            rng: None,
            batch_stats: false,
        }
    }

    pub fn train(rng: &'r mut Rng) -> Self {
        Self {
            rng: Some(rng),
            batch_stats: true,
        }
    }

    /// Running statistics with an optional dropout source, for reproducible
    /// gradient checks.
    pub fn frozen(rng: Option<&'r mut Rng>) -> Self {
        Self {
            rng,
            batch_stats: false,
        }
    }

    pub fn is_training(&self) -> bool {
        self.batch_stats || self.rng.is_some()
    }

    pub fn bn_mode(&self, rows: usize) -> BnMode {
        if self.batch_stats && rows >= 2 {
            BnMode::Batch
        } else {
            BnMode::Running
        }
    }

    pub fn rng(&mut self) -> Option<&mut Rng> {
        self.rng.as_deref_mut()
    }
}

/// Register a batch-norm layer of width `dim` under `prefix`.
pub fn add_batch_norm(store: &mut ParamStore, prefix: &str, dim: usize) -> BatchNormIds {
    BatchNormIds {
        gamma: store.add(format!("{prefix}.gamma"), ones_row(dim)),
        beta: store.add(format!("{prefix}.beta"), zeros_row(dim)),
        running_mean: store.add_buffer(format!("{prefix}.running_mean"), zeros_row(dim)),
        running_var: store.add_buffer(format!("{prefix}.running_var"), ones_row(dim)),
    }
}

pub(crate) fn lookup(store: &ParamStore, name: String) -> Result<ParamId, EncoderError> {
    store.id(&name).ok_or(EncoderError::MissingParam(name))
}

pub fn bind_batch_norm(store: &ParamStore, prefix: &str) -> Result<BatchNormIds, EncoderError> {
    Ok(BatchNormIds {
        gamma: lookup(store, format!("{prefix}.gamma"))?,
        beta: lookup(store, format!("{prefix}.beta"))?,
        running_mean: lookup(store, format!("{prefix}.running_mean"))?,
        running_var: lookup(store, format!("{prefix}.running_var"))?,
    })
}

const GATES: [&str; 4] = ["i", "f", "o", "g"];

/// Gate weights over the concatenated `[x; h]` input, in the order
/// input, forget, output, candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmParams {
    pub w: [ParamId; 4],
    pub b: [ParamId; 4],
}

impl LstmParams {
    /// Glorot gate weights, zero biases except the forget gate at 1.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        let mut w = Vec::with_capacity(4);
        let mut b = Vec::with_capacity(4);
        for g in GATES {
            w.push(store.add(
                format!("{prefix}.w_{g}"),
                glorot_uniform(input + hidden, hidden, rng),
            ));
            let bias = if g == "f" { ones_row(hidden) } else { zeros_row(hidden) };
            b.push(store.add(format!("{prefix}.b_{g}"), bias));
        }
        Self {
            w: w.try_into().unwrap(),
            b: b.try_into().unwrap(),
        }
    }

    pub fn bind(store: &ParamStore, prefix: &str) -> Result<Self, EncoderError> {
        let mut w = Vec::with_capacity(4);
        let mut b = Vec::with_capacity(4);
        for g in GATES {
            w.push(lookup(store, format!("{prefix}.w_{g}"))?);
            b.push(lookup(store, format!("{prefix}.b_{g}"))?);
        }
        Ok(Self {
            w: w.try_into().unwrap(),
            b: b.try_into().unwrap(),
        })
    }

    pub fn hidden(&self, store: &ParamStore) -> usize {
        store.value(self.b[0]).cols()
    }
}

/// One LSTM cell step on a batch of rows:
/// `c' = f * c + i * g`, `h' = o * tanh(c')`.
pub fn lstm_step(
    tape: &mut Tape<'_>,
    x: Var,
    h: Var,
    c: Var,
    p: &LstmParams,
) -> Result<(Var, Var), NumericsError> {
    let xh = tape.concat_cols(&[x, h])?;
    let mut pre = [xh; 4];
    for k in 0..4 {
        let w = tape.param(p.w[k]);
        let b = tape.param(p.b[k]);
        pre[k] = tape.affine(xh, w, b)?;
    }
    let i = tape.sigmoid(pre[0]);
    let f = tape.sigmoid(pre[1]);
    let o = tape.sigmoid(pre[2]);
    let g = tape.tanh(pre[3]);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextEncoderConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub dropout: f64,
    /// Whether the word-vector table is updated during training.
    pub train_embeddings: bool,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 100,
            hidden: 128,
            dropout: 0.5,
            train_embeddings: true,
        }
    }
}

/// Trainable embedding table, single-layer LSTM, then batch norm and dropout
/// on the final hidden state.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    prefix: String,
    vocab: Vocab,
    config: TextEncoderConfig,
    embedding: ParamId,
    lstm: LstmParams,
    bn: BatchNormIds,
}

impl TextEncoder {
    /// Rows of in-vocabulary words are copied from `glove`; the others are
    /// Glorot-initialized.
    pub fn new(
        prefix: &str,
        vocab: Vocab,
        config: TextEncoderConfig,
        glove: &EmbeddingStore,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self, EncoderError> {
        if !glove.is_empty() && glove.dim() != config.input_dim {
            return Err(EncoderError::EmbeddingDim {
                expected: config.input_dim,
                found: glove.dim(),
            });
        }
        let mut table = glorot_uniform(vocab.len(), config.input_dim, rng);
        for (i, w) in vocab.words().iter().enumerate() {
            if let Some(row) = glove.lookup(w) {
                table.row_mut(i).copy_from_slice(row);
            }
        }
        let name = format!("{prefix}.embedding");
        let embedding = if config.train_embeddings {
            store.add(name, table)
        } else {
            store.add_buffer(name, table)
        };
        let lstm = LstmParams::register(
            store,
            &format!("{prefix}.lstm"),
            config.input_dim,
            config.hidden,
            rng,
        );
        let bn = add_batch_norm(store, &format!("{prefix}.bn"), config.hidden);
        Ok(Self {
            prefix: prefix.to_string(),
            vocab,
            config,
            embedding,
            lstm,
            bn,
        })
    }

    /// Re-attach to parameters previously registered under `prefix`.
    pub fn bind(
        prefix: &str,
        vocab: Vocab,
        config: TextEncoderConfig,
        store: &ParamStore,
    ) -> Result<Self, EncoderError> {
        Ok(Self {
            prefix: prefix.to_string(),
            embedding: lookup(store, format!("{prefix}.embedding"))?,
            lstm: LstmParams::bind(store, &format!("{prefix}.lstm"))?,
            bn: bind_batch_norm(store, &format!("{prefix}.bn"))?,
            vocab,
            config,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    pub fn embedding(&self) -> ParamId {
        self.embedding
    }

    pub fn lstm(&self) -> &LstmParams {
        &self.lstm
    }

    pub fn batch_norm(&self) -> &BatchNormIds {
        &self.bn
    }

    pub fn token_ids(&self, tokens: &[String]) -> Vec<usize> {
        self.vocab.ids(tokens)
    }

    /// Raw final hidden states (before batch norm) for a batch of token-id
    /// sequences of differing lengths. Rows of finished sequences keep their
    /// state; empty sequences stay at zero.
    pub fn final_hidden(
        &self,
        tape: &mut Tape<'_>,
        batch: &[Vec<usize>],
        pass: &mut Pass<'_>,
    ) -> Result<Var, NumericsError> {
        let n = batch.len();
        let hid = self.config.hidden;
        let mut h = tape.constant(Tensor::zeros(n, hid));
        let mut c = tape.constant(Tensor::zeros(n, hid));
        let steps = batch.iter().map(Vec::len).max().unwrap_or(0);
        let table = tape.param(self.embedding);
        for t in 0..steps {
            let ids: Vec<usize> = batch.iter().map(|s| s.get(t).copied().unwrap_or(0)).collect();
            let x = tape.gather_rows(table, &ids)?;
            let x = tape.dropout(x, self.config.dropout, pass.rng())?;
            let (h_next, c_next) = lstm_step(tape, x, h, c, &self.lstm)?;
            if batch.iter().all(|s| t < s.len()) {
                h = h_next;
                c = c_next;
            } else {
                let mut keep_new = Tensor::zeros(n, hid);
                for (r, s) in batch.iter().enumerate() {
                    if t < s.len() {
                        keep_new.row_mut(r).fill(1.0);
                    }
                }
                let keep_old = keep_new.map(|m| 1.0 - m);
                h = blend(tape, h_next, h, &keep_new, &keep_old)?;
                c = blend(tape, c_next, c, &keep_new, &keep_old)?;
            }
        }
        Ok(h)
    }

    /// `n x hidden` encodings. Empty sequences map to exact zero rows and
    /// take no part in the batch statistics.
    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        batch: &[Vec<usize>],
        pass: &mut Pass<'_>,
    ) -> Result<Var, NumericsError> {
        let hid = self.config.hidden;
        let nonempty: Vec<usize> = (0..batch.len()).filter(|&i| !batch[i].is_empty()).collect();
        if nonempty.is_empty() {
            return Ok(tape.constant(Tensor::zeros(batch.len(), hid)));
        }
        let seqs: Vec<Vec<usize>> = nonempty.iter().map(|&i| batch[i].clone()).collect();
        let h = self.final_hidden(tape, &seqs, pass)?;
        let mode = pass.bn_mode(seqs.len());
        let h = tape.batch_norm(h, &self.bn, mode)?;
        let h = tape.dropout(h, self.config.dropout, pass.rng())?;
        if nonempty.len() == batch.len() {
            return Ok(h);
        }
        let zero = tape.constant(Tensor::zeros(1, hid));
        let padded = tape.concat_rows(&[h, zero])?;
        let mut slot = vec![nonempty.len(); batch.len()];
        for (k, &i) in nonempty.iter().enumerate() {
            slot[i] = k;
        }
        tape.gather_rows(padded, &slot)
    }

    /// Inference-mode encoding of one text.
    pub fn encode_text(
        &self,
        store: &ParamStore,
        text: &str,
        tok: &TokenizerConfig,
    ) -> Result<Vec<f64>, NumericsError> {
        let ids = self.token_ids(&tokenize(text, tok));
        let mut tape = Tape::new(store);
        let out = self.encode(&mut tape, &[ids], &mut Pass::infer())?;
        Ok(tape.value(out).data().to_vec())
    }
}

fn blend(
    tape: &mut Tape<'_>,
    new: Var,
    old: Var,
    keep_new: &Tensor,
    keep_old: &Tensor,
) -> Result<Var, NumericsError> {
    let a = tape.mul_const(new, keep_new.clone())?;
    let b = tape.mul_const(old, keep_old.clone())?;
    tape.add(a, b)
}

/// `[image ‖ question ‖ entity]` feature of one node, inference mode.
pub fn node_feature(
    entity: &str,
    question_enc: &[f64],
    image_vec: &[f64],
    entity_encoder: &TextEncoder,
    store: &ParamStore,
    tok: &TokenizerConfig,
) -> Result<Vec<f64>, NumericsError> {
    let mut out = Vec::with_capacity(image_vec.len() + question_enc.len() + entity_encoder.config.hidden);
    out.extend_from_slice(image_vec);
    out.extend_from_slice(question_enc);
    out.extend(entity_encoder.encode_text(store, entity, tok)?);
    Ok(out)
}
