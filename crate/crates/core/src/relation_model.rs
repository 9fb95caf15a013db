//! Question classifier over the closed relation set.

use std::collections::BTreeSet;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::embeddings::{tokenize, EmbeddingStore, TokenizerConfig};
use crate::encoders::{lookup, Pass, TextEncoder, TextEncoderConfig, Vocab};
use crate::error::{Error, Result};
use crate::kb::{Relation, NUM_RELATIONS};
use crate::numerics::{
    glorot_uniform, zeros_row, Gradients, Optimizer, OptimizerKind, ParamId, ParamStore, Rng,
    Tape, Var, BN_MOMENTUM,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelationTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for RelationTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            optimizer: OptimizerKind::default(),
        }
    }
}

/// Text encoder, a linear layer to 13 logits, softmax.
#[derive(Clone, Debug)]
pub struct RelationClassifier {
    store: ParamStore,
    encoder: TextEncoder,
    w: ParamId,
    b: ParamId,
}

impl RelationClassifier {
    pub fn new(
        vocab: Vocab,
        config: TextEncoderConfig,
        glove: &EmbeddingStore,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let encoder = TextEncoder::new("question", vocab, config, glove, &mut store, &mut rng)?;
        let w = store.add("out.w", glorot_uniform(config.hidden, NUM_RELATIONS, &mut rng));
        let b = store.add("out.b", zeros_row(NUM_RELATIONS));
        Ok(Self {
            store,
            encoder,
            w,
            b,
        })
    }

    /// Rebuild from stored parameters (checkpoint loading).
    pub fn from_store(store: ParamStore, vocab: Vocab, config: TextEncoderConfig) -> Result<Self> {
        let encoder = TextEncoder::bind("question", vocab, config, &store)?;
        let w = lookup(&store, "out.w".into())?;
        let b = lookup(&store, "out.b".into())?;
        Ok(Self {
            store,
            encoder,
            w,
            b,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &TextEncoder {
        &self.encoder
    }

    /// `n x 13` logits for a batch of token-id sequences.
    pub fn logits(&self, tape: &mut Tape<'_>, batch: &[Vec<usize>], pass: &mut Pass<'_>) -> Result<Var> {
        let enc = self.encoder.encode(tape, batch, pass)?;
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        Ok(tape.affine(enc, w, b)?)
    }

    /// Softmax over the 13 relations, indexed by relation code.
    pub fn probabilities(&self, question: &str, tok: &TokenizerConfig) -> Result<Vec<f64>> {
        let ids = self.encoder.token_ids(&tokenize(question, tok));
        let mut tape = Tape::new(&self.store);
        let logits = self.logits(&mut tape, &[ids], &mut Pass::infer())?;
        Ok(softmax(tape.value(logits).data()))
    }

    /// All relations by descending probability, ties by relation code.
    pub fn predict_relation(&self, question: &str, tok: &TokenizerConfig) -> Result<Vec<(Relation, f64)>> {
        Ok(rank_relations(&self.probabilities(question, tok)?))
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Pair probabilities with relations and sort descending (ties by code).
pub fn rank_relations(probs: &[f64]) -> Vec<(Relation, f64)> {
    let mut ranked: Vec<(Relation, f64)> = Relation::ALL.iter().copied().zip(probs.iter().copied()).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.code().cmp(&b.0.code())));
    ranked
}

/// The first `k` relations of a ranking.
pub fn top_k_relations(ranked: &[(Relation, f64)], k: usize) -> BTreeSet<Relation> {
    ranked.iter().take(k).map(|(r, _)| *r).collect()
}

/// Mini-batch training with softmax cross-entropy. Returns the mean training
/// loss of every epoch.
pub fn train_relation(
    model: &mut RelationClassifier,
    pairs: &[(String, Relation)],
    tok: &TokenizerConfig,
    config: &RelationTrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let data: Vec<(Vec<usize>, usize)> = pairs
        .iter()
        .map(|(q, r)| (model.encoder.token_ids(&tokenize(q, tok)), r.code()))
        .collect();
    let mut rng = Rng::new(seed);
    let mut dropout_rng = rng.fork();
    let mut optimizer = Optimizer::new(config.optimizer, &model.store);
    let mut grads = Gradients::zeros_like(&model.store);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| data[i].0.clone()).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| data[i].1).collect();
            grads.zero();
            let updates = {
                let mut tape = Tape::new(&model.store);
                let mut pass = Pass::train(&mut dropout_rng);
                let logits = model.logits(&mut tape, &batch, &mut pass)?;
                let loss = tape.softmax_cross_entropy(logits, &targets)?;
                let value = tape.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::NonFinite { what: "relation loss", epoch });
                }
                total += value * chunk.len() as f64;
                tape.backward(loss, &mut grads)?;
                tape.take_running_updates()
            };
            if !grads.all_finite() {
                return Err(Error::NonFinite { what: "relation gradient", epoch });
            }
            model.store.apply_running_updates(&updates, BN_MOMENTUM);
            optimizer.step(&mut model.store, &grads);
        }
        let mean = total / data.len() as f64;
        debug!("relation epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }
    Ok(history)
}

/// Fraction of pairs whose relation is among the top `k` predictions.
pub fn relation_accuracy(
    model: &RelationClassifier,
    pairs: &[(String, Relation)],
    tok: &TokenizerConfig,
    k: usize,
) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (q, r) in pairs {
        let ranked = model.predict_relation(q, tok)?;
        if top_k_relations(&ranked, k).contains(r) {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_breaks_ties_by_code() {
        let mut probs = vec![0.0; NUM_RELATIONS];
        probs[5] = 0.4;
        probs[2] = 0.4;
        probs[9] = 0.2;
        let ranked = rank_relations(&probs);
        assert_eq!(ranked[0].0.code(), 2);
        assert_eq!(ranked[1].0.code(), 5);
        assert_eq!(ranked[2].0.code(), 9);
        let top3 = top_k_relations(&ranked, 3);
        assert_eq!(top3.len(), 3);
        assert!(top3.contains(&ranked[0].0));
        assert_eq!(top_k_relations(&ranked, 13).len(), 13);
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let p = softmax(&[1.0, 2.0, 3.0, -700.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let q = softmax(&[1001.0, 1002.0, 1003.0, 300.0]);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
