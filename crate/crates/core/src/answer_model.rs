//! Graph convolutional answer selector: node features, two propagation
//! layers, a per-node MLP with sigmoid output, training and evaluation.

use std::collections::BTreeSet;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::QaSample;
use crate::embeddings::{tokenize, EmbeddingStore, TokenizerConfig};
use crate::encoders::{
    add_batch_norm, bind_batch_norm, lookup, multi_hot, Pass, TextEncoder, TextEncoderConfig,
    VisualConceptVocab, Vocab,
};
use crate::error::{Error, Result};
use crate::kb::{normalize_entity, FactId, KnowledgeBase, Relation};
use crate::numerics::{
    glorot_uniform, zeros_row, BatchNormIds, Gradients, NumericsError, Optimizer, OptimizerKind,
    ParamId, ParamStore, Rng, Tape, Tensor, Var, BN_MOMENTUM,
};
use crate::relation_model::{top_k_relations, RelationClassifier};
use crate::retrieval::{
    build_entity_graph, filter_with_fallback, normalized_adjacency, EntityGraph, Retriever,
    ScoredFact,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnswerModelConfig {
    pub text: TextEncoderConfig,
    pub gcn_layers: usize,
    pub gcn_width: usize,
    pub use_mlp_hidden: bool,
    pub mlp_hidden: usize,
    pub dropout: f64,
    /// Zero the visual-concept part of every node feature.
    pub ablate_vc: bool,
}

impl Default for AnswerModelConfig {
    fn default() -> Self {
        Self {
            text: TextEncoderConfig::default(),
            gcn_layers: 2,
            gcn_width: 512,
            use_mlp_hidden: true,
            mlp_hidden: 128,
            dropout: 0.5,
            ablate_vc: false,
        }
    }
}

/// Which relations filter the retrieved facts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelationMode {
    /// Top-1 predicted relation.
    #[serde(rename = "1")]
    One,
    /// Top-3 predicted relations.
    #[default]
    #[serde(rename = "3")]
    Three,
    /// The ground-truth relation of the sample's fact.
    #[serde(rename = "gt")]
    Gt,
}

impl std::str::FromStr for RelationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "1" => Ok(RelationMode::One),
            "3" => Ok(RelationMode::Three),
            "gt" => Ok(RelationMode::Gt),
            other => Err(format!("relation mode must be 1, 3 or gt, got {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnswerTrainConfig {
    pub epochs: usize,
    /// Question graphs per optimizer step.
    pub batch_graphs: usize,
    pub optimizer: OptimizerKind,
    pub pos_weight: f64,
    /// Leave out samples whose answer is not among the candidates.
    pub skip_unanswerable: bool,
}

impl Default for AnswerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_graphs: 16,
            optimizer: OptimizerKind::default(),
            pos_weight: 1.0,
            skip_unanswerable: false,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct GcnLayer {
    w: ParamId,
    bn: BatchNormIds,
}

#[derive(Clone, Copy, Debug)]
struct MlpHidden {
    w: ParamId,
    b: ParamId,
    bn: BatchNormIds,
}

/// Model-ready view of one question: its candidate graph and inputs.
#[derive(Clone, Debug)]
pub struct GraphSample {
    pub graph: EntityGraph,
    pub a_norm: Tensor,
    pub image: Vec<f64>,
    pub question_ids: Vec<usize>,
    pub entity_ids: Vec<Vec<usize>>,
    pub labels: Vec<f64>,
}

impl GraphSample {
    pub fn node_count(&self) -> usize {
        self.graph.node_count()
    }

    pub fn has_answer(&self) -> bool {
        self.labels.iter().any(|&y| y > 0.0)
    }
}

#[derive(Clone, Debug)]
pub struct AnswerModel {
    store: ParamStore,
    config: AnswerModelConfig,
    concepts: VisualConceptVocab,
    question: TextEncoder,
    entity: TextEncoder,
    gcn: Vec<GcnLayer>,
    hidden: Option<MlpHidden>,
    out_w: ParamId,
    out_b: ParamId,
}

impl AnswerModel {
    pub fn new(
        config: AnswerModelConfig,
        concepts: VisualConceptVocab,
        question_vocab: Vocab,
        entity_vocab: Vocab,
        glove: &EmbeddingStore,
        seed: u64,
    ) -> Result<Self> {
        validate_config(&config)?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let question = TextEncoder::new("question", question_vocab, config.text, glove, &mut store, &mut rng)?;
        let entity = TextEncoder::new("entity", entity_vocab, config.text, glove, &mut store, &mut rng)?;
        let mut width = concepts.len() + 2 * config.text.hidden;
        let mut gcn = Vec::with_capacity(config.gcn_layers);
        for l in 0..config.gcn_layers {
            let w = store.add(format!("gcn.{l}.w"), glorot_uniform(width, config.gcn_width, &mut rng));
            let bn = add_batch_norm(&mut store, &format!("gcn.{l}.bn"), config.gcn_width);
            gcn.push(GcnLayer { w, bn });
            width = config.gcn_width;
        }
        let hidden = if config.use_mlp_hidden {
            let w = store.add("mlp.hidden.w", glorot_uniform(width, config.mlp_hidden, &mut rng));
            let b = store.add("mlp.hidden.b", zeros_row(config.mlp_hidden));
            let bn = add_batch_norm(&mut store, "mlp.bn", config.mlp_hidden);
            width = config.mlp_hidden;
            Some(MlpHidden { w, b, bn })
        } else {
            None
        };
        let out_w = store.add("mlp.out.w", glorot_uniform(width, 1, &mut rng));
        let out_b = store.add("mlp.out.b", zeros_row(1));
        Ok(Self {
            store,
            config,
            concepts,
            question,
            entity,
            gcn,
            hidden,
            out_w,
            out_b,
        })
    }

    /// Rebuild from stored parameters (checkpoint loading).
    pub fn from_store(
        store: ParamStore,
        config: AnswerModelConfig,
        concepts: VisualConceptVocab,
        question_vocab: Vocab,
        entity_vocab: Vocab,
    ) -> Result<Self> {
        validate_config(&config)?;
        let question = TextEncoder::bind("question", question_vocab, config.text, &store)?;
        let entity = TextEncoder::bind("entity", entity_vocab, config.text, &store)?;
        let mut gcn = Vec::with_capacity(config.gcn_layers);
        for l in 0..config.gcn_layers {
            gcn.push(GcnLayer {
                w: lookup(&store, format!("gcn.{l}.w"))?,
                bn: bind_batch_norm(&store, &format!("gcn.{l}.bn"))?,
            });
        }
        let hidden = if config.use_mlp_hidden {
            Some(MlpHidden {
                w: lookup(&store, "mlp.hidden.w".into())?,
                b: lookup(&store, "mlp.hidden.b".into())?,
                bn: bind_batch_norm(&store, "mlp.bn")?,
            })
        } else {
            None
        };
        let out_w = lookup(&store, "mlp.out.w".into())?;
        let out_b = lookup(&store, "mlp.out.b".into())?;
        Ok(Self {
            store,
            config,
            concepts,
            question,
            entity,
            gcn,
            hidden,
            out_w,
            out_b,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn config(&self) -> &AnswerModelConfig {
        &self.config
    }

    pub fn concepts(&self) -> &VisualConceptVocab {
        &self.concepts
    }

    pub fn question_encoder(&self) -> &TextEncoder {
        &self.question
    }

    pub fn entity_encoder(&self) -> &TextEncoder {
        &self.entity
    }

    /// Width of a node feature: concepts + question + entity encodings.
    pub fn feature_width(&self) -> usize {
        self.concepts.len() + 2 * self.config.text.hidden
    }

    /// Assemble the model inputs for one question and its candidate graph.
    pub fn prepare(
        &self,
        graph: EntityGraph,
        question: &str,
        concepts: &[String],
        gt_answer: Option<&str>,
        tok: &TokenizerConfig,
    ) -> Result<GraphSample> {
        let image = multi_hot(concepts, &self.concepts, false)?.vector;
        let question_ids = self.question.token_ids(&tokenize(question, tok));
        let entity_ids = graph
            .entities()
            .iter()
            .map(|e| self.entity.token_ids(&tokenize(e, tok)))
            .collect();
        let labels = match gt_answer {
            Some(a) => node_labels(&graph, a),
            None => vec![0.0; graph.node_count()],
        };
        let a_norm = if graph.is_empty() {
            Tensor::zeros(0, 0)
        } else {
            normalized_adjacency(&graph)
        };
        Ok(GraphSample {
            graph,
            a_norm,
            image,
            question_ids,
            entity_ids,
            labels,
        })
    }

    /// `sum(N) x (V + 2 * hidden)` node features of a batch of non-empty
    /// graphs, stacked in order.
    pub fn node_features(&self, tape: &mut Tape<'_>, batch: &[&GraphSample], pass: &mut Pass<'_>) -> Result<Var> {
        let v = self.concepts.len();
        let questions: Vec<Vec<usize>> = batch.iter().map(|s| s.question_ids.clone()).collect();
        let q = self.question.encode(tape, &questions, pass)?;
        let entities: Vec<Vec<usize>> = batch.iter().flat_map(|s| s.entity_ids.iter().cloned()).collect();
        let e = self.entity.encode(tape, &entities, pass)?;
        let owner: Vec<usize> = batch
            .iter()
            .enumerate()
            .flat_map(|(g, s)| std::iter::repeat_n(g, s.node_count()))
            .collect();
        let q_nodes = tape.gather_rows(q, &owner)?;
        let mut image = Tensor::zeros(owner.len(), v);
        if !self.config.ablate_vc {
            for (r, &g) in owner.iter().enumerate() {
                image.row_mut(r).copy_from_slice(&batch[g].image);
            }
        }
        let image = tape.constant(image);
        Ok(tape.concat_cols(&[image, q_nodes, e])?)
    }

    /// The propagation layers over block-diagonal adjacency `blocks`, each
    /// `A H W` followed by batch norm, ReLU and dropout.
    pub fn gcn_forward(
        &self,
        tape: &mut Tape<'_>,
        h0: Var,
        blocks: &[&Tensor],
        pass: &mut Pass<'_>,
    ) -> Result<Var> {
        let total: usize = blocks.iter().map(|a| a.rows()).sum();
        if tape.value(h0).rows() != total {
            return Err(NumericsError::Contract(format!(
                "node features have {} rows, adjacency covers {total} nodes",
                tape.value(h0).rows()
            ))
            .into());
        }
        let mut h = h0;
        for layer in &self.gcn {
            let w = tape.param(layer.w);
            let hw = tape.matmul(h, w)?;
            let z = propagate(tape, hw, blocks)?;
            let mode = pass.bn_mode(total);
            let z = tape.batch_norm(z, &layer.bn, mode)?;
            let z = tape.relu(z);
            h = tape.dropout(z, self.config.dropout, pass.rng())?;
        }
        Ok(h)
    }

    /// Per-node probabilities from the last propagation layer.
    pub fn answer_probabilities(&self, tape: &mut Tape<'_>, h: Var, pass: &mut Pass<'_>) -> Result<Var> {
        let mut x = h;
        if let Some(hid) = &self.hidden {
            let w = tape.param(hid.w);
            let b = tape.param(hid.b);
            let z = tape.affine(x, w, b)?;
            let mode = pass.bn_mode(tape.value(z).rows());
            let z = tape.batch_norm(z, &hid.bn, mode)?;
            let z = tape.relu(z);
            x = tape.dropout(z, self.config.dropout, pass.rng())?;
        }
        let w = tape.param(self.out_w);
        let b = tape.param(self.out_b);
        let logit = tape.affine(x, w, b)?;
        Ok(tape.sigmoid(logit))
    }

    /// `sum(N) x 1` probabilities for a batch of non-empty graphs.
    pub fn forward(&self, tape: &mut Tape<'_>, batch: &[&GraphSample], pass: &mut Pass<'_>) -> Result<Var> {
        if batch.iter().any(|s| s.node_count() == 0) {
            return Err(NumericsError::Contract("forward on an empty graph".into()).into());
        }
        let h0 = self.node_features(tape, batch, pass)?;
        let blocks: Vec<&Tensor> = batch.iter().map(|s| &s.a_norm).collect();
        let h = self.gcn_forward(tape, h0, &blocks, pass)?;
        self.answer_probabilities(tape, h, pass)
    }

    /// Mean over graphs of the mean per-node binary cross-entropy.
    pub fn loss(
        &self,
        tape: &mut Tape<'_>,
        batch: &[&GraphSample],
        pass: &mut Pass<'_>,
        pos_weight: f64,
    ) -> Result<Var> {
        let probs = self.forward(tape, batch, pass)?;
        let mut offset = 0;
        let mut total: Option<Var> = None;
        for s in batch {
            let n = s.node_count();
            let p = if batch.len() == 1 {
                probs
            } else {
                tape.slice_rows(probs, offset, n)?
            };
            offset += n;
            let l = tape.binary_cross_entropy(p, &s.labels, pos_weight)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        let total = total.ok_or(Error::EmptyDataset)?;
        Ok(tape.scale(total, 1.0 / batch.len() as f64))
    }

    /// Inference-mode probabilities for one graph; empty for an empty graph.
    pub fn predict_probabilities(&self, sample: &GraphSample) -> Result<Vec<f64>> {
        if sample.node_count() == 0 {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new(&self.store);
        let p = self.forward(&mut tape, &[sample], &mut Pass::infer())?;
        Ok(tape.value(p).data().to_vec())
    }
}

fn validate_config(config: &AnswerModelConfig) -> Result<()> {
    if !(0.0..1.0).contains(&config.dropout) || !(0.0..1.0).contains(&config.text.dropout) {
        return Err(Error::Config("dropout rates must lie in [0, 1)".into()));
    }
    if config.gcn_width == 0 || config.mlp_hidden == 0 || config.text.hidden == 0 {
        return Err(Error::Config("layer widths must be positive".into()));
    }
    Ok(())
}

/// Block-diagonal `A · X`: each block multiplies its own rows of `x`.
fn propagate(tape: &mut Tape<'_>, x: Var, blocks: &[&Tensor]) -> Result<Var, NumericsError> {
    if let [a] = blocks {
        let a = tape.constant((*a).clone());
        return tape.matmul(a, x);
    }
    let mut parts = Vec::with_capacity(blocks.len());
    let mut offset = 0;
    for a in blocks {
        let n = a.rows();
        let rows = tape.slice_rows(x, offset, n)?;
        let a = tape.constant((*a).clone());
        parts.push(tape.matmul(a, rows)?);
        offset += n;
    }
    tape.concat_rows(&parts)
}

/// 1 where the node's entity equals the normalized answer.
pub fn node_labels(graph: &EntityGraph, gt_answer: &str) -> Vec<f64> {
    let gt = normalize_entity(gt_answer).unwrap_or_default();
    graph
        .entities()
        .iter()
        .map(|e| if *e == gt { 1.0 } else { 0.0 })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedEntity {
    pub entity: String,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerPrediction {
    pub chosen: String,
    pub chosen_index: usize,
    pub ranking: Vec<RankedEntity>,
    pub supporting_facts: Vec<FactId>,
    pub relations: Vec<Relation>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("no candidate entities: question is unanswerable")]
pub struct Unanswerable;

/// Argmax over nodes with the lowest index winning ties.
pub fn predict_answer(probs: &[f64], graph: &EntityGraph) -> Result<AnswerPrediction, Unanswerable> {
    if graph.is_empty() || probs.len() != graph.node_count() {
        return Err(Unanswerable);
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let chosen_index = order[0];
    Ok(AnswerPrediction {
        chosen: graph.entities()[chosen_index].clone(),
        chosen_index,
        ranking: order
            .iter()
            .map(|&i| RankedEntity {
                entity: graph.entities()[i].clone(),
                probability: probs[i],
            })
            .collect(),
        supporting_facts: graph.supporting_facts(chosen_index).to_vec(),
        relations: Vec::new(),
    })
}

/// Candidate facts of one question after retrieval and relation filtering.
#[derive(Clone, Debug)]
pub struct Candidates {
    pub retrieved: Vec<ScoredFact>,
    pub relations: BTreeSet<Relation>,
    pub filtered: Vec<ScoredFact>,
    pub fallback: bool,
    pub graph: EntityGraph,
}

/// Relations used for filtering under `mode`.
pub fn select_relations(
    mode: RelationMode,
    relation_model: &RelationClassifier,
    question: &str,
    tok: &TokenizerConfig,
    gt_relation: Option<Relation>,
) -> Result<BTreeSet<Relation>> {
    match (mode, gt_relation) {
        (RelationMode::Gt, Some(r)) => Ok(BTreeSet::from([r])),
        (RelationMode::Gt, None) => Err(Error::Config(
            "ground-truth relation mode needs a ground-truth fact".into(),
        )),
        (RelationMode::One | RelationMode::Three, _) => {
            let k = if mode == RelationMode::One { 1 } else { 3 };
            let ranked = relation_model.predict_relation(question, tok)?;
            Ok(top_k_relations(&ranked, k))
        }
    }
}

/// Retrieve, filter (with fallback to the unfiltered list) and build the
/// entity graph. A question whose words and concepts are all out of
/// vocabulary retrieves nothing and so yields an empty graph.
pub fn gather_candidates(
    retriever: &Retriever<'_>,
    question: &str,
    concepts: &[String],
    relations: BTreeSet<Relation>,
) -> Candidates {
    let retrieved = if retriever.has_context(question, concepts) {
        retriever.retrieve(question, concepts)
    } else {
        Vec::new()
    };
    let (filtered, fallback) = filter_with_fallback(&retrieved, retriever.kb(), &relations);
    let graph = build_entity_graph(&filtered, retriever.kb());
    Candidates {
        retrieved,
        relations,
        filtered,
        fallback,
        graph,
    }
}

/// Everything evaluation needs about one labelled question.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub sample: QaSample,
    pub candidates: Candidates,
    pub input: GraphSample,
}

/// Run retrieval and relation filtering for every sample; these steps do
/// not depend on the answer model's parameters, so they are done once.
pub fn prepare_samples(
    samples: &[QaSample],
    model: &AnswerModel,
    relation_model: &RelationClassifier,
    retriever: &Retriever<'_>,
    mode: RelationMode,
) -> Result<Vec<PreparedSample>> {
    let tok = retriever.tokenizer();
    let kb = retriever.kb();
    samples
        .par_iter()
        .map(|s| {
            let gt_rel = kb.get(s.fact_id).map(|f| f.r);
            let relations = select_relations(mode, relation_model, &s.question, tok, gt_rel)?;
            let candidates = gather_candidates(retriever, &s.question, &s.concepts, relations);
            let input = model.prepare(
                candidates.graph.clone(),
                &s.question,
                &s.concepts,
                Some(&s.answer),
                tok,
            )?;
            Ok(PreparedSample {
                sample: s.clone(),
                candidates,
                input,
            })
        })
        .collect()
}

/// Joint training of encoders, propagation layers and head. Returns the mean
/// loss of every epoch.
pub fn train_answer(
    model: &mut AnswerModel,
    samples: &[&GraphSample],
    config: &AnswerTrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let usable: Vec<&GraphSample> = samples
        .iter()
        .copied()
        .filter(|s| s.node_count() > 0 && (!config.skip_unanswerable || s.has_answer()))
        .collect();
    if usable.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.batch_graphs == 0 {
        return Err(Error::Config("batch_graphs must be positive".into()));
    }
    let mut rng = Rng::new(seed);
    let mut dropout_rng = rng.fork();
    let mut optimizer = Optimizer::new(config.optimizer, &model.store);
    let mut grads = Gradients::zeros_like(&model.store);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_graphs) {
            let batch: Vec<&GraphSample> = chunk.iter().map(|&i| usable[i]).collect();
            grads.zero();
            let updates = {
                let mut tape = Tape::new(&model.store);
                let mut pass = Pass::train(&mut dropout_rng);
                let loss = model.loss(&mut tape, &batch, &mut pass, config.pos_weight)?;
                let value = tape.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::NonFinite { what: "answer loss", epoch });
                }
                total += value * batch.len() as f64;
                tape.backward(loss, &mut grads)?;
                tape.take_running_updates()
            };
            if !grads.all_finite() {
                return Err(Error::NonFinite { what: "answer gradient", epoch });
            }
            model.store.apply_running_updates(&updates, BN_MOMENTUM);
            optimizer.step(&mut model.store, &grads);
        }
        let mean = total / usable.len() as f64;
        debug!("answer epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }
    info!(
        "answer model trained on {} graphs for {} epochs",
        usable.len(),
        config.epochs
    );
    Ok(history)
}

/// First pipeline stage that lost a wrongly answered sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorStage {
    Retrieval,
    Relation,
    Gcn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub answer: String,
    pub chosen: Option<String>,
    pub ranking: Vec<RankedEntity>,
    pub supporting_facts: Vec<FactId>,
    pub relations: Vec<Relation>,
    pub fallback: bool,
    pub top1: bool,
    pub top3: bool,
    pub error: Option<ErrorStage>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub retrieval: usize,
    pub relation: usize,
    pub gcn: usize,
}

impl ErrorCounts {
    pub fn total(&self) -> usize {
        self.retrieval + self.relation + self.gcn
    }
}

/// Error buckets as fractions of all samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub retrieval: f64,
    pub relation: f64,
    pub gcn: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: f64,
    pub top3: f64,
    pub total: usize,
    pub top1_hits: usize,
    pub top3_hits: usize,
    pub errors: ErrorBreakdown,
    pub error_counts: ErrorCounts,
    pub samples: Vec<SampleRecord>,
}

/// Classify a top-1 miss by the first stage that dropped the answer.
pub fn error_stage(prepared: &PreparedSample) -> ErrorStage {
    let gt = prepared.sample.fact_id;
    let c = &prepared.candidates;
    if !c.retrieved.iter().any(|s| s.fact_id == gt) {
        ErrorStage::Retrieval
    } else if !c.filtered.iter().any(|s| s.fact_id == gt) {
        ErrorStage::Relation
    } else {
        ErrorStage::Gcn
    }
}

fn record(model: &AnswerModel, p: &PreparedSample) -> Result<SampleRecord> {
    let probs = model.predict_probabilities(&p.input)?;
    let gt = p.sample.normalized_answer();
    let relations: Vec<Relation> = p.candidates.relations.iter().copied().collect();
    let (chosen, ranking, supporting) = match predict_answer(&probs, &p.input.graph) {
        Ok(pred) => (Some(pred.chosen), pred.ranking, pred.supporting_facts),
        Err(Unanswerable) => (None, Vec::new(), Vec::new()),
    };
    let top1 = chosen.as_deref() == Some(gt.as_str());
    let top3 = ranking.iter().take(3).any(|r| r.entity == gt);
    Ok(SampleRecord {
        id: p.sample.id.clone(),
        answer: gt,
        chosen,
        ranking: ranking.into_iter().take(3).collect(),
        supporting_facts: supporting,
        relations,
        fallback: p.candidates.fallback,
        top1,
        top3,
        error: (!top1).then(|| error_stage(p)),
    })
}

/// Top-1/top-3 accuracy and the per-stage error attribution. Samples
/// without candidates count as misses.
pub fn evaluate(model: &AnswerModel, prepared: &[PreparedSample]) -> Result<Metrics> {
    let samples: Vec<SampleRecord> = prepared
        .par_iter()
        .map(|p| record(model, p))
        .collect::<Result<_>>()?;
    let total = samples.len();
    let top1_hits = samples.iter().filter(|r| r.top1).count();
    let top3_hits = samples.iter().filter(|r| r.top3).count();
    let mut counts = ErrorCounts::default();
    for r in &samples {
        match r.error {
            Some(ErrorStage::Retrieval) => counts.retrieval += 1,
            Some(ErrorStage::Relation) => counts.relation += 1,
            Some(ErrorStage::Gcn) => counts.gcn += 1,
            None => {}
        }
    }
    let frac = |k: usize| if total == 0 { 0.0 } else { k as f64 / total as f64 };
    Ok(Metrics {
        top1: frac(top1_hits),
        top3: frac(top3_hits),
        total,
        top1_hits,
        top3_hits,
        errors: ErrorBreakdown {
            retrieval: frac(counts.retrieval),
            relation: frac(counts.relation),
            gcn: frac(counts.gcn),
        },
        error_counts: counts,
        samples,
    })
}

/// Error attribution alone.
pub fn attribute_errors(model: &AnswerModel, prepared: &[PreparedSample]) -> Result<(ErrorCounts, ErrorBreakdown)> {
    let m = evaluate(model, prepared)?;
    Ok((m.error_counts, m.errors))
}

/// Knowledge-base facts behind a prediction, for display.
pub fn supporting_triplets(kb: &KnowledgeBase, ids: &[FactId]) -> Vec<crate::kb::Fact> {
    ids.iter().filter_map(|&id| kb.get(id).cloned()).collect()
}
