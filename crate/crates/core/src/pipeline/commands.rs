//! End-to-end commands behind the command-line tool. Each takes a resolved
//! `PipelineConfig` and returns a serializable summary; file outputs are
//! written by the command itself.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::Serialize;

use crate::answer_model::{
    evaluate, gather_candidates, predict_answer, prepare_samples, select_relations, train_answer,
    AnswerModel, GraphSample, Metrics, RankedEntity, RelationMode, Unanswerable,
};
use crate::dataset::{load_samples, relation_pairs, validate_samples, QaSample};
use crate::embeddings::{load_embeddings, tokenize, EmbeddingStore, TokenizerConfig};
use crate::encoders::{Pass, VisualConceptVocab};
use crate::error::{Error, Result};
use crate::kb::{load_kb, Fact, KnowledgeBase, Relation};
use crate::numerics::{
    finite_difference_check, CoordinateSelection, GradCheckReport, Gradients, Rng, Tape,
};
use crate::relation_model::{relation_accuracy, train_relation, RelationClassifier};
use crate::retrieval::{build_entity_graph, recall_at_ns, Retriever, ScoredFact};

use super::checkpoint::Checkpoint;
use super::config::PipelineConfig;
use super::models::{entity_vocab, load_answer, load_relation, question_vocab, save_answer, save_relation};
use super::synthetic::{generate, SyntheticData, SyntheticSpec};

/// Inputs shared by every data-driven command.
pub struct Data {
    pub kb: KnowledgeBase,
    pub embeddings: EmbeddingStore,
    pub tokenizer: TokenizerConfig,
    pub concepts: VisualConceptVocab,
    pub samples: Vec<QaSample>,
    pub train: Vec<QaSample>,
    pub test: Vec<QaSample>,
}

impl Data {
    pub fn load(config: &PipelineConfig) -> Result<Self> {
        let f = &config.files;
        let path = |p: &Path| config.data_path(p);
        let kb = load_kb(path(&f.facts))?;
        let embeddings = load_embeddings(path(&f.embeddings))?;
        let tokenizer = match &f.stopwords {
            Some(p) => TokenizerConfig::load(path(p))?,
            None => TokenizerConfig::default(),
        };
        let concepts = VisualConceptVocab::load(path(&f.concepts))?;
        let samples = load_samples(path(&f.qa))?;
        validate_samples(&samples, &kb)?;
        let subset = |p: &Option<PathBuf>| -> Result<Vec<QaSample>> {
            match p {
                Some(p) if path(p).exists() => {
                    let s = load_samples(path(p))?;
                    validate_samples(&s, &kb)?;
                    Ok(s)
                }
                _ => Ok(samples.clone()),
            }
        };
        let train = subset(&f.train)?;
        let test = subset(&f.test)?;
        Ok(Self {
            kb,
            embeddings,
            tokenizer,
            concepts,
            samples,
            train,
            test,
        })
    }

    pub fn retriever(&self, config: &PipelineConfig) -> Retriever<'_> {
        Retriever::new(&self.kb, &self.embeddings, &self.tokenizer, config.retrieval.clone())
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("summary serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct GenSummary {
    pub data_dir: PathBuf,
    pub facts: usize,
    pub questions: usize,
    pub train: usize,
    pub test: usize,
    pub concepts: usize,
    pub words: usize,
}

/// The generator spec with the top-level seed applied.
pub fn synthetic_spec(config: &PipelineConfig) -> SyntheticSpec {
    SyntheticSpec {
        seed: config.seed,
        ..config.synthetic.clone()
    }
}

pub fn gen_synthetic(config: &PipelineConfig) -> Result<(SyntheticData, GenSummary)> {
    let data = generate(&synthetic_spec(config)).map_err(|e| Error::Config(e.to_string()))?;
    data.write_to_dir(&config.data_dir)?;
    let summary = GenSummary {
        data_dir: config.data_dir.clone(),
        facts: data.kb.len(),
        questions: data.samples.len(),
        train: data.train.len(),
        test: data.test.len(),
        concepts: data.concepts.len(),
        words: data.embeddings.len(),
    };
    info!("wrote synthetic data to {}", config.data_dir.display());
    Ok((data, summary))
}

#[derive(Clone, Debug, Serialize)]
pub struct RelationSummary {
    pub checkpoint: PathBuf,
    pub train_samples: usize,
    pub final_loss: Option<f64>,
    pub test_top1: f64,
    pub test_top3: f64,
    pub seconds: f64,
}

pub fn run_train_relation(config: &PipelineConfig) -> Result<RelationSummary> {
    let start = Instant::now();
    let data = Data::load(config)?;
    let pairs = relation_pairs(&data.train, &data.kb);
    let mut model = RelationClassifier::new(
        question_vocab(&data.samples, &data.tokenizer),
        config.relation_model,
        &data.embeddings,
        config.seed,
    )?;
    let losses = train_relation(&mut model, &pairs, &data.tokenizer, &config.relation_train, config.seed.wrapping_add(1))?;
    let checkpoint = config.out_path(&config.outputs.relation_checkpoint);
    fs::create_dir_all(&config.out_dir)?;
    save_relation(&model, config.seed, &checkpoint)?;
    write_json(&config.out_path(&config.outputs.relation_losses), &losses)?;
    let test_pairs = relation_pairs(&data.test, &data.kb);
    Ok(RelationSummary {
        checkpoint,
        train_samples: pairs.len(),
        final_loss: losses.last().copied(),
        test_top1: relation_accuracy(&model, &test_pairs, &data.tokenizer, 1)?,
        test_top3: relation_accuracy(&model, &test_pairs, &data.tokenizer, 3)?,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct AnswerSummary {
    pub checkpoint: PathBuf,
    pub train_samples: usize,
    pub mean_nodes: f64,
    pub final_loss: Option<f64>,
    pub train_top1: f64,
    pub seconds: f64,
}

pub fn run_train_answer(config: &PipelineConfig) -> Result<AnswerSummary> {
    let start = Instant::now();
    let data = Data::load(config)?;
    let relation = load_relation(config.out_path(&config.outputs.relation_checkpoint))?;
    let retriever = data.retriever(config);
    let mut model = AnswerModel::new(
        config.answer_model.clone(),
        data.concepts.clone(),
        question_vocab(&data.samples, &data.tokenizer),
        entity_vocab(&data.kb, &data.tokenizer),
        &data.embeddings,
        config.seed.wrapping_add(2),
    )?;
    let prepared = prepare_samples(&data.train, &model, &relation, &retriever, config.relation_mode)?;
    let inputs: Vec<&GraphSample> = prepared.iter().map(|p| &p.input).collect();
    let nodes: usize = inputs.iter().map(|s| s.node_count()).sum();
    let losses = train_answer(&mut model, &inputs, &config.answer_train, config.seed.wrapping_add(3))?;
    let checkpoint = config.out_path(&config.outputs.answer_checkpoint);
    fs::create_dir_all(&config.out_dir)?;
    save_answer(&model, config.seed, &checkpoint)?;
    write_json(&config.out_path(&config.outputs.answer_losses), &losses)?;
    Ok(AnswerSummary {
        checkpoint,
        train_samples: prepared.len(),
        mean_nodes: nodes as f64 / prepared.len().max(1) as f64,
        final_loss: losses.last().copied(),
        train_top1: evaluate(&model, &prepared)?.top1,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Test-split metrics with the saved models; also written to the metrics file.
pub fn run_eval(config: &PipelineConfig) -> Result<Metrics> {
    let data = Data::load(config)?;
    let relation = load_relation(config.out_path(&config.outputs.relation_checkpoint))?;
    let model = load_answer(config.out_path(&config.outputs.answer_checkpoint))?;
    let retriever = data.retriever(config);
    let prepared = prepare_samples(&data.test, &model, &relation, &retriever, config.relation_mode)?;
    let metrics = evaluate(&model, &prepared)?;
    write_json(&config.out_path(&config.outputs.metrics), &metrics)?;
    Ok(metrics)
}

/// Retrieval recall on the test split at several depths.
pub fn run_recall(config: &PipelineConfig, ns: &[usize]) -> Result<Vec<(usize, f64)>> {
    let data = Data::load(config)?;
    let retriever = data.retriever(config);
    Ok(ns.iter().copied().zip(recall_at_ns(&data.test, &retriever, ns)).collect())
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum AskResponse {
    Answered {
        question: String,
        answer: String,
        top3: Vec<RankedEntity>,
        relations: Vec<Relation>,
        supporting_facts: Vec<Fact>,
        fallback: bool,
    },
    Unanswerable {
        question: String,
        relations: Vec<Relation>,
        reason: String,
    },
}

pub fn run_ask(config: &PipelineConfig, question: &str, concepts: &[String]) -> Result<AskResponse> {
    if config.relation_mode == RelationMode::Gt {
        return Err(Error::Config("ask has no ground truth; use relation mode 1 or 3".into()));
    }
    let data = Data::load(config)?;
    let relation = load_relation(config.out_path(&config.outputs.relation_checkpoint))?;
    let model = load_answer(config.out_path(&config.outputs.answer_checkpoint))?;
    ask(&model, &relation, &data.retriever(config), config.relation_mode, question, concepts)
}

/// Answer one question with loaded models.
pub fn ask(
    model: &AnswerModel,
    relation: &RelationClassifier,
    retriever: &Retriever<'_>,
    mode: RelationMode,
    question: &str,
    concepts: &[String],
) -> Result<AskResponse> {
    let tok = retriever.tokenizer();
    let relations = select_relations(mode, relation, question, tok, None)?;
    let c = gather_candidates(retriever, question, concepts, relations);
    let relations: Vec<Relation> = c.relations.iter().copied().collect();
    let input = model.prepare(c.graph, question, concepts, None, tok)?;
    let probs = model.predict_probabilities(&input)?;
    match predict_answer(&probs, &input.graph) {
        Ok(p) => Ok(AskResponse::Answered {
            question: question.to_string(),
            answer: p.chosen,
            top3: p.ranking.into_iter().take(3).collect(),
            relations,
            supporting_facts: p
                .supporting_facts
                .iter()
                .filter_map(|&id| retriever.kb().get(id).cloned())
                .collect(),
            fallback: c.fallback,
        }),
        Err(Unanswerable) => Ok(AskResponse::Unanswerable {
            question: question.to_string(),
            relations,
            reason: "no candidate entities were retrieved".into(),
        }),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckSummary {
    pub eps: f64,
    pub threshold: f64,
    pub nodes: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
    pub answer: GradCheckReport,
    pub relation: GradCheckReport,
    pub seconds: f64,
}

impl GradCheckSummary {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

/// Central-difference check of every trainable tensor of both models on a
/// freshly initialised probe: a star graph of `nodes` entities built from a
/// tiny generated knowledge base. Batch-norm uses running statistics and
/// dropout replays one fixed mask, so the loss is a deterministic function
/// of the parameters.
/// Random running statistics. With the initial zero mean and unit variance
/// a node whose features are all zero sits exactly on a ReLU kink.
fn spread_running_stats(store: &mut crate::numerics::ParamStore, rng: &mut Rng) {
    let ids: Vec<_> = store.ids().filter(|&id| !store.is_trainable(id)).collect();
    for id in ids {
        let var = store.name(id).ends_with("running_var");
        for v in store.value_mut(id).data_mut() {
            *v = if var { 0.5 + rng.uniform() } else { 0.3 * rng.normal() };
        }
    }
}

pub fn run_gradcheck(config: &PipelineConfig) -> Result<GradCheckSummary> {
    let start = Instant::now();
    let g = &config.gradcheck;
    if g.nodes < 2 || g.nodes > 14 {
        return Err(Error::Config("gradcheck nodes must lie in 2..=14".into()));
    }
    let spec = SyntheticSpec {
        seed: config.seed,
        n_facts: 13,
        n_questions: 2,
        n_concepts: 1,
        embedding_dim: 6,
        values_per_relation: 1,
        ..SyntheticSpec::default()
    };
    let data = generate(&spec).map_err(|e| Error::Config(e.to_string()))?;
    let tok = TokenizerConfig::default();
    let store = data.embedding_store();
    let facts: Vec<ScoredFact> = data
        .kb
        .facts()
        .take(g.nodes - 1)
        .map(|f| ScoredFact { fact_id: f.id, score: 0.0 })
        .collect();
    let graph = build_entity_graph(&facts, &data.kb);
    // Padding the question with the graph's entities lengthens the sequence
    // so recurrent weights get gradients well above rounding noise.
    let mut sample = data.samples[0].clone();
    let padding: Vec<&str> = graph.entities().iter().map(String::as_str).cycle().take(3 * graph.node_count()).collect();
    sample.question = format!("{} {}", sample.question, padding.join(" "));
    let probe_samples = vec![sample.clone()];

    let mut model_config = config.answer_model.clone();
    model_config.gcn_width = g.gcn_width;
    model_config.mlp_hidden = g.mlp_hidden;
    model_config.text.hidden = g.text_hidden;
    model_config.text.input_dim = spec.embedding_dim;
    model_config.text.train_embeddings = true;
    model_config.ablate_vc = false;
    let concepts = VisualConceptVocab::from_names(&data.concepts)?;
    let mut model = AnswerModel::new(
        model_config,
        concepts,
        question_vocab(&probe_samples, &tok),
        entity_vocab(&data.kb, &tok),
        &store,
        config.seed,
    )?;
    let mut stats_rng = Rng::new(config.seed ^ 0x57a7);
    spread_running_stats(model.store_mut(), &mut stats_rng);
    let answer_label = graph.entities()[1].clone();
    let input = model.prepare(graph, &sample.question, &sample.concepts, Some(&answer_label), &tok)?;
    let nodes = input.node_count();
    let mask_seed = config.seed ^ 0xd20;
    let pos_weight = config.answer_train.pos_weight;
    let answer_loss = |m: &AnswerModel, store: &crate::numerics::ParamStore, grads: Option<&mut Gradients>| -> Result<f64> {
        let mut rng = Rng::new(mask_seed);
        let mut tape = Tape::new(store);
        let mut pass = Pass::frozen(Some(&mut rng));
        let loss = m.loss(&mut tape, &[&input], &mut pass, pos_weight)?;
        if let Some(grads) = grads {
            tape.backward(loss, grads)?;
        }
        Ok(tape.value(loss).data()[0])
    };
    let mut grads = Gradients::zeros_like(model.store());
    answer_loss(&model, model.store(), Some(&mut grads))?;
    let selection = CoordinateSelection::Sample {
        per_group: g.coords_per_group,
        seed: config.seed,
    };
    let probe = model.clone();
    let answer = finite_difference_check(model.store_mut(), &grads, g.eps, selection, |s| {
        answer_loss(&probe, s, None)
    })?;

    let mut text = config.relation_model;
    text.hidden = g.text_hidden;
    text.input_dim = spec.embedding_dim;
    text.train_embeddings = true;
    let mut relation = RelationClassifier::new(question_vocab(&probe_samples, &tok), text, &store, config.seed)?;
    spread_running_stats(relation.store_mut(), &mut stats_rng);
    let ids = relation.encoder().token_ids(&tokenize(&sample.question, &tok));
    let label = data.kb.get(sample.fact_id).map(|f| f.r.code()).unwrap_or(0);
    let relation_loss = |m: &RelationClassifier, store: &crate::numerics::ParamStore, grads: Option<&mut Gradients>| -> Result<f64> {
        let mut rng = Rng::new(mask_seed);
        let mut tape = Tape::new(store);
        let mut pass = Pass::frozen(Some(&mut rng));
        let logits = m.logits(&mut tape, std::slice::from_ref(&ids), &mut pass)?;
        let loss = tape.softmax_cross_entropy(logits, &[label])?;
        if let Some(grads) = grads {
            tape.backward(loss, grads)?;
        }
        Ok(tape.value(loss).data()[0])
    };
    let mut grads = Gradients::zeros_like(relation.store());
    relation_loss(&relation, relation.store(), Some(&mut grads))?;
    let probe = relation.clone();
    let relation_report = finite_difference_check(relation.store_mut(), &grads, g.eps, selection, |s| {
        relation_loss(&probe, s, None)
    })?;

    let max_rel_error = answer.max_rel_error.max(relation_report.max_rel_error);
    Ok(GradCheckSummary {
        eps: g.eps,
        threshold: g.threshold,
        nodes,
        max_rel_error,
        max_abs_error: answer.max_abs_error.max(relation_report.max_abs_error),
        coordinates: answer.coordinates_checked() + relation_report.coordinates_checked(),
        answer,
        relation: relation_report,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorSummary {
    pub name: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub l2_norm: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckpointSummary {
    pub seed: u64,
    pub config: serde_json::Value,
    pub parameters: usize,
    pub tensors: Vec<TensorSummary>,
}

pub fn inspect_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointSummary> {
    let ck = Checkpoint::load(path)?;
    let tensors: Vec<TensorSummary> = ck
        .tensors
        .iter()
        .map(|t| TensorSummary {
            name: t.name.clone(),
            trainable: t.trainable,
            shape: t.tensor.shape().to_vec(),
            l2_norm: t.tensor.data().iter().map(|v| v * v).sum::<f64>().sqrt(),
        })
        .collect();
    Ok(CheckpointSummary {
        seed: ck.seed,
        config: ck.config,
        parameters: ck.tensors.iter().map(|t| t.tensor.len()).sum(),
        tensors,
    })
}
