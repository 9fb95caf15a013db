use factgcn::answer_model::{
    node_labels, predict_answer, train_answer, AnswerModel, AnswerModelConfig, AnswerTrainConfig,
    GraphSample,
};
use factgcn::embeddings::{EmbeddingStore, TokenizerConfig};
use factgcn::encoders::{Pass, TextEncoderConfig, VisualConceptVocab, Vocab};
use factgcn::kb::{Fact, KnowledgeBase, Relation};
use factgcn::numerics::{finite_difference_check, CoordinateSelection, Gradients, ParamStore, Rng, Tape};
use factgcn::retrieval::{build_entity_graph, EntityGraph, ScoredFact};

const WORDS: [&str; 8] = ["apple", "red", "fruit", "tree", "leaf", "green", "sky", "blue"];

fn model(seed: u64) -> (AnswerModel, TokenizerConfig) {
    let mut rng = Rng::new(seed);
    let rows = WORDS
        .iter()
        .map(|w| (w.to_string(), (0..6).map(|_| rng.normal()).collect()))
        .collect();
    let glove = EmbeddingStore::from_rows(rows).unwrap();
    let config = AnswerModelConfig {
        text: TextEncoderConfig {
            input_dim: 6,
            hidden: 5,
            ..Default::default()
        },
        gcn_width: 9,
        mlp_hidden: 7,
        ..Default::default()
    };
    let vc = VisualConceptVocab::from_names(&["apple", "tree", "sky"]).unwrap();
    let m = AnswerModel::new(config, vc, Vocab::build(WORDS), Vocab::build(WORDS), &glove, seed).unwrap();
    (m, TokenizerConfig::default())
}

fn graph(pairs: &[(&str, &str)]) -> (EntityGraph, KnowledgeBase) {
    let facts = pairs
        .iter()
        .enumerate()
        .map(|(i, (x, y))| Fact::new(i as u64, x, Relation::RelatedTo, y, "t").unwrap());
    let kb = KnowledgeBase::from_facts(facts).unwrap();
    let all: Vec<ScoredFact> = kb.facts().map(|f| ScoredFact { fact_id: f.id, score: 0.0 }).collect();
    (build_entity_graph(&all, &kb), kb)
}

fn concepts() -> Vec<String> {
    vec!["apple".into(), "tree".into()]
}

fn probs(m: &AnswerModel, g: EntityGraph, tok: &TokenizerConfig) -> Vec<f64> {
    let s = m.prepare(g, "what colour is the apple", &concepts(), None, tok).unwrap();
    m.predict_probabilities(&s).unwrap()
}

#[test]
fn probabilities_follow_node_relabeling() {
    let (m, tok) = model(1);
    let (g, _) = graph(&[("apple", "red"), ("apple", "fruit"), ("tree", "fruit"), ("tree", "leaf green"), ("sky", "blue")]);
    let p = probs(&m, g.clone(), &tok);
    let perm = [3, 0, 5, 1, 6, 2, 4];
    assert_eq!(g.node_count(), perm.len());
    let pp = probs(&m, g.permuted(&perm), &tok);
    for i in 0..perm.len() {
        assert!((p[i] - pp[perm[i]]).abs() < 1e-12);
    }
}

#[test]
fn an_extra_component_leaves_other_nodes_unchanged_in_inference() {
    let (m, tok) = model(2);
    let (g, _) = graph(&[("apple", "red"), ("apple", "fruit")]);
    let (g2, _) = graph(&[("apple", "red"), ("apple", "fruit"), ("sky", "blue")]);
    let p = probs(&m, g, &tok);
    let p2 = probs(&m, g2, &tok);
    for i in 0..3 {
        assert!((p[i] - p2[i]).abs() < 1e-12);
    }
}

#[test]
fn symmetric_nodes_with_equal_text_get_equal_probabilities() {
    let (m, tok) = model(3);
    // "red" and "Red" normalize to one entity, so use two entities whose
    // tokens are both unknown: identical encodings, mirror-image positions
    let (g, _) = graph(&[("apple", "zzz"), ("apple", "qqq")]);
    let p = probs(&m, g, &tok);
    assert_eq!(p[1], p[2]);
    assert!(p.iter().all(|v| *v > 0.0 && *v < 1.0));
}

#[test]
fn single_node_graph_is_answerable() {
    let (m, tok) = model(4);
    let (g, _) = graph(&[("apple", "Apple")]);
    assert_eq!(g.node_count(), 1);
    let p = probs(&m, g.clone(), &tok);
    let pred = predict_answer(&p, &g).unwrap();
    assert_eq!(pred.chosen, "apple");
    assert_eq!(pred.supporting_facts, vec![0]);
}

#[test]
fn labels_mark_the_normalized_answer() {
    let (g, _) = graph(&[("apple", "red"), ("apple", "fruit")]);
    assert_eq!(node_labels(&g, "  Red "), vec![0.0, 1.0, 0.0]);
    assert_eq!(node_labels(&g, "banana"), vec![0.0; 3]);
}

fn loss_on(m: &AnswerModel, store: &ParamStore, batch: &[&GraphSample], grads: Option<&mut Gradients>) -> f64 {
    let mut tape = Tape::new(store);
    // Running statistics: batch statistics over a single question are
    // degenerate. Dropout masks repeat because the generator is reseeded.
    let mut rng = Rng::new(77);
    let l = m.loss(&mut tape, batch, &mut Pass::frozen(Some(&mut rng)), 1.0).unwrap();
    if let Some(g) = grads {
        tape.backward(l, g).unwrap();
    }
    tape.value(l).data()[0]
}

#[test]
fn five_node_gradients_match_finite_differences() {
    let (m, tok) = model(7);
    let (g, _) = graph(&[("apple", "red"), ("apple", "fruit"), ("tree", "fruit"), ("tree", "leaf")]);
    assert_eq!(g.node_count(), 5);
    let s = m.prepare(g, "what colour is the apple", &concepts(), Some("red"), &tok).unwrap();
    let mut store = m.store().clone();
    let mut grads = Gradients::zeros_like(&store);
    loss_on(&m, &store, &[&s], Some(&mut grads));
    let report = finite_difference_check(
        &mut store,
        &grads,
        1e-6,
        CoordinateSelection::Sample { per_group: 12, seed: 1 },
        |st| Ok::<_, ()>(loss_on(&m, st, &[&s], None)),
    )
    .unwrap();
    for name in ["gcn.0.w", "gcn.1.w", "mlp.hidden.w", "mlp.out.w"] {
        assert!(report.groups.iter().any(|gr| gr.name == name), "{name} not checked");
    }
    assert!(report.max_rel_error < 1e-5, "{:#?}", report.groups);
}

#[test]
fn training_fits_a_tiny_problem() {
    let (mut m, tok) = model(6);
    let questions = [("what colour is the apple", "red"), ("what grows on the tree", "fruit"), ("what colour is the sky", "blue")];
    let (g, _) = graph(&[("apple", "red"), ("apple", "fruit"), ("tree", "fruit"), ("sky", "blue"), ("tree", "leaf")]);
    let samples: Vec<GraphSample> = questions
        .iter()
        .map(|(q, a)| m.prepare(g.clone(), q, &concepts(), Some(a), &tok).unwrap())
        .collect();
    let refs: Vec<&GraphSample> = samples.iter().collect();
    let config = AnswerTrainConfig {
        epochs: 150,
        batch_graphs: 3,
        ..Default::default()
    };
    let losses = train_answer(&mut m, &refs, &config, 9).unwrap();
    assert!(losses.last().unwrap() < &losses[0]);
    assert!(losses.iter().all(|l| l.is_finite()));
}
