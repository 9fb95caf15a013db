use std::collections::{BTreeSet, HashMap};

use factgcn::embeddings::{tokenize, EmbeddingStore, TokenizerConfig};
use factgcn::kb::{Fact, KnowledgeBase, Relation};
use factgcn::numerics::Rng;
use factgcn::pipeline::synthetic::{generate, SyntheticSpec};
use factgcn::retrieval::{
    build_entity_graph, filter_by_relation, normalized_adjacency, recall_at_ns, retrieve_top_n,
    RetrievalConfig, Retriever, ScoredFact,
};
use proptest::prelude::*;

fn cos(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    (dot / (nu * nv)).clamp(-1.0, 1.0)
}

/// Score every fact word by word, sort, average the top 80%.
fn brute_force(
    kb: &KnowledgeBase,
    question: &str,
    emb: &HashMap<String, Vec<f64>>,
    tok: &TokenizerConfig,
) -> Vec<(u64, f64)> {
    let mut ctx: Vec<String> = tokenize(question, tok);
    ctx.sort();
    ctx.dedup();
    let ctx: Vec<&Vec<f64>> = ctx.iter().filter_map(|w| emb.get(w)).collect();
    let mut out: Vec<(u64, f64)> = kb
        .facts()
        .map(|f| {
            let words = [tokenize(&f.x, tok), tokenize(f.r.name(), tok), tokenize(&f.y, tok)].concat();
            let mut sims: Vec<f64> = words
                .iter()
                .map(|w| match emb.get(w) {
                    Some(v) if !ctx.is_empty() => ctx.iter().map(|c| cos(v, c)).fold(f64::MIN, f64::max),
                    _ => 0.0,
                })
                .collect();
            sims.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let keep = ((8 * sims.len()).div_ceil(10)).max(1);
            (f.id, sims.iter().take(keep).sum::<f64>() / keep as f64)
        })
        .collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    out
}

fn random_world(seed: u64, n_facts: usize) -> (KnowledgeBase, HashMap<String, Vec<f64>>, String) {
    let mut rng = Rng::new(seed);
    let vocab: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
    let mut emb = HashMap::new();
    for w in vocab.iter().chain(["isa".to_string(), "usedfor".to_string()].iter()) {
        if rng.bernoulli(0.8) {
            emb.insert(w.clone(), (0..5).map(|_| rng.normal()).collect::<Vec<f64>>());
        }
    }
    let phrase = |rng: &mut Rng| -> String {
        let n = 1 + rng.below(3);
        (0..n).map(|_| vocab[rng.below(vocab.len())].clone()).collect::<Vec<_>>().join(" ")
    };
    let facts: Vec<Fact> = (0..n_facts)
        .map(|i| {
            let r = if rng.bernoulli(0.5) { Relation::IsA } else { Relation::UsedFor };
            Fact::new(i as u64 * 7 % 1009, &phrase(&mut rng), r, &phrase(&mut rng), "t").unwrap()
        })
        .collect();
    let question = format!("what {} is {}", phrase(&mut rng), phrase(&mut rng));
    (KnowledgeBase::from_facts(facts).unwrap(), emb, question)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn ranking_matches_brute_force(seed in any::<u64>(), n_facts in 1usize..200) {
        let (kb, emb, question) = random_world(seed, n_facts);
        let store = EmbeddingStore::from_rows(emb.iter().map(|(k, v)| (k.clone(), v.clone())).collect()).unwrap();
        let tok = TokenizerConfig::default();
        let got = retrieve_top_n(&kb, &question, &[], &store, &tok, &RetrievalConfig::default(), 100);
        let want = brute_force(&kb, &question, &emb, &tok);
        prop_assert_eq!(got.len(), n_facts.min(100));
        for (g, w) in got.iter().zip(&want) {
            prop_assert_eq!(g.fact_id, w.0);
            prop_assert!((g.score - w.1).abs() <= 1e-12);
        }
    }

    #[test]
    fn top_n_is_a_prefix_of_the_full_ranking(seed in any::<u64>(), n in 1usize..60) {
        let (kb, emb, question) = random_world(seed, 80);
        let store = EmbeddingStore::from_rows(emb.into_iter().collect()).unwrap();
        let tok = TokenizerConfig::default();
        let r = Retriever::new(&kb, &store, &tok, RetrievalConfig::default());
        let all = r.rank_all(&question, &[]);
        prop_assert_eq!(&r.top_n(&question, &[], n)[..], &all[..n]);
        prop_assert!(all.windows(2).all(|w| w[0].score >= w[1].score));
    }
}

#[test]
fn oov_only_question_scores_everything_zero() {
    let (kb, emb, _) = random_world(3, 30);
    let store = EmbeddingStore::from_rows(emb.into_iter().collect()).unwrap();
    let tok = TokenizerConfig::default();
    let r = Retriever::new(&kb, &store, &tok, RetrievalConfig::default());
    let ranked = r.rank_all("zzzz qqqq", &[]);
    assert!(ranked.iter().all(|s| s.score == 0.0));
    // ties break by ascending id
    assert!(ranked.windows(2).all(|w| w[0].fact_id < w[1].fact_id));
    assert!(!r.has_context("zzzz qqqq", &[]));
}

#[test]
fn relation_filter_keeps_three_of_ten() {
    let facts = (0..10).map(|i| {
        let r = if [2, 5, 8].contains(&i) { Relation::IsA } else { Relation::AtLocation };
        Fact::new(i, &format!("a{i}"), r, &format!("b{i}"), "t").unwrap()
    });
    let kb = KnowledgeBase::from_facts(facts).unwrap();
    let ranked: Vec<ScoredFact> = (0..10)
        .rev()
        .map(|i| ScoredFact { fact_id: i, score: i as f64 })
        .collect();
    let kept = filter_by_relation(&ranked, &kb, &BTreeSet::from([Relation::IsA]));
    assert_eq!(kept.iter().map(|s| s.fact_id).collect::<Vec<_>>(), vec![8, 5, 2]);
}

#[test]
fn complete_graphs_normalize_to_uniform_rows() {
    for n in 2..=6u64 {
        let mut facts = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                facts.push(Fact::new(facts.len() as u64, &format!("v{i}"), Relation::RelatedTo, &format!("v{j}"), "t").unwrap());
            }
        }
        let kb = KnowledgeBase::from_facts(facts).unwrap();
        let all: Vec<ScoredFact> = kb.facts().map(|f| ScoredFact { fact_id: f.id, score: 0.0 }).collect();
        let a = normalized_adjacency(&build_entity_graph(&all, &kb));
        for v in a.data() {
            assert!((v - 1.0 / n as f64).abs() <= 1e-12);
        }
    }
}

#[test]
fn permuted_graph_permutes_the_normalized_adjacency() {
    let mut rng = Rng::new(9);
    let mut facts = Vec::new();
    for i in 0..8 {
        for j in i + 1..8 {
            if rng.bernoulli(0.35) {
                facts.push(Fact::new(facts.len() as u64, &format!("n{i}"), Relation::HasA, &format!("n{j}"), "t").unwrap());
            }
        }
    }
    let kb = KnowledgeBase::from_facts(facts).unwrap();
    let all: Vec<ScoredFact> = kb.facts().map(|f| ScoredFact { fact_id: f.id, score: 0.0 }).collect();
    let g = build_entity_graph(&all, &kb);
    let n = g.node_count();
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    let gp = g.permuted(&perm);
    let (a, ap) = (normalized_adjacency(&g), normalized_adjacency(&gp));
    for i in 0..n {
        assert_eq!(g.entities()[i], gp.entities()[perm[i]]);
        for j in 0..n {
            assert_eq!(a.get(i, j), ap.get(perm[i], perm[j]));
        }
    }
}

#[test]
fn recall_is_monotone_on_synthetic_data() {
    let spec = SyntheticSpec {
        n_facts: 400,
        n_questions: 120,
        n_concepts: 40,
        embedding_dim: 24,
        ..Default::default()
    };
    let data = generate(&spec).unwrap();
    let store = data.embedding_store();
    let tok = TokenizerConfig::default();
    let r = Retriever::new(&data.kb, &store, &tok, RetrievalConfig::default());
    let ns = [1, 5, 20, 50, 100, 400];
    let recall = recall_at_ns(&data.samples, &r, &ns);
    assert!(recall.windows(2).all(|w| w[0] <= w[1]), "{recall:?}");
    assert_eq!(recall[5], 1.0);
    assert!(recall[4] >= 0.9, "{recall:?}");
}
