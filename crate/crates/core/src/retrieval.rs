//! Similarity retrieval of candidate facts and construction of the candidate
//! entity graph.
//!
//! A fact is scored by comparing each of its words against the pooled
//! question and visual-concept words: a fact word's similarity is its best
//! cosine match in that pool, and the fact score is the mean of the top
//! `ceil(K% * m)` word similarities over its `m` words.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::QaSample;
use crate::embeddings::{cosine, tokenize, EmbeddingStore, TokenizerConfig};
use crate::kb::{entities_of, Fact, FactId, KnowledgeBase, Relation};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    /// Facts kept after similarity ranking.
    pub top_n: usize,
    /// Percentage of a fact's words averaged into its score.
    pub top_k_percent: u32,
    /// Whether the relation's surface form counts as fact words.
    pub score_relation_words: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            top_n: 100,
            top_k_percent: 80,
            score_relation_words: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredFact {
    pub fact_id: FactId,
    pub score: f64,
}

/// Number of words averaged for a fact with `m` words: `ceil(pct * m / 100)`,
/// at least one.
pub fn words_kept(m: usize, top_k_percent: u32) -> usize {
    let pct = top_k_percent.clamp(1, 100) as usize;
    ((pct * m).div_ceil(100)).max(1)
}

/// Fact words in order: tokens of `x`, of the relation name (optional), of `y`.
pub fn fact_tokens(f: &Fact, tok: &TokenizerConfig, with_relation: bool) -> Vec<String> {
    let (x, y) = entities_of(f);
    let mut words = tokenize(&x, tok);
    if with_relation {
        words.extend(tokenize(f.r.name(), tok));
    }
    words.extend(tokenize(&y, tok));
    words
}

/// Mean of the `words_kept` largest values.
pub fn top_k_mean(mut sims: Vec<f64>, top_k_percent: u32) -> f64 {
    if sims.is_empty() {
        return 0.0;
    }
    let keep = words_kept(sims.len(), top_k_percent);
    sims.sort_by(|a, b| b.total_cmp(a));
    sims[..keep].iter().sum::<f64>() / keep as f64
}

/// Best cosine of `word` against any in-vocabulary context vector; 0 if the
/// word is out of vocabulary or no context vector exists.
fn word_similarity(word: &str, context: &[&[f64]], store: &EmbeddingStore) -> f64 {
    let Some(v) = store.lookup(word) else {
        return 0.0;
    };
    context
        .iter()
        .map(|c| cosine(v, c).expect("embedding rows share one dimension"))
        .reduce(f64::max)
        .unwrap_or(0.0)
}

fn context_vectors<'s>(
    q_tokens: &[String],
    vc_tokens: &[String],
    store: &'s EmbeddingStore,
) -> Vec<&'s [f64]> {
    let unique: BTreeSet<&str> = q_tokens
        .iter()
        .chain(vc_tokens)
        .map(String::as_str)
        .collect();
    unique.into_iter().filter_map(|w| store.lookup(w)).collect()
}

/// Similarity score of one fact against tokenized question and concepts.
pub fn score_fact(
    f: &Fact,
    q_tokens: &[String],
    vc_tokens: &[String],
    store: &EmbeddingStore,
    tok: &TokenizerConfig,
    config: &RetrievalConfig,
) -> f64 {
    let context = context_vectors(q_tokens, vc_tokens, store);
    let sims = fact_tokens(f, tok, config.score_relation_words)
        .iter()
        .map(|w| word_similarity(w, &context, store))
        .collect();
    top_k_mean(sims, config.top_k_percent)
}

/// Descending score, ties by ascending fact id.
pub fn sort_ranking(ranking: &mut [ScoredFact]) {
    ranking.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.fact_id.cmp(&b.fact_id)));
}

/// Tokenized concept list: every concept label goes through the tokenizer.
pub fn concept_tokens(concepts: &[String], tok: &TokenizerConfig) -> Vec<String> {
    concepts.iter().flat_map(|c| tokenize(c, tok)).collect()
}

/// Precomputed fact words for repeated ranking over one knowledge base.
pub struct Retriever<'a> {
    kb: &'a KnowledgeBase,
    store: &'a EmbeddingStore,
    tok: &'a TokenizerConfig,
    config: RetrievalConfig,
    words: Vec<String>,
    fact_words: Vec<(FactId, Vec<usize>)>,
}

impl<'a> Retriever<'a> {
    pub fn new(
        kb: &'a KnowledgeBase,
        store: &'a EmbeddingStore,
        tok: &'a TokenizerConfig,
        config: RetrievalConfig,
    ) -> Self {
        let mut ids: HashMap<String, usize> = HashMap::new();
        let mut words = Vec::new();
        let fact_words = kb
            .facts()
            .map(|f| {
                let idx = fact_tokens(f, tok, config.score_relation_words)
                    .into_iter()
                    .map(|w| {
                        *ids.entry(w.clone()).or_insert_with(|| {
                            words.push(w);
                            words.len() - 1
                        })
                    })
                    .collect();
                (f.id, idx)
            })
            .collect();
        Self {
            kb,
            store,
            tok,
            config,
            words,
            fact_words,
        }
    }

    pub fn config(&self) -> &RetrievalConfig {
        &self.config
    }

    pub fn kb(&self) -> &KnowledgeBase {
        self.kb
    }

    pub fn tokenizer(&self) -> &TokenizerConfig {
        self.tok
    }

    /// Every fact, scored and sorted.
    pub fn rank_all(&self, question: &str, concepts: &[String]) -> Vec<ScoredFact> {
        let q = tokenize(question, self.tok);
        let vc = concept_tokens(concepts, self.tok);
        let context = context_vectors(&q, &vc, self.store);
        let word_sims: Vec<f64> = self
            .words
            .iter()
            .map(|w| word_similarity(w, &context, self.store))
            .collect();
        let mut ranking: Vec<ScoredFact> = self
            .fact_words
            .iter()
            .map(|(id, idx)| ScoredFact {
                fact_id: *id,
                score: top_k_mean(
                    idx.iter().map(|&i| word_sims[i]).collect(),
                    self.config.top_k_percent,
                ),
            })
            .collect();
        sort_ranking(&mut ranking);
        ranking
    }

    pub fn top_n(&self, question: &str, concepts: &[String], n: usize) -> Vec<ScoredFact> {
        let mut ranking = self.rank_all(question, concepts);
        ranking.truncate(n);
        ranking
    }

    /// Whether any question or concept token has an embedding. Without one
    /// every fact scores 0 and the ranking carries no information.
    pub fn has_context(&self, question: &str, concepts: &[String]) -> bool {
        let q = tokenize(question, self.tok);
        let vc = concept_tokens(concepts, self.tok);
        !context_vectors(&q, &vc, self.store).is_empty()
    }

    /// Top-`config.top_n` facts.
    pub fn retrieve(&self, question: &str, concepts: &[String]) -> Vec<ScoredFact> {
        self.top_n(question, concepts, self.config.top_n)
    }

    /// 1-based rank of `fact` in the full ranking, if present in the KB.
    pub fn rank_of(&self, question: &str, concepts: &[String], fact: FactId) -> Option<usize> {
        self.rank_all(question, concepts)
            .iter()
            .position(|s| s.fact_id == fact)
            .map(|p| p + 1)
    }
}

/// Score every fact and keep the best `n`.
pub fn retrieve_top_n(
    kb: &KnowledgeBase,
    question: &str,
    concepts: &[String],
    store: &EmbeddingStore,
    tok: &TokenizerConfig,
    config: &RetrievalConfig,
    n: usize,
) -> Vec<ScoredFact> {
    assert!(n >= 1, "retrieve_top_n needs n >= 1");
    Retriever::new(kb, store, tok, config.clone()).top_n(question, concepts, n)
}

/// Order-preserving subset of `facts` whose relation is in `relations`.
pub fn filter_by_relation(
    facts: &[ScoredFact],
    kb: &KnowledgeBase,
    relations: &BTreeSet<Relation>,
) -> Vec<ScoredFact> {
    facts
        .iter()
        .filter(|s| kb.get(s.fact_id).is_some_and(|f| relations.contains(&f.r)))
        .copied()
        .collect()
}

/// Relation filtering with the empty-result fallback: when no retrieved fact
/// carries a predicted relation, the unfiltered list is used instead.
/// Returns the facts and whether the fallback fired.
pub fn filter_with_fallback(
    facts: &[ScoredFact],
    kb: &KnowledgeBase,
    relations: &BTreeSet<Relation>,
) -> (Vec<ScoredFact>, bool) {
    let filtered = filter_by_relation(facts, kb, relations);
    if filtered.is_empty() && !facts.is_empty() {
        warn!(
            "no retrieved fact matches relations {:?}; using all {} retrieved facts",
            relations,
            facts.len()
        );
        return (facts.to_vec(), true);
    }
    (filtered, false)
}

/// Candidate entities and their co-occurrence edges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EntityGraph {
    entities: Vec<String>,
    /// Unordered pair `(i, j)` with `i < j` -> facts linking the two entities.
    edge_facts: BTreeMap<(usize, usize), Vec<FactId>>,
    /// Every fact mentioning each node, ascending.
    node_facts: Vec<Vec<FactId>>,
}

impl EntityGraph {
    pub fn node_count(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_facts.len()
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn index_of(&self, entity: &str) -> Option<usize> {
        self.entities.iter().position(|e| e == entity)
    }

    pub fn is_adjacent(&self, i: usize, j: usize) -> bool {
        let key = if i < j { (i, j) } else { (j, i) };
        self.edge_facts.contains_key(&key)
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, &[FactId])> {
        self.edge_facts
            .iter()
            .map(|(&(i, j), f)| (i, j, f.as_slice()))
    }

    pub fn edge_facts(&self, i: usize, j: usize) -> &[FactId] {
        let key = if i < j { (i, j) } else { (j, i) };
        self.edge_facts.get(&key).map_or(&[], Vec::as_slice)
    }

    /// Facts on edges incident to `node`, plus any fact whose two sides
    /// collapsed onto `node`.
    pub fn supporting_facts(&self, node: usize) -> &[FactId] {
        &self.node_facts[node]
    }

    /// Symmetric 0/1 adjacency with zero diagonal.
    pub fn adjacency(&self) -> Tensor {
        let n = self.node_count();
        let mut a = Tensor::zeros(n, n);
        for &(i, j) in self.edge_facts.keys() {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
        a
    }

    /// A permuted copy: node `i` of `self` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> EntityGraph {
        assert_eq!(perm.len(), self.node_count());
        let mut entities = vec![String::new(); perm.len()];
        let mut node_facts = vec![Vec::new(); perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            entities[p] = self.entities[i].clone();
            node_facts[p] = self.node_facts[i].clone();
        }
        let edge_facts = self
            .edge_facts
            .iter()
            .map(|(&(i, j), f)| {
                let (a, b) = (perm[i], perm[j]);
                ((a.min(b), a.max(b)), f.clone())
            })
            .collect();
        EntityGraph {
            entities,
            edge_facts,
            node_facts,
        }
    }
}

/// Nodes are the unique normalized entities of `facts`, in order of first
/// appearance when the facts are visited by ascending id (x before y). Each
/// fact with distinct sides adds an undirected edge.
pub fn build_entity_graph(facts: &[ScoredFact], kb: &KnowledgeBase) -> EntityGraph {
    let mut ids: Vec<FactId> = facts.iter().map(|s| s.fact_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut entities: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut node_facts: Vec<Vec<FactId>> = Vec::new();
    let mut edge_facts: BTreeMap<(usize, usize), Vec<FactId>> = BTreeMap::new();
    let mut node = |e: String, entities: &mut Vec<String>, node_facts: &mut Vec<Vec<FactId>>| {
        *index.entry(e.clone()).or_insert_with(|| {
            entities.push(e);
            node_facts.push(Vec::new());
            entities.len() - 1
        })
    };
    for id in ids {
        let Some(f) = kb.get(id) else { continue };
        let (x, y) = entities_of(f);
        let i = node(x, &mut entities, &mut node_facts);
        let j = node(y, &mut entities, &mut node_facts);
        node_facts[i].push(id);
        if i != j {
            node_facts[j].push(id);
            edge_facts.entry((i.min(j), i.max(j))).or_default().push(id);
        }
    }
    EntityGraph {
        entities,
        edge_facts,
        node_facts,
    }
}

/// `D^-1/2 (A + I) D^-1/2` where `D` holds the row sums of `A + I`.
pub fn normalized_adjacency(g: &EntityGraph) -> Tensor {
    let n = g.node_count();
    let mut a = g.adjacency();
    for i in 0..n {
        a.set(i, i, 1.0);
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / a.row(i).iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..n {
        for j in 0..n {
            let v = a.get(i, j);
            if v != 0.0 {
                // The scale product is formed first so (i, j) and (j, i)
                // round identically.
                a.set(i, j, v * (inv_sqrt[i] * inv_sqrt[j]));
            }
        }
    }
    a
}

/// Fraction of samples whose ground-truth fact is among the top `n`.
pub fn recall_at_n(samples: &[QaSample], retriever: &Retriever<'_>, n: usize) -> f64 {
    recall_at_ns(samples, retriever, &[n])[0]
}

/// [`recall_at_n`] for several cut-offs with one ranking per sample.
pub fn recall_at_ns(samples: &[QaSample], retriever: &Retriever<'_>, ns: &[usize]) -> Vec<f64> {
    if samples.is_empty() {
        return vec![0.0; ns.len()];
    }
    let ranks: Vec<Option<usize>> = samples
        .par_iter()
        .map(|s| retriever.rank_of(&s.question, &s.concepts, s.fact_id))
        .collect();
    ns.iter()
        .map(|&n| {
            let hits = ranks.iter().filter(|r| r.is_some_and(|r| r <= n)).count();
            hits as f64 / samples.len() as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fact(id: FactId, x: &str, r: Relation, y: &str) -> Fact {
        Fact::new(id, x, r, y, "test").unwrap()
    }

    fn scored(ids: &[FactId]) -> Vec<ScoredFact> {
        ids.iter()
            .map(|&fact_id| ScoredFact {
                fact_id,
                score: 0.0,
            })
            .collect()
    }

    #[test]
    fn words_kept_uses_ceiling_with_floor_of_one() {
        assert_eq!(words_kept(5, 80), 4);
        assert_eq!(words_kept(1, 80), 1);
        assert_eq!(words_kept(3, 80), 3);
        assert_eq!(words_kept(10, 80), 8);
        assert_eq!(words_kept(0, 80), 1);
        assert_eq!(words_kept(7, 100), 7);
    }

    #[test]
    fn top_k_mean_hand_example() {
        let s = top_k_mean(vec![0.2, 0.9, 0.1, 0.7, 0.8], 80);
        assert!((s - 0.65).abs() < 1e-15);
        assert_eq!(top_k_mean(vec![], 80), 0.0);
    }

    #[test]
    fn single_word_fact_matching_question_scores_one() {
        let store = EmbeddingStore::from_rows(vec![
            ("apple".into(), vec![0.3, 0.7, -0.2]),
            ("pear".into(), vec![1.0, 0.0, 0.0]),
        ])
        .unwrap();
        let tok = TokenizerConfig::default();
        let cfg = RetrievalConfig {
            score_relation_words: false,
            ..Default::default()
        };
        let f = fact(0, "apple", Relation::IsA, "apple");
        let s = score_fact(&f, &["apple".to_string()], &[], &store, &tok, &cfg);
        assert!((s - 1.0).abs() < 1e-12);
        let oov = fact(1, "zzz", Relation::IsA, "qqq");
        assert_eq!(score_fact(&oov, &["apple".to_string()], &[], &store, &tok, &cfg), 0.0);
        assert_eq!(score_fact(&f, &[], &[], &store, &tok, &cfg), 0.0);
    }

    #[test]
    fn filter_keeps_order_and_matches() {
        let kb = KnowledgeBase::from_facts(
            (0..10).map(|i| {
                let r = if i % 3 == 1 { Relation::IsA } else { Relation::UsedFor };
                fact(i, &format!("a{i}"), r, &format!("b{i}"))
            }),
        )
        .unwrap();
        let input = scored(&[9, 4, 7, 1, 0, 2, 3, 5, 6, 8]);
        let isa: BTreeSet<_> = [Relation::IsA].into();
        let got: Vec<_> = filter_by_relation(&input, &kb, &isa).iter().map(|s| s.fact_id).collect();
        assert_eq!(got, vec![4, 7, 1]);
        let all: BTreeSet<_> = Relation::ALL.into_iter().collect();
        assert_eq!(filter_by_relation(&input, &kb, &all), input);
        let none: BTreeSet<_> = [Relation::Desires].into();
        assert!(filter_by_relation(&input, &kb, &none).is_empty());
        let (fallback, used) = filter_with_fallback(&input, &kb, &none);
        assert!(used);
        assert_eq!(fallback, input);
    }

    #[test]
    fn graph_shapes() {
        let kb = KnowledgeBase::from_facts([
            fact(0, "a", Relation::IsA, "b"),
            fact(1, "b", Relation::IsA, "c"),
            fact(2, "d", Relation::IsA, "D"),
        ])
        .unwrap();
        let one = build_entity_graph(&scored(&[0]), &kb);
        assert_eq!((one.node_count(), one.edge_count()), (2, 1));

        let path = build_entity_graph(&scored(&[1, 0]), &kb);
        assert_eq!(path.entities(), &["a", "b", "c"]);
        assert!(path.is_adjacent(0, 1) && path.is_adjacent(1, 2) && !path.is_adjacent(0, 2));
        assert_eq!(path.supporting_facts(1), &[0, 1]);

        let collapsed = build_entity_graph(&scored(&[2]), &kb);
        assert_eq!((collapsed.node_count(), collapsed.edge_count()), (1, 0));
        assert_eq!(collapsed.supporting_facts(0), &[2]);

        assert!(build_entity_graph(&[], &kb).is_empty());
    }

    #[test]
    fn parallel_facts_share_one_edge() {
        let kb = KnowledgeBase::from_facts([
            fact(0, "a", Relation::IsA, "b"),
            fact(1, "b", Relation::HasA, "a"),
        ])
        .unwrap();
        let g = build_entity_graph(&scored(&[0, 1]), &kb);
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.edge_facts(1, 0), &[0, 1]);
    }

    #[test]
    fn normalized_adjacency_small_cases() {
        let kb = KnowledgeBase::from_facts([
            fact(0, "a", Relation::IsA, "b"),
            fact(1, "c", Relation::IsA, "c"),
        ])
        .unwrap();
        let single = normalized_adjacency(&build_entity_graph(&scored(&[1]), &kb));
        assert_eq!(single.data(), &[1.0]);
        let pair = normalized_adjacency(&build_entity_graph(&scored(&[0]), &kb));
        for v in pair.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }
}
