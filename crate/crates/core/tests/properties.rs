use std::sync::Arc;

use proptest::prelude::*;

use ragforge_core::corpus::{window_spans, ChunkPolicy, ChunkUnit, Passage, PassageStore};
use ragforge_core::dataspec::{filter_by_metadata, load_dataset, save_dataset, select, Dataset, Item, SelectMode, Split};
use ragforge_core::dense::{dense_search, EmbedRole, EmbeddingClient, EmbeddingClientConfig, Metric as VMetric, VectorStore};
use ragforge_core::evaluate::{
    accuracy, bleu, exact_match, retrieval_scores_from_labels, rouge_l, score_trace, token_f1, Metric, RecallMode,
};
use ragforge_core::generate::{build_prompt, estimate_tokens, Generator, PromptTemplate, TokenLogprob};
use ragforge_core::judge::{Judger, SkrEntry, SkrJudger, Verdict};
use ragforge_core::mock::{mock_tokenize, HashEmbedder, MockCrossEncoder, MockGenerator, ScriptedGenerator};
use ragforge_core::pipeline::{Components, Pipeline, PipelineConfig, Step, Topology};
use ragforge_core::refine::{extractive_refine, lexical_units, perplexity_refine, Refiner};
use ragforge_core::retrieval::{
    resolve, CachedRetriever, RerankedRetriever, RetrievalCache, RetrievedPassage, Retriever,
};
use ragforge_core::sparse::{bm25_score, build_index, Bm25Params, Bm25Retriever, SimpleAnalyzer};

const WORDS: &[&str] = &[
    "river", "stone", "light", "north", "the", "a", "cat", "dog", "sat", "ran", "blue", "red", "tower", "paris",
];

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(WORDS).prop_map(String::from)
}

fn phrase(max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 0..max).prop_map(|w| w.join(" "))
}

fn nonempty_phrase(max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..max).prop_map(|w| w.join(" "))
}

fn store(texts: &[String]) -> Arc<PassageStore> {
    let passages = texts
        .iter()
        .enumerate()
        .map(|(i, t)| Passage::new(format!("p{i:03}"), "", t.clone()))
        .collect();
    Arc::new(PassageStore::from_passages(passages).unwrap())
}

fn resolved(texts: &[String]) -> Vec<RetrievedPassage> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| RetrievedPassage {
            id: format!("p{i}"),
            title: format!("T{i}"),
            contents: t.clone(),
            score: 1.0,
            rank: i + 1,
        })
        .collect()
}

fn hash_client() -> EmbeddingClient {
    EmbeddingClient::new(EmbeddingClientConfig::new("hash"), Arc::new(HashEmbedder::default())).unwrap()
}

fn item_strategy() -> impl Strategy<Value = Item> {
    (
        "[a-z0-9]{1,8}",
        nonempty_phrase(6),
        prop::collection::vec(nonempty_phrase(3), 1..3),
        prop::option::of(prop::sample::select(&["x", "y"][..])),
    )
        .prop_map(|(id, q, golds, tag)| {
            let mut item = Item::new(id, q, golds);
            if let Some(t) = tag {
                item.metadata.insert("tag".into(), serde_json::Value::from(t));
            }
            item
        })
}

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    prop::collection::vec(item_strategy(), 0..12).prop_map(|items| {
        let mut seen = std::collections::HashSet::new();
        let items = items.into_iter().filter(|i| seen.insert(i.id.clone())).collect();
        Dataset {
            name: "ds".into(),
            split: Split::Test,
            items,
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // dataset ----------------------------------------------------------------

    #[test]
    fn dataset_round_trip(ds in dataset_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        save_dataset(&path, &ds).unwrap();
        prop_assert_eq!(load_dataset(&path, Split::Test).unwrap(), ds);
    }

    #[test]
    fn sequential_select_is_prefix_monotone(ds in dataset_strategy(), n in 0usize..12) {
        prop_assume!(n < ds.items.len());
        let a = select(&ds, SelectMode::Sequential, n).unwrap();
        let b = select(&ds, SelectMode::Sequential, n + 1).unwrap();
        prop_assert_eq!(&a.items[..], &b.items[..n]);
    }

    #[test]
    fn filter_is_idempotent(ds in dataset_strategy()) {
        let p = |v: &serde_json::Value| v == "x";
        let once = filter_by_metadata(&ds, "tag", p);
        prop_assert_eq!(filter_by_metadata(&once, "tag", p), once);
    }

    // chunking ---------------------------------------------------------------

    #[test]
    fn half_stride_covers_interior_units_twice(half in 1usize..7, s in 1usize..60) {
        let size = 2 * half;
        let policy = ChunkPolicy::new(ChunkUnit::Words, size, half).unwrap();
        let spans = window_spans(s, &policy);
        let mut count = vec![0usize; s];
        for (a, b) in spans {
            count[a..b].iter_mut().for_each(|c| *c += 1);
        }
        prop_assert!(count.iter().all(|&c| c >= 1));
        // Units past the first half-window and before the last full window's
        // end sit in exactly two windows when the windows tile exactly.
        if s >= size && (s - size) % half == 0 {
            for (i, &c) in count.iter().enumerate().take(s - half).skip(half) {
                prop_assert_eq!(c, 2, "unit {}", i);
            }
        }
    }

    // sparse retrieval -------------------------------------------------------

    #[test]
    fn duplicating_a_query_term_never_lowers_scores(
        texts in prop::collection::vec(nonempty_phrase(10), 1..20),
        query in prop::collection::vec(word(), 1..4),
        dup in 0usize..4,
    ) {
        let s = store(&texts);
        let idx = build_index(&s, &SimpleAnalyzer);
        let params = Bm25Params::default();
        let mut doubled = query.clone();
        doubled.push(query[dup % query.len()].clone());
        for p in s.iter() {
            let a = bm25_score(&idx, &params, &query, &p.id).unwrap();
            let b = bm25_score(&idx, &params, &doubled, &p.id).unwrap();
            prop_assert!(b >= a - 1e-12);
        }
    }

    #[test]
    fn zero_b_ignores_length(pad in 1usize..20, tf in 1usize..4) {
        let short = vec!["cat"; tf].join(" ");
        let long = format!("{short} {}", vec!["dog"; pad].join(" "));
        let s = store(&[short, long, "sat".to_string()]);
        let idx = build_index(&s, &SimpleAnalyzer);
        let params = Bm25Params::new(0.9, 0.0).unwrap();
        let q = vec!["cat".to_string()];
        let a = bm25_score(&idx, &params, &q, "p000").unwrap();
        let b = bm25_score(&idx, &params, &q, "p001").unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn reranking_permutes_the_retrieved_set(
        texts in prop::collection::vec(nonempty_phrase(8), 1..15),
        query in nonempty_phrase(4),
        k in 1usize..8,
    ) {
        let base: Arc<dyn Retriever> = Arc::new(Bm25Retriever::build(store(&texts), Bm25Params::default()).unwrap());
        let plain = base.search(&query, k).unwrap();
        let decorated = RerankedRetriever::new(base.clone(), Arc::new(MockCrossEncoder), false);
        let mut a: Vec<String> = plain.iter().map(|h| h.passage_id.clone()).collect();
        let mut b: Vec<String> = decorated.search(&query, k).unwrap().into_iter().map(|h| h.passage_id).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn cache_never_serves_another_backend(
        texts in prop::collection::vec(nonempty_phrase(8), 2..10),
        query in nonempty_phrase(4),
    ) {
        let cache = Arc::new(RetrievalCache::new());
        let first: Arc<dyn Retriever> = Arc::new(Bm25Retriever::build(store(&texts), Bm25Params::default()).unwrap());
        let mut other_texts = texts.clone();
        other_texts.reverse();
        other_texts.push("unique words only here".into());
        let second: Arc<dyn Retriever> =
            Arc::new(Bm25Retriever::build(store(&other_texts), Bm25Params::default()).unwrap());
        prop_assert_ne!(first.fingerprint(), second.fingerprint());
        let a = CachedRetriever::new(first, cache.clone());
        let b = CachedRetriever::new(second.clone(), cache.clone());
        a.search(&query, 5).unwrap();
        prop_assert_eq!(b.search(&query, 5).unwrap(), second.search(&query, 5).unwrap());
        prop_assert_eq!(cache.misses(), 2);
    }

    // dense ------------------------------------------------------------------

    #[test]
    fn cosine_range_and_inner_product_scaling(
        rows in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 4), 1..20),
        q in prop::collection::vec(-1.0f32..1.0, 4),
        c in 0.1f32..10.0,
    ) {
        let named: Vec<(String, Vec<f32>)> = rows.iter().enumerate().map(|(i, v)| (format!("v{i:02}"), v.clone())).collect();
        let cos = VectorStore::from_rows(named.clone(), VMetric::Cosine).unwrap();
        for h in dense_search(&cos, &q, rows.len()).unwrap() {
            prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&h.score));
        }
        let ip = VectorStore::from_rows(named.clone(), VMetric::InnerProduct).unwrap();
        let scaled: Vec<(String, Vec<f32>)> = named.iter().map(|(id, v)| (id.clone(), v.iter().map(|x| x * c).collect())).collect();
        let ip_scaled = VectorStore::from_rows(scaled, VMetric::InnerProduct).unwrap();
        let a = dense_search(&ip, &q, rows.len()).unwrap();
        let b = dense_search(&ip_scaled, &q, rows.len()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x.score * c as f64 - y.score).abs() < 1e-4 * (1.0 + x.score.abs() * c as f64));
        }
        // ranking preserved up to near-ties
        for (x, y) in a.iter().zip(&b) {
            if x.passage_id != y.passage_id {
                let xs = a.iter().find(|h| h.passage_id == y.passage_id).unwrap().score;
                prop_assert!((xs - x.score).abs() < 1e-5);
            }
        }
    }

    // refiners ---------------------------------------------------------------

    #[test]
    fn extractive_output_is_a_subsequence(
        sentences in prop::collection::vec(nonempty_phrase(6), 1..8),
        query in nonempty_phrase(4),
        budget in 0usize..30,
    ) {
        let text = sentences.iter().map(|s| format!("{s}.")).collect::<Vec<_>>().join(" ");
        let out = extractive_refine(&query, &resolved(std::slice::from_ref(&text)), &hash_client(), budget).unwrap();
        let src = lexical_units(&text);
        let mut it = src.iter();
        prop_assert!(lexical_units(&out).iter().all(|u| it.any(|s| s == u)));
        prop_assert!(out.split_whitespace().count() <= budget);
    }

    #[test]
    fn perplexity_output_is_a_shorter_subsequence(text in nonempty_phrase(40), rate in 0.05f64..0.95) {
        let scorer = ScriptedGenerator::fixed("").with_scorer(|_, t| {
            mock_tokenize(t)
                .into_iter()
                .enumerate()
                .map(|(i, token)| TokenLogprob { logprob: -((i * 7919 % 13) as f64), token })
                .collect()
        });
        let out = perplexity_refine(&text, &scorer, rate).unwrap();
        let src = lexical_units(&text);
        let kept = lexical_units(&out);
        prop_assert!(kept.len() <= src.len());
        let mut it = src.iter();
        prop_assert!(kept.iter().all(|u| it.any(|s| s == u)));
        prop_assert_eq!(perplexity_refine(&text, &scorer, 1.0).unwrap(), text);
    }

    #[test]
    fn refined_token_counts_shrink(texts in prop::collection::vec(nonempty_phrase(15), 1..4), rate in 0.1f64..0.9) {
        let scorer: Arc<dyn Generator> = Arc::new(MockGenerator::new());
        let r = Refiner::perplexity(scorer, rate).refine("q", &resolved(&texts)).unwrap();
        prop_assert!(r.tokens_after <= r.tokens_before);
    }

    // prompts ----------------------------------------------------------------

    #[test]
    fn prompts_are_pure_and_grow_with_passages(
        q in nonempty_phrase(6),
        texts in prop::collection::vec(nonempty_phrase(10), 0..6),
    ) {
        let t = PromptTemplate::default();
        let p = resolved(&texts);
        let a = build_prompt(&q, &p, &t).unwrap();
        prop_assert_eq!(&a, &build_prompt(&q, &p, &t).unwrap());
        if !p.is_empty() {
            let fewer = build_prompt(&q, &p[..p.len() - 1], &t).unwrap();
            prop_assert!(estimate_tokens(&fewer) <= estimate_tokens(&a));
            let listed = a[0].content.matches("Doc ").count();
            prop_assert_eq!(listed, p.len());
        }
    }

    // judger -----------------------------------------------------------------

    #[test]
    fn verdict_ignores_training_order(
        labeled in prop::collection::vec((nonempty_phrase(6), any::<bool>()), 3..12),
        query in nonempty_phrase(6),
        seed in any::<u64>(),
    ) {
        let client = Arc::new(hash_client());
        let entries: Vec<SkrEntry> = labeled
            .iter()
            .map(|(q, yes)| SkrEntry {
                question: q.clone(),
                vector: client.embed_one(q, EmbedRole::Query).unwrap(),
                label: if *yes { Verdict::Retrieve } else { Verdict::NoRetrieve },
            })
            .collect();
        let mut shuffled = entries.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed as usize ^ i.wrapping_mul(2654435761)) % (i + 1));
        }
        let qv = client.embed_one(&query, EmbedRole::Query).unwrap();
        let sims: Vec<f64> = entries.iter().map(|e| ragforge_core::dense::cosine(&qv, &e.vector)).collect();
        let mut sorted = sims.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        // Only meaningful when the k-th and (k+1)-th neighbours are distinct.
        prop_assume!(sorted.len() <= 3 || (sorted[2] - sorted[3]).abs() > 1e-12);
        let a = SkrJudger::new(entries, 3, client.clone()).unwrap();
        let b = SkrJudger::new(shuffled, 3, client).unwrap();
        prop_assert_eq!(a.judge(&query).unwrap().verdict, b.judge(&query).unwrap().verdict);
        prop_assert_eq!(a.judge(&query).unwrap(), a.judge(&query).unwrap());
    }

    // metrics ----------------------------------------------------------------

    #[test]
    fn metrics_are_bounded_and_ordered(pred in phrase(8), golds in prop::collection::vec(phrase(5), 1..4)) {
        let em = exact_match(&pred, &golds);
        let acc = accuracy(&pred, &golds);
        for v in [em, token_f1(&pred, &golds), acc, bleu(&pred, &golds), rouge_l(&pred, &golds)] {
            prop_assert!((0.0..=1.0).contains(&v), "{}", v);
        }
        prop_assert!(em <= acc);
        if em == 1.0 {
            prop_assert_eq!(token_f1(&pred, &golds), 1.0);
        }
        let mut rev = golds.clone();
        rev.reverse();
        prop_assert_eq!(em, exact_match(&pred, &rev));
        prop_assert_eq!(token_f1(&pred, &golds), token_f1(&pred, &rev));
        prop_assert_eq!(acc, accuracy(&pred, &rev));
        prop_assert_eq!(bleu(&pred, &golds), bleu(&pred, &rev));
        prop_assert_eq!(rouge_l(&pred, &golds), rouge_l(&pred, &rev));
    }

    #[test]
    fn retrieval_f1_is_the_harmonic_mean(labels in prop::collection::vec(any::<bool>(), 1..20), k in 1usize..20) {
        let s = retrieval_scores_from_labels(&labels, k);
        for v in [s.recall, s.precision, s.f1, s.average_precision] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if s.recall > 0.0 && s.precision > 0.0 {
            let h = 2.0 * s.recall * s.precision / (s.recall + s.precision);
            prop_assert!((s.f1 - h).abs() < 1e-9);
        }
    }

    // pipelines --------------------------------------------------------------

    #[test]
    fn every_item_gets_one_trace_with_known_components(
        questions in prop::collection::vec(nonempty_phrase(6), 1..6),
        topology in prop::sample::select(&Topology::REGISTERED[..]),
        texts in prop::collection::vec(nonempty_phrase(10), 1..6),
    ) {
        prop_assume!(topology != Topology::Conditional);
        let items: Vec<Item> = questions
            .iter()
            .enumerate()
            .map(|(i, q)| Item::new(format!("i{i}"), q.clone(), vec!["river".into()]))
            .collect();
        let r: Arc<dyn Retriever> = Arc::new(Bm25Retriever::build(store(&texts), Bm25Params::default()).unwrap());
        let mut cfg = PipelineConfig::new(topology);
        cfg.max_rounds = 2;
        cfg.n_iter = 2;
        let p = Pipeline::new(cfg, Components::new(Arc::new(MockGenerator::new())).with_retriever(r.clone())).unwrap();
        let out = p.run(&items, 3, None);
        prop_assert_eq!(out.len(), items.len());
        for (o, it) in out.iter().zip(&items) {
            prop_assert_eq!(&o.trace.item_id, &it.id);
            prop_assert!(o.trace.error.is_none(), "{:?}", o.trace.error);
            for s in o.trace.flat_steps() {
                let unexpected = matches!(s, Step::Rerank { .. } | Step::Refine { .. } | Step::Judger { .. });
                prop_assert!(!unexpected);
                if let Step::Retrieve { passages, .. } = s {
                    let hits: Vec<_> = passages
                        .iter()
                        .map(|p| ragforge_core::retrieval::ScoredPassage { passage_id: p.id.clone(), score: p.score, rank: p.rank })
                        .collect();
                    prop_assert!(resolve(r.as_ref(), &hits).is_ok());
                }
            }
            let scores = score_trace(&o.trace, &Metric::ALL, 5, RecallMode::AnswerPresence);
            prop_assert!(scores.values().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
