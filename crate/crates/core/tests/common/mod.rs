//! Shared fixtures and the independent metric reference used by the
//! acceptance and property suites.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use convsearch::corpus::{Corpus, Passage};
use convsearch::prompt::{ExampleConversation, FewShotSet};

pub fn passage(id: &str, doc_id: &str, title: &str, text: &str) -> Passage {
    Passage {
        id: id.to_string(),
        doc_id: doc_id.to_string(),
        title: title.to_string(),
        text: text.to_string(),
    }
}

/// The few-shot set behind the checked-in golden prompt fixtures. Do not
/// change without regenerating the fixtures by hand.
pub fn golden_fewshot_set() -> FewShotSet {
    let tower = ExampleConversation::new(vec![
        (
            "who designed the tower?".to_string(),
            passage(
                "e1",
                "ed1",
                "Eiffel Tower",
                "The Eiffel Tower is a wrought-iron lattice tower in Paris.",
            ),
        ),
        (
            "when was it completed?".to_string(),
            passage(
                "e2",
                "ed1",
                "Eiffel Tower",
                "It was completed in 1889 as the entrance arch to the World's Fair.",
            ),
        ),
    ])
    .unwrap();
    let basalt = ExampleConversation::new(vec![(
        "what is basalt?".to_string(),
        passage(
            "b1",
            "bd1",
            "Basalt",
            "Basalt is a fine-grained volcanic rock.",
        ),
    )])
    .unwrap();
    FewShotSet::new(vec![tower, basalt]).unwrap()
}

/// The target passage used by the golden prompt fixtures.
pub fn golden_target_passage() -> Passage {
    passage(
        "t1",
        "td1",
        "Old Bridge",
        "The old bridge crosses the river gorge and was rebuilt in 1566.",
    )
}

/// A corpus where every passage has its own distinctive vocabulary.
pub fn separable_corpus(n: usize) -> Corpus {
    let passages = (0..n)
        .map(|i| {
            passage(
                &format!("p{i}"),
                &format!("d{i}"),
                &format!("Holding {i}"),
                &format!("estate{i} garden{i} archive{i} ledger{i} common notes"),
            )
        })
        .collect();
    Corpus::from_passages(passages).unwrap()
}

/// Writes the separable corpus as a JSONL file.
pub fn write_separable_corpus(path: &Path, n: usize) {
    let corpus = separable_corpus(n);
    convsearch::corpus::save_corpus(&corpus, path, convsearch::corpus::CorpusFormat::Jsonl)
        .unwrap();
}

/// Writes a two-example few-shot file for pipeline runs.
pub fn write_examples_file(path: &Path) {
    let set = golden_fewshot_set();
    set.save(path).unwrap();
}

/// Writes conversational evaluation queries (qid + history) targeting the
/// separable corpus, plus matching qrels.
pub fn write_queries_and_qrels(queries_path: &Path, qrels_path: &Path, n: usize) {
    let mut qf = fs::File::create(queries_path).unwrap();
    for i in 0..n {
        writeln!(
            qf,
            r#"{{"qid":"q{i}","history":["tell me about estate{i}","what does garden{i} hold?"]}}"#
        )
        .unwrap();
    }
    let mut rf = fs::File::create(qrels_path).unwrap();
    for i in 0..n {
        writeln!(rf, "q{i} 0 p{i} 1").unwrap();
    }
}

/// Independent brute-force reference implementations of the evaluation
/// metrics. Deliberately written from scratch against the metric
/// definitions; the production code must agree with these to 1e-9.
pub mod oracle {
    use std::collections::BTreeMap;

    fn relevant_docs(rels: &BTreeMap<String, u32>, threshold: u32) -> Vec<String> {
        let mut out = Vec::new();
        for (doc, grade) in rels {
            if *grade >= threshold {
                out.push(doc.clone());
            }
        }
        out
    }

    pub fn mrr(
        ranking: &[(String, f64)],
        rels: &BTreeMap<String, u32>,
        k: usize,
        threshold: u32,
    ) -> Option<f64> {
        let relevant = relevant_docs(rels, threshold);
        if relevant.is_empty() {
            return None;
        }
        let mut rank = 0usize;
        for (doc, _) in ranking {
            rank += 1;
            if rank > k {
                break;
            }
            if relevant.contains(doc) {
                return Some(1.0 / rank as f64);
            }
        }
        Some(0.0)
    }

    pub fn recall(
        ranking: &[(String, f64)],
        rels: &BTreeMap<String, u32>,
        k: usize,
        threshold: u32,
    ) -> Option<f64> {
        let relevant = relevant_docs(rels, threshold);
        if relevant.is_empty() {
            return None;
        }
        let mut found = 0usize;
        for (rank0, (doc, _)) in ranking.iter().enumerate() {
            if rank0 >= k {
                break;
            }
            if relevant.contains(doc) {
                found += 1;
            }
        }
        Some(found as f64 / relevant.len() as f64)
    }

    pub fn map(
        ranking: &[(String, f64)],
        rels: &BTreeMap<String, u32>,
        k: usize,
        threshold: u32,
    ) -> Option<f64> {
        let relevant = relevant_docs(rels, threshold);
        if relevant.is_empty() {
            return None;
        }
        let mut sum = 0.0;
        for (rank0, (doc, _)) in ranking.iter().enumerate() {
            if rank0 >= k {
                break;
            }
            if relevant.contains(doc) {
                // precision at this rank, recomputed from scratch
                let mut seen = 0usize;
                for (prefix, _) in ranking.iter().take(rank0 + 1) {
                    if relevant.contains(prefix) {
                        seen += 1;
                    }
                }
                sum += seen as f64 / (rank0 + 1) as f64;
            }
        }
        Some(sum / relevant.len() as f64)
    }

    pub fn ndcg(ranking: &[(String, f64)], rels: &BTreeMap<String, u32>, k: usize) -> Option<f64> {
        // Ideal DCG over all judged grades, best grade first, no cutoff.
        let mut grades: Vec<u32> = rels.values().copied().collect();
        grades.sort_unstable();
        grades.reverse();
        let mut idcg = 0.0;
        for (i, g) in grades.iter().enumerate() {
            idcg += f64::from(*g) / ((i as f64) + 2.0).log2();
        }
        if idcg <= 0.0 {
            return None;
        }
        let mut dcg = 0.0;
        for (i, (doc, _)) in ranking.iter().enumerate() {
            if i >= k {
                break;
            }
            let g = rels.get(doc).copied().unwrap_or(0);
            dcg += f64::from(g) / ((i as f64) + 2.0).log2();
        }
        Some(dcg / idcg)
    }
}

/// A randomized evaluation instance: ranked lists plus judgments.
pub struct EvalInstance {
    pub lists: Vec<(String, Vec<(String, f64)>)>,
    pub qrels: BTreeMap<String, BTreeMap<String, u32>>,
}

pub fn random_eval_instance(rng: &mut impl rand::Rng) -> EvalInstance {
    let n_queries = rng.random_range(1..=5);
    let mut lists = Vec::new();
    let mut qrels = BTreeMap::new();
    for q in 0..n_queries {
        let qid = format!("q{q}");
        let n_docs = rng.random_range(1..=20);
        let mut entries = Vec::new();
        for d in 0..n_docs {
            entries.push((format!("d{d}"), rng.random_range(-5.0..5.0)));
        }
        entries.sort_by(|a: &(String, f64), b| b.1.total_cmp(&a.1));
        lists.push((qid.clone(), entries));

        // Sometimes leave a query unjudged; judged queries grade a random
        // subset of a slightly larger doc universe.
        if rng.random_range(0..5) > 0 {
            let mut rels = BTreeMap::new();
            for d in 0..25 {
                if rng.random_range(0..3) == 0 {
                    rels.insert(format!("d{d}"), rng.random_range(0..=3));
                }
            }
            qrels.insert(qid, rels);
        }
    }
    EvalInstance { lists, qrels }
}
