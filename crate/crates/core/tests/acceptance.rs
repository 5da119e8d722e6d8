//! Acceptance suite: one test per criterion, each printing a pass line with
//! its measured evidence. Run with `cargo test --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use convsearch::corpus::{Corpus, CorpusFormat};
use convsearch::eval::{
    compute_report, map_at_k, mrr_at_k, ndcg_at_k, recall_at_k, Metric, Qrels, RankedList,
};
use convsearch::filter::{consistency_filter, filter_with_index, FilterConfig};
use convsearch::generator::{
    generate_conversation, generate_dataset, is_degenerate, switch_passage, CompletionBackend,
    DecodingParams, GenerationConfig, MockBackend,
};
use convsearch::pipeline::{self, PipelineConfig};
use convsearch::prompt::{build_first_turn_template, build_full_template, render_prompt};
use convsearch::retriever::{
    build_index, in_batch_loss, search, train, DualEncoderModel, Tower, TrainConfig, TrainingPair,
};

use common::{oracle, passage, separable_corpus};

fn ranked_list_from(qid: &str, entries: &[(String, f64)]) -> RankedList {
    RankedList::new(qid, entries.to_vec())
}

fn qrels_from(map: &BTreeMap<String, BTreeMap<String, u32>>) -> Qrels {
    let mut qrels = Qrels::new();
    for (qid, rels) in map {
        for (doc, grade) in rels {
            qrels.insert(qid, doc, *grade);
        }
    }
    qrels
}

/// Criterion 1: the four metrics agree with an independently written
/// brute-force reference to 1e-9 on 100 randomized instances, including the
/// pinned worked examples.
#[test]
fn c1_metric_oracle_equivalence() {
    let started = Instant::now();

    // Pinned worked example: relevant at ranks 1 and 4 of 2 -> MAP@10 = 0.75.
    let run = ranked_list_from(
        "q",
        &[
            ("d1".to_string(), 9.0),
            ("d2".to_string(), 8.0),
            ("d3".to_string(), 7.0),
            ("d4".to_string(), 6.0),
        ],
    );
    let mut qrels = Qrels::new();
    qrels.insert("q", "d1", 1);
    qrels.insert("q", "d4", 1);
    let map = map_at_k(&run, &qrels, 10, 1).unwrap();
    assert!((map - 0.75).abs() < 1e-9, "pinned MAP@10: {map}");

    // Pinned worked example: graded run [2, 0, 1] vs ideal [2, 1, 0].
    let mut qrels = Qrels::new();
    qrels.insert("q", "d1", 2);
    qrels.insert("q", "d2", 0);
    qrels.insert("q", "d3", 1);
    let run3 = ranked_list_from(
        "q",
        &[
            ("d1".to_string(), 3.0),
            ("d2".to_string(), 2.0),
            ("d3".to_string(), 1.0),
        ],
    );
    let ndcg = ndcg_at_k(&run3, &qrels, 3).unwrap();
    let pinned = 2.5 / (2.0 + 1.0 / 3.0_f64.log2());
    assert!((ndcg - pinned).abs() < 1e-9, "pinned NDCG@3: {ndcg}");
    assert!((ndcg - 0.9503).abs() < 1e-4, "pinned NDCG@3 approx: {ndcg}");

    let mut rng = ChaCha8Rng::seed_from_u64(0x2024_0810);
    let mut comparisons = 0usize;
    for _ in 0..100 {
        let instance = common::random_eval_instance(&mut rng);
        let qrels = qrels_from(&instance.qrels);
        let k = rng.random_range(1..=25);
        for (qid, entries) in &instance.lists {
            let list = ranked_list_from(qid, entries);
            let rels = instance.qrels.get(qid);
            let want_mrr = rels.and_then(|r| oracle::mrr(entries, r, k, 1));
            let want_recall = rels.and_then(|r| oracle::recall(entries, r, k, 1));
            let want_map = rels.and_then(|r| oracle::map(entries, r, k, 1));
            let want_ndcg = rels.and_then(|r| oracle::ndcg(entries, r, k));
            let cases = [
                ("mrr", mrr_at_k(&list, &qrels, k, 1), want_mrr),
                ("recall", recall_at_k(&list, &qrels, k, 1), want_recall),
                ("map", map_at_k(&list, &qrels, k, 1), want_map),
                ("ndcg", ndcg_at_k(&list, &qrels, k), want_ndcg),
            ];
            for (name, got, want) in cases {
                match (got, want) {
                    (Some(g), Some(w)) => {
                        assert!((g - w).abs() < 1e-9, "{name}@{k} {qid}: {g} vs {w}")
                    }
                    (None, None) => {}
                    other => panic!("{name}@{k} {qid}: exclusion mismatch {other:?}"),
                }
                comparisons += 1;
            }
        }
        // Means agree as well (checked through the report aggregation path).
        let lists: Vec<RankedList> = instance
            .lists
            .iter()
            .map(|(qid, entries)| ranked_list_from(qid, entries))
            .collect();
        if lists.iter().any(|l| qrels.judgments(&l.query_id).is_some()) {
            let report = compute_report(
                &lists,
                &qrels,
                &[Metric::Mrr { k: Some(k) }, Metric::Ndcg { k }],
                1,
            )
            .unwrap();
            let oracle_vals: Vec<f64> = instance
                .lists
                .iter()
                .filter_map(|(qid, entries)| {
                    instance.qrels.get(qid).and_then(|r| oracle::mrr(entries, r, k, 1))
                })
                .collect();
            if !oracle_vals.is_empty() {
                let oracle_mean = oracle_vals.iter().sum::<f64>() / oracle_vals.len() as f64;
                let got = report.metrics[&format!("mrr@{k}")].mean;
                let rounded = (oracle_mean * 10_000.0).round() / 10_000.0;
                assert!((got - rounded).abs() < 1e-9, "mean mrr@{k}: {got} vs {rounded}");
            }
        }
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:.2?}");
    println!(
        "ACCEPTANCE C1 metric-oracle-equivalence: PASS ({comparisons} comparisons over 100 instances, {elapsed:.2?})"
    );
}

/// Criterion 2: analytic gradients match central finite differences within
/// 1e-4 relative error on 20 random batches.
#[test]
fn c2_gradient_correctness() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for trial in 0..20 {
        let b = rng.random_range(2..=4);
        let dim = rng.random_range(2..=8);
        let vocab: Vec<String> = (0..12).map(|i| format!("term{trial}x{i}")).collect();
        let mut text = |rng: &mut ChaCha8Rng| -> String {
            let n = rng.random_range(2..=5);
            (0..n)
                .map(|_| vocab[rng.random_range(0..vocab.len())].clone())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let passages: Vec<_> = (0..b)
            .map(|i| passage(&format!("p{i}"), &format!("d{i}"), "", &text(&mut rng)))
            .collect();
        let corpus = Corpus::from_passages(passages).unwrap();
        let pairs: Vec<TrainingPair> = (0..b)
            .map(|i| TrainingPair {
                query_context: text(&mut rng),
                positive_id: format!("p{i}"),
            })
            .collect();
        let model = DualEncoderModel::new_seeded(dim, 1000 + trial as u64);
        let (_, grads) = in_batch_loss(&model, &pairs, &corpus).unwrap();

        let h = 1e-4;
        for (tower, rows) in [
            (Tower::Query, &grads.query_rows),
            (Tower::Passage, &grads.passage_rows),
        ] {
            for (&feature, row) in rows {
                for (k, &analytic) in row.iter().enumerate() {
                    let mut plus = model.clone();
                    plus.nudge_weight(tower, feature, k, h);
                    let mut minus = model.clone();
                    minus.nudge_weight(tower, feature, k, -h);
                    let (lp, _) = in_batch_loss(&plus, &pairs, &corpus).unwrap();
                    let (lm, _) = in_batch_loss(&minus, &pairs, &corpus).unwrap();
                    let fd = (lp - lm) / (2.0 * h);
                    let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
                    assert!(
                        rel < 1e-4,
                        "trial {trial} {tower:?} f{feature} dim{k}: analytic {analytic}, fd {fd}"
                    );
                    max_rel = max_rel.max(rel);
                    checked += 1;
                }
            }
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:.2?}");
    println!(
        "ACCEPTANCE C2 gradient-correctness: PASS ({checked} weights over 20 batches, max rel err {max_rel:.2e}, {elapsed:.2?})"
    );
}

/// Criterion 3: a zero-initialized model scores ln(B) exactly.
#[test]
fn c3_loss_anchor() {
    for b in [2usize, 4, 8] {
        let passages: Vec<_> = (0..b)
            .map(|i| passage(&format!("p{i}"), &format!("d{i}"), "", &format!("token{i} body")))
            .collect();
        let corpus = Corpus::from_passages(passages).unwrap();
        let pairs: Vec<TrainingPair> = (0..b)
            .map(|i| TrainingPair {
                query_context: format!("query about token{i}"),
                positive_id: format!("p{i}"),
            })
            .collect();
        let model = DualEncoderModel::zeros(16);
        let (loss, _) = in_batch_loss(&model, &pairs, &corpus).unwrap();
        let expected = (b as f64).ln();
        assert!(
            (loss - expected).abs() < 1e-12,
            "B={b}: loss {loss} vs ln(B) {expected}"
        );
    }
    println!("ACCEPTANCE C3 loss-anchor: PASS (loss = ln(B) to 1e-12 for B in {{2, 4, 8}})");
}

fn retrieval_mrr_at_5(model: &DualEncoderModel, corpus: &Corpus, queries: &[(String, String)]) -> f64 {
    let index = build_index(model, corpus).unwrap();
    let mut qrels = Qrels::new();
    let mut lists = Vec::new();
    for (qid, (query, positive)) in queries.iter().enumerate() {
        let qid = format!("q{qid}");
        qrels.insert(&qid, positive, 1);
        let emb = model.encode_context(query);
        let hits = search(&index, &emb, 5).unwrap();
        lists.push(RankedList::new(qid, hits));
    }
    let report = compute_report(&lists, &qrels, &[Metric::Mrr { k: Some(5) }], 1).unwrap();
    report.metrics["mrr@5"].mean
}

/// Criterion 4: on the vocabulary-separable toy task the trained retriever
/// reaches MRR@5 >= 0.9 on held-out queries; the untrained model stays <= 0.1.
#[test]
fn c4_training_efficacy() {
    let started = Instant::now();
    let corpus = separable_corpus(100);
    let mut pairs = Vec::new();
    for i in 0..100 {
        pairs.push(TrainingPair {
            query_context: format!("tell me about estate{i} and garden{i}"),
            positive_id: format!("p{i}"),
        });
        pairs.push(TrainingPair {
            query_context: format!("more on archive{i} ledger{i} today"),
            positive_id: format!("p{i}"),
        });
    }
    assert_eq!(pairs.len(), 200);
    // Held-out queries mix tokens from both training variants.
    let held_out: Vec<(String, String)> = (0..50)
        .map(|i| {
            (
                format!("what about estate{i} ledger{i}"),
                format!("p{i}"),
            )
        })
        .collect();

    let cfg = TrainConfig {
        batch_size: 32,
        learning_rate: 2.0,
        epochs: 40,
        embedding_dim: 32,
        seed: 7,
    };
    let untrained = DualEncoderModel::new_seeded(cfg.embedding_dim, cfg.seed);
    let untrained_mrr = retrieval_mrr_at_5(&untrained, &corpus, &held_out);
    let (model, trace) = train(&pairs, &corpus, &cfg).unwrap();
    let trained_mrr = retrieval_mrr_at_5(&model, &corpus, &held_out);

    let elapsed = started.elapsed();
    assert!(
        trained_mrr >= 0.9,
        "trained MRR@5 {trained_mrr} (final loss {}, trace {:?})",
        trace.final_loss,
        trace.epoch_losses
    );
    assert!(untrained_mrr <= 0.1, "untrained MRR@5 {untrained_mrr}");
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:.2?}");
    println!(
        "ACCEPTANCE C4 training-efficacy: PASS (trained MRR@5 {trained_mrr:.4} vs untrained {untrained_mrr:.4}, {elapsed:.2?})"
    );
}

/// The consistency-filter fixture: 50 topic passages with two well-grounded
/// pairs each, 50 decoy passages receiving adversarially mismatched pairs
/// whose queries borrow topic vocabulary that the matched pairs ground
/// correctly and more often.
struct FilterFixture {
    corpus: Corpus,
    pairs: Vec<TrainingPair>,
    matched: usize,
    held_out: Vec<(String, String)>,
}

fn filter_fixture() -> FilterFixture {
    let n = 50usize;
    let mut passages = Vec::new();
    for j in 0..n {
        passages.push(passage(
            &format!("p{j}"),
            &format!("topic{j}"),
            &format!("Topic {j}"),
            &format!("t{j}a t{j}b t{j}c t{j}d t{j}e t{j}f reference notes"),
        ));
    }
    for m in 0..n {
        passages.push(passage(
            &format!("decoy{m}"),
            &format!("decoy{m}"),
            &format!("Decoy {m}"),
            &format!("d{m}a d{m}b d{m}c reference notes"),
        ));
    }
    let corpus = Corpus::from_passages(passages).unwrap();

    let topic_tokens = |j: usize, order: &[&str]| -> Vec<String> {
        order.iter().map(|x| format!("t{j}{x}")).collect()
    };
    let mut pairs = Vec::new();
    for j in 0..n {
        let toks = topic_tokens(j, &["a", "b", "c", "d", "e", "f"]);
        pairs.push(TrainingPair {
            query_context: format!("tell about {}", toks.join(" ")),
            positive_id: format!("p{j}"),
        });
        let rev = topic_tokens(j, &["f", "e", "d", "c", "b", "a"]);
        pairs.push(TrainingPair {
            query_context: format!("{} about tell", rev.join(" ")),
            positive_id: format!("p{j}"),
        });
    }
    let matched = pairs.len();
    // Adversarially mismatched pairs: each query is a bag-equal rewording of
    // a matched query (identical hashed features) claimed for a decoy
    // passage. Identical features force one shared ranking per bag, and the
    // matched pairs hold the per-bag majority, so the round trip resolves to
    // the true topic passage. A mismatch with any vocabulary of its own
    // would instead be memorized by the initial retriever.
    for j in 0..n {
        let toks = topic_tokens(j, &["b", "a", "d", "c", "f", "e"]);
        pairs.push(TrainingPair {
            query_context: format!("about {} tell", toks.join(" ")),
            positive_id: format!("decoy{j}"),
        });
        let u = (j + 17) % n;
        let utoks = topic_tokens(u, &["c", "f", "b", "e", "a", "d"]);
        pairs.push(TrainingPair {
            query_context: format!("tell {} about", utoks.join(" ")),
            positive_id: format!("decoy{j}"),
        });
    }
    assert_eq!(pairs.len(), 2 * matched);

    let held_out: Vec<(String, String)> = (0..n)
        .map(|j| (format!("what explains t{j}a t{j}c"), format!("p{j}")))
        .collect();
    FilterFixture {
        corpus,
        pairs,
        matched,
        held_out,
    }
}

/// Criterion 5: with top_k = 1 the filter drops >= 90% of mismatched pairs
/// and keeps >= 90% of matched pairs; kept sets are monotone in top_k; and
/// training on the filtered pairs beats training on everything by >= 0.05
/// held-out MRR@5.
#[test]
fn c5_consistency_filter_behavior() {
    let started = Instant::now();
    let fixture = filter_fixture();
    let initial_cfg = TrainConfig {
        batch_size: 16,
        learning_rate: 2.0,
        epochs: 20,
        embedding_dim: 32,
        seed: 3,
    };
    let outcome = consistency_filter(
        &fixture.pairs,
        &fixture.corpus,
        &FilterConfig { top_k: 1 },
        &initial_cfg,
    )
    .unwrap();

    let is_mismatched = |p: &TrainingPair| p.positive_id.starts_with("decoy");
    let mismatched_total = fixture.pairs.iter().filter(|p| is_mismatched(p)).count();
    let mismatched_dropped = outcome.quarantined.iter().filter(|p| is_mismatched(p)).count();
    let matched_kept = outcome.kept.iter().filter(|p| !is_mismatched(p)).count();
    assert_eq!(mismatched_total, fixture.matched);
    assert!(
        mismatched_dropped as f64 >= 0.9 * mismatched_total as f64,
        "dropped {mismatched_dropped}/{mismatched_total} mismatched"
    );
    assert!(
        matched_kept as f64 >= 0.9 * fixture.matched as f64,
        "kept {matched_kept}/{} matched",
        fixture.matched
    );

    // Exact monotonicity at a frozen model and index.
    let index = build_index(&outcome.initial_model, &fixture.corpus).unwrap();
    let mut previous: Option<Vec<TrainingPair>> = None;
    for top_k in 1..=5 {
        let (kept, _, _) =
            filter_with_index(&fixture.pairs, &outcome.initial_model, &index, top_k).unwrap();
        if let Some(prev) = &previous {
            for pair in prev {
                assert!(kept.contains(pair), "kept({}) not within kept({top_k})", top_k - 1);
            }
        }
        previous = Some(kept);
    }

    // Filtered-data training beats unfiltered-data training on held-out
    // MRR@5. The arms are size-matched (the unfiltered arm trains on a
    // seeded same-size sample of the unfiltered pool), mirroring ablation
    // protocols that hold training data size identical across settings.
    let final_cfg = TrainConfig {
        batch_size: 32,
        learning_rate: 2.0,
        epochs: 20,
        embedding_dim: 32,
        seed: 9,
    };
    let mut unfiltered_sample = fixture.pairs.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for i in (1..unfiltered_sample.len()).rev() {
        let j = rng.random_range(0..=i);
        unfiltered_sample.swap(i, j);
    }
    unfiltered_sample.truncate(outcome.kept.len());
    let (filtered_model, _) = train(&outcome.kept, &fixture.corpus, &final_cfg).unwrap();
    let (unfiltered_model, _) = train(&unfiltered_sample, &fixture.corpus, &final_cfg).unwrap();
    let filtered_mrr = retrieval_mrr_at_5(&filtered_model, &fixture.corpus, &fixture.held_out);
    let unfiltered_mrr = retrieval_mrr_at_5(&unfiltered_model, &fixture.corpus, &fixture.held_out);
    assert!(
        filtered_mrr - unfiltered_mrr >= 0.05,
        "filtered {filtered_mrr} vs unfiltered {unfiltered_mrr}"
    );

    let elapsed = started.elapsed();
    println!(
        "ACCEPTANCE C5 consistency-filter: PASS (dropped {mismatched_dropped}/{mismatched_total} mismatched, kept {matched_kept}/{} matched, filtered MRR@5 {filtered_mrr:.4} vs unfiltered {unfiltered_mrr:.4}, {elapsed:.2?})",
        fixture.matched
    );
}

/// Criterion 6: turn-1 prompts are byte-equal to the checked-in golden
/// fixture built from the first-turn template; follow-up prompts embed the
/// full template and exactly the prior queries.
#[test]
fn c6_two_stage_prompting() {
    let set = common::golden_fewshot_set();
    let target = common::golden_target_passage();
    let t_first = build_first_turn_template(&set).unwrap();
    let t_full = build_full_template(&set).unwrap();

    let golden_first = include_str!("data/golden_prompt_first_turn.txt");
    let got_first = render_prompt(&t_first, &target, &[]).unwrap();
    assert_eq!(got_first, golden_first, "turn-1 prompt diverges from golden fixture");

    let priors = vec![
        "what is the old bridge?".to_string(),
        "when was it rebuilt?".to_string(),
    ];
    let golden_full = include_str!("data/golden_prompt_full.txt");
    let got_full = render_prompt(&t_full, &target, &priors).unwrap();
    assert_eq!(got_full, golden_full, "turn-3 prompt diverges from golden fixture");

    // Structural check across a generated conversation.
    struct Recording {
        inner: MockBackend,
        prompts: std::sync::Mutex<Vec<String>>,
    }
    impl CompletionBackend for Recording {
        fn complete(&self, prompt: &str, params: &DecodingParams) -> convsearch::Result<String> {
            self.prompts.lock().unwrap().push(prompt.to_string());
            self.inner.complete(prompt, params)
        }
        fn id(&self) -> String {
            "recording".to_string()
        }
    }
    let corpus = separable_corpus(10);
    let backend = Recording {
        inner: MockBackend::new(3),
        prompts: std::sync::Mutex::new(Vec::new()),
    };
    let cfg = GenerationConfig {
        turns_per_conversation: 5,
        p_ps: 0.4,
        max_regeneration_attempts: 3,
        seed: 0,
    };
    let outcome = generate_conversation(
        &corpus,
        &t_first,
        &t_full,
        &backend,
        &cfg,
        &DecodingParams::default(),
        77,
    )
    .unwrap();
    let conv = outcome.conversation.unwrap();
    assert_eq!(conv.turns.len(), 5);
    let prompts = backend.prompts.lock().unwrap();
    for (t, prompt) in prompts.iter().enumerate() {
        if t == 0 {
            assert!(prompt.starts_with(&t_first.text));
        } else {
            assert!(prompt.starts_with(&t_full.text), "turn {} lacks full template", t + 1);
        }
        assert!(prompt.ends_with(&format!("Q{}:", t + 1)));
        for (j, turn) in conv.turns.iter().enumerate() {
            let line = format!("Q{}: {}\n", j + 1, turn.query);
            let tail = &prompt[prompt.rfind("\nTitle: ").unwrap()..];
            assert_eq!(
                tail.contains(&line),
                j < t,
                "turn {} prompt vs prior query {}",
                t + 1,
                j + 1
            );
        }
    }
    println!(
        "ACCEPTANCE C6 two-stage-prompting: PASS (golden fixtures byte-equal; {} prompts structurally exact)",
        prompts.len()
    );
}

/// Criterion 7: switching is off at p_ps = 0, total at p_ps = 1, and a fair
/// coin over 10,000 seeded draws lands in [0.48, 0.52].
#[test]
fn c7_passage_switching() {
    let corpus = separable_corpus(10);
    let set = common::golden_fewshot_set();
    let t_first = build_first_turn_template(&set).unwrap();
    let t_full = build_full_template(&set).unwrap();
    let backend = MockBackend::new(1);
    let params = DecodingParams::default();

    for (p_ps, expect_all) in [(0.0, false), (1.0, true)] {
        let cfg = GenerationConfig {
            turns_per_conversation: 5,
            p_ps,
            max_regeneration_attempts: 3,
            seed: 0,
        };
        for conv_seed in 0..20 {
            let outcome = generate_conversation(
                &corpus, &t_first, &t_full, &backend, &cfg, &params, conv_seed,
            )
            .unwrap();
            let conv = outcome.conversation.unwrap();
            assert!(!conv.turns[0].switched, "turn 1 never switches");
            for turn in &conv.turns[1..] {
                assert_eq!(turn.switched, expect_all, "p_ps={p_ps}");
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let current = corpus.get("p0").unwrap().clone();
    let trials = 10_000;
    let mut switches = 0usize;
    for _ in 0..trials {
        let (_, switched) = switch_passage(&current, &corpus, 0.5, &mut rng);
        switches += usize::from(switched);
    }
    let fraction = switches as f64 / trials as f64;
    assert!(
        (0.48..=0.52).contains(&fraction),
        "switch fraction {fraction}"
    );
    println!(
        "ACCEPTANCE C7 passage-switching: PASS (p=0 none, p=1 all, p=0.5 fraction {fraction:.4} over {trials} draws)"
    );
}

fn pipeline_fixture_config(dir: &std::path::Path, workers: usize) -> PipelineConfig {
    let corpus_path = dir.join("corpus.jsonl");
    let examples_path = dir.join("examples.jsonl");
    let queries_path = dir.join("queries.jsonl");
    let qrels_path = dir.join("qrels.txt");
    if !corpus_path.exists() {
        common::write_separable_corpus(&corpus_path, 100);
        common::write_examples_file(&examples_path);
        common::write_queries_and_qrels(&queries_path, &qrels_path, 5);
    }
    PipelineConfig {
        seed: 1234,
        workers,
        output_dir: dir.join("runs"),
        corpus: pipeline::CorpusSection {
            path: corpus_path,
            format: CorpusFormat::Jsonl,
        },
        examples: pipeline::ExamplesSection {
            path: examples_path,
        },
        backend: pipeline::BackendSection::default(),
        generation: pipeline::GenerationSection {
            conversations: 25,
            turns_per_conversation: 4,
            p_ps: 0.3,
            max_regeneration_attempts: 3,
        },
        decoding: DecodingParams::default(),
        prompt: pipeline::PromptSection::default(),
        filter: FilterConfig { top_k: 5 },
        train: pipeline::TrainSection {
            batch_size: 32,
            learning_rate: 1.0,
            epochs: 8,
            embedding_dim: 32,
        },
        retrieve: pipeline::RetrieveSection {
            queries_path: Some(queries_path),
            k: 5,
            run_tag: "acceptance".to_string(),
        },
        eval: pipeline::EvalSection {
            qrels_path: Some(qrels_path),
            run_path: None,
            metrics: vec![
                "mrr@5".to_string(),
                "r@5".to_string(),
                "map@10".to_string(),
                "ndcg@3".to_string(),
            ],
            rel_threshold: 1,
        },
    }
}

/// Criterion 8: the full pipeline with the mock backend is byte-identical
/// across repeated runs and across worker counts {1, 4}.
#[test]
fn c8_end_to_end_determinism() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let runs = [("a", 1usize), ("b", 1), ("c", 4)];
    let mut artifacts: Vec<BTreeMap<&str, Vec<u8>>> = Vec::new();
    let compared = [
        pipeline::DIALOGUES_FILE,
        pipeline::PAIRS_KEPT_FILE,
        pipeline::MODEL_FILE,
        pipeline::RUN_FILE,
        pipeline::EVAL_REPORT_JSON,
        pipeline::MANIFEST_FILE,
    ];
    for (name, workers) in runs {
        let cfg = pipeline_fixture_config(dir.path(), workers);
        let run_dir = dir.path().join(format!("run-{name}"));
        let report = pipeline::cmd_pipeline(&cfg, &run_dir).unwrap();
        assert!(report.metrics.contains_key("mrr@5"));
        let mut files = BTreeMap::new();
        for file in compared {
            files.insert(file, std::fs::read(run_dir.join(file)).unwrap());
        }
        assert!(
            !files[pipeline::PAIRS_KEPT_FILE].is_empty(),
            "kept pairs must not be empty"
        );
        artifacts.push(files);
    }
    for file in compared {
        assert_eq!(
            artifacts[0][file], artifacts[1][file],
            "{file} differs between identical runs"
        );
        assert_eq!(
            artifacts[0][file], artifacts[2][file],
            "{file} differs between worker counts 1 and 4"
        );
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:.2?}");
    println!(
        "ACCEPTANCE C8 end-to-end-determinism: PASS ({} artifacts byte-identical across 3 runs, {elapsed:.2?})",
        compared.len()
    );
}

/// Criterion 9: every pinned degeneration rule has a positive and a negative
/// case, and accepted conversations re-checked post hoc are violation-free.
#[test]
fn c9_degeneration_filter() {
    let no_priors: Vec<String> = Vec::new();

    // Rule 1: token count bounds.
    assert!(is_degenerate("why?", &no_priors));
    assert!(is_degenerate(&vec!["word"; 65].join(" "), &no_priors));
    assert!(!is_degenerate("What year was it donated?", &no_priors));

    // Rule 2: repeated 4-gram.
    assert!(is_degenerate("when when when when was it", &no_priors));
    assert!(is_degenerate(
        "tell me about the fort tell me about the fort",
        &no_priors
    ));
    assert!(!is_degenerate("what is the name of the building?", &no_priors));

    // Rule 3: case-folded duplicate of a prior query.
    let priors = vec!["what year was it donated?".to_string()];
    assert!(is_degenerate("WHAT YEAR WAS IT DONATED?", &priors));
    assert!(!is_degenerate("who donated the collection?", &priors));

    // Rule 4: token-Jaccard near-duplicate.
    let priors = vec!["what year was the palazzo donated".to_string()];
    assert!(is_degenerate(
        "what year was the palazzo donated again",
        &priors
    ));
    assert!(!is_degenerate("where is the painting gallery now?", &priors));

    // Rule 5: demonstration-format artifacts.
    assert!(is_degenerate("Passage: the fort was built in 1901", &no_priors));
    assert!(is_degenerate("fine\nQ2: and then?", &no_priors));
    assert!(!is_degenerate("Quite interesting: what houses the museum?", &no_priors));

    // The accepted query from a real generated dialogue style, with priors.
    let priors = vec![
        "what is the name of the building that houses the museum?".to_string(),
        "what is the palazzo best known for?".to_string(),
    ];
    assert!(!is_degenerate("What year was it donated?", &priors));

    // Post-hoc sweep: each accepted conversation replays cleanly through the
    // filter with the history it was accepted under.
    let corpus = separable_corpus(30);
    let set = common::golden_fewshot_set();
    let t_first = build_first_turn_template(&set).unwrap();
    let t_full = build_full_template(&set).unwrap();
    let backend = MockBackend::new(11);
    let cfg = GenerationConfig {
        turns_per_conversation: 5,
        p_ps: 0.3,
        max_regeneration_attempts: 3,
        seed: 55,
    };
    let mut sink = Vec::new();
    let report = generate_dataset(
        &corpus,
        &t_first,
        &t_full,
        &backend,
        &cfg,
        &DecodingParams::default(),
        20,
        &mut sink,
    )
    .unwrap();
    assert!(report.emitted > 0);
    let mut turns_checked = 0usize;
    for line in String::from_utf8(sink).unwrap().lines() {
        let conv: convsearch::generator::SyntheticConversation =
            serde_json::from_str(line).unwrap();
        for (i, turn) in conv.turns.iter().enumerate() {
            let priors: Vec<String> = conv.turns[..i].iter().map(|t| t.query.clone()).collect();
            assert!(
                !is_degenerate(&turn.query, &priors),
                "accepted query violates the filter post hoc: {:?}",
                turn.query
            );
            turns_checked += 1;
        }
    }
    println!(
        "ACCEPTANCE C9 degeneration-filter: PASS (5 rules with positive and negative cases; {turns_checked} accepted turns violation-free)"
    );
}
