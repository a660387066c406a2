use std::collections::{BTreeMap, HashSet};

use layoutmatch::corpus::{
    dedup, generate_synthetic, load_splits, make_zero_shot_splits, save_splits, BBox, Corpus, Document, SynthConfig,
};
use layoutmatch::tokenizer::{encode, quantize_centroid, Vocab, CLS, COORD_MAX, SEP};
use proptest::prelude::*;

fn small_synth(seed: u64, s: f64) -> SynthConfig {
    SynthConfig {
        n_classes: 4,
        docs_per_class: 3,
        min_tokens: 5,
        max_tokens: 12,
        layout_signal_strength: s,
        rng_seed: seed,
    }
}

fn plain(id: usize, tokens: &[&str], label: Option<&str>) -> Document {
    Document {
        id: format!("d{id}"),
        tokens: tokens.iter().map(|t| t.to_string()).collect(),
        bboxes: (0..tokens.len())
            .map(|i| BBox::new(i as f64, 0.0, i as f64 + 1.0, 1.0))
            .collect(),
        page_width: 50.0,
        page_height: 50.0,
        label: label.map(str::to_string),
    }
}

/// Reference dedup: keep a document unless an earlier kept one has the same token sequence.
fn dedup_oracle(docs: &[Document]) -> Vec<String> {
    let mut kept: Vec<&Document> = Vec::new();
    for d in docs {
        if !kept.iter().any(|k| k.tokens == d.tokens) {
            kept.push(d);
        }
    }
    kept.iter().map(|d| d.id.clone()).collect()
}

fn token_docs() -> impl Strategy<Value = Vec<Vec<String>>> {
    prop::collection::vec(
        prop::collection::vec(
            prop::sample::select(vec!["a", "b", "ab", "c", "a b"]).prop_map(String::from),
            0..4,
        ),
        0..12,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn jsonl_round_trip_is_lossless(seed in any::<u64>(), s in 0.0f64..=1.0, unlabeled in any::<bool>()) {
        let mut corpus = generate_synthetic(&small_synth(seed, s));
        if unlabeled {
            corpus = corpus.unlabeled();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        corpus.write_jsonl(&path).unwrap();
        let back = Corpus::load_jsonl(&path).unwrap();
        prop_assert_eq!(&back, &corpus);
        let again = dir.path().join("d.jsonl");
        back.write_jsonl(&again).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn dedup_matches_pairwise_scan_and_is_idempotent(seqs in token_docs()) {
        let docs: Vec<Document> = seqs
            .iter()
            .enumerate()
            .map(|(i, s)| plain(i, &s.iter().map(String::as_str).collect::<Vec<_>>(), None))
            .collect();
        for d in &docs {
            d.validate().unwrap();
        }
        let corpus = Corpus::new(docs.clone());
        let once = dedup(&corpus);
        let ids: Vec<String> = once.documents.iter().map(|d| d.id.clone()).collect();
        prop_assert_eq!(ids, dedup_oracle(&docs));
        prop_assert_eq!(dedup(&once), once);
    }

    #[test]
    fn quantized_centroids_stay_on_grid(
        x0 in -50.0f64..500.0, w in 0.0f64..300.0, y0 in -50.0f64..500.0, h in 0.0f64..300.0,
        pw in 1.0f64..400.0, ph in 1.0f64..400.0,
    ) {
        let (xq, yq) = quantize_centroid(&BBox::new(x0, y0, x0 + w, y0 + h), pw, ph);
        prop_assert!(xq <= COORD_MAX && yq <= COORD_MAX);
    }

    #[test]
    fn quantization_is_monotone_in_x(a in 0.0f64..200.0, b in 0.0f64..200.0, pw in 1.0f64..150.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let q = |c: f64| quantize_centroid(&BBox::new(c, 0.0, c, 0.0), pw, 10.0).0;
        prop_assert!(q(lo) <= q(hi));
    }

    #[test]
    fn encoded_documents_are_framed_and_bounded(seed in any::<u64>(), max_len in 3usize..20) {
        let corpus = generate_synthetic(&small_synth(seed, 0.5));
        let vocab = Vocab::build(&corpus, 30, 1).unwrap();
        for d in &corpus.documents {
            let t = encode(d, &vocab, max_len);
            prop_assert!(t.len() <= max_len);
            prop_assert_eq!(t.len(), d.tokens.len().min(max_len - 2) + 2);
            prop_assert_eq!(t.ids[0], CLS);
            prop_assert_eq!(*t.ids.last().unwrap(), SEP);
            prop_assert!(t.ids.iter().all(|&i| (i as usize) < vocab.len()));
            let last = t.len() - 1;
            prop_assert_eq!((t.xq[0], t.yq[0], t.xq[last], t.yq[last]), (0, 0, 0, 0));
        }
    }
}

#[test]
fn split_disjointness_holds_for_every_arity_up_to_twenty_classes() {
    let mut checked = 0;
    for n in 3..=20usize {
        let names: Vec<String> = (0..n).map(|i| format!("class{i:02}")).collect();
        let corpus = Corpus::new(
            names
                .iter()
                .enumerate()
                .flat_map(|(i, c)| [plain(2 * i, &["x"], Some(c)), plain(2 * i + 1, &["y"], Some(c))])
                .collect(),
        );
        for n_test in 1..n {
            for n_val in 1..n - n_test {
                let n_train = n - n_test - n_val;
                for n_splits in 1..=n / n_test {
                    let splits = make_zero_shot_splits(&names, n_splits, n_train, n_val, n_test, &corpus).unwrap();
                    assert_eq!(splits.len(), n_splits);
                    let mut tests_seen = HashSet::new();
                    for s in &splits {
                        s.validate(Some(&corpus)).unwrap();
                        let (tr, va, te): (HashSet<_>, HashSet<_>, HashSet<_>) = (
                            s.train_classes.iter().collect(),
                            s.val_classes.iter().collect(),
                            s.test_classes.iter().collect(),
                        );
                        assert_eq!((tr.len(), va.len(), te.len()), (n_train, n_val, n_test));
                        assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
                        for c in &s.test_classes {
                            assert!(tests_seen.insert(c.clone()), "test class {c} repeats across splits");
                        }
                        assert_eq!(s.test_docs.len(), 2 * n_test);
                        assert_eq!(s.train_docs.len() + s.val_docs.len() + s.test_docs.len(), 2 * n);
                    }
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 1000, "{checked}");
}

#[test]
fn split_arity_violations_are_rejected() {
    let names: Vec<String> = (0..6).map(|i| format!("c{i}")).collect();
    let corpus = Corpus::default();
    assert!(make_zero_shot_splits(&names, 1, 3, 2, 2, &corpus).is_err());
    assert!(make_zero_shot_splits(&names, 4, 2, 2, 2, &corpus).is_err());
    assert!(make_zero_shot_splits(&names, 0, 2, 2, 2, &corpus).is_err());
}

#[test]
fn split_file_round_trip() {
    let corpus = generate_synthetic(&SynthConfig {
        docs_per_class: 2,
        ..SynthConfig::default()
    });
    let splits = make_zero_shot_splits(&corpus.class_names, 4, 8, 4, 4, &corpus).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("splits.jsonl");
    save_splits(&splits, &path).unwrap();
    assert_eq!(load_splits(&path).unwrap(), splits);
}

fn unigram(corpus: &Corpus, class: &str) -> BTreeMap<String, f64> {
    let mut counts = BTreeMap::new();
    let mut total = 0.0;
    for d in corpus.documents.iter().filter(|d| d.label.as_deref() == Some(class)) {
        for t in &d.tokens {
            *counts.entry(t.clone()).or_insert(0.0) += 1.0;
            total += 1.0;
        }
    }
    counts.values_mut().for_each(|v| *v /= total);
    counts
}

fn total_variation(p: &BTreeMap<String, f64>, q: &BTreeMap<String, f64>) -> f64 {
    let keys: HashSet<&String> = p.keys().chain(q.keys()).collect();
    0.5 * keys
        .into_iter()
        .map(|k| (p.get(k).copied().unwrap_or(0.0) - q.get(k).copied().unwrap_or(0.0)).abs())
        .sum::<f64>()
}

fn pooled_unigram(corpus: &Corpus) -> BTreeMap<String, f64> {
    let mut counts = BTreeMap::new();
    let total = corpus.documents.iter().map(|d| d.tokens.len()).sum::<usize>() as f64;
    for t in corpus.documents.iter().flat_map(|d| &d.tokens) {
        *counts.entry(t.clone()).or_insert(0.0) += 1.0 / total;
    }
    counts
}

#[test]
fn pure_layout_signal_leaves_token_distributions_indistinguishable() {
    for seed in [1, 2, 3, 4, 5] {
        let corpus = generate_synthetic(&SynthConfig {
            docs_per_class: 100,
            layout_signal_strength: 1.0,
            rng_seed: seed,
            ..SynthConfig::default()
        });
        let pooled = pooled_unigram(&corpus);
        for c in &corpus.class_names {
            let tv = total_variation(&unigram(&corpus, c), &pooled);
            assert!(tv < 0.05, "seed {seed}, class {c}: TV to pooled {tv}");
        }
    }
}

#[test]
fn pure_token_signal_separates_token_distributions() {
    let corpus = generate_synthetic(&SynthConfig {
        docs_per_class: 100,
        layout_signal_strength: 0.0,
        rng_seed: 4,
        ..SynthConfig::default()
    });
    let a = unigram(&corpus, &corpus.class_names[0]);
    let b = unigram(&corpus, &corpus.class_names[1]);
    assert!(total_variation(&a, &b) > 0.2);
}
