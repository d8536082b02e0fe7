use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

#[test]
fn empty_corpus_is_all_zero() {
    let r = analyze([]);
    assert_eq!(
        r,
        CorpusReport {
            examples: 0,
            mean_length: 0.0,
            std_length: 0.0,
            english_ratio: 0.0,
            caption_english_ratio: 0.0,
            unique_tokens: 0,
        }
    );
}

#[test]
fn two_caption_fixture() {
    let r = analyze(["a b", "a b c d"]);
    assert_eq!(r.examples, 2);
    assert_eq!(r.mean_length, 3.0);
    assert_eq!(r.std_length, 1.0);
    assert_eq!(r.english_ratio, 1.0);
    assert_eq!(r.unique_tokens, 4);
}

#[test]
fn non_ascii_token_halves_the_ratio() {
    let r = analyze(["a ☃"]);
    assert_eq!(r.english_ratio, 0.5);
    assert_eq!(r.caption_english_ratio, 0.5);
}

#[test]
fn ratios_differ_by_weighting() {
    // 1/1 and 1/3: token-weighted 2/4, per-caption (1 + 1/3)/2
    let r = analyze(["cat", "dog 42 ☃"]);
    assert_eq!(r.english_ratio, 0.5);
    assert!((r.caption_english_ratio - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn tokens_are_case_folded_and_split_like_the_tokenizer() {
    let r = analyze(["Red CIRCLE, red circle."]);
    assert_eq!(r.mean_length, 6.0);
    assert_eq!(r.unique_tokens, 4);
    assert!((r.english_ratio - 4.0 / 6.0).abs() < 1e-15);
}

#[test]
fn sample_std_fault_breaks_the_fixture() {
    let r = faults::with_faults(&[Fault::CorpusStd], || analyze(["a b", "a b c d"]));
    assert_ne!(r.std_length, 1.0);
}

#[test]
fn filter_fixtures() {
    let mut kept = Vec::new();
    let tally = filter(["a ☃", "b"], &FilterPolicy::default(), |c| kept.push(c)).unwrap();
    assert_eq!(tally, RejectionTally::default());
    assert_eq!(kept, ["a ☃", "b"]);

    let strict = FilterPolicy {
        min_english_ratio: 0.9,
        ..FilterPolicy::default()
    };
    let tally = filter(["a ☃"], &strict, |_| panic!("kept")).unwrap();
    assert_eq!(tally, RejectionTally { length: 0, ratio: 1 });

    let bounded = FilterPolicy {
        min_length: 2,
        max_length: Some(5),
        min_english_ratio: 0.9,
    };
    let tally = filter(["one two three four five ☃"], &bounded, |_| panic!("kept")).unwrap();
    assert_eq!(tally, RejectionTally { length: 1, ratio: 0 });
    assert_eq!(bounded.check("a b c d e"), None);
    assert_eq!(bounded.check("a"), Some(Rule::Length));
}

#[test]
fn invalid_policy_is_rejected() {
    let p = FilterPolicy {
        min_length: 3,
        max_length: Some(2),
        ..FilterPolicy::default()
    };
    assert!(matches!(filter([], &p, |_| ()), Err(CorpusError::Policy(_))));
    let p = FilterPolicy {
        min_english_ratio: 1.5,
        ..FilterPolicy::default()
    };
    assert!(p.validate().is_err());
}

fn generated_corpus(n: usize, seed: u64) -> Vec<String> {
    let words = ["red", "circle", "Blue", "über", "42", "a", "☃", "x1", "square", "!"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.random_range(0..12);
            let mut s: Vec<String> = (0..len).map(|_| words[rng.random_range(0..words.len())].to_string()).collect();
            s.push(format!("w{}", i % 1500));
            s.join(" ")
        })
        .collect()
}

fn assert_same(a: &CorpusReport, b: &CorpusReport) {
    assert_eq!(a.examples, b.examples);
    assert_eq!(a.mean_length, b.mean_length);
    assert_eq!(a.std_length, b.std_length);
    assert_eq!(a.english_ratio, b.english_ratio);
    assert_eq!(a.unique_tokens, b.unique_tokens);
    assert!((a.caption_english_ratio - b.caption_english_ratio).abs() < 1e-12);
}

#[test]
fn shard_merge_equals_single_pass() {
    let corpus = generated_corpus(10_000, 3);
    let single = analyze(corpus.iter().map(String::as_str));
    let mut merged = CorpusStats::new();
    for shard in corpus.chunks(1_337) {
        let mut s = CorpusStats::new();
        shard.iter().for_each(|c| s.add(c));
        merged.merge(s);
    }
    assert_same(&merged.report(), &single);
}

#[test]
fn reader_handles_manifests_and_plain_files() {
    let dir = tempfile::tempdir().unwrap();
    let plain = dir.path().join("plain.txt");
    std::fs::write(&plain, "a b\n\na b c d\n").unwrap();
    let (r, none) = analyze_file(&plain, None).unwrap();
    assert_eq!(r, analyze(["a b", "a b c d"]));
    assert!(none.is_none());

    let manifest = dir.path().join("m.tsv");
    std::fs::write(&manifest, "img1.ff\ta b\tx\nimg2.ff\ta b c d\n").unwrap();
    let (r, filtered) = analyze_file(&manifest, Some(&FilterPolicy {
        min_length: 100,
        ..FilterPolicy::default()
    }))
    .unwrap();
    assert_eq!(r, analyze(["a b", "a b c d"]));
    let (tally, kept) = filtered.unwrap();
    assert_eq!(tally.length, 2);
    assert_eq!(kept.examples, 0);

    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(analyze_file(&empty, None).unwrap().0, analyze([]));
    assert!(matches!(
        analyze_file(&dir.path().join("missing"), None),
        Err(CorpusError::Io { .. })
    ));
}

#[test]
fn report_renders_both_formats() {
    let r = analyze(["a b", "a b c d"]);
    let kv = r.key_values("");
    assert!(kv.contains("examples=2\n"));
    assert!(kv.contains("caption_length_std=1.000000\n"));
    assert!(r.to_string().contains("Unique tokens"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn analysis_is_order_invariant(seed in 0u64..1_000, rot in 0usize..50) {
        let mut corpus = generated_corpus(50, seed);
        let a = analyze(corpus.iter().map(String::as_str));
        corpus.rotate_left(rot);
        corpus.reverse();
        let b = analyze(corpus.iter().map(String::as_str));
        assert_same(&a, &b);
        prop_assert!(a.std_length >= 0.0);
        prop_assert!((0.0..=1.0).contains(&a.english_ratio));
    }

    #[test]
    fn permissive_filter_is_identity(seed in 0u64..1_000) {
        let corpus = generated_corpus(40, seed);
        let mut kept = CorpusStats::new();
        let tally = filter(corpus.iter().map(String::as_str), &FilterPolicy::default(), |c| kept.add(c)).unwrap();
        prop_assert_eq!(tally.total(), 0);
        prop_assert_eq!(kept.report(), analyze(corpus.iter().map(String::as_str)));
    }
}
