use proptest::prelude::*;
use swvr::metrics::{bleu, lcs_len, novel_token_recall, rouge_l, rouge_n, score_corpus};

fn seq() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..5, 0..10)
}

/// Exponential-time LCS for cross-checking the dynamic program.
fn lcs_brute(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (Some((x, ra)), Some((y, rb))) if x == y => 1 + lcs_brute(ra, rb),
        (Some((_, ra)), Some((_, rb))) => lcs_brute(ra, b).max(lcs_brute(a, rb)),
        _ => 0,
    }
}

proptest! {
    #[test]
    fn scores_are_bounded(c in seq(), r in seq(), t in seq()) {
        for n in 1..=2 {
            let p = rouge_n(&c, &r, n);
            for v in [p.precision, p.recall, p.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
        let l = rouge_l(&c, &r);
        prop_assert!((0.0..=1.0).contains(&l.f1));
        for b in bleu(&[c.clone()], &[r.clone()], 4) {
            prop_assert!((0.0..=1.0).contains(&b));
        }
        prop_assert!((0.0..=1.0).contains(&novel_token_recall(&c, &r, &t)));
    }

    #[test]
    fn swapping_roles_swaps_precision_and_recall(c in seq(), r in seq()) {
        for n in 1..=3 {
            let a = rouge_n(&c, &r, n);
            let b = rouge_n(&r, &c, n);
            prop_assert_eq!((a.precision, a.recall, a.f1), (b.recall, b.precision, b.f1));
        }
        let (a, b) = (rouge_l(&c, &r), rouge_l(&r, &c));
        prop_assert_eq!((a.precision, a.recall), (b.recall, b.precision));
    }

    #[test]
    fn lcs_matches_brute_force(a in prop::collection::vec(0u8..3, 0..8), b in prop::collection::vec(0u8..3, 0..8)) {
        let l = lcs_len(&a, &b);
        prop_assert_eq!(l, lcs_brute(&a, &b));
        prop_assert_eq!(l, lcs_len(&b, &a));
        prop_assert!(l <= a.len().min(b.len()));
    }

    #[test]
    fn identical_nonempty_text_scores_one(c in prop::collection::vec(0u8..5, 4..10)) {
        prop_assert_eq!(rouge_n(&c, &c, 1).f1, 1.0);
        prop_assert_eq!(rouge_n(&c, &c, 2).f1, 1.0);
        prop_assert_eq!(rouge_l(&c, &c).f1, 1.0);
        prop_assert_eq!(bleu(&[c.clone()], &[c.clone()], 4), vec![1.0; 4]);
    }
}

#[test]
fn worked_examples() {
    let c = ["the", "cat", "sat", "on", "the", "mat"];
    let r = ["the", "cat", "is", "on", "the", "mat"];
    let r1 = rouge_n(&c, &r, 1);
    assert_eq!((r1.precision, r1.recall), (5.0 / 6.0, 5.0 / 6.0));
    let r2 = rouge_n(&c, &r, 2);
    assert_eq!(r2.f1, 3.0 / 5.0);
    assert_eq!(lcs_len(&c, &r), 5);

    // Clipping: "the" appears once in the reference.
    let p = rouge_n(&["the", "the", "the"], &["the", "cat"], 1);
    assert_eq!(p.precision, 1.0 / 3.0);
    assert_eq!(bleu(&[vec!["the", "the", "the"]], &[vec!["the", "cat"]], 1), [1.0 / 3.0]);

    let up: Vec<u32> = (0..8).collect();
    let down: Vec<u32> = up.iter().rev().copied().collect();
    assert_eq!(lcs_len(&up, &down), 1);

    // A short candidate is penalized by the brevity term.
    let b = bleu(&[vec!["a", "b"]], &[vec!["a", "b", "c", "d"]], 2);
    let bp = (1.0f64 - 2.0).exp();
    assert!((b[0] - bp).abs() < 1e-15 && (b[1] - bp).abs() < 1e-15);
}

#[test]
fn empty_inputs_follow_fixed_conventions() {
    let empty: [u8; 0] = [];
    assert_eq!(rouge_n(&empty, &[1], 1).f1, 0.0);
    assert_eq!(rouge_n(&[1], &empty, 1).f1, 0.0);
    assert_eq!(rouge_l(&empty, &empty).f1, 0.0);
    assert_eq!(bleu::<u8>(&[vec![]], &[vec![1]], 4), vec![0.0; 4]);
    // Nothing novel to recover.
    assert_eq!(novel_token_recall(&empty, &[1, 2], &[1, 2, 3]), 1.0);
}

#[test]
fn novel_recall_only_counts_tokens_absent_from_the_transcript() {
    let transcript = [1, 2, 3];
    let reference = [1, 7, 8];
    assert_eq!(novel_token_recall(&[7, 1], &reference, &transcript), 0.5);
    assert_eq!(novel_token_recall(&[8, 7], &reference, &transcript), 1.0);
    let report = score_corpus(&[vec![7], vec![]], &[vec![7], vec![9]], Some(&[vec![1], vec![1]]));
    assert_eq!(report.novel_token_recall, Some(0.5));
    assert_eq!(score_corpus(&[vec![7]], &[vec![7]], None).novel_token_recall, None);
}
