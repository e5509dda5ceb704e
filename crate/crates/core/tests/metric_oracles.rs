#[path = "support/metric_oracles.rs"]
mod metric_oracles;

use cascade_core::metrics::{bleu, character_metric, ter, wer};
use metric_oracles::{compare, lev, oracle_character, oracle_ter, random_words};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn w(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

#[test]
fn oracles_reproduce_worked_examples() {
    assert_eq!(oracle_ter(&w("a b c"), &w("c a b")), 1.0 / 3.0);
    assert_eq!(oracle_ter(&w("a b c"), &w("a x c")), 1.0 / 3.0);
    assert_eq!(oracle_character(&w("ab"), &w("ac")), 0.5);
    assert_eq!(oracle_character(&w("aa bb"), &w("bb aa")), 0.2);
    assert_eq!(lev(&w("a b c"), &[]), 3);
}

#[test]
fn random_pairs_agree_with_oracles() {
    let s = compare(1000, 11);
    assert_eq!(s.wer_mismatches, 0);
    assert_eq!(s.ter_above_wer, 0);
    assert_eq!(s.ter.below_oracle, 0, "greedy TER beat the exact minimum");
    assert_eq!(s.character.below_oracle, 0, "greedy CharacTER beat the exact minimum");
    assert!(s.ter.rate() >= 0.95, "TER agreement {:.4}", s.ter.rate());
    assert!(s.character.rate() >= 0.95, "CharacTER agreement {:.4}", s.character.rate());
}

#[test]
fn ter_never_exceeds_wer_up_to_eight_words() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..500 {
        let r = random_words(&mut rng, &["x", "y", "z"], 8, 1);
        let h = random_words(&mut rng, &["x", "y", "z"], 8, 0);
        let t = ter(&r.join(" "), &h.join(" "), true).unwrap();
        assert!(t <= wer(&r, &h).unwrap() + 1e-12, "{r:?} {h:?}");
    }
}

/// n-gram matches counted by hand for a two-line corpus with no 4-gram
/// match: BLEU is exactly zero.
#[test]
fn bleu_zero_when_an_order_has_no_match() {
    let refs = ["the cat sat on the mat", "a dog ran"];
    let hyps = ["the cat on the sat mat", "a dog walked"];
    assert_eq!(bleu(&refs, &hyps, true).unwrap().score, 0.0);
}

/// Line-level BLEU checked against a hand computation: hypothesis
/// "the cat sat on mat" vs reference "the cat sat on the mat" has
/// precisions 5/5, 3/4, 2/3, 1/2 and brevity penalty exp(1 − 6/5).
#[test]
fn bleu_hand_computed() {
    let s = bleu(&["the cat sat on the mat"], &["the cat sat on mat"], true).unwrap();
    let expected = 100.0 * (1.0f64 - 6.0 / 5.0).exp() * (1.0 * 0.75 * (2.0 / 3.0) * 0.5f64).powf(0.25);
    assert!((s.score - expected).abs() < 1e-9, "{} vs {expected}", s.score);
}

#[test]
fn bleu_documented_examples() {
    let refs = ["the quick brown fox jumps", "over the lazy dog today"];
    assert_eq!(bleu(&refs, &refs, true).unwrap().score, 100.0);
    let cs = bleu(&["Hello world"], &["hello world"], true).unwrap().score;
    let ci = bleu(&["Hello world"], &["hello world"], false).unwrap().score;
    assert!(ci > cs);
}

#[test]
fn character_rejects_empty_hypothesis() {
    assert!(character_metric("a", "").is_err());
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "dd", "e."]), 1..8).prop_map(|v| v.join(" "))
}

proptest! {
    #[test]
    fn bleu_is_invariant_to_line_order(pairs in prop::collection::vec((sentence(), sentence()), 1..6), rot in 0usize..6) {
        let (refs, hyps): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
        let k = rot % refs.len();
        let mut r2 = refs.clone();
        let mut h2 = hyps.clone();
        r2.rotate_left(k);
        h2.rotate_left(k);
        let a = bleu(&refs, &hyps, true).unwrap().score;
        let b = bleu(&r2, &h2, true).unwrap().score;
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=100.0).contains(&a));
    }

    #[test]
    fn identity_scores_are_perfect(s in sentence()) {
        prop_assert_eq!(ter(&s, &s, true).unwrap(), 0.0);
        prop_assert_eq!(character_metric(&s, &s).unwrap(), 0.0);
        let words: Vec<&str> = s.split_whitespace().collect();
        prop_assert_eq!(wer(&words, &words).unwrap(), 0.0);
        prop_assert_eq!(bleu(&[&s], &[&s], true).unwrap().score, 100.0);
    }

    #[test]
    fn wer_bound_and_ter_below_wer(r in sentence(), h in prop::collection::vec(prop::sample::select(vec!["a", "b", "c"]), 0..8)) {
        let rw: Vec<&str> = r.split_whitespace().collect();
        let w = wer(&rw, &h).unwrap();
        prop_assert!(w <= (h.len() as f64 / rw.len() as f64).max(1.0) + 1.0);
        let t = ter(&r, &h.join(" "), true).unwrap();
        prop_assert!(t <= w + 1e-12);
        prop_assert!(t >= 0.0);
    }

    #[test]
    fn character_in_unit_interval(r in sentence(), h in sentence()) {
        let c = character_metric(&r, &h).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));
    }
}
