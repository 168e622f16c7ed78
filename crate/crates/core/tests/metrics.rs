mod common;

use common::{brute_levenshtein, evaluate_fixtures};
use kzread::metrics::{evaluate, levenshtein, EvalReport};
use proptest::prelude::*;

#[test]
fn brute_force_oracle_sanity() {
    assert_eq!(brute_levenshtein(b"kitten", b"sitting"), 3);
    assert_eq!(brute_levenshtein(b"", b"abc"), 3);
    assert_eq!(brute_levenshtein(b"abc", b""), 3);
    assert_eq!(brute_levenshtein(b"flaw", b"lawn"), 2);
}

#[test]
fn evaluate_matches_fixtures() {
    for (pairs, cer, ser) in evaluate_fixtures() {
        let r = evaluate(&pairs).unwrap();
        assert!((r.cer - cer).abs() < 1e-12, "{pairs:?}: cer {}", r.cer);
        assert!((r.ser - ser).abs() < 1e-12, "{pairs:?}: ser {}", r.ser);
        assert_eq!(r.num_sequences, pairs.len());
    }
}

#[test]
fn evaluate_rejects_empty_inputs() {
    let none: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();
    assert!(evaluate(&none).is_err());
    assert!(evaluate(&[(Vec::<u8>::new(), vec![1u8])]).is_err());
}

#[test]
fn report_serialises() {
    let r = evaluate(&[(vec![1, 2, 3], vec![1, 3])]).unwrap();
    assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
    assert!(r.to_text().contains("cer="));
}

proptest! {
    #[test]
    fn agrees_with_enumeration(a in prop::collection::vec(0u8..4, 0..7), b in prop::collection::vec(0u8..4, 0..7)) {
        prop_assert_eq!(levenshtein(&a, &b), brute_levenshtein(&a, &b));
    }

    #[test]
    fn metric_properties(
        a in prop::collection::vec(0u8..5, 0..12),
        b in prop::collection::vec(0u8..5, 0..12),
        c in prop::collection::vec(0u8..5, 0..12),
    ) {
        let ab = levenshtein(&a, &b);
        prop_assert_eq!(ab, levenshtein(&b, &a));
        prop_assert_eq!(levenshtein(&a, &a), 0);
        prop_assert!(ab <= levenshtein(&a, &c) + levenshtein(&c, &b));
        prop_assert!(ab >= a.len().abs_diff(b.len()));
        prop_assert!(ab <= a.len().max(b.len()));
    }

    #[test]
    fn ser_counts_mismatches(pairs in prop::collection::vec(
        (prop::collection::vec(0u8..3, 1..5), prop::collection::vec(0u8..3, 0..5)), 1..10)
    ) {
        let r = evaluate(&pairs).unwrap();
        let wrong = pairs.iter().filter(|(t, h)| t != h).count();
        prop_assert!((r.ser - wrong as f64 / pairs.len() as f64).abs() < 1e-12);
        prop_assert!(r.cer >= 0.0);
        prop_assert_eq!(r.cer == 0.0, wrong == 0);
    }
}
