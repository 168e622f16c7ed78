//! Oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use kzread::decoder::DecoderConfig;
use kzread::encoder::EncoderConfig;
use kzread::{ModelConfig, Scalar, Tensor, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimum edit-script cost over every monotone matching of positions.
/// Matched pairs cost 0 or 1 (substitution); unmatched positions cost 1.
pub fn brute_levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    fn go<T: PartialEq>(a: &[T], b: &[T], i: usize, j: usize, cost: usize, best: &mut usize) {
        if i == a.len() {
            *best = (*best).min(cost + (b.len() - j));
            return;
        }
        // a[i] deleted
        go(a, b, i + 1, j, cost + 1, best);
        // a[i] paired with b[k], skipping (inserting) b[j..k]
        for k in j..b.len() {
            let c = cost + (k - j) + usize::from(a[i] != b[k]);
            go(a, b, i + 1, k + 1, c, best);
        }
    }
    let mut best = usize::MAX;
    go(a, b, 0, 0, 0, &mut best);
    best
}

/// `(target, hypothesis)` pairs with hand-computed `(CER, SER)`.
pub fn evaluate_fixtures() -> Vec<(Vec<(Vec<char>, Vec<char>)>, Scalar, Scalar)> {
    let p = |pairs: &[(&str, &str)]| {
        pairs
            .iter()
            .map(|(t, h)| (t.chars().collect(), h.chars().collect()))
            .collect::<Vec<_>>()
    };
    vec![
        (p(&[("abc", "abc")]), 0.0, 0.0),
        (p(&[("abc", "abd")]), 1.0 / 3.0, 1.0),
        (p(&[("abc", "")]), 1.0, 1.0),
        (p(&[("ab", "abcd")]), 1.0, 1.0),
        (p(&[("a", "bbbb")]), 4.0, 1.0),
        (p(&[("abc", "abc"), ("de", "df")]), 0.2, 0.5),
        (p(&[("kitten", "sitting")]), 0.5, 1.0),
        (p(&[("abcd", "acbd"), ("xy", "xy"), ("z", "z"), ("pq", "qp")]), 4.0 / 9.0, 0.5),
        (p(&[("abcdef", "azced")]), 0.5, 1.0),
        (p(&[("aaa", "aa"), ("b", "b"), ("c", "d"), ("ee", "ee")]), 2.0 / 7.0, 0.5),
    ]
}

/// Small model used for gradient checks.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            growth_rate: 4,
            block_depth: 2,
            ..EncoderConfig::default()
        },
        decoder: DecoderConfig {
            hidden_size: 32,
            embed_size: 32,
            attention_size: 32,
            max_decode_len: 16,
        },
    }
}

/// Vocabulary of `chars` plain tokens plus the two reserved ones.
pub fn plain_vocab(chars: usize) -> Vocabulary {
    Vocabulary::new((0..chars).map(|i| format!("c{i}"))).unwrap()
}

pub fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[h, w, 1], (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// Output channels by direct recursion over blocks and transitions.
pub fn channel_oracle(k: usize, d: usize) -> usize {
    let mut c = 48;
    for b in 0..3 {
        c += k * d;
        if b < 2 {
            c /= 2;
        }
    }
    c
}
