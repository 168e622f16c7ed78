//! Character and sequence error rates.
//!
//! `CER = Σ ED(target, hypothesis) / Z` where `Z` is the total number of
//! target tokens, and `SER` is the fraction of pairs that are not an exact
//! match. Tokens compare by index. CER is not clipped and exceeds 1 when
//! hypotheses are much longer than their targets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit-cost edit distance (insert, delete, substitute).
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = diag + usize::from(x != y);
            diag = row[j + 1];
            row[j + 1] = sub.min(row[j] + 1).min(row[j + 1] + 1);
        }
    }
    row[b.len()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cer: f64,
    pub ser: f64,
    pub total_target_chars: usize,
    pub num_sequences: usize,
    pub edit_distances: Vec<usize>,
}

/// Scores `(target, hypothesis)` pairs.
pub fn evaluate<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty set".into()));
    }
    let total: usize = pairs.iter().map(|(t, _)| t.len()).sum();
    if total == 0 {
        return Err(Error::Argument(
            "targets contain no characters; CER is undefined".into(),
        ));
    }
    let edit_distances: Vec<usize> = pairs.iter().map(|(t, h)| levenshtein(t, h)).collect();
    let errors: usize = edit_distances.iter().sum();
    let mismatches = pairs.iter().filter(|(t, h)| t != h).count();
    Ok(EvalReport {
        cer: errors as f64 / total as f64,
        ser: mismatches as f64 / pairs.len() as f64,
        total_target_chars: total,
        num_sequences: pairs.len(),
        edit_distances,
    })
}

impl EvalReport {
    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "cer={}\nser={}\ntotal_target_chars={}\nnum_sequences={}\n",
            self.cer, self.ser, self.total_target_chars, self.num_sequences
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Argument(format!("report JSON: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_distances() {
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
        assert_eq!(levenshtein(b"abc", b"abc"), 0);
        assert_eq!(levenshtein::<u8>(b"", b"abcd"), 4);
        assert_eq!(levenshtein::<u8>(b"abcd", b""), 4);
    }

    #[test]
    fn one_exact_one_edit() {
        let pairs = vec![(vec![1, 2, 3], vec![1, 2, 3]), (vec![4, 5, 6], vec![4, 9, 6])];
        let r = evaluate(&pairs).unwrap();
        assert_eq!(r.ser, 0.5);
        assert!((r.cer - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(r.total_target_chars, 6);
        assert_eq!(r.edit_distances, vec![0, 1]);
    }

    #[test]
    fn cer_can_exceed_one() {
        let r = evaluate(&[(vec![1], vec![2, 3, 4])]).unwrap();
        assert_eq!(r.cer, 3.0);
        assert_eq!(r.ser, 1.0);
    }

    #[test]
    fn empty_inputs_are_errors() {
        assert!(evaluate::<u8>(&[]).is_err());
        assert!(evaluate::<u8>(&[(vec![], vec![1])]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let r = evaluate(&[(vec![1, 2], vec![1])]).unwrap();
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
        assert!(r.to_text().contains("ser=1\n"));
    }
}
