//! Train/validation/test partition.
//!
//! Every sample carrying the holdout tag goes to the test set. The rest are
//! shuffled with a seeded stream and divided `train:validation` by the given
//! ratio, the validation size being rounded to the nearest integer.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample id with an optional group tag (for example the source book).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedId {
    pub id: String,
    pub tag: Option<String>,
}

impl TaggedId {
    pub fn untagged(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            tag: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    /// `[train, validation]` parts.
    pub ratio: [usize; 2],
    pub holdout_rule: String,
}

impl SplitManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest is plain data")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Argument(format!("split manifest: {e}")))
    }
}

pub fn make_split(
    ids: &[TaggedId],
    ratio: [usize; 2],
    holdout_tag: Option<&str>,
    seed: u64,
) -> Result<SplitManifest> {
    if ids.is_empty() {
        return Err(Error::Argument("cannot split an empty id list".into()));
    }
    if ratio[0] == 0 || ratio[1] == 0 {
        return Err(Error::Argument(format!("ratio parts must be positive, got {ratio:?}")));
    }
    let (test, mut rest): (Vec<&TaggedId>, Vec<&TaggedId>) = ids
        .iter()
        .partition(|t| holdout_tag.is_some() && t.tag.as_deref() == holdout_tag);
    if rest.is_empty() {
        return Err(Error::Argument(
            "every sample carries the holdout tag; nothing left to train on".into(),
        ));
    }
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = rest.len();
    let n_val = ((n * ratio[1]) as f64 / (ratio[0] + ratio[1]) as f64).round() as usize;
    let n_train = n - n_val;
    let ids_of = |v: &[&TaggedId]| v.iter().map(|t| t.id.clone()).collect::<Vec<_>>();
    Ok(SplitManifest {
        train: ids_of(&rest[..n_train]),
        validation: ids_of(&rest[n_train..]),
        test: ids_of(&test),
        ratio,
        holdout_rule: match holdout_tag {
            Some(tag) => format!("samples tagged {tag:?} form the test set"),
            None => "no holdout; test set empty".into(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<TaggedId> {
        (0..n).map(|i| TaggedId::untagged(format!("s{i}"))).collect()
    }

    #[test]
    fn ninety_ten() {
        let m = make_split(&ids(100), [9, 1], None, 3).unwrap();
        assert_eq!((m.train.len(), m.validation.len(), m.test.len()), (90, 10, 0));
        let m = make_split(&ids(500), [9, 1], None, 3).unwrap();
        assert_eq!((m.train.len(), m.validation.len()), (450, 50));
    }

    #[test]
    fn all_holdout_is_an_error() {
        let tagged: Vec<TaggedId> = (0..5)
            .map(|i| TaggedId {
                id: format!("s{i}"),
                tag: Some("book15".into()),
            })
            .collect();
        assert!(make_split(&tagged, [9, 1], Some("book15"), 0).is_err());
        assert!(make_split(&[], [9, 1], None, 0).is_err());
    }

    #[test]
    fn holdout_goes_to_test() {
        let mut v = ids(20);
        v[3].tag = Some("book15".into());
        v[7].tag = Some("book15".into());
        v[8].tag = Some("book2".into());
        let m = make_split(&v, [9, 1], Some("book15"), 1).unwrap();
        assert_eq!(m.test, vec!["s3".to_string(), "s7".to_string()]);
        assert_eq!(m.train.len() + m.validation.len(), 18);
        assert_eq!(SplitManifest::from_json(&m.to_json()).unwrap(), m);
    }
}
