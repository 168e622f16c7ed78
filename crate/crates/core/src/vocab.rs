//! Token inventory with the reserved start and end markers.
//!
//! On disk: UTF-8 text, one token per line. Line 1 is `<S>`, line 2 is
//! `<E>`, and the index of a token is its line number minus one.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const START_TOKEN: &str = "<S>";
pub const END_TOKEN: &str = "<E>";
/// Index of `<S>`.
pub const START: usize = 0;
/// Index of `<E>`.
pub const END: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from character tokens; `<S>` and `<E>` are
    /// prepended automatically.
    pub fn new<I, S>(chars: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens = vec![START_TOKEN.to_string(), END_TOKEN.to_string()];
        tokens.extend(chars.into_iter().map(Into::into));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[START] != START_TOKEN || tokens[END] != END_TOKEN {
            return Err(Error::Argument(
                "vocabulary must start with <S> and <E>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Argument(format!(
                    "token {i} is empty or contains whitespace"
                )));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Argument(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// All tokens including the reserved ones, in index order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_reserved(index: usize) -> bool {
        index == START || index == END
    }

    /// Maps character tokens to indices; reserved tokens are rejected.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                let t = t.as_ref();
                match self.lookup(t) {
                    Some(i) if !Self::is_reserved(i) => Ok(i),
                    Some(_) => Err(Error::Argument(format!("reserved token {t} in target"))),
                    None => Err(Error::Argument(format!("unknown token {t:?}"))),
                }
            })
            .collect()
    }

    pub fn decode(&self, indices: &[usize]) -> Vec<&str> {
        indices
            .iter()
            .map(|&i| self.token(i).unwrap_or("?"))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let tok = line.trim_end_matches('\r');
            let expected = match n {
                0 => Some(START_TOKEN),
                1 => Some(END_TOKEN),
                _ => None,
            };
            if let Some(want) = expected {
                if tok != want {
                    return Err(Error::Parse {
                        path: origin.to_path_buf(),
                        line: n + 1,
                        msg: format!("expected {want}, found {tok:?}"),
                    });
                }
            }
            tokens.push(tok.to_string());
        }
        Self::from_tokens(tokens).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_positions_and_round_trip() {
        let v = Vocabulary::new(["あ", "い", "う"]).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.lookup("<S>"), Some(START));
        assert_eq!(v.lookup("<E>"), Some(END));
        for i in 0..v.len() {
            assert_eq!(v.lookup(v.token(i).unwrap()), Some(i));
        }
        let text = v.to_text();
        assert!(text.starts_with("<S>\n<E>\nあ\n"));
        assert_eq!(Vocabulary::parse(&text, Path::new("v")).unwrap(), v);
    }

    #[test]
    fn rejects_duplicates_and_bad_headers() {
        assert!(Vocabulary::new(["a", "a"]).is_err());
        assert!(Vocabulary::new(["<E>"]).is_err());
        assert!(Vocabulary::parse("<E>\n<S>\na\n", Path::new("v")).is_err());
        assert!(Vocabulary::parse("<S>\n<E>\na b\n", Path::new("v")).is_err());
    }

    #[test]
    fn encode_rejects_unknown_and_reserved() {
        let v = Vocabulary::new(["a", "b"]).unwrap();
        assert_eq!(v.encode(&["b", "a"]).unwrap(), vec![3, 2]);
        assert!(v.encode(&["c"]).is_err());
        assert!(v.encode(&["<E>"]).is_err());
    }
}
