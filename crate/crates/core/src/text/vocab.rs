use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token inventory with the four reserved symbols at ids 0..=3.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Vocabulary { tokens, index }
    }

    /// Most frequent first; equal counts in lexicographic order.
    pub fn from_frequency<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        let mut ordered: Vec<(&str, usize)> = counts.into_iter().collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut vocab = Self::new();
        for (t, _) in ordered {
            vocab.insert(t);
        }
        vocab
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    /// Entries of `self` followed by the entries of `other` not already present.
    pub fn union(&self, other: &Vocabulary) -> Vocabulary {
        let mut joint = self.clone();
        for t in other.tokens.iter().skip(RESERVED.len()) {
            joint.insert(t);
        }
        joint
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<&str> = text.lines().collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: "vocabulary must start with the reserved symbols".into(),
            });
        }
        let mut vocab = Self::new();
        for (line, t) in tokens.iter().enumerate().skip(RESERVED.len()) {
            if vocab.get(t).is_some() {
                return Err(Error::Ingestion {
                    path: path.to_path_buf(),
                    line: line + 1,
                    detail: format!("duplicate token {t:?}"),
                });
            }
            vocab.insert(t);
        }
        Ok(vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::from_frequency(["b", "a", "b"]);
        assert_eq!(v.token(PAD), "<pad>");
        assert_eq!(v.token(BOS), "<s>");
        assert_eq!(v.token(EOS), "</s>");
        assert_eq!(v.token(UNK), "<unk>");
        assert_eq!(v.id("b"), 4);
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("zzz"), UNK);
    }

    #[test]
    fn bijection_over_content_tokens() {
        let v = Vocabulary::from_frequency(["x", "y", "z", "x"]);
        for id in 4..v.len() {
            assert_eq!(v.id(v.token(id)), id);
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = Vocabulary::from_frequency(["q", "r"]);
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }
}
