use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::vocab::{Vocabulary, BOS, EOS, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Language {
    Source,
    Target,
}

impl Language {
    pub fn other(self) -> Language {
        match self {
            Language::Source => Language::Target,
            Language::Target => Language::Source,
        }
    }

    /// Row of the decoder's language-tag embedding.
    pub fn tag(self) -> usize {
        match self {
            Language::Source => 0,
            Language::Target => 1,
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Language::Source => "src",
            Language::Target => "tgt",
        })
    }
}

/// Non-empty token-id sequence without BOS/EOS/PAD.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sentence(Vec<usize>);

impl Sentence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::degenerate("sentence", "empty sentence"));
        }
        if ids.iter().any(|&t| t == PAD || t == BOS || t == EOS) {
            return Err(Error::degenerate("sentence", "control token inside sentence"));
        }
        Ok(Sentence(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn render(&self, vocab: &Vocabulary) -> String {
        self.0
            .iter()
            .map(|&t| vocab.token(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn parse(line: &str, vocab: &Vocabulary) -> Result<Self> {
        Sentence::new(line.split_whitespace().map(|t| vocab.id(t)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub language: Language,
    pub provenance: String,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn get(&self, i: usize) -> &Sentence {
        &self.sentences[i]
    }

    pub fn write(&self, path: &Path, vocab: &Vocabulary) -> Result<()> {
        write_lines(path, self.sentences.iter().map(|s| s.render(vocab)))
    }
}

pub(crate) fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut body = String::new();
    for l in lines {
        body.push_str(&l);
        body.push('\n');
    }
    std::fs::write(path, body)?;
    Ok(())
}

pub enum VocabMode<'a> {
    /// Build a frequency-ordered vocabulary from the file itself.
    Build,
    /// Map onto an existing vocabulary; unknown tokens become UNK.
    Fixed(&'a Vocabulary),
}

/// Reads one whitespace-tokenized sentence per line.
pub fn load_corpus(path: &Path, language: Language, mode: VocabMode<'_>) -> Result<(Corpus, Vocabulary)> {
    let bytes = std::fs::read(path)?;
    let mut lines: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
    if lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    let mut text_lines = Vec::with_capacity(lines.len());
    for (n, raw) in lines.iter().enumerate() {
        let line = std::str::from_utf8(raw).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            line: n + 1,
            detail: format!("malformed UTF-8: {e}"),
        })?;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.split_whitespace().next().is_none() {
            return Err(Error::Ingestion {
                path: path.to_path_buf(),
                line: n + 1,
                detail: "empty sentence".into(),
            });
        }
        text_lines.push(line);
    }
    if text_lines.is_empty() {
        return Err(Error::EmptyCorpus(path.to_path_buf()));
    }
    let vocab = match mode {
        VocabMode::Build => Vocabulary::from_frequency(text_lines.iter().flat_map(|l| l.split_whitespace())),
        VocabMode::Fixed(v) => v.clone(),
    };
    let sentences = text_lines
        .iter()
        .map(|l| Sentence::parse(l, &vocab))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Corpus {
            sentences,
            language,
            provenance: path.display().to_string(),
        },
        vocab,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::vocab::UNK;

    fn write(dir: &tempfile::TempDir, name: &str, body: &[u8]) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn two_line_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "c.txt", b"a b\nb c");
        let (c, v) = load_corpus(&p, Language::Source, VocabMode::Build).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(v.len(), 4 + 3);
        for t in ["a", "b", "c"] {
            assert!(v.get(t).is_some());
        }
        assert_eq!(c.get(1).render(&v), "b c");
    }

    #[test]
    fn empty_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "e.txt", b"");
        assert!(matches!(
            load_corpus(&p, Language::Source, VocabMode::Build),
            Err(Error::EmptyCorpus(_))
        ));
    }

    #[test]
    fn bad_utf8_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "u.txt", b"ok line\n\xff\xfe\n");
        match load_corpus(&p, Language::Source, VocabMode::Build) {
            Err(Error::Ingestion { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn blank_interior_line_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "b.txt", b"a\n\nb\n");
        assert!(matches!(
            load_corpus(&p, Language::Source, VocabMode::Build),
            Err(Error::Ingestion { line: 2, .. })
        ));
    }

    #[test]
    fn fixed_vocabulary_maps_unknowns() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "f.txt", b"a z\n");
        let v = Vocabulary::from_frequency(["a"]);
        let (c, _) = load_corpus(&p, Language::Target, VocabMode::Fixed(&v)).unwrap();
        assert_eq!(c.get(0).ids(), &[v.id("a"), UNK]);
    }

    #[test]
    fn reload_is_index_stable() {
        let dir = tempfile::tempdir().unwrap();
        let body: String = (0..1000).map(|i| format!("w{} w{} x\n", i % 37, i % 11)).collect();
        let p = write(&dir, "big.txt", body.as_bytes());
        let (a, va) = load_corpus(&p, Language::Source, VocabMode::Build).unwrap();
        let (b, vb) = load_corpus(&p, Language::Source, VocabMode::Build).unwrap();
        assert_eq!(a.len(), 1000);
        assert_eq!(va, vb);
        assert_eq!(a, b);
    }
}
