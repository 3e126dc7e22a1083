//! Synthetic cipher language pairs.
//!
//! Source sentences come from a Zipfian unigram model mixed with a sparse
//! bigram table. The target language is the image of the source under a word
//! substitution followed by a deterministic local reordering, so gold
//! translations are known exactly.

use std::collections::HashSet;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::corpus::{load_corpus, write_lines, Corpus, Language, Sentence, VocabMode};
use crate::text::vocab::{Vocabulary, RESERVED, UNK};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const TRAIN_SRC: &str = "train.src";
pub const TRAIN_TGT: &str = "train.tgt";
pub const VALID_SRC: &str = "valid.src";
pub const VALID_TGT: &str = "valid.tgt";
pub const TEST_TSV: &str = "test.tsv";
pub const DISTRACTORS_TGT: &str = "distractors.tgt";
pub const DICT_TSV: &str = "dict.tsv";

const SUCCESSORS: [f64; 3] = [0.5, 0.3, 0.2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReorderRule {
    /// Reverse every block of `w + 1` consecutive tokens (rule id 0).
    BlockReverse,
    /// Rotate every block of `w + 1` tokens left by one (rule id 1).
    BlockRotate,
}

impl ReorderRule {
    pub fn from_id(id: u32) -> Result<Self> {
        match id {
            0 => Ok(ReorderRule::BlockReverse),
            1 => Ok(ReorderRule::BlockRotate),
            _ => Err(Error::Spec(format!("unknown reorder rule id {id}"))),
        }
    }

    pub fn id(self) -> u32 {
        match self {
            ReorderRule::BlockReverse => 0,
            ReorderRule::BlockRotate => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CipherSpec {
    pub vocab_size: usize,
    pub seed: u64,
    pub identity_substitution: bool,
    pub reorder_window: usize,
    pub reorder_rule: ReorderRule,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub distractor_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub zipf_exponent: f64,
    pub bigram_weight: f64,
    /// Share of target training lines that are true images of source training lines.
    pub parallel_fraction: f64,
    pub source_prefix: String,
    pub target_prefix: String,
}

impl Default for CipherSpec {
    fn default() -> Self {
        CipherSpec {
            vocab_size: 100,
            seed: 1,
            identity_substitution: false,
            reorder_window: 1,
            reorder_rule: ReorderRule::BlockReverse,
            train_size: 2000,
            valid_size: 200,
            test_size: 1000,
            distractor_size: 9000,
            min_len: 3,
            max_len: 8,
            zipf_exponent: 1.1,
            bigram_weight: 0.5,
            parallel_fraction: 0.0,
            source_prefix: "s".into(),
            target_prefix: "t".into(),
        }
    }
}

impl CipherSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(m));
        if self.vocab_size < 10 {
            return fail(format!("vocabulary size {} is below 10", self.vocab_size));
        }
        if self.train_size < 100 {
            return fail(format!("corpus size {} is below 100", self.train_size));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail(format!("bad length range {}..={}", self.min_len, self.max_len));
        }
        if self.max_len > crate::text::MAX_LEN {
            return fail(format!("max_len {} exceeds {}", self.max_len, crate::text::MAX_LEN));
        }
        if !(self.zipf_exponent > 0.0 && self.zipf_exponent.is_finite()) {
            return fail("zipf exponent must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.bigram_weight) || !(0.0..=1.0).contains(&self.parallel_fraction) {
            return fail("bigram weight and parallel fraction must lie in [0, 1]".into());
        }
        for p in [&self.source_prefix, &self.target_prefix] {
            if p.is_empty() || p.chars().any(char::is_whitespace) || RESERVED.contains(&p.as_str()) {
                return fail(format!("bad token prefix {p:?}"));
            }
        }
        Ok(())
    }

    fn word(prefix: &str, i: usize) -> String {
        format!("{prefix}{i}")
    }
}

/// Token-level cipher over a joint vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cipher {
    forward: Vec<usize>,
    inverse: Vec<usize>,
    window: usize,
    rule: ReorderRule,
}

impl Cipher {
    fn reorder(&self, ids: &mut [usize], invert: bool) {
        let block = self.window + 1;
        if block == 1 {
            return;
        }
        for chunk in ids.chunks_mut(block) {
            match (self.rule, invert) {
                (ReorderRule::BlockReverse, _) => chunk.reverse(),
                (ReorderRule::BlockRotate, false) => chunk.rotate_left(1),
                (ReorderRule::BlockRotate, true) => chunk.rotate_right(1),
            }
        }
    }

    /// Substitute, then reorder. Tokens outside the source language map to UNK.
    pub fn encode(&self, s: &Sentence) -> Sentence {
        let mut ids: Vec<usize> = s.ids().iter().map(|&t| *self.forward.get(t).unwrap_or(&UNK)).collect();
        self.reorder(&mut ids, false);
        Sentence::new(ids).expect("cipher preserves length")
    }

    pub fn decode(&self, t: &Sentence) -> Sentence {
        let mut ids = t.ids().to_vec();
        self.reorder(&mut ids, true);
        let ids = ids.iter().map(|&t| *self.inverse.get(t).unwrap_or(&UNK)).collect();
        Sentence::new(ids).expect("cipher preserves length")
    }

    /// Source token id to target token id, for content tokens only.
    pub fn substitute(&self, source_token: usize) -> usize {
        *self.forward.get(source_token).unwrap_or(&UNK)
    }
}

#[derive(Clone, Debug)]
pub struct CipherPair {
    pub spec: CipherSpec,
    pub vocab: Vocabulary,
    pub cipher: Cipher,
    pub source: Corpus,
    pub target: Corpus,
    pub source_valid: Corpus,
    pub target_valid: Corpus,
    pub gold_test: Vec<(Sentence, Sentence)>,
    pub distractors: Corpus,
    /// Source token id and the target token id it is substituted by.
    pub dictionary: Vec<(usize, usize)>,
}

struct Generator {
    unigram: WeightedIndex<f64>,
    successors: Vec<[usize; 3]>,
    successor_pick: WeightedIndex<f64>,
    bigram_weight: f64,
    min_len: usize,
    max_len: usize,
}

impl Generator {
    fn new(spec: &CipherSpec, rng: &mut impl Rng) -> Self {
        let weights: Vec<f64> = (0..spec.vocab_size)
            .map(|i| ((i + 1) as f64).powf(-spec.zipf_exponent))
            .collect();
        let unigram = WeightedIndex::new(&weights).expect("positive weights");
        let successors = (0..spec.vocab_size)
            .map(|_| [0; 3].map(|_| unigram.sample(rng)))
            .collect();
        Generator {
            unigram,
            successors,
            successor_pick: WeightedIndex::new(SUCCESSORS).expect("positive weights"),
            bigram_weight: spec.bigram_weight,
            min_len: spec.min_len,
            max_len: spec.max_len,
        }
    }

    fn sentence(&self, rng: &mut impl Rng) -> Vec<usize> {
        let len = rng.gen_range(self.min_len..=self.max_len);
        let mut words = Vec::with_capacity(len);
        words.push(self.unigram.sample(rng));
        while words.len() < len {
            let prev = *words.last().expect("non-empty");
            let next = if rng.gen::<f64>() < self.bigram_weight {
                self.successors[prev][self.successor_pick.sample(rng)]
            } else {
                self.unigram.sample(rng)
            };
            words.push(next);
        }
        words
    }

    /// `n` sentences never produced before by this generator call sequence.
    fn fresh(&self, n: usize, seen: &mut HashSet<Vec<usize>>, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 1000 * n.max(1) {
                return Err(Error::Spec("too few distinct sentences for the requested sizes".into()));
            }
            let s = self.sentence(rng);
            if seen.insert(s.clone()) {
                out.push(s);
            }
        }
        Ok(out)
    }
}

/// Draws a complete cipher pair. All randomness comes from `spec.seed`.
pub fn generate_cipher_pair(spec: &CipherSpec) -> Result<CipherPair> {
    spec.validate()?;
    let v = spec.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut perm: Vec<usize> = (0..v).collect();
    if !spec.identity_substitution {
        perm.shuffle(&mut rng);
    }

    let mut vocab = Vocabulary::new();
    let src_ids: Vec<usize> = (0..v).map(|i| vocab.insert(&CipherSpec::word(&spec.source_prefix, i))).collect();
    let tgt_ids: Vec<usize> = (0..v).map(|j| vocab.insert(&CipherSpec::word(&spec.target_prefix, j))).collect();
    let mut forward = vec![UNK; vocab.len()];
    let mut inverse = vec![UNK; vocab.len()];
    for i in 0..v {
        forward[src_ids[i]] = tgt_ids[perm[i]];
        inverse[tgt_ids[perm[i]]] = src_ids[i];
    }
    let cipher = Cipher {
        forward,
        inverse,
        window: spec.reorder_window,
        rule: spec.reorder_rule,
    };

    let generator = Generator::new(spec, &mut rng);
    let mut seen = HashSet::new();
    let source_train = generator.fresh(spec.train_size, &mut seen, &mut rng)?;
    let n_parallel = (spec.parallel_fraction * spec.train_size as f64).round() as usize;
    let mut target_bases: Vec<Vec<usize>> = rand::seq::index::sample(&mut rng, spec.train_size, n_parallel)
        .into_iter()
        .map(|i| source_train[i].clone())
        .collect();
    target_bases.extend(generator.fresh(spec.train_size - n_parallel, &mut seen, &mut rng)?);
    let source_valid = generator.fresh(spec.valid_size, &mut seen, &mut rng)?;
    let target_valid = generator.fresh(spec.valid_size, &mut seen, &mut rng)?;
    let test = generator.fresh(spec.test_size, &mut seen, &mut rng)?;
    let distractors = generator.fresh(spec.distractor_size, &mut seen, &mut rng)?;

    let as_source = |words: &[usize]| Sentence::new(words.iter().map(|&w| src_ids[w]).collect()).expect("non-empty");
    let corpus = |draws: &[Vec<usize>], language: Language, name: &str| Corpus {
        sentences: draws
            .iter()
            .map(|w| {
                let s = as_source(w);
                match language {
                    Language::Source => s,
                    Language::Target => cipher.encode(&s),
                }
            })
            .collect(),
        language,
        provenance: format!("cipher seed {} {name}", spec.seed),
    };

    Ok(CipherPair {
        source: corpus(&source_train, Language::Source, "train.src"),
        target: corpus(&target_bases, Language::Target, "train.tgt"),
        source_valid: corpus(&source_valid, Language::Source, "valid.src"),
        target_valid: corpus(&target_valid, Language::Target, "valid.tgt"),
        gold_test: test
            .iter()
            .map(|w| {
                let s = as_source(w);
                let t = cipher.encode(&s);
                (s, t)
            })
            .collect(),
        distractors: corpus(&distractors, Language::Target, "distractors.tgt"),
        dictionary: (0..v).map(|i| (src_ids[i], tgt_ids[perm[i]])).collect(),
        vocab,
        cipher,
        spec: spec.clone(),
    })
}

impl CipherPair {
    /// Writes every split plus the vocabulary, dictionary and a JSON manifest.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let v = &self.vocab;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        self.source.write(&dir.join(TRAIN_SRC), v)?;
        self.target.write(&dir.join(TRAIN_TGT), v)?;
        self.source_valid.write(&dir.join(VALID_SRC), v)?;
        self.target_valid.write(&dir.join(VALID_TGT), v)?;
        self.distractors.write(&dir.join(DISTRACTORS_TGT), v)?;
        write_lines(
            &dir.join(TEST_TSV),
            self.gold_test.iter().map(|(s, t)| format!("{}\t{}", s.render(v), t.render(v))),
        )?;
        write_lines(
            &dir.join(DICT_TSV),
            self.dictionary.iter().map(|&(s, t)| format!("{}\t{}", v.token(s), v.token(t))),
        )?;
        let manifest = serde_json::to_string_pretty(&self.spec).map_err(|e| Error::Invalid(e.to_string()))?;
        std::fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
        Ok(())
    }
}

/// Corpora as read back from a directory written by [`CipherPair::write`].
#[derive(Clone, Debug)]
pub struct CorpusBundle {
    pub vocab: Vocabulary,
    pub source: Corpus,
    pub target: Corpus,
    pub source_valid: Corpus,
    pub target_valid: Corpus,
    pub gold_test: Vec<(Sentence, Sentence)>,
    pub distractors: Option<Corpus>,
    pub dictionary: Vec<(usize, usize)>,
}

pub fn load_pairs(path: &Path, vocab: &Vocabulary) -> Result<Vec<(Sentence, Sentence)>> {
    let text = std::fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let bad = |detail: &str| Error::Ingestion {
            path: path.to_path_buf(),
            line: n + 1,
            detail: detail.into(),
        };
        let (a, b) = line.split_once('\t').ok_or_else(|| bad("expected two tab-separated fields"))?;
        let a = Sentence::parse(a, vocab).map_err(|_| bad("empty source side"))?;
        let b = Sentence::parse(b, vocab).map_err(|_| bad("empty target side"))?;
        pairs.push((a, b));
    }
    Ok(pairs)
}

impl CorpusBundle {
    pub fn load(dir: &Path) -> Result<Self> {
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let load = |name: &str, lang| load_corpus(&dir.join(name), lang, VocabMode::Fixed(&vocab)).map(|(c, _)| c);
        let distractors_path = dir.join(DISTRACTORS_TGT);
        let dict_path = dir.join(DICT_TSV);
        Ok(CorpusBundle {
            source: load(TRAIN_SRC, Language::Source)?,
            target: load(TRAIN_TGT, Language::Target)?,
            source_valid: load(VALID_SRC, Language::Source)?,
            target_valid: load(VALID_TGT, Language::Target)?,
            gold_test: load_pairs(&dir.join(TEST_TSV), &vocab)?,
            distractors: if distractors_path.exists() {
                Some(load(DISTRACTORS_TGT, Language::Target)?)
            } else {
                None
            },
            dictionary: if dict_path.exists() {
                load_pairs(&dict_path, &vocab)?
                    .into_iter()
                    .map(|(s, t)| (s.ids()[0], t.ids()[0]))
                    .collect()
            } else {
                Vec::new()
            },
            vocab,
        })
    }
}

impl From<CipherPair> for CorpusBundle {
    fn from(p: CipherPair) -> Self {
        CorpusBundle {
            vocab: p.vocab,
            source: p.source,
            target: p.target,
            source_valid: p.source_valid,
            target_valid: p.target_valid,
            gold_test: p.gold_test,
            distractors: Some(p.distractors),
            dictionary: p.dictionary,
        }
    }
}
