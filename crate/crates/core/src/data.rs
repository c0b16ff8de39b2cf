//! Parallel corpora: ingestion from line-aligned files and synthetic
//! non-IID translation domains.
//!
//! Synthetic words are built from two-letter syllables. Source-side words
//! are consonant-vowel pairs, target-side words vowel-consonant pairs, and
//! the disjoint-vocabulary kind uses uppercase letters only, so its tokens
//! never meet the lowercase domains' tokens.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::train::Example;
use crate::subword::BpeVocab;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub src: String,
    pub tgt: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainCorpus {
    pub name: String,
    pub train: Vec<SentencePair>,
    pub dev: Vec<SentencePair>,
    pub test: Vec<SentencePair>,
}

/// Sizes of the held-out splits; everything else goes to train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub dev: usize,
    pub test: usize,
}

impl DomainCorpus {
    /// All source and target lines of every split.
    pub fn all_text(&self) -> impl Iterator<Item = &str> {
        self.train
            .iter()
            .chain(&self.dev)
            .chain(&self.test)
            .flat_map(|p| [p.src.as_str(), p.tgt.as_str()])
    }

    /// Source and target lines of the training split, for vocabulary training.
    pub fn train_text(&self) -> impl Iterator<Item = &str> {
        self.train.iter().flat_map(|p| [p.src.as_str(), p.tgt.as_str()])
    }

    /// Writes `{name}.{split}.src` / `.tgt` files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (split, pairs) in [("train", &self.train), ("dev", &self.dev), ("test", &self.test)] {
            for (side, pick) in [("src", 0), ("tgt", 1)] {
                let path = dir.join(format!("{}.{split}.{side}", self.name));
                let mut text = String::new();
                for p in pairs {
                    text.push_str(if pick == 0 { &p.src } else { &p.tgt });
                    text.push('\n');
                }
                fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }

    /// Reads the files written by [`DomainCorpus::save`].
    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let read = |split: &str| -> Result<Vec<SentencePair>> {
            let src = dir.join(format!("{name}.{split}.src"));
            let tgt = dir.join(format!("{name}.{split}.tgt"));
            let (s, t) = (read_lines(&src)?, read_lines(&tgt)?);
            check_aligned(&s, &t)?;
            Ok(s.into_iter().zip(t).map(|(src, tgt)| SentencePair { src, tgt }).collect())
        };
        Ok(Self {
            name: name.to_string(),
            train: read("train")?,
            dev: read("dev")?,
            test: read("test")?,
        })
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line = std::str::from_utf8(raw)
            .map_err(|_| Error::Input(format!("{}: line {} is not valid UTF-8", path.display(), i + 1)))?;
        lines.push(line.strip_suffix('\r').unwrap_or(line).to_string());
    }
    if lines.last().is_some_and(String::is_empty) {
        lines.pop();
    }
    Ok(lines)
}

fn check_aligned(src: &[String], tgt: &[String]) -> Result<()> {
    if src.len() != tgt.len() {
        return Err(Error::Input(format!(
            "source has {} lines but target has {}",
            src.len(),
            tgt.len()
        )));
    }
    Ok(())
}

/// Reads two line-aligned files and splits them by a seeded shuffle.
pub fn ingest_corpus(name: &str, src_path: &Path, tgt_path: &Path, splits: SplitSizes, seed: u64) -> Result<DomainCorpus> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    check_aligned(&src, &tgt)?;
    let pairs: Vec<SentencePair> = src.into_iter().zip(tgt).map(|(src, tgt)| SentencePair { src, tgt }).collect();
    split_pairs(name, pairs, splits, seed)
}

/// Seeded shuffle of `pairs` into test, dev and train, in that order.
pub fn split_pairs(name: &str, mut pairs: Vec<SentencePair>, splits: SplitSizes, seed: u64) -> Result<DomainCorpus> {
    let total = pairs.len();
    if splits.dev + splits.test > total {
        return Err(Error::Input(format!(
            "dev {} + test {} exceeds the {} available pairs",
            splits.dev, splits.test, total
        )));
    }
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = pairs.split_off(splits.dev + splits.test);
    let dev = pairs.split_off(splits.test);
    info!("{name}: {} train / {} dev / {} test pairs", train.len(), dev.len(), pairs.len());
    Ok(DomainCorpus {
        name: name.to_string(),
        train,
        dev,
        test: pairs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Target repeats the source.
    Copy,
    /// Target is the source in reverse word order.
    Reverse,
    /// Every source word is replaced through a fixed word lexicon.
    SubstitutionCipher,
    /// Every source word is replaced by the source word `shift` places later.
    TokenShift,
    /// Lexicon substitution over an uppercase word pool.
    DisjointVocabCipher,
    /// Target repeats the source, where the source words are the lexicon's
    /// target-side words.
    LexiconCopy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    pub name: String,
    pub kind: TaskKind,
    /// First index of the domain's slice of the word pool.
    pub vocab_start: usize,
    pub vocab_len: usize,
    /// Seeds the word lexicon; domains with equal seeds translate shared
    /// words identically.
    pub lexicon_seed: u64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Word `k` of the slice is drawn with weight `1 / (k + 1)^zipf`;
    /// 0 gives uniform draws.
    #[serde(default)]
    pub zipf: f64,
}

/// Distance used by [`TaskKind::TokenShift`].
pub const TOKEN_SHIFT: usize = 7;

const LOWER_CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn syllable(i: usize, consonant_first: bool, upper: bool) -> String {
    let c = LOWER_CONSONANTS[i % LOWER_CONSONANTS.len()] as char;
    let v = VOWELS[i / LOWER_CONSONANTS.len() % VOWELS.len()] as char;
    let s: String = if consonant_first { [c, v] } else { [v, c] }.iter().collect();
    if upper {
        s.to_uppercase()
    } else {
        s
    }
}

/// Word `i` of a pool: two syllables, distinct for `i < 70²`.
pub fn pool_word(i: usize, target_side: bool, upper: bool) -> String {
    let n = LOWER_CONSONANTS.len() * VOWELS.len();
    format!(
        "{}{}",
        syllable(i % n, !target_side, upper),
        syllable(i / n % n, !target_side, upper)
    )
}

/// Seeded permutation of the word pool used by the cipher kinds.
fn lexicon(seed: u64, size: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..size).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x1e71c0));
    perm
}

/// Upper bound on pool indices the generator uses.
const POOL: usize = 512;

impl SyntheticDomainSpec {
    fn validate(&self) -> Result<()> {
        if self.vocab_len == 0 || self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!("domain {}: empty vocabulary or bad length range", self.name)));
        }
        if !(self.zipf >= 0.0 && self.zipf.is_finite()) {
            return Err(Error::Config(format!("domain {}: zipf exponent must be finite and non-negative", self.name)));
        }
        if self.vocab_start + self.vocab_len + TOKEN_SHIFT > POOL {
            return Err(Error::Config(format!("domain {}: word slice exceeds the pool", self.name)));
        }
        Ok(())
    }

    /// Source word for pool index `i`.
    fn source_word(&self, i: usize) -> String {
        match self.kind {
            TaskKind::LexiconCopy => pool_word(lexicon(self.lexicon_seed, POOL)[i], true, false),
            _ => pool_word(i, false, self.kind == TaskKind::DisjointVocabCipher),
        }
    }

    /// Translation of the source word with pool index `i`.
    pub fn translate_word(&self, i: usize) -> String {
        match self.kind {
            TaskKind::Copy | TaskKind::Reverse | TaskKind::LexiconCopy => self.source_word(i),
            TaskKind::TokenShift => self.source_word(i + TOKEN_SHIFT),
            TaskKind::SubstitutionCipher => pool_word(lexicon(self.lexicon_seed, POOL)[i], true, false),
            TaskKind::DisjointVocabCipher => pool_word(lexicon(self.lexicon_seed, POOL)[i], true, true),
        }
    }

    fn pair(&self, words: &[usize], lex: &[usize]) -> SentencePair {
        let src: Vec<String> = match self.kind {
            TaskKind::LexiconCopy => words.iter().map(|&i| pool_word(lex[i], true, false)).collect(),
            _ => words.iter().map(|&i| self.source_word(i)).collect(),
        };
        let mut tgt: Vec<String> = match self.kind {
            TaskKind::Copy | TaskKind::Reverse | TaskKind::LexiconCopy => src.clone(),
            TaskKind::TokenShift => words.iter().map(|&i| self.source_word(i + TOKEN_SHIFT)).collect(),
            TaskKind::SubstitutionCipher => words.iter().map(|&i| pool_word(lex[i], true, false)).collect(),
            TaskKind::DisjointVocabCipher => words.iter().map(|&i| pool_word(lex[i], true, true)).collect(),
        };
        if self.kind == TaskKind::Reverse {
            tgt.reverse();
        }
        SentencePair {
            src: src.join(" "),
            tgt: tgt.join(" "),
        }
    }

    /// Distinct sentence pairs split into train/dev/test; a pure function of
    /// `(self, seed)`.
    pub fn generate(&self, seed: u64) -> Result<DomainCorpus> {
        self.validate()?;
        let mut name_hash = 0xcbf29ce484222325u64;
        for b in self.name.bytes() {
            name_hash = (name_hash ^ b as u64).wrapping_mul(0x100000001b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash);
        let lex = lexicon(self.lexicon_seed, POOL);
        let weights: Vec<f64> = (0..self.vocab_len).map(|k| ((k + 1) as f64).powf(-self.zipf)).collect();
        let draw = WeightedIndex::new(&weights).map_err(|e| Error::Config(format!("domain {}: {e}", self.name)))?;
        let wanted = self.train + self.dev + self.test;
        let mut seen = HashSet::with_capacity(wanted);
        let mut pairs = Vec::with_capacity(wanted);
        let mut attempts = 0usize;
        while pairs.len() < wanted {
            attempts += 1;
            if attempts > 50 * wanted + 1000 {
                return Err(Error::Config(format!(
                    "domain {}: cannot draw {wanted} distinct sentences",
                    self.name
                )));
            }
            let len = rng.gen_range(self.min_len..=self.max_len);
            let words: Vec<usize> = (0..len)
                .map(|_| self.vocab_start + draw.sample(&mut rng))
                .collect();
            if seen.insert(words.clone()) {
                pairs.push(self.pair(&words, &lex));
            }
        }
        let test = pairs.split_off(self.train + self.dev);
        let dev = pairs.split_off(self.train);
        Ok(DomainCorpus {
            name: self.name.clone(),
            train: pairs,
            dev,
            test,
        })
    }
}

/// Five domains of graded relatedness: a base cipher, two ciphers over
/// shifted slices that share half and a third of the base words, a
/// disjoint-vocabulary cipher, and a copy task over the base domain's
/// target-side words.
pub fn default_domain_specs() -> Vec<SyntheticDomainSpec> {
    let spec = |name: &str, kind, vocab_start| SyntheticDomainSpec {
        name: name.to_string(),
        kind,
        vocab_start,
        vocab_len: 48,
        lexicon_seed: 0,
        train: 2000,
        dev: 200,
        test: 200,
        min_len: 3,
        max_len: 7,
        zipf: 0.0,
    };
    vec![
        spec("base", TaskKind::SubstitutionCipher, 0),
        spec("os", TaskKind::SubstitutionCipher, 24),
        spec("ted", TaskKind::SubstitutionCipher, 32),
        spec("php", TaskKind::DisjointVocabCipher, 0),
        spec("ub", TaskKind::LexiconCopy, 0),
    ]
}

pub fn generate_synthetic_domains(specs: &[SyntheticDomainSpec], seed: u64) -> Result<Vec<DomainCorpus>> {
    if specs.is_empty() {
        return Err(Error::Config("no synthetic domain specs".into()));
    }
    specs.iter().map(|s| s.generate(seed)).collect()
}

/// Tokenizes pairs, truncating each side to `max_tokens` including EOS.
pub fn encode_pairs(vocab: &BpeVocab, pairs: &[SentencePair], max_tokens: usize) -> Vec<Example> {
    let frame = |text: &str| {
        let mut ids = vocab.encode(text);
        ids.truncate(max_tokens.saturating_sub(1));
        ids.push(crate::subword::EOS);
        ids
    };
    pairs
        .iter()
        .map(|p| Example {
            src: frame(&p.src),
            tgt: frame(&p.tgt),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::subword::train_bpe;

    fn small(kind: TaskKind) -> SyntheticDomainSpec {
        SyntheticDomainSpec {
            name: "t".into(),
            kind,
            vocab_start: 0,
            vocab_len: 20,
            lexicon_seed: 3,
            train: 50,
            dev: 5,
            test: 5,
            min_len: 2,
            max_len: 5,
            zipf: 0.0,
        }
    }

    #[test]
    fn pool_words_are_distinct_per_side() {
        let src: HashSet<String> = (0..POOL).map(|i| pool_word(i, false, false)).collect();
        let tgt: HashSet<String> = (0..POOL).map(|i| pool_word(i, true, false)).collect();
        assert_eq!(src.len(), POOL);
        assert_eq!(tgt.len(), POOL);
        assert!(src.is_disjoint(&tgt));
    }

    #[test]
    fn copy_and_reverse_pairs() {
        let c = small(TaskKind::Copy).generate(1).unwrap();
        assert!(c.train.iter().all(|p| p.src == p.tgt));
        let r = small(TaskKind::Reverse).generate(1).unwrap();
        for p in &r.train {
            let mut w: Vec<&str> = p.src.split(' ').collect();
            w.reverse();
            assert_eq!(w.join(" "), p.tgt);
        }
    }

    #[test]
    fn cipher_inverts_under_the_inverse_lexicon() {
        let spec = small(TaskKind::SubstitutionCipher);
        let inverse: HashMap<String, String> = (0..spec.vocab_len)
            .map(|i| (spec.translate_word(i), pool_word(i, false, false)))
            .collect();
        for p in spec.generate(9).unwrap().train {
            let back: Vec<&str> = p.tgt.split(' ').map(|w| inverse[w].as_str()).collect();
            assert_eq!(back.join(" "), p.src);
        }
    }

    #[test]
    fn generation_is_pure_and_splits_are_disjoint() {
        let spec = small(TaskKind::TokenShift);
        assert_eq!(spec.generate(4).unwrap(), spec.generate(4).unwrap());
        assert_ne!(spec.generate(4).unwrap(), spec.generate(5).unwrap());
        let c = spec.generate(4).unwrap();
        assert_eq!((c.train.len(), c.dev.len(), c.test.len()), (50, 5, 5));
        let train: HashSet<&str> = c.train.iter().map(|p| p.src.as_str()).collect();
        assert!(c.dev.iter().chain(&c.test).all(|p| !train.contains(p.src.as_str())));
    }

    #[test]
    fn disjoint_domain_shares_no_tokens_with_base() {
        let specs = default_domain_specs()
            .into_iter()
            .map(|mut s| {
                s.train = 200;
                s
            })
            .collect::<Vec<_>>();
        let domains = generate_synthetic_domains(&specs, 0).unwrap();
        let vocab = train_bpe(domains.iter().flat_map(|d| d.all_text()), 200).unwrap();
        let ids = |d: &DomainCorpus| -> HashSet<usize> {
            d.all_text().flat_map(|l| vocab.encode(l)).collect()
        };
        let base = ids(&domains[0]);
        let php = ids(&domains[3]);
        assert!(base.is_disjoint(&php));
        assert!(!base.contains(&crate::subword::UNK));
    }

    #[test]
    fn lexicon_copy_reads_the_cipher_targets() {
        let cipher = small(TaskKind::SubstitutionCipher);
        let copy = small(TaskKind::LexiconCopy);
        let targets: HashSet<String> = (0..cipher.vocab_len).map(|i| cipher.translate_word(i)).collect();
        for p in copy.generate(3).unwrap().train {
            assert_eq!(p.src, p.tgt);
            assert!(p.src.split(' ').all(|w| targets.contains(w)), "{}", p.src);
        }
    }

    #[test]
    fn zipf_skews_word_frequencies() {
        let mut spec = small(TaskKind::Copy);
        spec.zipf = 1.5;
        let first = pool_word(0, false, false);
        let last = pool_word(spec.vocab_len - 1, false, false);
        let c = spec.generate(0).unwrap();
        let count = |w: &str| c.train.iter().flat_map(|p| p.src.split(' ')).filter(|x| *x == w).count();
        assert!(count(&first) > 5 * count(&last).max(1));
        spec.zipf = -1.0;
        assert!(spec.generate(0).is_err());
    }

    #[test]
    fn ingestion_splits_and_checks_alignment() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("a.src");
        let tgt = dir.path().join("a.tgt");
        let lines: String = (0..10).map(|i| format!("line {i}\n")).collect();
        fs::write(&src, &lines).unwrap();
        fs::write(&tgt, &lines).unwrap();
        let sizes = SplitSizes { dev: 1, test: 1 };
        let c = ingest_corpus("a", &src, &tgt, sizes, 7).unwrap();
        assert_eq!((c.train.len(), c.dev.len(), c.test.len()), (8, 1, 1));
        assert_eq!(c, ingest_corpus("a", &src, &tgt, sizes, 7).unwrap());
        assert!(ingest_corpus("a", &src, &tgt, SplitSizes { dev: 6, test: 5 }, 7).is_err());

        fs::write(&tgt, "one\n").unwrap();
        let err = ingest_corpus("a", &src, &tgt, sizes, 7).unwrap_err().to_string();
        assert!(err.contains("10") && err.contains('1'), "{err}");

        fs::write(&tgt, b"ok\n\xff\xfe\n").unwrap();
        fs::write(&src, "a\nb\n").unwrap();
        let err = ingest_corpus("a", &src, &tgt, SplitSizes { dev: 0, test: 0 }, 7).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn corpus_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let c = small(TaskKind::Copy).generate(2).unwrap();
        c.save(dir.path()).unwrap();
        assert_eq!(DomainCorpus::load(dir.path(), "t").unwrap(), c);
    }
}
