//! Joint byte-pair-encoding vocabulary shared by the source and target side.
//!
//! Words are whitespace-delimited. The last character of every word carries
//! the end-of-word marker `</w>`, so `"ab"` starts out as `["a", "b</w>"]`.
//! Merges are learned greedily by pair frequency; ties go to the
//! lexicographically smallest `(left, right)` pair.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
pub const END_OF_WORD: &str = "</w>";

/// Merge count used for the full-scale preset.
pub const FULL_SCALE_MERGES: usize = 30_000;
/// Merge count used for desk-scale runs.
pub const DESK_SCALE_MERGES: usize = 500;

const HEADER: &str = "#fednmt-bpe v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeVocab {
    merges: Vec<(String, String)>,
    tokens: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
    merge_rank: HashMap<String, usize>,
}

fn pair_key(a: &str, b: &str) -> String {
    let mut k = String::with_capacity(a.len() + b.len() + 1);
    k.push_str(a);
    k.push(' ');
    k.push_str(b);
    k
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == chars.len() {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn apply_merge(symbols: &mut Vec<String>, left: &str, right: &str) -> bool {
    let mut changed = false;
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let merged = format!("{left}{right}");
            symbols[i] = merged;
            symbols.remove(i + 1);
            changed = true;
        }
        i += 1;
    }
    changed
}

/// Learns up to `num_merges` merge rules from `lines`.
pub fn train_bpe<'a, I>(lines: I, num_merges: usize) -> Result<BpeVocab>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut word_freq: BTreeMap<&str, u64> = BTreeMap::new();
    for line in lines {
        for w in line.split_whitespace() {
            *word_freq.entry(w).or_default() += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(Error::Input("cannot train BPE on an empty corpus".into()));
    }

    let mut words: Vec<(Vec<String>, u64)> = word_freq
        .iter()
        .map(|(w, &f)| (word_symbols(w), f))
        .collect();
    let base: BTreeSet<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();

    let mut merges = Vec::new();
    while merges.len() < num_merges {
        let mut counts: HashMap<(&str, &str), u64> = HashMap::new();
        for (syms, f) in &words {
            for pair in syms.windows(2) {
                *counts.entry((pair[0].as_str(), pair[1].as_str())).or_default() += f;
            }
        }
        let best = counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((l, r), _)) = best else { break };
        let (l, r) = (l.to_string(), r.to_string());
        for (syms, _) in &mut words {
            apply_merge(syms, &l, &r);
        }
        merges.push((l, r));
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(base);
    for (l, r) in &merges {
        tokens.push(format!("{l}{r}"));
    }
    BpeVocab::from_parts(merges, tokens)
}

impl BpeVocab {
    fn from_parts(merges: Vec<(String, String)>, raw_tokens: Vec<String>) -> Result<Self> {
        let mut tokens = Vec::with_capacity(raw_tokens.len());
        let mut token_to_id = HashMap::new();
        for t in raw_tokens {
            if !token_to_id.contains_key(&t) {
                token_to_id.insert(t.clone(), tokens.len() as TokenId);
                tokens.push(t);
            }
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::format("vocabulary", format!("special token {s} not at id {i}")));
            }
        }
        let merge_rank = merges
            .iter()
            .enumerate()
            .map(|(i, (l, r))| (pair_key(l, r), i))
            .collect();
        Ok(Self {
            merges,
            tokens,
            token_to_id,
            merge_rank,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Subword strings for one word, merges applied lowest rank first.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| self.merge_rank.get(&pair_key(&p[0], &p[1])))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let (l, r) = &self.merges[rank];
            apply_merge(&mut syms, l, r);
        }
        syms
    }

    /// Unframed token ids; characters outside the vocabulary become UNK.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .flat_map(|w| self.segment_word(w))
            .map(|s| self.id(&s).unwrap_or(UNK))
            .collect()
    }

    /// `encode` followed by EOS.
    pub fn encode_with_eos(&self, text: &str) -> Vec<TokenId> {
        let mut ids = self.encode(text);
        ids.push(EOS);
        ids
    }

    /// Inverse of `encode`. PAD, BOS and EOS are dropped; UNK renders as `<unk>`.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::Index {
                index: id,
                bound: self.len(),
                context: "token id",
            })?;
            match id {
                PAD | BOS | EOS => {}
                UNK => out.push_str(tok),
                _ => match tok.strip_suffix(END_OF_WORD) {
                    Some(stem) => {
                        out.push_str(stem);
                        out.push(' ');
                    }
                    None => out.push_str(tok),
                },
            }
        }
        if out.ends_with(' ') {
            out.pop();
        }
        Ok(out)
    }

    /// Text form: header, merge rules in order, then the token table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{HEADER}").unwrap();
        writeln!(s, "#merges {}", self.merges.len()).unwrap();
        for (l, r) in &self.merges {
            writeln!(s, "{l} {r}").unwrap();
        }
        writeln!(s, "#tokens {}", self.tokens.len()).unwrap();
        for t in &self.tokens {
            writeln!(s, "{t}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::format("vocabulary", m);
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(bad("missing header line".into()));
        }
        let count = |line: Option<&str>, key: &str| -> Result<usize> {
            line.and_then(|l| l.strip_prefix(key))
                .and_then(|n| n.trim().parse().ok())
                .ok_or_else(|| bad(format!("expected `{key}<count>`")))
        };
        let n_merges = count(lines.next(), "#merges ")?;
        let mut merges = Vec::with_capacity(n_merges);
        for i in 0..n_merges {
            let line = lines.next().ok_or_else(|| bad(format!("missing merge {i}")))?;
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| bad(format!("merge line {i} is not `left right`")))?;
            merges.push((l.to_string(), r.to_string()));
        }
        let n_tokens = count(lines.next(), "#tokens ")?;
        let tokens: Vec<String> = lines.by_ref().take(n_tokens).map(str::to_string).collect();
        if tokens.len() != n_tokens {
            return Err(bad("token table shorter than declared".into()));
        }
        if lines.next().is_some() {
            return Err(bad("trailing data after token table".into()));
        }
        let vocab = Self::from_parts(merges, tokens)?;
        if vocab.tokens.len() != n_tokens {
            return Err(bad("duplicate entries in token table".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
