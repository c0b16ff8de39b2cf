//! Corpus BLEU over whitespace tokens and model-by-domain evaluation matrices.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::subword::BpeVocab;

/// Clipped n-gram matches and hypothesis n-gram totals for `n = 1..=max_n`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NgramStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl NgramStats {
    fn add(&mut self, other: &NgramStats) {
        if self.matches.len() < other.matches.len() {
            self.matches.resize(other.matches.len(), 0);
            self.totals.resize(other.totals.len(), 0);
        }
        for (a, b) in self.matches.iter_mut().zip(&other.matches) {
            *a += b;
        }
        for (a, b) in self.totals.iter_mut().zip(&other.totals) {
            *a += b;
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }
}

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

pub fn sentence_ngram_stats<T: AsRef<str>>(hyp: &[T], reference: &[T], max_n: usize) -> NgramStats {
    let mut stats = NgramStats {
        matches: Vec::with_capacity(max_n),
        totals: Vec::with_capacity(max_n),
        hyp_len: hyp.len(),
        ref_len: reference.len(),
    };
    for n in 1..=max_n {
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        let matched = h
            .iter()
            .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
            .sum();
        stats.matches.push(matched);
        stats.totals.push(hyp.len().saturating_sub(n - 1));
    }
    stats
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub max_n: usize,
    /// Add one to numerator and denominator of every precision with n > 1.
    pub smoothing: bool,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self {
            max_n: 4,
            smoothing: false,
        }
    }
}

/// Combines corpus-level statistics into a score in `[0, 100]`.
pub fn bleu_from_stats(stats: &NgramStats, config: BleuConfig) -> f64 {
    if stats.hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..config.max_n {
        let (mut m, mut t) = (stats.matches[n] as f64, stats.totals[n] as f64);
        if config.smoothing && n > 0 {
            m += 1.0;
            t += 1.0;
        }
        if m == 0.0 || t == 0.0 {
            return 0.0;
        }
        log_sum += (m / t).ln();
    }
    let (c, r) = (stats.hyp_len as f64, stats.ref_len as f64);
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    (100.0 * bp * (log_sum / config.max_n as f64).exp()).clamp(0.0, 100.0)
}

/// Corpus BLEU of `(hypothesis, reference)` pairs of whitespace-separated text.
pub fn corpus_bleu<S: AsRef<str>>(pairs: &[(S, S)], config: BleuConfig) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("corpus BLEU needs at least one sentence pair".into()));
    }
    if config.max_n == 0 {
        return Err(Error::Config("BLEU max_n must be at least 1".into()));
    }
    let mut total = NgramStats::default();
    for (h, r) in pairs {
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        total.add(&sentence_ngram_stats(&h, &r, config.max_n));
    }
    Ok(bleu_from_stats(&total, config))
}

/// Test set for one domain, already split into source/reference text.
#[derive(Clone, Debug)]
pub struct TestSet {
    pub name: String,
    pub src: Vec<String>,
    pub refs: Vec<String>,
}

/// Translates `set` with greedy decoding and scores it.
pub fn evaluate_model(model: &Model, vocab: &BpeVocab, set: &TestSet, config: BleuConfig) -> Result<f64> {
    if vocab.len() != model.config().vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let hyps = translate(model, vocab, &set.src)?;
    let pairs: Vec<(&str, &str)> = hyps.iter().map(String::as_str).zip(set.refs.iter().map(String::as_str)).collect();
    corpus_bleu(&pairs, config)
}

/// Greedy translations of source lines, decoded back to text. Output is
/// capped at twice the longest source in each chunk plus two tokens.
pub fn translate(model: &Model, vocab: &BpeVocab, src: &[String]) -> Result<Vec<String>> {
    let max = model.config().max_seq_len;
    let ids: Vec<Vec<usize>> = src
        .iter()
        .map(|s| {
            let mut v = vocab.encode(s);
            v.truncate(max - 1);
            v.push(crate::subword::EOS);
            v
        })
        .collect();
    let mut out = Vec::with_capacity(src.len());
    // Decode in chunks so the step graphs stay small.
    for chunk in ids.chunks(64) {
        let longest = chunk.iter().map(Vec::len).max().unwrap_or(0);
        for hyp in model.greedy_decode_batch(chunk, max.min(2 * longest + 2))? {
            out.push(vocab.decode(&hyp)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub label: String,
    pub cells: Vec<f64>,
    pub average: f64,
    pub c_cost: Option<u64>,
    pub t_cost: Option<u64>,
}

/// Rows are configurations, columns test sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    pub columns: Vec<String>,
    pub rows: Vec<MatrixRow>,
    pub bleu: BleuConfig,
}

impl EvalMatrix {
    pub fn new(columns: Vec<String>, bleu: BleuConfig) -> Self {
        Self {
            columns,
            rows: Vec::new(),
            bleu,
        }
    }

    pub fn push_row(&mut self, label: impl Into<String>, cells: Vec<f64>, c_cost: Option<u64>, t_cost: Option<u64>) -> Result<()> {
        if cells.len() != self.columns.len() {
            return Err(Error::Contract(format!(
                "row has {} cells for {} columns",
                cells.len(),
                self.columns.len()
            )));
        }
        let average = cells.iter().sum::<f64>() / cells.len() as f64;
        self.rows.push(MatrixRow {
            label: label.into(),
            cells,
            average,
            c_cost,
            t_cost,
        });
        Ok(())
    }

    pub fn row(&self, label: &str) -> Option<&MatrixRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Cells to two decimals; costs as plain integers, blank when absent.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("Configuration");
        for c in &self.columns {
            write!(s, ",{}", csv_field(c)).unwrap();
        }
        s.push_str(",Average,C-Cost,T-Cost\n");
        for r in &self.rows {
            s.push_str(&csv_field(&r.label));
            for c in &r.cells {
                write!(s, ",{c:.2}").unwrap();
            }
            write!(s, ",{:.2}", r.average).unwrap();
            for cost in [r.c_cost, r.t_cost] {
                s.push(',');
                if let Some(c) = cost {
                    write!(s, "{c}").unwrap();
                }
            }
            s.push('\n');
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One row per model, one column per test set.
pub fn evaluate_matrix(
    models: &[(String, &Model)],
    vocab: &BpeVocab,
    sets: &[TestSet],
    config: BleuConfig,
) -> Result<EvalMatrix> {
    let mut m = EvalMatrix::new(sets.iter().map(|s| s.name.clone()).collect(), config);
    for (label, model) in models {
        let cells = sets
            .iter()
            .map(|s| evaluate_model(model, vocab, s, config))
            .collect::<Result<Vec<_>>>()?;
        m.push_row(label.clone(), cells, None, None)?;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn clipping_at_reference_count() {
        let s = sentence_ngram_stats(&toks("the the the"), &toks("the cat"), 4);
        assert_eq!(s.matches[0], 1);
        assert_eq!(s.totals, [3, 2, 1, 0]);
    }

    #[test]
    fn identity_and_disjoint_extremes() {
        let same = [("a b c d e", "a b c d e"), ("x y z w", "x y z w")];
        assert_eq!(corpus_bleu(&same, BleuConfig::default()).unwrap(), 100.0);
        let s = sentence_ngram_stats(&toks("a b c d"), &toks("a b c d"), 4);
        assert_eq!(s.matches, s.totals);
        let disjoint = [("a b c d", "e f g h")];
        assert_eq!(corpus_bleu(&disjoint, BleuConfig::default()).unwrap(), 0.0);
        assert!(sentence_ngram_stats(&toks("a b"), &toks("c d"), 2).matches.iter().all(|&m| m == 0));
        assert!(corpus_bleu::<&str>(&[], BleuConfig::default()).is_err());
    }

    #[test]
    fn hand_computed_two_sentence_corpus() {
        // hyp1 "a b c d e" vs ref1 "a b c d f": 1g 4/5, 2g 3/4, 3g 2/3, 4g 1/2.
        // hyp2 "x y z" vs ref2 "x y w v": 1g 2/3, 2g 1/2, 3g 0/1, 4g 0/0.
        // Corpus: 6/8, 4/6, 2/4, 1/2; c = 8, r = 9.
        let pairs = [("a b c d e", "a b c d f"), ("x y z", "x y w v")];
        let geo = ((6.0f64 / 8.0) * (4.0 / 6.0) * (2.0 / 4.0) * (1.0 / 2.0)).powf(0.25);
        let bp = (1.0f64 - 9.0 / 8.0).exp();
        let expected = 100.0 * bp * geo;
        let got = corpus_bleu(&pairs, BleuConfig::default()).unwrap();
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    }

    #[test]
    fn smoothing_rescues_missing_higher_orders() {
        let pairs = [("a b", "a b")];
        assert_eq!(corpus_bleu(&pairs, BleuConfig::default()).unwrap(), 0.0);
        let s = corpus_bleu(&pairs, BleuConfig { max_n: 4, smoothing: true }).unwrap();
        // precisions 2/2, 2/2, 1/1, 1/1 after add-one.
        assert!((s - 100.0).abs() < 1e-9);
    }

    #[test]
    fn matrix_average_and_csv() {
        let mut m = EvalMatrix::new(vec!["a".into(), "b".into()], BleuConfig::default());
        m.push_row("x", vec![10.0, 20.5], Some(4), None).unwrap();
        assert!((m.rows[0].average - 15.25).abs() < 1e-12);
        assert!(m.push_row("bad", vec![1.0], None, None).is_err());
        assert_eq!(m.to_csv(), "Configuration,a,b,Average,C-Cost,T-Cost\nx,10.00,20.50,15.25,4,\n");
    }

    fn sentence() -> impl Strategy<Value = String> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 1..8).prop_map(|v| v.join(" "))
    }

    proptest! {
        #[test]
        fn bleu_bounded_and_order_free(pairs in prop::collection::vec((sentence(), sentence()), 1..6), smoothing: bool) {
            let cfg = BleuConfig { max_n: 4, smoothing };
            let b = corpus_bleu(&pairs, cfg).unwrap();
            prop_assert!((0.0..=100.0).contains(&b));
            let mut rev = pairs.clone();
            rev.reverse();
            prop_assert_eq!(b, corpus_bleu(&rev, cfg).unwrap());
        }

        #[test]
        fn brevity_penalty_only_below_reference_length(h in sentence(), r in sentence()) {
            let s = sentence_ngram_stats(&toks(&h), &toks(&r), 1);
            let b = corpus_bleu(&[(h.as_str(), r.as_str())], BleuConfig { max_n: 1, smoothing: false }).unwrap();
            let precision = 100.0 * s.matches[0] as f64 / s.totals[0] as f64;
            if s.hyp_len >= s.ref_len {
                prop_assert!((b - precision).abs() < 1e-9);
            } else {
                prop_assert!(b <= precision + 1e-9);
            }
        }
    }
}
