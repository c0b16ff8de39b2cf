//! Batched greedy decoding.

use super::forward::Packing;
use super::Model;
use crate::error::Result;
use crate::subword::{BOS, EOS};
use crate::tensor::kernels::dot;
use crate::tensor::{Tape, Tensor};

impl Model {
    /// Argmax decoding of one source sequence; stops at EOS (not included)
    /// or after `max_len` tokens.
    pub fn greedy_decode(&self, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
        Ok(self.greedy_decode_batch(&[src], max_len)?.remove(0))
    }

    /// Greedy decoding of a batch. The encoder runs once; each step re-runs
    /// the decoder over the prefixes of the still-unfinished sequences.
    /// Ties between logits go to the lowest token id.
    pub fn greedy_decode_batch<S: AsRef<[usize]>>(&self, src: &[S], max_len: usize) -> Result<Vec<Vec<usize>>> {
        let mut out = vec![Vec::new(); src.len()];
        let max_len = max_len.min(self.config.max_seq_len);
        if src.is_empty() || max_len == 0 {
            return Ok(out);
        }
        let d = self.config.d_model;
        let v = self.config.vocab_size;

        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let (memory, packing, _) = self.encode(&mut tape, &p, src)?;
        let memory = tape.value(memory).to_vec();
        drop(tape);

        let mut active: Vec<usize> = (0..src.len()).collect();
        for _ in 0..max_len {
            if active.is_empty() {
                break;
            }
            let mut mem_rows = Vec::new();
            let mut mem_mask = Vec::new();
            let mut any_masked = false;
            let mut prefixes = Vec::with_capacity(active.len());
            for &i in &active {
                let (s, l) = (packing.starts[i], packing.lens[i]);
                mem_rows.extend_from_slice(&memory[s * d..(s + l) * d]);
                for &t in &src[i].as_ref()[..l] {
                    mem_mask.push(t == crate::subword::PAD);
                    any_masked |= t == crate::subword::PAD;
                }
                let mut prefix = Vec::with_capacity(out[i].len() + 1);
                prefix.push(BOS);
                prefix.extend_from_slice(&out[i]);
                prefixes.push(prefix);
            }
            let sub_packing = Packing {
                starts: active
                    .iter()
                    .scan(0, |at, &i| {
                        let s = *at;
                        *at += packing.lens[i];
                        Some(s)
                    })
                    .collect(),
                lens: active.iter().map(|&i| packing.lens[i]).collect(),
            };

            let mut tape = Tape::new();
            let p = self.bind(&mut tape, false);
            let rows = sub_packing.rows();
            let mem = tape.frozen_leaf(&Tensor::new(vec![rows, d], mem_rows)?);
            let mask = any_masked.then_some(mem_mask);
            let hidden = self.decode_hidden(&mut tape, &p, mem, &sub_packing, &mask, &prefixes)?;
            let hidden = tape.value(hidden);
            let table = self.params.at(0).tensor.data();

            let mut row_end = 0;
            let mut still = Vec::with_capacity(active.len());
            for (k, &i) in active.iter().enumerate() {
                row_end += prefixes[k].len();
                let h = &hidden[(row_end - 1) * d..row_end * d];
                let mut best = 0;
                let mut best_score = f64::NEG_INFINITY;
                for tok in 0..v {
                    let score = dot(h, &table[tok * d..(tok + 1) * d]);
                    if score > best_score {
                        best = tok;
                        best_score = score;
                    }
                }
                if best != EOS {
                    out[i].push(best);
                    still.push(i);
                }
            }
            active = still;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;

    fn model() -> Model {
        Model::build(
            ModelConfig {
                enc_layers: 2,
                dec_layers: 2,
                d_model: 16,
                heads: 2,
                d_ff: 32,
                vocab_size: 30,
                max_seq_len: 10,
            },
            11,
        )
        .unwrap()
    }

    #[test]
    fn zero_length_gives_empty_output() {
        assert!(model().greedy_decode(&[4, 5], 0).unwrap().is_empty());
    }

    #[test]
    fn decoding_is_reproducible_and_bounded() {
        let m = model();
        let a = m.greedy_decode(&[4, 5, 6, 2], 7).unwrap();
        let b = model().greedy_decode(&[4, 5, 6, 2], 7).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 7);
        assert!(!a.contains(&EOS));
    }

    #[test]
    fn batch_agrees_with_single_and_with_teacher_forcing() {
        let m = model();
        let srcs = vec![vec![4, 5, 6, 2], vec![9, 2], vec![12, 13, 14, 15, 2]];
        let batch = m.greedy_decode_batch(&srcs, 6).unwrap();
        for (s, out) in srcs.iter().zip(&batch) {
            assert_eq!(&m.greedy_decode(s, 6).unwrap(), out);
            if out.is_empty() {
                continue;
            }
            // Each emitted token is the argmax of the teacher-forced logits.
            let logits = m.forward(s, out).unwrap();
            for (i, &tok) in out.iter().enumerate() {
                let row = &logits.data()[i * 30..(i + 1) * 30];
                let arg = (0..30).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                assert_eq!(arg, tok);
            }
        }
    }
}
