//! Packed forward pass.
//!
//! A batch of sequences is stored as one `[N×d]` matrix of concatenated rows
//! with no padding between sequences; attention segments keep sequences from
//! seeing each other. Source rows holding [`PAD`] are masked as keys.

use super::{LayerSlot, Model};
use crate::error::{Error, Result};
use crate::subword::{BOS, PAD};
use crate::tensor::{AttentionLayout, Segment, Tape, Tensor, Var};

/// Row ranges of a packed batch.
#[derive(Clone, Debug)]
pub(crate) struct Packing {
    pub starts: Vec<usize>,
    pub lens: Vec<usize>,
}

impl Packing {
    fn of<S: AsRef<[usize]>>(seqs: &[S]) -> Self {
        let mut starts = Vec::with_capacity(seqs.len());
        let mut lens = Vec::with_capacity(seqs.len());
        let mut at = 0;
        for s in seqs {
            starts.push(at);
            lens.push(s.as_ref().len());
            at += s.as_ref().len();
        }
        Packing { starts, lens }
    }

    pub fn rows(&self) -> usize {
        self.lens.iter().sum()
    }

    fn self_segments(&self) -> Vec<Segment> {
        self.starts
            .iter()
            .zip(&self.lens)
            .map(|(&s, &l)| Segment {
                q_start: s,
                q_len: l,
                k_start: s,
                k_len: l,
            })
            .collect()
    }

    fn cross_segments(&self, keys: &Packing) -> Vec<Segment> {
        (0..self.starts.len())
            .map(|i| Segment {
                q_start: self.starts[i],
                q_len: self.lens[i],
                k_start: keys.starts[i],
                k_len: keys.lens[i],
            })
            .collect()
    }
}

/// Parameters recorded on a tape, indexed like the model's [`ParamSet`].
pub(crate) struct Bound(pub Vec<Var>);

impl Model {
    /// Records every parameter on `tape`; with `track`, tensors flagged
    /// `requires_grad` become differentiable leaves.
    pub(crate) fn bind(&self, tape: &mut Tape, track: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|e| {
                    if track {
                        tape.leaf(&e.tensor)
                    } else {
                        tape.frozen_leaf(&e.tensor)
                    }
                })
                .collect(),
        )
    }

    fn check_lengths<S: AsRef<[usize]>>(&self, seqs: &[S], what: &str) -> Result<()> {
        if seqs.is_empty() {
            return Err(Error::Input(format!("empty {what} batch")));
        }
        for s in seqs {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(Error::Input(format!("empty {what} sequence")));
            }
            if s.len() > self.config.max_seq_len {
                return Err(Error::Input(format!(
                    "{what} sequence of {} tokens exceeds max_seq_len {}",
                    s.len(),
                    self.config.max_seq_len
                )));
            }
            if let Some(&bad) = s.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::Index {
                    index: bad,
                    bound: self.config.vocab_size,
                    context: "token id",
                });
            }
        }
        Ok(())
    }

    /// Scaled embeddings plus sinusoidal positions.
    fn embed_rows<S: AsRef<[usize]>>(&self, tape: &mut Tape, p: &Bound, seqs: &[S]) -> Result<Var> {
        let d = self.config.d_model;
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.as_ref().iter().copied()).collect();
        let x = tape.embed(p.0[0], &ids, (d as f64).sqrt())?;
        let mut pos = Vec::with_capacity(ids.len() * d);
        for s in seqs {
            pos.extend_from_slice(&self.positional[..s.as_ref().len() * d]);
        }
        tape.add_const(x, &pos)
    }

    fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    /// Attention sublayer whose eight tensors start at `at`.
    fn attention_block(
        &self,
        tape: &mut Tape,
        p: &[Var],
        at: usize,
        query: Var,
        memory: Var,
        layout: AttentionLayout,
    ) -> Result<Var> {
        let q = Self::linear(tape, query, p[at], p[at + 1])?;
        let k = Self::linear(tape, memory, p[at + 2], p[at + 3])?;
        let v = Self::linear(tape, memory, p[at + 4], p[at + 5])?;
        let a = tape.attention(q, k, v, layout)?;
        Self::linear(tape, a, p[at + 6], p[at + 7])
    }

    fn ffn_block(tape: &mut Tape, p: &[Var], at: usize, x: Var) -> Result<Var> {
        let h = Self::linear(tape, x, p[at], p[at + 1])?;
        let h = tape.relu(h);
        Self::linear(tape, h, p[at + 2], p[at + 3])
    }

    fn self_layout(&self, packing: &Packing, causal: bool, key_mask: Option<Vec<bool>>) -> AttentionLayout {
        AttentionLayout {
            heads: self.config.heads,
            segments: packing.self_segments(),
            causal,
            key_mask,
        }
    }

    /// Encoder stack including the final norm. Returns `[N_src×d]`.
    pub(crate) fn encode<S: AsRef<[usize]>>(
        &self,
        tape: &mut Tape,
        p: &Bound,
        src: &[S],
    ) -> Result<(Var, Packing, Option<Vec<bool>>)> {
        self.check_lengths(src, "source")?;
        let packing = Packing::of(src);
        let mask: Vec<bool> = src.iter().flat_map(|s| s.as_ref().iter().map(|&t| t == PAD)).collect();
        let mask = mask.iter().any(|&m| m).then_some(mask);
        let mut x = self.embed_rows(tape, p, src)?;
        for slot in &self.enc {
            x = self.encoder_layer(tape, &p.0, *slot, x, &packing, &mask)?;
        }
        let out = tape.layer_norm(x, p.0[self.enc_norm], p.0[self.enc_norm + 1])?;
        Ok((out, packing, mask))
    }

    fn encoder_layer(
        &self,
        tape: &mut Tape,
        p: &[Var],
        slot: LayerSlot,
        x: Var,
        packing: &Packing,
        mask: &Option<Vec<bool>>,
    ) -> Result<Var> {
        let f = slot.first;
        let h = tape.layer_norm(x, p[f], p[f + 1])?;
        let a = self.attention_block(tape, p, f + 2, h, h, self.self_layout(packing, false, mask.clone()))?;
        let x = tape.add(x, a)?;
        let h = tape.layer_norm(x, p[f + 10], p[f + 11])?;
        let m = Self::ffn_block(tape, p, f + 12, h)?;
        tape.add(x, m)
    }

    /// Decoder stack including the final norm over already-shifted inputs.
    pub(crate) fn decode_hidden<S: AsRef<[usize]>>(
        &self,
        tape: &mut Tape,
        p: &Bound,
        memory: Var,
        mem_packing: &Packing,
        mem_mask: &Option<Vec<bool>>,
        tgt_in: &[S],
    ) -> Result<Var> {
        self.check_lengths(tgt_in, "target")?;
        if tgt_in.len() != mem_packing.lens.len() {
            return Err(Error::Input(format!(
                "{} target sequences for {} source sequences",
                tgt_in.len(),
                mem_packing.lens.len()
            )));
        }
        let packing = Packing::of(tgt_in);
        let mut x = self.embed_rows(tape, p, tgt_in)?;
        let cross = AttentionLayout {
            heads: self.config.heads,
            segments: packing.cross_segments(mem_packing),
            causal: false,
            key_mask: mem_mask.clone(),
        };
        for slot in &self.dec {
            let f = slot.first;
            let p = &p.0;
            let h = tape.layer_norm(x, p[f], p[f + 1])?;
            let a = self.attention_block(tape, p, f + 2, h, h, self.self_layout(&packing, true, None))?;
            x = tape.add(x, a)?;
            let h = tape.layer_norm(x, p[f + 10], p[f + 11])?;
            let c = self.attention_block(tape, p, f + 12, h, memory, cross.clone())?;
            x = tape.add(x, c)?;
            let h = tape.layer_norm(x, p[f + 20], p[f + 21])?;
            let m = Self::ffn_block(tape, p, f + 22, h)?;
            x = tape.add(x, m)?;
        }
        tape.layer_norm(x, p.0[self.dec_norm], p.0[self.dec_norm + 1])
    }

    /// Output projection tied to the embedding table.
    pub(crate) fn project(&self, tape: &mut Tape, p: &Bound, hidden: Var) -> Result<Var> {
        tape.matmul_nt(hidden, p.0[0])
    }

    /// Teacher-forced logits for a packed batch, recorded on `tape`.
    ///
    /// The decoder reads `BOS, tgt[0], …, tgt[t-2]`, so row `i` predicts
    /// `tgt[i]` from `tgt[..i]` only.
    pub(crate) fn logits_on_tape<S: AsRef<[usize]>, T: AsRef<[usize]>>(
        &self,
        tape: &mut Tape,
        p: &Bound,
        src: &[S],
        tgt: &[T],
    ) -> Result<Var> {
        let (memory, mem_packing, mem_mask) = self.encode(tape, p, src)?;
        let shifted: Vec<Vec<usize>> = tgt.iter().map(|t| shift_right(t.as_ref())).collect();
        let hidden = self.decode_hidden(tape, p, memory, &mem_packing, &mem_mask, &shifted)?;
        self.project(tape, p, hidden)
    }

    /// Logits `[t×V]` for one source/target pair.
    pub fn forward(&self, src: &[usize], tgt: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let logits = self.logits_on_tape(&mut tape, &p, &[src], &[tgt])?;
        let out = tape.to_tensor(logits);
        if !out.is_finite() {
            return Err(Error::NonFinite("forward logits"));
        }
        Ok(out)
    }

    /// Logits for a batch, one `[t_i×V]` tensor per pair.
    pub fn forward_batch<S: AsRef<[usize]>, T: AsRef<[usize]>>(&self, src: &[S], tgt: &[T]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let logits = self.logits_on_tape(&mut tape, &p, src, tgt)?;
        let v = self.config.vocab_size;
        let values = tape.value(logits);
        if !values.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("forward logits"));
        }
        let mut at = 0;
        tgt.iter()
            .map(|t| {
                let n = t.as_ref().len();
                let out = Tensor::new(vec![n, v], values[at * v..(at + n) * v].to_vec());
                at += n;
                out
            })
            .collect()
    }
}

pub(crate) fn shift_right(tgt: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(tgt.len());
    v.push(BOS);
    v.extend_from_slice(&tgt[..tgt.len().saturating_sub(1)]);
    v
}
