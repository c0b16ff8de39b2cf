//! Teacher-forced training: loss, gradients and optimizer steps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, AdamState, Tape, TrainMask};

/// One tokenized sentence pair; both sides end with EOS.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

/// Shuffled epochs over `n` examples, reproducible from a seed.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    /// Next `size` indices, reshuffling at each epoch boundary.
    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            adam: AdamConfig::default(),
        }
    }
}

/// Mean token cross-entropy of a batch. Stores gradients on every tensor
/// in `mask` and clears all others.
pub fn loss_and_grads(model: &mut Model, batch: &[&Example], mask: TrainMask) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("empty training batch".into()));
    }
    model.set_trainable(mask);
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let src: Vec<&[usize]> = batch.iter().map(|e| e.src.as_slice()).collect();
    let tgt: Vec<&[usize]> = batch.iter().map(|e| e.tgt.as_slice()).collect();
    let logits = model.logits_on_tape(&mut tape, &p, &src, &tgt)?;
    let targets: Vec<usize> = tgt.iter().flat_map(|t| t.iter().copied()).collect();
    let loss = tape.cross_entropy(logits, &targets)?;
    let value = tape.value(loss)[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    model.params.clear_grads();
    if mask == TrainMask::NONE {
        return Ok(value);
    }
    let mut grads = tape.backward(loss)?;
    for (e, &var) in model.params.iter_mut().zip(&p.0) {
        if mask.contains(e.partition) {
            let g = grads.take(var).unwrap_or_else(|| vec![0.0; e.tensor.len()]);
            e.tensor.set_grad(g)?;
        }
    }
    Ok(value)
}

/// Mean token cross-entropy without gradients.
pub fn batch_loss(model: &Model, batch: &[&Example]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let src: Vec<&[usize]> = batch.iter().map(|e| e.src.as_slice()).collect();
    let tgt: Vec<&[usize]> = batch.iter().map(|e| e.tgt.as_slice()).collect();
    let logits = model.logits_on_tape(&mut tape, &p, &src, &tgt)?;
    let targets: Vec<usize> = tgt.iter().flat_map(|t| t.iter().copied()).collect();
    let loss = tape.cross_entropy(logits, &targets)?;
    Ok(tape.value(loss)[0])
}

/// Adam optimizer bound to a training mask.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub mask: TrainMask,
    adam: AdamState,
}

impl Trainer {
    pub fn new(config: TrainConfig, mask: TrainMask) -> Self {
        Self {
            config,
            mask,
            adam: AdamState::new(config.adam),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.adam.step_count()
    }

    /// One optimizer step; returns the pre-update batch loss.
    pub fn step(&mut self, model: &mut Model, batch: &[&Example]) -> Result<f64> {
        let loss = loss_and_grads(model, batch, self.mask)?;
        self.adam.step(&mut model.params, self.mask)?;
        if !model.params.iter().all(|e| e.tensor.is_finite()) {
            return Err(Error::NonFinite("optimizer step"));
        }
        Ok(loss)
    }

    /// `steps` optimizer steps on batches drawn from `data`. Returns the
    /// loss of every step.
    pub fn run(&mut self, model: &mut Model, data: &[Example], steps: usize, sampler: &mut BatchSampler) -> Result<Vec<f64>> {
        if data.is_empty() && steps > 0 {
            return Err(Error::Input("no training data".into()));
        }
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let idx = sampler.next_batch(self.config.batch_size);
            let batch: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
            losses.push(self.step(model, &batch)?);
        }
        Ok(losses)
    }
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;
    use crate::subword::EOS;

    #[test]
    fn sampler_covers_each_epoch_once() {
        let mut s = BatchSampler::new(10, 3);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let mut a = BatchSampler::new(10, 3);
        let mut b = BatchSampler::new(10, 3);
        for _ in 0..12 {
            assert_eq!(a.next_batch(3), b.next_batch(3));
        }
        assert_eq!(BatchSampler::new(3, 0).next_batch(8).len(), 3);
    }

    #[test]
    fn frozen_partitions_get_no_gradient() {
        let cfg = ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            vocab_size: 12,
            max_seq_len: 8,
        };
        let mut m = Model::build(cfg, 1).unwrap();
        let ex = Example {
            src: vec![4, 5, EOS],
            tgt: vec![6, EOS],
        };
        let mask = TrainMask {
            base: true,
            controller: true,
            embedding: false,
        };
        loss_and_grads(&mut m, &[&ex], mask).unwrap();
        for e in m.params() {
            assert_eq!(e.tensor.grad().is_some(), e.name != "embed", "{}", e.name);
        }
    }

    #[test]
    fn overfits_eight_pairs() {
        let cfg = ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 32,
            heads: 4,
            d_ff: 64,
            vocab_size: 24,
            max_seq_len: 12,
        };
        let mut m = Model::build(cfg, 2).unwrap();
        let data: Vec<Example> = (0..8)
            .map(|i| {
                let words: Vec<usize> = (0..3 + i % 3).map(|k| 4 + (i * 5 + k * 3) % 20).collect();
                let mut src = words.clone();
                src.push(EOS);
                let mut tgt: Vec<usize> = words.iter().rev().copied().collect();
                tgt.push(EOS);
                Example { src, tgt }
            })
            .collect();
        let mut t = Trainer::new(
            TrainConfig {
                batch_size: 8,
                adam: AdamConfig {
                    learning_rate: 3e-3,
                    ..AdamConfig::default()
                },
            },
            TrainMask::ALL,
        );
        let mut sampler = BatchSampler::new(data.len(), 0);
        let losses = t.run(&mut m, &data, 300, &mut sampler).unwrap();
        let refs: Vec<&Example> = data.iter().collect();
        let last = batch_loss(&m, &refs).unwrap();
        assert!(last < 0.1, "loss {last} (first {})", losses[0]);
    }
}
