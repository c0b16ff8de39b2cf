//! Encoder-decoder Transformer whose layers can be inserted or designated as
//! controllers.
//!
//! Parameters live in one flat [`ParamSet`] ordered as: embedding table,
//! encoder layers, encoder final norm, decoder layers, decoder final norm.
//! Layer tensors are named `enc.{i}.*` / `dec.{i}.*` by their index in the
//! current stack. Source and target share the embedding table, which is also
//! tied to the output projection.
//!
//! Layers use pre-norm residual blocks, so a layer whose sublayer outputs
//! are near zero passes its input through almost unchanged.

mod checkpoint;
mod config;
mod controller;
mod decode;
mod forward;
pub mod train;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader};
pub use config::ModelConfig;
pub use controller::{ControllerMode, ControllerSpec, InitPolicy, Scope};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Partition, Tensor, TrainMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Encoder,
    Decoder,
}

pub(crate) const ENCODER_TENSORS: [&str; 16] = [
    "ln1.gain",
    "ln1.bias",
    "self_attn.wq",
    "self_attn.bq",
    "self_attn.wk",
    "self_attn.bk",
    "self_attn.wv",
    "self_attn.bv",
    "self_attn.wo",
    "self_attn.bo",
    "ln2.gain",
    "ln2.bias",
    "ffn.w1",
    "ffn.b1",
    "ffn.w2",
    "ffn.b2",
];

pub(crate) const DECODER_TENSORS: [&str; 26] = [
    "ln1.gain",
    "ln1.bias",
    "self_attn.wq",
    "self_attn.bq",
    "self_attn.wk",
    "self_attn.bk",
    "self_attn.wv",
    "self_attn.bv",
    "self_attn.wo",
    "self_attn.bo",
    "ln2.gain",
    "ln2.bias",
    "cross_attn.wq",
    "cross_attn.bq",
    "cross_attn.wk",
    "cross_attn.bk",
    "cross_attn.wv",
    "cross_attn.bv",
    "cross_attn.wo",
    "cross_attn.bo",
    "ln3.gain",
    "ln3.bias",
    "ffn.w1",
    "ffn.b1",
    "ffn.w2",
    "ffn.b2",
];

impl LayerKind {
    pub(crate) fn tensor_names(self) -> &'static [&'static str] {
        match self {
            LayerKind::Encoder => &ENCODER_TENSORS,
            LayerKind::Decoder => &DECODER_TENSORS,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            LayerKind::Encoder => "enc",
            LayerKind::Decoder => "dec",
        }
    }

    /// Shape of every tensor in a layer of this kind, in storage order.
    pub fn tensor_shapes(self, cfg: &ModelConfig) -> Vec<Vec<usize>> {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        self.tensor_names()
            .iter()
            .map(|name| match *name {
                "ffn.w1" => vec![d, f],
                "ffn.b1" => vec![f],
                "ffn.w2" => vec![f, d],
                n if n.ends_with(".wq") || n.ends_with(".wk") || n.ends_with(".wv") || n.ends_with(".wo") => {
                    vec![d, d]
                }
                _ => vec![d],
            })
            .collect()
    }
}

/// Tensors of one layer in storage order, plus its controller flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub tensors: Vec<Tensor>,
    pub controller: bool,
}

impl Layer {
    fn init(kind: LayerKind, cfg: &ModelConfig, rng: &mut ChaCha8Rng, policy: InitPolicy) -> Self {
        let output_scale = match policy {
            InitPolicy::NearIdentity { scale } => scale,
            InitPolicy::Fresh => 1.0,
        };
        let tensors = kind
            .tensor_names()
            .iter()
            .zip(kind.tensor_shapes(cfg))
            .map(|(name, shape)| {
                if name.ends_with(".gain") {
                    Tensor::filled(&shape, 1.0)
                } else if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else {
                    let mut t = Tensor::xavier_uniform(shape[0], shape[1], rng);
                    if name.ends_with(".wo") || *name == "ffn.w2" {
                        t.data_mut().iter_mut().for_each(|x| *x *= output_scale);
                    }
                    t
                }
            })
            .collect();
        Layer {
            kind,
            tensors,
            controller: false,
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerSlot {
    first: usize,
    controller: bool,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
    enc: Vec<LayerSlot>,
    dec: Vec<LayerSlot>,
    enc_norm: usize,
    dec_norm: usize,
    spec: ControllerSpec,
    positional: Vec<f64>,
    warnings: Vec<String>,
}

/// Sinusoidal position table of `max_len × d` values.
fn positional_table(max_len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

impl Model {
    /// Deterministically initialized model with no controllers.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let embed = Tensor::xavier_uniform(config.vocab_size, d, &mut rng);
        let enc = (0..config.enc_layers)
            .map(|_| Layer::init(LayerKind::Encoder, &config, &mut rng, InitPolicy::Fresh))
            .collect();
        let dec = (0..config.dec_layers)
            .map(|_| Layer::init(LayerKind::Decoder, &config, &mut rng, InitPolicy::Fresh))
            .collect();
        let norm = || [Tensor::filled(&[d], 1.0), Tensor::zeros(&[d])];
        Self::assemble(config, ControllerSpec::none(), embed, enc, norm(), dec, norm(), Vec::new())
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: ModelConfig,
        spec: ControllerSpec,
        embed: Tensor,
        enc: Vec<Layer>,
        enc_norm: [Tensor; 2],
        dec: Vec<Layer>,
        dec_norm: [Tensor; 2],
        warnings: Vec<String>,
    ) -> Result<Self> {
        let mut params = ParamSet::new();
        params.push("embed", Partition::Embedding, embed)?;
        let push_stack = |params: &mut ParamSet, layers: Vec<Layer>, kind: LayerKind| -> Result<Vec<LayerSlot>> {
            let mut slots = Vec::with_capacity(layers.len());
            for (i, layer) in layers.into_iter().enumerate() {
                if layer.kind != kind || layer.tensors.len() != kind.tensor_names().len() {
                    return Err(Error::Contract(format!("malformed {} layer {i}", kind.prefix())));
                }
                let partition = if layer.controller {
                    Partition::Controller
                } else {
                    Partition::Base
                };
                slots.push(LayerSlot {
                    first: params.len(),
                    controller: layer.controller,
                });
                for (name, t) in kind.tensor_names().iter().zip(layer.tensors) {
                    params.push(format!("{}.{i}.{name}", kind.prefix()), partition, t)?;
                }
            }
            Ok(slots)
        };
        let enc_slots = push_stack(&mut params, enc, LayerKind::Encoder)?;
        let enc_norm_idx = params.len();
        let [g, b] = enc_norm;
        params.push("enc.norm.gain", Partition::Base, g)?;
        params.push("enc.norm.bias", Partition::Base, b)?;
        let dec_slots = push_stack(&mut params, dec, LayerKind::Decoder)?;
        let dec_norm_idx = params.len();
        let [g, b] = dec_norm;
        params.push("dec.norm.gain", Partition::Base, g)?;
        params.push("dec.norm.bias", Partition::Base, b)?;
        Ok(Self {
            positional: positional_table(config.max_seq_len, config.d_model),
            config,
            params,
            enc: enc_slots,
            dec: dec_slots,
            enc_norm: enc_norm_idx,
            dec_norm: dec_norm_idx,
            spec,
            warnings,
        })
    }

    /// Splits the model back into owned layers.
    fn disassemble(&self) -> (Tensor, Vec<Layer>, [Tensor; 2], Vec<Layer>, [Tensor; 2]) {
        let t = |i: usize| {
            let mut t = self.params.at(i).tensor.clone();
            t.clear_grad();
            t
        };
        let layers = |slots: &[LayerSlot], kind: LayerKind| {
            slots
                .iter()
                .map(|s| Layer {
                    kind,
                    tensors: (0..kind.tensor_names().len()).map(|k| t(s.first + k)).collect(),
                    controller: s.controller,
                })
                .collect::<Vec<_>>()
        };
        (
            t(0),
            layers(&self.enc, LayerKind::Encoder),
            [t(self.enc_norm), t(self.enc_norm + 1)],
            layers(&self.dec, LayerKind::Decoder),
            [t(self.dec_norm), t(self.dec_norm + 1)],
        )
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn spec(&self) -> &ControllerSpec {
        &self.spec
    }

    pub fn enc_depth(&self) -> usize {
        self.enc.len()
    }

    pub fn dec_depth(&self) -> usize {
        self.dec.len()
    }

    pub fn enc_controller_flags(&self) -> Vec<bool> {
        self.enc.iter().map(|s| s.controller).collect()
    }

    pub fn dec_controller_flags(&self) -> Vec<bool> {
        self.dec.iter().map(|s| s.controller).collect()
    }

    /// Warnings recorded while configuring controllers.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Owned copy of one layer's tensors.
    pub fn layer(&self, kind: LayerKind, index: usize) -> Option<Layer> {
        let slot = match kind {
            LayerKind::Encoder => self.enc.get(index)?,
            LayerKind::Decoder => self.dec.get(index)?,
        };
        Some(Layer {
            kind,
            tensors: (0..kind.tensor_names().len())
                .map(|k| self.params.at(slot.first + k).tensor.clone())
                .collect(),
            controller: slot.controller,
        })
    }

    /// Creates controller layers at the spec's final-stack indices.
    pub fn insert_controllers(&self, spec: &ControllerSpec, init: InitPolicy, seed: u64) -> Result<Model> {
        if spec.mode != ControllerMode::Insert {
            return Err(Error::Config("insert_controllers needs an Insert-mode spec".into()));
        }
        let enc_final = self.enc.len() + spec.enc_positions.len();
        let dec_final = self.dec.len() + spec.dec_positions.len();
        spec.validate(enc_final, dec_final)?;

        let mut warnings = self.warnings.clone();
        for (stack, positions) in [("encoder", &spec.enc_positions), ("decoder", &spec.dec_positions)] {
            if positions.contains(&0) {
                let msg = format!(
                    "controller placed as the first {stack} layer (final index 0); \
                     client models configured this way may never converge"
                );
                warn!("{msg}");
                warnings.push(msg);
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (embed, enc, enc_norm, dec, dec_norm) = self.disassemble();
        let mut splice = |existing: Vec<Layer>, positions: &[usize], final_len: usize, kind: LayerKind| {
            let mut existing = existing.into_iter();
            (0..final_len)
                .map(|i| {
                    if positions.contains(&i) {
                        let mut l = Layer::init(kind, &self.config, &mut rng, init);
                        l.controller = true;
                        l
                    } else {
                        existing.next().expect("stack length accounted for")
                    }
                })
                .collect::<Vec<_>>()
        };
        let enc = splice(enc, &spec.enc_positions, enc_final, LayerKind::Encoder);
        let dec = splice(dec, &spec.dec_positions, dec_final, LayerKind::Decoder);
        Self::assemble(self.config, spec.clone(), embed, enc, enc_norm, dec, dec_norm, warnings)
    }

    /// Re-tags existing layers as controllers; no weight changes.
    pub fn designate_controllers(&self, spec: &ControllerSpec) -> Result<Model> {
        if spec.mode != ControllerMode::Designate {
            return Err(Error::Config("designate_controllers needs a Designate-mode spec".into()));
        }
        spec.validate(self.enc.len(), self.dec.len())?;
        self.with_flags(spec, true)
    }

    /// Reverts a designation: the named layers become base layers again.
    pub fn undesignate_controllers(&self, spec: &ControllerSpec) -> Result<Model> {
        spec.validate(self.enc.len(), self.dec.len())?;
        let mut m = self.with_flags(spec, false)?;
        m.spec = ControllerSpec::none();
        Ok(m)
    }

    fn with_flags(&self, spec: &ControllerSpec, flag: bool) -> Result<Model> {
        let mut m = self.clone();
        for (slots, positions) in [(&mut m.enc, &spec.enc_positions), (&mut m.dec, &spec.dec_positions)] {
            for &p in positions {
                slots[p].controller = flag;
            }
        }
        m.retag();
        m.spec = spec.clone();
        Ok(m)
    }

    /// Sets every layer tensor's partition from its layer's controller flag.
    fn retag(&mut self) {
        for (slots, kind) in [(&self.enc, LayerKind::Encoder), (&self.dec, LayerKind::Decoder)] {
            for s in slots {
                let partition = if s.controller {
                    Partition::Controller
                } else {
                    Partition::Base
                };
                for k in 0..kind.tensor_names().len() {
                    self.params.at_mut(s.first + k).partition = partition;
                }
            }
        }
    }

    /// Applies a spec in whichever mode it names.
    pub fn apply_controllers(&self, spec: &ControllerSpec, init: InitPolicy, seed: u64) -> Result<Model> {
        match spec.mode {
            ControllerMode::Insert => self.insert_controllers(spec, init, seed),
            ControllerMode::Designate => self.designate_controllers(spec),
        }
    }

    /// Subset of parameters selected by scope.
    ///
    /// `All` gives base and controller tensors, `Controllers` only controller
    /// tensors; embeddings are added only when `include_embeddings` is set.
    pub fn partition_params(&self, scope: Scope, include_embeddings: bool) -> ParamSet {
        self.params.filter(|e| match e.partition {
            Partition::Embedding => include_embeddings,
            Partition::Controller => true,
            Partition::Base => scope == Scope::All,
        })
    }

    /// Overwrites the named tensors with values from `subset`.
    pub fn load_subset(&mut self, subset: &ParamSet) -> Result<()> {
        for e in subset {
            let idx = self
                .params
                .index_of(&e.name)
                .ok_or_else(|| Error::Protocol(format!("unknown tensor {}", e.name)))?;
            let target = self.params.at_mut(idx);
            if target.tensor.shape() != e.tensor.shape() {
                return Err(Error::Protocol(format!(
                    "shape mismatch on tensor {}: {:?} vs {:?}",
                    e.name,
                    target.tensor.shape(),
                    e.tensor.shape()
                )));
            }
            if target.partition != e.partition {
                return Err(Error::Protocol(format!(
                    "partition mismatch on tensor {}: {} vs {}",
                    e.name, target.partition, e.partition
                )));
            }
            target.tensor.data_mut().copy_from_slice(e.tensor.data());
        }
        Ok(())
    }

    /// Marks tensors in `mask` as requiring gradients and clears the rest.
    pub fn set_trainable(&mut self, mask: TrainMask) {
        for e in self.params.iter_mut() {
            e.tensor.set_requires_grad(mask.contains(e.partition));
        }
    }
}

/// Exact number of scalar parameters in a subset.
pub fn count_params(subset: &ParamSet) -> usize {
    subset.count_params()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 16,
            heads: 2,
            d_ff: 32,
            vocab_size: 64,
            max_seq_len: 16,
        }
    }

    /// Independent listing of every tensor's element count.
    fn enumerate_sizes(cfg: &ModelConfig, enc: usize, dec: usize) -> usize {
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let attn = [d * d, d, d * d, d, d * d, d, d * d, d];
        let ln = [d, d];
        let ffn = [d * f, f, f * d, d];
        let enc_layer: usize = ln.iter().chain(&attn).chain(&ln).chain(&ffn).sum();
        let dec_layer: usize = ln.iter().chain(&attn).chain(&ln).chain(&attn).chain(&ln).chain(&ffn).sum();
        v * d + enc * enc_layer + dec * dec_layer + 2 * ln.iter().sum::<usize>()
    }

    #[test]
    fn parameter_count_matches_enumeration() {
        let cfg = tiny();
        let m = Model::build(cfg, 1).unwrap();
        assert_eq!(count_params(m.params()), enumerate_sizes(&cfg, 2, 2));
        assert_eq!(cfg.total_params(2, 2), enumerate_sizes(&cfg, 2, 2));
        assert_eq!(count_params(&ParamSet::new()), 0);
    }

    #[test]
    fn build_is_deterministic_and_controller_free() {
        let a = Model::build(tiny(), 7).unwrap();
        let b = Model::build(tiny(), 7).unwrap();
        let c = Model::build(tiny(), 8).unwrap();
        assert_eq!(a.params().checksum(), b.params().checksum());
        assert_ne!(a.params().checksum(), c.params().checksum());
        assert!(a.params().iter().all(|e| e.partition != Partition::Controller));
        assert!(a.partition_params(Scope::Controllers, false).is_empty());
    }

    #[test]
    fn invalid_dims_rejected() {
        let mut cfg = tiny();
        cfg.heads = 3;
        assert!(matches!(Model::build(cfg, 0), Err(Error::Config(_))));
    }

    fn insert_spec(enc: Vec<usize>, dec: Vec<usize>) -> ControllerSpec {
        ControllerSpec::new(ControllerMode::Insert, enc, dec, Scope::Controllers, Scope::Controllers)
    }

    #[test]
    fn insertion_builds_final_stack() {
        let mut cfg = tiny();
        cfg.enc_layers = 6;
        cfg.dec_layers = 6;
        let base = Model::build(cfg, 3).unwrap();
        let m = base
            .insert_controllers(&insert_spec(vec![2, 6], vec![2, 6]), InitPolicy::default(), 9)
            .unwrap();
        assert_eq!(m.enc_depth(), 8);
        assert_eq!(
            m.enc_controller_flags(),
            [false, false, true, false, false, false, true, false]
        );
        // Old layer i lands at the i-th non-controller slot, bitwise.
        let old_at = [0, 1, 3, 4, 5, 7];
        for (old, &new) in old_at.iter().enumerate() {
            let a = base.layer(LayerKind::Encoder, old).unwrap();
            let b = m.layer(LayerKind::Decoder, new).unwrap();
            let b_enc = m.layer(LayerKind::Encoder, new).unwrap();
            assert!(a.tensors.iter().zip(&b_enc.tensors).all(|(x, y)| x.bits_eq(y)));
            let a_dec = base.layer(LayerKind::Decoder, old).unwrap();
            assert!(a_dec.tensors.iter().zip(&b.tensors).all(|(x, y)| x.bits_eq(y)));
        }
        assert!(base.params().get("embed").unwrap().tensor.bits_eq(&m.params().get("embed").unwrap().tensor));
        assert!(m.warnings().is_empty());
    }

    #[test]
    fn controller_shapes_match_base_layers() {
        let base = Model::build(tiny(), 3).unwrap();
        let m = base
            .insert_controllers(&insert_spec(vec![1], vec![2]), InitPolicy::default(), 1)
            .unwrap();
        for kind in [LayerKind::Encoder, LayerKind::Decoder] {
            let depth = if kind == LayerKind::Encoder { m.enc_depth() } else { m.dec_depth() };
            let shapes: Vec<Vec<Vec<usize>>> = (0..depth)
                .map(|i| m.layer(kind, i).unwrap().tensors.iter().map(|t| t.shape().to_vec()).collect())
                .collect();
            assert!(shapes.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn insertion_errors_and_first_layer_warning() {
        let base = Model::build(tiny(), 3).unwrap();
        assert!(base
            .insert_controllers(&insert_spec(vec![1, 1], vec![1]), InitPolicy::default(), 1)
            .is_err());
        assert!(base
            .insert_controllers(&insert_spec(vec![3], vec![1]), InitPolicy::default(), 1)
            .is_err());
        let m = base
            .insert_controllers(&insert_spec(vec![0], vec![1]), InitPolicy::default(), 1)
            .unwrap();
        assert_eq!(m.warnings().len(), 1);
        assert!(m.warnings()[0].contains("never converge"));
    }

    #[test]
    fn designation_flips_tags_only() {
        let mut cfg = tiny();
        cfg.enc_layers = 6;
        cfg.dec_layers = 6;
        let base = Model::build(cfg, 5).unwrap();
        let spec = ControllerSpec::new(ControllerMode::Designate, vec![0, 3], vec![0, 3], Scope::Controllers, Scope::Controllers);
        let m = base.designate_controllers(&spec).unwrap();
        assert_eq!(m.params().checksum(), base.params().checksum());
        let ctrl = m.partition_params(Scope::Controllers, false);
        assert_eq!(ctrl.count_params(), 2 * cfg.encoder_layer_params() + 2 * cfg.decoder_layer_params());
        assert!(ctrl.names().all(|n| n.starts_with("enc.0.") || n.starts_with("enc.3.") || n.starts_with("dec.0.") || n.starts_with("dec.3.")));

        let back = m.undesignate_controllers(&spec).unwrap();
        let tags = |m: &Model| m.params().iter().map(|e| e.partition).collect::<Vec<_>>();
        assert_eq!(tags(&back), tags(&base));

        let out_of_range = ControllerSpec::new(ControllerMode::Designate, vec![6], vec![0], Scope::Controllers, Scope::Controllers);
        assert!(base.designate_controllers(&out_of_range).is_err());
    }

    #[test]
    fn designating_everything_saturates() {
        let base = Model::build(tiny(), 5).unwrap();
        let spec = ControllerSpec::new(ControllerMode::Designate, vec![0, 1], vec![0, 1], Scope::Controllers, Scope::Controllers);
        let m = base.designate_controllers(&spec).unwrap();
        let layers_only: usize = m
            .params()
            .iter()
            .filter(|e| e.partition != Partition::Embedding && !e.name.contains(".norm."))
            .map(|e| e.tensor.len())
            .sum();
        assert_eq!(m.partition_params(Scope::Controllers, false).count_params(), layers_only);
    }

    #[test]
    fn partition_set_algebra() {
        let base = Model::build(tiny(), 5).unwrap();
        let m = base
            .insert_controllers(&insert_spec(vec![1], vec![0]), InitPolicy::default(), 2)
            .unwrap();
        for emb in [false, true] {
            let all = m.partition_params(Scope::All, emb);
            let ctrl = m.partition_params(Scope::Controllers, false);
            let rest: Vec<&str> = all.names().filter(|n| ctrl.get(n).is_none()).collect();
            let expected: Vec<&str> = m
                .params()
                .iter()
                .filter(|e| e.partition == Partition::Base || (emb && e.partition == Partition::Embedding))
                .map(|e| e.name.as_str())
                .collect();
            assert_eq!(rest, expected);
            assert_eq!(all.count_params(), ctrl.count_params() + expected.iter().map(|n| m.params().get(n).unwrap().tensor.len()).sum::<usize>());
        }
    }

    #[test]
    fn two_plus_two_controllers_are_four_layer_groups() {
        let mut cfg = tiny();
        cfg.enc_layers = 6;
        cfg.dec_layers = 6;
        let m = Model::build(cfg, 1)
            .unwrap()
            .insert_controllers(&insert_spec(vec![2, 6], vec![2, 6]), InitPolicy::default(), 1)
            .unwrap();
        let ctrl = m.partition_params(Scope::Controllers, false);
        let mut groups: Vec<String> = ctrl
            .names()
            .map(|n| n.splitn(3, '.').take(2).collect::<Vec<_>>().join("."))
            .collect();
        groups.dedup();
        assert_eq!(groups, ["enc.2", "enc.6", "dec.2", "dec.6"]);
        assert_eq!(ctrl.count_params(), 2 * cfg.encoder_layer_params() + 2 * cfg.decoder_layer_params());
    }

    #[test]
    fn load_subset_rejects_foreign_tensors() {
        let mut m = Model::build(tiny(), 1).unwrap();
        let mut bogus = ParamSet::new();
        bogus.push("nope", Partition::Base, Tensor::zeros(&[1])).unwrap();
        assert!(matches!(m.load_subset(&bogus), Err(Error::Protocol(_))));
        let mut wrong_shape = ParamSet::new();
        wrong_shape.push("enc.norm.gain", Partition::Base, Tensor::zeros(&[3])).unwrap();
        assert!(matches!(m.load_subset(&wrong_shape), Err(Error::Protocol(_))));
    }
}
