//! Cross-silo federated rounds: local training, FedAvg over the shared
//! subset, broadcast and cost accounting.
//!
//! Every round is computed on copies of the client states and committed only
//! when all clients, the aggregation and the broadcast succeed.

mod ledger;
mod wire;

pub use ledger::{
    compute_cost_preset, cost_terms, CostLedger, CostPreset, CostTerm, LedgerRecord, LedgerTotals,
};
pub use wire::{encode_frame, parse_frame, Frame, FrameHeader, FRAME_PREFIX_LEN};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::train::{batch_loss, BatchSampler, Example, TrainConfig, Trainer};
use crate::model::{Model, Scope};
use crate::tensor::kernels::exact_sum;
use crate::tensor::{ParamSet, Tensor};

/// Seed of the batch sampler for data stream `stream` of a run seeded with
/// `seed`. Stream 0 is the one standalone training uses.
pub fn sampler_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub client_id: u32,
    pub name: String,
    pub model: Model,
    data: Vec<Example>,
    trainer: Trainer,
    sampler: BatchSampler,
}

impl ClientState {
    /// A client training `model` on `data` with the mask of the model's spec.
    pub fn new(client_id: u32, name: impl Into<String>, model: Model, data: Vec<Example>, train: TrainConfig, seed: u64) -> Result<Self> {
        let name = name.into();
        if data.is_empty() {
            return Err(Error::Config(format!("client {name} has no training data")));
        }
        let trainer = Trainer::new(train, model.spec().train_mask());
        let sampler = BatchSampler::new(data.len(), sampler_seed(seed, client_id as u64));
        Ok(Self {
            client_id,
            name,
            model,
            data,
            trainer,
            sampler,
        })
    }

    /// Number of local training pairs; the client's FedAvg weight.
    pub fn n_m(&self) -> u64 {
        self.data.len() as u64
    }

    pub fn local_steps_done(&self) -> u64 {
        self.trainer.steps_taken()
    }
}

/// Runs `steps` optimizer steps on the client's data and returns the mean
/// loss. With `steps == 0` nothing changes and the loss of one probe batch
/// is returned.
pub fn client_local_train(client: &mut ClientState, steps: usize) -> Result<f64> {
    if client.data.is_empty() {
        return Err(Error::Config(format!("client {} has no training data", client.name)));
    }
    if steps == 0 {
        let n = client.trainer.config.batch_size.min(client.data.len());
        let probe: Vec<&Example> = client.data[..n].iter().collect();
        return batch_loss(&client.model, &probe);
    }
    let losses = client
        .trainer
        .run(&mut client.model, &client.data, steps, &mut client.sampler)?;
    Ok(losses.iter().sum::<f64>() / steps as f64)
}

/// Data-size weighted mean of parameter subsets.
///
/// Every output element is the correctly rounded value of the exact
/// `Σ n_m · w_m / n`. The result therefore does not depend on submission
/// order, splitting a client into two with half the samples each changes
/// nothing, and identical submissions average to themselves bitwise.
pub fn fedavg_aggregate(submissions: &[(ParamSet, u64)]) -> Result<ParamSet> {
    let (first, _) = submissions
        .first()
        .ok_or_else(|| Error::Protocol("no submissions to aggregate".into()))?;
    let n: u64 = submissions.iter().map(|s| s.1).sum();
    if n == 0 {
        return Err(Error::Protocol("total sample count is zero".into()));
    }
    if n > 1 << 53 {
        return Err(Error::Protocol(format!("total sample count {n} is too large")));
    }
    for (m, (set, _)) in submissions.iter().enumerate() {
        if m > 0 {
            set.check_congruent(first)
                .map_err(|e| Error::Protocol(format!("submission {m}: {e}")))?;
        }
        if let Some(e) = set.iter().find(|e| !e.tensor.is_finite()) {
            return Err(Error::Protocol(format!("submission {m}: non-finite values in tensor {}", e.name)));
        }
        if let Some(e) = set.iter().find(|e| e.tensor.data().iter().any(|v| v.abs() > MAX_MAGNITUDE)) {
            return Err(Error::Protocol(format!(
                "submission {m}: tensor {} holds values beyond 2^960 that cannot be averaged exactly",
                e.name
            )));
        }
    }
    let counts: Vec<f64> = submissions.iter().map(|s| s.1 as f64).collect();
    let mut values = vec![0.0; submissions.len()];
    let mut mean = WeightedMean::default();
    let mut out = ParamSet::new();
    for (i, e) in first.iter().enumerate() {
        let mut data = vec![0.0; e.tensor.len()];
        for (j, slot) in data.iter_mut().enumerate() {
            for (v, (set, _)) in values.iter_mut().zip(submissions) {
                *v = set.at(i).tensor.data()[j];
            }
            *slot = mean.compute(&values, &counts, n as f64);
        }
        out.push(e.name.clone(), e.partition, Tensor::new(e.tensor.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

/// Largest accepted magnitude. With counts below 2^53 every product and
/// partial sum stays finite, so the error-free transformations are exact.
const MAX_MAGNITUDE: f64 = 9.74e288; // just under 2^960

/// Correctly rounded `Σ counts[m] · values[m] / n` for values up to
/// [`MAX_MAGNITUDE`] and integral counts below 2^53.
#[derive(Default)]
struct WeightedMean {
    terms: Vec<f64>,
    probe: Vec<f64>,
    scratch: Vec<f64>,
}

impl WeightedMean {
    fn compute(&mut self, values: &[f64], counts: &[f64], n: f64) -> f64 {
        if values.iter().all(|v| v.to_bits() == values[0].to_bits()) {
            return values[0];
        }
        // exact products: c·v == hi + lo
        self.terms.clear();
        for (&v, &c) in values.iter().zip(counts) {
            let hi = c * v;
            self.terms.push(hi);
            self.terms.push(c.mul_add(v, -hi));
        }
        let mut q = exact_sum(&self.terms, &mut self.scratch) / n;
        // q is within a couple of ulps; walk towards the exact quotient
        let dir = self.sign_of_remainder(&[q], 1.0, n);
        if dir == 0.0 {
            return q;
        }
        loop {
            let next = if dir > 0.0 { q.next_up() } else { q.next_down() };
            // the midpoint test 2S - n(q + next) avoids halving q
            let past = self.sign_of_remainder(&[q, next], 2.0, n);
            if past == 0.0 {
                // exact tie: round half to even
                return if next.to_bits() & 1 == 0 { next } else { q };
            }
            if past != dir {
                return q;
            }
            q = next;
        }
    }

    /// Sign of `scale · S - n · Σ c` where S is the exact weighted sum held
    /// in `terms` and `scale` is 1 or 2.
    fn sign_of_remainder(&mut self, candidates: &[f64], scale: f64, n: f64) -> f64 {
        self.probe.clear();
        self.probe.extend(self.terms.iter().map(|t| t * scale));
        for &c in candidates {
            let hi = c * n;
            self.probe.push(-hi);
            self.probe.push(-c.mul_add(n, -hi));
        }
        let r = exact_sum(&self.probe, &mut self.scratch);
        if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// Overwrites each client's shared tensors with the global subset.
pub fn broadcast(server: &ServerState, clients: &mut [ClientState]) -> Result<()> {
    for c in clients.iter() {
        if c.model.spec().fingerprint() != server.fingerprint {
            return Err(Error::Protocol(format!("client {} has a different controller spec", c.name)));
        }
    }
    for c in clients.iter_mut() {
        c.model.load_subset(&server.global)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ServerState {
    /// Only the shared subset; nothing else is ever held by the server.
    pub global: ParamSet,
    pub round: u32,
    pub fingerprint: [u8; 32],
    pub share_scope: Scope,
    pub share_embeddings: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub local_steps: usize,
    pub rounds: u32,
    /// Worker threads for client training; 0 means one per core.
    pub threads: usize,
    /// Exchange the embedding table as well when sharing all layers.
    pub share_embeddings: bool,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            local_steps: 40,
            rounds: 25,
            threads: 1,
            share_embeddings: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub client_losses: Vec<f64>,
    /// n_m / n for every client, in client order.
    pub weights: Vec<f64>,
    /// Test-set name and BLEU, filled in by the driver on eval rounds.
    pub eval: Option<Vec<(String, f64)>>,
    pub ledger: LedgerTotals,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Uplink,
    Downlink,
}

/// One encoded frame as it crossed the simulated wire.
#[derive(Clone, Debug)]
pub struct WireFrame {
    pub direction: Direction,
    pub bytes: Vec<u8>,
}

/// A server and its clients, run round by round.
pub struct Federation {
    server: ServerState,
    clients: Vec<ClientState>,
    ledger: CostLedger,
    config: RoundConfig,
    pool: rayon::ThreadPool,
    wire_log: Option<Vec<WireFrame>>,
}

impl Federation {
    /// Starts a federation whose global state is the shared subset of the
    /// first client's model. All clients must carry the same spec and
    /// congruent parameters.
    pub fn new(clients: Vec<ClientState>, config: RoundConfig) -> Result<Self> {
        let first = clients
            .first()
            .ok_or_else(|| Error::Config("a federation needs at least one client".into()))?;
        if config.local_steps == 0 {
            return Err(Error::Config("local_steps must be positive".into()));
        }
        let spec = first.model.spec().clone();
        for c in &clients[1..] {
            if c.model.spec() != &spec {
                return Err(Error::Config(format!("client {} has a different controller spec", c.name)));
            }
            c.model.params().check_congruent(first.model.params())?;
        }
        let share_embeddings = config.share_embeddings && spec.share_scope == Scope::All;
        let server = ServerState {
            global: first.model.partition_params(spec.share_scope, share_embeddings),
            round: 0,
            fingerprint: spec.fingerprint(),
            share_scope: spec.share_scope,
            share_embeddings,
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Self {
            server,
            clients,
            ledger: CostLedger::new(),
            config,
            pool,
            wire_log: None,
        })
    }

    /// Keeps the bytes of every frame of committed rounds until taken.
    pub fn capture_frames(&mut self, on: bool) {
        self.wire_log = on.then(Vec::new);
    }

    pub fn take_frames(&mut self) -> Vec<WireFrame> {
        self.wire_log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    pub fn config(&self) -> &RoundConfig {
        &self.config
    }

    pub fn into_clients(self) -> Vec<ClientState> {
        self.clients
    }

    /// Local training, uplink, FedAvg, downlink and ledger update for one
    /// round. On error nothing is changed.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let round = self.server.round + 1;
        let steps = self.config.local_steps;
        let mut next = self.clients.clone();
        let losses: Vec<f64> = self.pool.install(|| {
            next.par_iter_mut()
                .map(|c| client_local_train(c, steps))
                .collect::<Result<_>>()
        })?;

        let (scope, with_embed) = (self.server.share_scope, self.server.share_embeddings);
        let mut uplinks = Vec::with_capacity(next.len());
        let mut wire = Vec::new();
        let capture = self.wire_log.is_some();
        for c in &next {
            let header = FrameHeader {
                client_id: c.client_id,
                round,
                n_m: c.n_m(),
                fingerprint: c.model.spec().fingerprint(),
            };
            let bytes = encode_frame(&header, &c.model.partition_params(scope, with_embed));
            let frame = parse_frame(&bytes)?;
            if capture {
                wire.push(WireFrame {
                    direction: Direction::Uplink,
                    bytes,
                });
            }
            if frame.header.fingerprint != self.server.fingerprint || frame.header.round != round {
                return Err(Error::Protocol(format!("client {} sent a frame for another session or round", c.name)));
            }
            uplinks.push(frame);
        }
        let submissions: Vec<(ParamSet, u64)> = uplinks.iter().map(|f| (f.params.clone(), f.header.n_m)).collect();
        let global = fedavg_aggregate(&submissions)?;
        let n: u64 = submissions.iter().map(|s| s.1).sum();

        let mut records = Vec::with_capacity(next.len());
        for (c, up) in next.iter_mut().zip(&uplinks) {
            let header = FrameHeader {
                client_id: c.client_id,
                round,
                n_m: n,
                fingerprint: self.server.fingerprint,
            };
            let bytes = encode_frame(&header, &global);
            let down = parse_frame(&bytes)?;
            if capture {
                wire.push(WireFrame {
                    direction: Direction::Downlink,
                    bytes,
                });
            }
            if down.header.fingerprint != c.model.spec().fingerprint() {
                return Err(Error::Protocol(format!("broadcast spec mismatch at client {}", c.name)));
            }
            c.model.load_subset(&down.params)?;
            let mask = c.trainer.mask;
            let trained = c
                .model
                .params()
                .iter()
                .filter(|e| mask.contains(e.partition))
                .map(|e| e.tensor.len() as u64)
                .sum();
            records.push(LedgerRecord {
                round,
                client_id: c.client_id,
                uplink_params: up.params.count_params() as u64,
                downlink_params: down.params.count_params() as u64,
                trained_params: trained,
                uplink_bytes: up.bytes as u64,
                downlink_bytes: down.bytes as u64,
                header_bytes: (up.header_bytes + down.header_bytes) as u64,
            });
        }
        let mut ledger = self.ledger.clone();
        ledger.append_round(&records)?;

        self.clients = next;
        self.server.global = global;
        self.server.round = round;
        self.ledger = ledger;
        if let Some(log) = &mut self.wire_log {
            log.extend(wire);
        }
        Ok(RoundReport {
            round,
            client_losses: losses,
            weights: submissions.iter().map(|s| s.1 as f64 / n as f64).collect(),
            eval: None,
            ledger: self.ledger.totals(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ControllerMode, ControllerSpec, InitPolicy, ModelConfig};
    use crate::subword::EOS;
    use crate::tensor::Partition;

    fn scalar_set(v: f64) -> ParamSet {
        let mut s = ParamSet::new();
        s.push("w", Partition::Controller, Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn fedavg_small_cases() {
        let one = fedavg_aggregate(&[(scalar_set(0.1234567), 9)]).unwrap();
        assert_eq!(one.at(0).tensor.data()[0].to_bits(), 0.1234567f64.to_bits());
        let two = fedavg_aggregate(&[(scalar_set(0.0), 5), (scalar_set(4.0), 5)]).unwrap();
        assert_eq!(two.at(0).tensor.data()[0], 2.0);
        let three = fedavg_aggregate(&[(scalar_set(6.0), 1), (scalar_set(3.0), 2), (scalar_set(1.0), 3)]).unwrap();
        assert_eq!(three.at(0).tensor.data()[0], 2.5);
        let neg = fedavg_aggregate(&[(scalar_set(-0.0), 2), (scalar_set(-0.0), 3)]).unwrap();
        assert_eq!(neg.at(0).tensor.data()[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn fedavg_rejects_unaveragable_magnitudes() {
        let err = fedavg_aggregate(&[(scalar_set(1e300), 3), (scalar_set(1.0), 1)]).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{err}");
        let big = fedavg_aggregate(&[(scalar_set(9e288), 1 << 40), (scalar_set(-9e288), 3)]).unwrap();
        assert!(big.at(0).tensor.is_finite());
    }

    #[test]
    fn fedavg_rounds_subnormal_midpoints_exactly() {
        // exact means 1.5 and 2.5 ulps of the smallest subnormal: ties to even
        let tiny = |k: u64| scalar_set(f64::from_bits(k));
        let a = fedavg_aggregate(&[(tiny(1), 1), (tiny(2), 1)]).unwrap();
        assert_eq!(a.at(0).tensor.data()[0].to_bits(), 2);
        let b = fedavg_aggregate(&[(tiny(2), 1), (tiny(3), 1)]).unwrap();
        assert_eq!(b.at(0).tensor.data()[0].to_bits(), 2);
        let c = fedavg_aggregate(&[(tiny(3), 1), (tiny(0), 2)]).unwrap();
        assert_eq!(c.at(0).tensor.data()[0].to_bits(), 1);
    }

    #[test]
    fn fedavg_protocol_errors() {
        assert!(matches!(fedavg_aggregate(&[]), Err(Error::Protocol(_))));
        assert!(matches!(fedavg_aggregate(&[(scalar_set(1.0), 0)]), Err(Error::Protocol(_))));
        let mut other = ParamSet::new();
        other.push("v", Partition::Controller, Tensor::scalar(1.0)).unwrap();
        match fedavg_aggregate(&[(scalar_set(1.0), 1), (other, 1)]) {
            Err(Error::Protocol(m)) => assert!(m.contains("submission 1"), "{m}"),
            r => panic!("{r:?}"),
        }
        let mut shaped = ParamSet::new();
        shaped.push("w", Partition::Controller, Tensor::zeros(&[2])).unwrap();
        assert!(matches!(fedavg_aggregate(&[(scalar_set(1.0), 1), (shaped, 1)]), Err(Error::Protocol(_))));
    }

    fn tiny_clients(n: usize, spec: &ControllerSpec, steps_seed: u64) -> Vec<ClientState> {
        let cfg = ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            vocab_size: 16,
            max_seq_len: 8,
        };
        let base = Model::build(cfg, 4).unwrap();
        let model = base.apply_controllers(spec, InitPolicy::default(), 5).unwrap();
        (0..n)
            .map(|m| {
                let data = (0..6 + m)
                    .map(|i| Example {
                        src: vec![4 + (i + m) % 10, 5 + i % 9, EOS],
                        tgt: vec![6 + (i * m) % 9, EOS],
                    })
                    .collect();
                let train = TrainConfig {
                    batch_size: 4,
                    ..TrainConfig::default()
                };
                ClientState::new(m as u32, format!("c{m}"), model.clone(), data, train, steps_seed).unwrap()
            })
            .collect()
    }

    fn cc_spec() -> ControllerSpec {
        ControllerSpec::new(ControllerMode::Insert, vec![1], vec![2], Scope::Controllers, Scope::Controllers)
    }

    fn ca_spec() -> ControllerSpec {
        ControllerSpec::new(ControllerMode::Insert, vec![1], vec![2], Scope::Controllers, Scope::All)
    }

    #[test]
    fn controller_scope_keeps_base_private_and_counts_exactly() {
        let clients = tiny_clients(3, &ca_spec(), 1);
        let mut fed = Federation::new(clients, RoundConfig { local_steps: 2, rounds: 2, ..Default::default() }).unwrap();
        let subset = fed.clients()[0].model.partition_params(Scope::Controllers, false).count_params() as u64;
        assert!(fed.server().global.iter().all(|e| e.partition == Partition::Controller));
        for _ in 0..2 {
            let r = fed.run_round().unwrap();
            assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let t = fed.ledger().totals();
        assert_eq!(t.uplink_params, 2 * 3 * subset);
        assert_eq!(t.downlink_params, 2 * 3 * subset);
        assert_eq!(fed.ledger().c_cost(), Some(subset));
        let all = fed.clients()[0].model.params().count_params() as u64;
        assert_eq!(fed.ledger().t_cost(), Some(all));
        let c = fed.clients();
        for name in ["enc.0.ffn.w1", "dec.0.self_attn.wq"] {
            assert!(!c[0].model.params().get(name).unwrap().tensor.bits_eq(&c[1].model.params().get(name).unwrap().tensor));
        }
        let shared: Vec<&str> = fed.server().global.names().collect();
        for cl in c {
            for name in &shared {
                assert!(cl.model.params().get(name).unwrap().tensor.bits_eq(&fed.server().global.get(name).unwrap().tensor));
            }
        }
    }

    #[test]
    fn broadcast_is_idempotent_and_a_fixed_point() {
        let mut fed = Federation::new(tiny_clients(2, &cc_spec(), 2), RoundConfig { local_steps: 1, rounds: 1, ..Default::default() }).unwrap();
        fed.run_round().unwrap();
        let server = fed.server().clone();
        let mut clients = fed.into_clients();
        let before: Vec<String> = clients.iter().map(|c| c.model.params().checksum()).collect();
        broadcast(&server, &mut clients).unwrap();
        let after: Vec<String> = clients.iter().map(|c| c.model.params().checksum()).collect();
        assert_eq!(before, after);
        let subs: Vec<(ParamSet, u64)> = clients
            .iter()
            .map(|c| (c.model.partition_params(Scope::Controllers, false), c.n_m()))
            .collect();
        assert_eq!(fedavg_aggregate(&subs).unwrap().checksum(), server.global.checksum());
    }

    #[test]
    fn failed_round_rolls_back() {
        let mut clients = tiny_clients(2, &cc_spec(), 3);
        clients[1].data[0].src = vec![99, EOS];
        let mut fed = Federation::new(clients, RoundConfig { local_steps: 3, rounds: 1, ..Default::default() }).unwrap();
        let before: Vec<String> = fed.clients().iter().map(|c| c.model.params().checksum()).collect();
        let global = fed.server().global.checksum();
        assert!(fed.run_round().is_err());
        let after: Vec<String> = fed.clients().iter().map(|c| c.model.params().checksum()).collect();
        assert_eq!(before, after);
        assert_eq!(fed.server().global.checksum(), global);
        assert_eq!(fed.server().round, 0);
        assert!(fed.ledger().records().is_empty());
        assert_eq!(fed.clients()[0].local_steps_done(), 0);
    }

    #[test]
    fn captured_frames_match_the_ledger() {
        let mut clients = tiny_clients(2, &cc_spec(), 6);
        clients[1].data[0].src = vec![99, EOS];
        let mut fed = Federation::new(clients.clone(), RoundConfig { local_steps: 2, rounds: 1, ..Default::default() }).unwrap();
        fed.capture_frames(true);
        assert!(fed.run_round().is_err());
        assert!(fed.take_frames().is_empty());

        let mut fed = Federation::new(tiny_clients(2, &cc_spec(), 6), RoundConfig { local_steps: 2, rounds: 1, ..Default::default() }).unwrap();
        fed.capture_frames(true);
        fed.run_round().unwrap();
        let frames = fed.take_frames();
        assert_eq!(frames.len(), 4);
        let bytes: u64 = frames.iter().map(|f| f.bytes.len() as u64).sum();
        let t = fed.ledger().totals();
        assert_eq!(bytes, t.uplink_bytes + t.downlink_bytes);
        let up = frames.iter().filter(|f| f.direction == Direction::Uplink).count();
        assert_eq!(up, 2);
        assert!(fed.take_frames().is_empty());
    }

    #[test]
    fn zero_steps_reports_probe_loss_without_changes() {
        let mut c = tiny_clients(1, &cc_spec(), 4).remove(0);
        let sum = c.model.params().checksum();
        let loss = client_local_train(&mut c, 0).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(c.model.params().checksum(), sum);
    }

    #[test]
    fn empty_client_is_a_config_error() {
        let c = &tiny_clients(1, &cc_spec(), 0)[0];
        let r = ClientState::new(9, "empty", c.model.clone(), vec![], TrainConfig::default(), 0);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn spec_mismatch_is_rejected() {
        let mut a = tiny_clients(2, &cc_spec(), 0);
        let other = ControllerSpec::new(ControllerMode::Insert, vec![1], vec![1], Scope::Controllers, Scope::Controllers);
        let b = tiny_clients(1, &other, 0).remove(0);
        let server = Federation::new(a.clone(), RoundConfig::default()).unwrap().server().clone();
        a.push(b);
        assert!(Federation::new(a.clone(), RoundConfig::default()).is_err());
        assert!(matches!(broadcast(&server, &mut a), Err(Error::Protocol(_))));
    }
}
