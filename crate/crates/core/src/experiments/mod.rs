//! Baselines and federated sessions over a set of domains.
//!
//! Every run is driven by an [`ExperimentPlan`]. Step budgets split into a
//! pretraining part and a fine-tuning part:
//!
//! - standalone and pooled models train from scratch for the whole budget;
//! - the base model trains on the first domain for the pretraining steps;
//! - chained training continues the base model through the remaining
//!   domains, splitting the fine-tuning steps evenly;
//! - federated sessions start every client from the base model and run
//!   `rounds × local_steps` fine-tuning steps.

mod label;

use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

pub use label::{parse_config_label, ConfigLabel};

use crate::data::{encode_pairs, DomainCorpus};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_model, BleuConfig, MatrixRow, TestSet};
use crate::federation::{
    cost_terms, sampler_seed, ClientState, CostLedger, CostPreset, Federation, RoundConfig, RoundReport,
};
use crate::model::train::{BatchSampler, Example, TrainConfig, Trainer};
use crate::model::{InitPolicy, Model, ModelConfig};
use crate::subword::BpeVocab;
use crate::tensor::{AdamConfig, TrainMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Standalone,
    PooledFineTune,
    Chained,
    Federated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budgets {
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
}

impl Budgets {
    /// 2,000 pretraining plus 1,000 fine-tuning steps.
    pub const DESK: Budgets = Budgets {
        pretrain_steps: 2000,
        finetune_steps: 1000,
    };

    pub fn total(&self) -> usize {
        self.pretrain_steps + self.finetune_steps
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    /// Parameter initialization of fresh models.
    pub model: u64,
    /// Batch order and controller initialization.
    pub training: u64,
}

/// Model shape without the vocabulary size, which comes from the tokenizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Dims {
    pub fn desk() -> Self {
        Self::from_config(&ModelConfig::desk(0))
    }

    pub fn from_config(c: &ModelConfig) -> Self {
        Self {
            enc_layers: c.enc_layers,
            dec_layers: c.dec_layers,
            d_model: c.d_model,
            heads: c.heads,
            d_ff: c.d_ff,
            max_seq_len: c.max_seq_len,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            vocab_size,
            max_seq_len: self.max_seq_len,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Optimization {
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for Optimization {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: AdamConfig::default().learning_rate,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlSettings {
    pub local_steps: usize,
    /// Evaluate client models every this many rounds; 0 disables.
    pub eval_every: u32,
    pub threads: usize,
    pub share_embeddings: bool,
}

impl Default for FlSettings {
    fn default() -> Self {
        Self {
            local_steps: 40,
            eval_every: 5,
            threads: 1,
            share_embeddings: false,
        }
    }
}

/// What to run, on which domains, with which budgets and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub mode: Mode,
    /// Domain names; the first is the base domain and the order is the
    /// client and chain order.
    pub domains: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub seeds: Seeds,
    pub budgets: Budgets,
    pub dims: Dims,
    #[serde(default)]
    pub optimization: Optimization,
    #[serde(default)]
    pub federation: FlSettings,
    #[serde(default)]
    pub bleu: BleuConfig,
}

impl ExperimentPlan {
    /// Desk-scale defaults for `mode` over `domains`.
    pub fn desk(mode: Mode, domains: Vec<String>) -> Self {
        Self {
            mode,
            domains,
            label: None,
            seeds: Seeds { model: 1, training: 2 },
            budgets: Budgets::DESK,
            dims: Dims::desk(),
            // the desk model does not converge reliably within the
            // pretraining budget at the optimizer's default rate
            optimization: Optimization {
                learning_rate: 1e-3,
                ..Optimization::default()
            },
            federation: FlSettings::default(),
            bleu: BleuConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let plan: Self = toml::from_str(text).map_err(|e| Error::format("experiment plan", e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Config("plan lists no domains".into()));
        }
        if self.optimization.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.dims.model_config(1).validate()?;
        match self.mode {
            Mode::PooledFineTune if self.domains.len() < 2 => {
                Err(Error::Config("pooled fine-tuning needs at least two domains".into()))
            }
            Mode::Federated => {
                let label = self
                    .label
                    .as_deref()
                    .ok_or_else(|| Error::Config("a federated plan needs a label".into()))?;
                parse_config_label(label)?;
                self.fl_rounds().map(|_| ())
            }
            _ => Ok(()),
        }
    }

    /// Rounds that spend the fine-tuning budget exactly.
    pub fn fl_rounds(&self) -> Result<u32> {
        let k = self.federation.local_steps;
        let f = self.budgets.finetune_steps;
        if k == 0 || !f.is_multiple_of(k) {
            return Err(Error::Config(format!(
                "fine-tuning budget {f} is not a whole number of {k}-step rounds"
            )));
        }
        Ok((f / k) as u32)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.optimization.batch_size,
            adam: AdamConfig {
                learning_rate: self.optimization.learning_rate,
                ..AdamConfig::default()
            },
        }
    }
}

/// One domain, tokenized for training and kept as text for evaluation.
#[derive(Clone, Debug)]
pub struct DomainData {
    pub name: String,
    pub train: Vec<Example>,
    pub test: TestSet,
}

pub fn prepare_domains(corpora: &[DomainCorpus], vocab: &BpeVocab, max_seq_len: usize) -> Vec<DomainData> {
    corpora
        .iter()
        .map(|c| DomainData {
            name: c.name.clone(),
            train: encode_pairs(vocab, &c.train, max_seq_len),
            test: TestSet {
                name: c.name.clone(),
                src: c.test.iter().map(|p| p.src.clone()).collect(),
                refs: c.test.iter().map(|p| p.tgt.clone()).collect(),
            },
        })
        .collect()
}

/// The plan together with the vocabulary and prepared domains it runs on.
pub struct Workbench<'a> {
    pub plan: &'a ExperimentPlan,
    pub vocab: &'a BpeVocab,
    domains: Vec<&'a DomainData>,
}

impl<'a> Workbench<'a> {
    /// Selects the plan's domains, in plan order, from `available`.
    pub fn new(plan: &'a ExperimentPlan, vocab: &'a BpeVocab, available: &'a [DomainData]) -> Result<Self> {
        plan.validate()?;
        let domains = plan
            .domains
            .iter()
            .map(|name| {
                available
                    .iter()
                    .find(|d| &d.name == name)
                    .ok_or_else(|| Error::Input(format!("no corpus for domain {name}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(d) = domains.iter().find(|d| d.train.is_empty()) {
            return Err(Error::Input(format!("domain {} has no training pairs", d.name)));
        }
        Ok(Self { plan, vocab, domains })
    }

    pub fn domains(&self) -> &[&'a DomainData] {
        &self.domains
    }

    pub fn model_config(&self) -> ModelConfig {
        self.plan.dims.model_config(self.vocab.len())
    }

    fn domain(&self, name: &str) -> Result<&'a DomainData> {
        self.domains
            .iter()
            .copied()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::Input(format!("no corpus for domain {name}")))
    }

    fn fresh_model(&self) -> Result<Model> {
        Model::build(self.model_config(), self.plan.seeds.model)
    }

    /// Trains `model` on `data` for `steps` steps with every partition
    /// trainable, drawing batches from sampler stream `stream`.
    fn train_phase(&self, model: &mut Model, trainer: &mut Trainer, data: &[Example], steps: usize, stream: u64) -> Result<()> {
        let mut sampler = BatchSampler::new(data.len(), sampler_seed(self.plan.seeds.training, stream));
        let losses = trainer.run(model, data, steps, &mut sampler)?;
        if let Some(last) = losses.last() {
            info!("{steps} steps on {} pairs, final loss {last:.4}", data.len());
        }
        Ok(())
    }

    /// BLEU of `model` on every domain's test set, as a matrix row.
    pub fn evaluate_row(&self, label: &str, model: &Model) -> Result<MatrixRow> {
        let cells = self
            .domains
            .iter()
            .map(|d| evaluate_model(model, self.vocab, &d.test, self.plan.bleu))
            .collect::<Result<Vec<_>>>()?;
        Ok(row(label, cells, None, Some(model.params().count_params() as u64)))
    }

    /// A model trained from scratch on one domain for the whole budget.
    pub fn train_standalone(&self, domain: &str) -> Result<(Model, MatrixRow)> {
        let d = self.domain(domain)?;
        let mut model = self.fresh_model()?;
        let mut trainer = Trainer::new(self.plan.train_config(), TrainMask::ALL);
        self.train_phase(&mut model, &mut trainer, &d.train, self.plan.budgets.total(), 0)?;
        let row = self.evaluate_row(domain, &model)?;
        Ok((model, row))
    }

    /// A model trained from scratch on the union of all domains. Corpora are
    /// concatenated in name order, so the plan's domain order is irrelevant.
    pub fn train_pooled_finetune(&self) -> Result<(Model, MatrixRow)> {
        let mut sorted = self.domains.clone();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));
        let pool: Vec<Example> = sorted.iter().flat_map(|d| d.train.iter().cloned()).collect();
        let mut model = self.fresh_model()?;
        let mut trainer = Trainer::new(self.plan.train_config(), TrainMask::ALL);
        self.train_phase(&mut model, &mut trainer, &pool, self.plan.budgets.total(), 0)?;
        let row = self.evaluate_row("Fine Tuning", &model)?;
        Ok((model, row))
    }

    /// The first domain trained for the pretraining budget.
    pub fn train_base(&self) -> Result<Model> {
        let mut model = self.fresh_model()?;
        let mut trainer = Trainer::new(self.plan.train_config(), TrainMask::ALL);
        self.train_phase(&mut model, &mut trainer, &self.domains[0].train, self.plan.budgets.pretrain_steps, 0)?;
        Ok(model)
    }

    /// Step counts of the chained phases, one per domain.
    pub fn chain_schedule(&self) -> Vec<usize> {
        let b = self.plan.budgets;
        let rest = self.domains.len() - 1;
        if rest == 0 {
            return vec![b.total()];
        }
        let mut steps = vec![b.pretrain_steps];
        steps.extend((0..rest).map(|i| b.finetune_steps / rest + usize::from(i < b.finetune_steps % rest)));
        steps
    }

    /// The first domain, then each later domain in turn, continuing from the
    /// previous phase's weights and optimizer state.
    pub fn train_chained(&self) -> Result<(Model, MatrixRow)> {
        let mut model = self.fresh_model()?;
        let mut trainer = Trainer::new(self.plan.train_config(), TrainMask::ALL);
        for (i, (d, steps)) in self.domains.iter().zip(self.chain_schedule()).enumerate() {
            self.train_phase(&mut model, &mut trainer, &d.train, steps, i as u64)?;
            if log::log_enabled!(log::Level::Info) {
                let last = evaluate_model(&model, self.vocab, &d.test, self.plan.bleu)?;
                info!("chain phase {i} ({}): in-domain BLEU {last:.2}", d.name);
            }
        }
        let row = self.evaluate_row("Chained Training", &model)?;
        Ok((model, row))
    }

    /// One client per domain, each starting from `base` with the label's
    /// controllers applied, run for the plan's fine-tuning budget.
    pub fn run_fl_experiment(&self, label: &ConfigLabel, base: &Model) -> Result<SessionReport> {
        let plan = self.plan;
        let cfg = base.config();
        if *cfg != self.model_config() {
            return Err(Error::Config("base model does not match the plan's dimensions".into()));
        }
        let (spec, mut warnings) = label.controller_spec(cfg.enc_layers, cfg.dec_layers)?;
        let model = base.apply_controllers(&spec, InitPolicy::default(), plan.seeds.training)?;
        warnings.extend(model.warnings().iter().cloned());
        let clients = self
            .domains
            .iter()
            .enumerate()
            .map(|(m, d)| {
                ClientState::new(m as u32, &d.name, model.clone(), d.train.clone(), plan.train_config(), plan.seeds.training)
            })
            .collect::<Result<Vec<_>>>()?;
        let rounds = plan.fl_rounds()?;
        let mut fed = Federation::new(
            clients,
            RoundConfig {
                local_steps: plan.federation.local_steps,
                rounds,
                threads: plan.federation.threads,
                share_embeddings: plan.federation.share_embeddings,
            },
        )?;

        let base_row = self.evaluate_row("Base", base)?;
        let mut reports = Vec::with_capacity(rounds as usize);
        for r in 1..=rounds {
            let mut report = fed.run_round()?;
            let every = plan.federation.eval_every;
            if every > 0 && (r % every == 0 || r == rounds) {
                report.eval = Some(self.own_domain_scores(fed.clients())?);
            }
            info!(
                "round {r}/{rounds}: mean client loss {:.4}",
                report.client_losses.iter().sum::<f64>() / report.client_losses.len() as f64
            );
            reports.push(report);
        }

        let cells = match reports.last().and_then(|r| r.eval.clone()) {
            Some(scores) => scores.into_iter().map(|s| s.1).collect(),
            None => self.own_domain_scores(fed.clients())?.into_iter().map(|s| s.1).collect(),
        };
        let ledger = fed.ledger().clone();
        let final_row = row(&label.to_string(), cells, ledger.c_cost(), ledger.t_cost());
        let (c_term, t_term) = cost_terms(label, cfg.enc_layers, cfg.dec_layers)?;
        let preset = CostPreset::from_config(cfg);
        let clients = fed.into_clients();
        Ok(SessionReport {
            label: label.to_string(),
            plan: plan.clone(),
            c_cost_term: c_term.to_string(),
            t_cost_term: t_term.to_string(),
            c_cost_preset: c_term.params(&preset),
            t_cost_preset: t_term.params(&preset),
            base_row,
            final_row,
            rounds: reports,
            ledger,
            client_checksums: clients.iter().map(|c| c.model.params().checksum()).collect(),
            warnings,
            clients,
        })
    }

    /// Client `m`'s model scored on domain `m`'s test set.
    fn own_domain_scores(&self, clients: &[ClientState]) -> Result<Vec<(String, f64)>> {
        clients
            .iter()
            .zip(&self.domains)
            .map(|(c, d)| Ok((d.name.clone(), evaluate_model(&c.model, self.vocab, &d.test, self.plan.bleu)?)))
            .collect()
    }
}

fn row(label: &str, cells: Vec<f64>, c_cost: Option<u64>, t_cost: Option<u64>) -> MatrixRow {
    let average = cells.iter().sum::<f64>() / cells.len().max(1) as f64;
    MatrixRow {
        label: label.to_string(),
        cells,
        average,
        c_cost,
        t_cost,
    }
}

/// Everything a federated session produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SessionReport {
    pub label: String,
    pub plan: ExperimentPlan,
    pub c_cost_term: String,
    pub t_cost_term: String,
    /// Costs of the terms priced with the model's own layer sizes.
    pub c_cost_preset: u64,
    pub t_cost_preset: u64,
    /// The starting model on every test set.
    pub base_row: MatrixRow,
    /// Each client's final model on its own domain's test set.
    pub final_row: MatrixRow,
    pub rounds: Vec<RoundReport>,
    pub ledger: CostLedger,
    pub client_checksums: Vec<String>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub clients: Vec<ClientState>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SentencePair, SplitSizes};
    use crate::subword::train_bpe;

    fn corpus(name: &str, words: &[&str], n: usize) -> DomainCorpus {
        let pairs = (0..n)
            .map(|i| {
                let s: Vec<&str> = (0..3).map(|k| words[(i * 3 + k * 5 + i / 3) % words.len()]).collect();
                SentencePair {
                    src: s.join(" "),
                    tgt: s.iter().rev().copied().collect::<Vec<_>>().join(" "),
                }
            })
            .collect();
        crate::data::split_pairs(name, pairs, SplitSizes { dev: 2, test: 4 }, 0).unwrap()
    }

    fn bench_data() -> (BpeVocab, Vec<DomainData>) {
        let a = corpus("alpha", &["ba", "de", "fi", "go", "ku"], 30);
        let b = corpus("beta", &["la", "me", "ni", "po", "ru"], 30);
        let vocab = train_bpe(a.all_text().chain(b.all_text()), 20).unwrap();
        let domains = prepare_domains(&[a, b], &vocab, 12);
        (vocab, domains)
    }

    fn tiny_plan(mode: Mode) -> ExperimentPlan {
        let mut p = ExperimentPlan::desk(mode, vec!["alpha".into(), "beta".into()]);
        p.dims = Dims {
            enc_layers: 1,
            dec_layers: 1,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            max_seq_len: 12,
        };
        p.budgets = Budgets {
            pretrain_steps: 4,
            finetune_steps: 6,
        };
        p.federation.local_steps = 3;
        p.federation.eval_every = 1;
        p.optimization.batch_size = 4;
        p
    }

    #[test]
    fn plan_toml_round_trip_and_validation() {
        let mut p = tiny_plan(Mode::Federated);
        p.label = Some("2E-2D/C-C (1)".into());
        let text = p.to_toml();
        assert_eq!(ExperimentPlan::from_toml(&text).unwrap(), p);

        p.federation.local_steps = 4;
        assert!(matches!(p.validate(), Err(Error::Config(_))));
        p.federation.local_steps = 3;
        p.label = None;
        assert!(p.validate().is_err());
        let mut pooled = tiny_plan(Mode::PooledFineTune);
        pooled.domains.truncate(1);
        assert!(pooled.validate().is_err());
        assert!(ExperimentPlan::from_toml("mode = \"sideways\"").is_err());
    }

    #[test]
    fn chain_schedule_conserves_the_budget() {
        let (vocab, domains) = bench_data();
        let mut plan = tiny_plan(Mode::Chained);
        plan.budgets.finetune_steps = 7;
        plan.domains = vec!["alpha".into(), "beta".into(), "alpha".into(), "beta".into()];
        let wb = Workbench::new(&plan, &vocab, &domains).unwrap();
        let s = wb.chain_schedule();
        assert_eq!(s, [4, 3, 2, 2]);
        assert_eq!(s.iter().sum::<usize>(), plan.budgets.total());
        plan.domains.truncate(1);
        let wb = Workbench::new(&plan, &vocab, &domains).unwrap();
        assert_eq!(wb.chain_schedule(), [plan.budgets.total()]);
    }

    #[test]
    fn missing_domain_is_an_input_error() {
        let (vocab, domains) = bench_data();
        let mut plan = tiny_plan(Mode::Standalone);
        plan.domains.push("gamma".into());
        assert!(matches!(Workbench::new(&plan, &vocab, &domains), Err(Error::Input(_))));
        plan.domains.pop();
        let wb = Workbench::new(&plan, &vocab, &domains).unwrap();
        assert!(matches!(wb.train_standalone("gamma"), Err(Error::Input(_))));
    }

    #[test]
    fn degenerate_pool_and_chain_equal_standalone() {
        let (vocab, domains) = bench_data();
        let plan = tiny_plan(Mode::Standalone);
        let wb = Workbench::new(&plan, &vocab, &domains).unwrap();
        let (alone, r1) = wb.train_standalone("alpha").unwrap();
        let (again, r2) = wb.train_standalone("alpha").unwrap();
        assert_eq!(alone.params().checksum(), again.params().checksum());
        assert_eq!(r1, r2);

        let mut one = tiny_plan(Mode::Chained);
        one.domains.truncate(1);
        let wb1 = Workbench::new(&one, &vocab, &domains).unwrap();
        let (chained, _) = wb1.train_chained().unwrap();
        assert_eq!(chained.params().checksum(), alone.params().checksum());

        let mut swapped = tiny_plan(Mode::PooledFineTune);
        let (p1, _) = Workbench::new(&swapped, &vocab, &domains).unwrap().train_pooled_finetune().unwrap();
        swapped.domains.reverse();
        let (p2, _) = Workbench::new(&swapped, &vocab, &domains).unwrap().train_pooled_finetune().unwrap();
        assert_eq!(p1.params().checksum(), p2.params().checksum());
    }

    #[test]
    fn fl_session_accounts_costs_from_the_ledger() {
        let (vocab, domains) = bench_data();
        let mut plan = tiny_plan(Mode::Federated);
        plan.label = Some("2E-2D/C-C (1)".into());
        let wb = Workbench::new(&plan, &vocab, &domains).unwrap();
        let base = wb.train_base().unwrap();
        let label = parse_config_label(plan.label.as_deref().unwrap()).unwrap();
        let report = wb.run_fl_experiment(&label, &base).unwrap();
        assert_eq!(report.rounds.len(), 2);
        assert!(report.rounds.iter().all(|r| r.eval.as_ref().is_some_and(|e| e.len() == 2)));
        assert_eq!(report.c_cost_term, "1E-1D");
        assert_eq!(report.final_row.c_cost, Some(report.c_cost_preset));
        assert_eq!(report.final_row.t_cost, Some(report.t_cost_preset));
        assert_eq!(report.ledger.totals().uplink_params, 2 * 2 * report.c_cost_preset);
        assert_eq!(report.base_row.cells.len(), 2);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"label\":\"2E-2D/C-C (1)\""));
    }
}
