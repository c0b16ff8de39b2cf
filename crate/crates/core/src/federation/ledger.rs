//! Exact communication and training cost accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::ConfigLabel;
use crate::model::{ModelConfig, Scope};

/// Counts for one client in one round, taken from the frames actually sent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub round: u32,
    pub client_id: u32,
    pub uplink_params: u64,
    pub downlink_params: u64,
    pub trained_params: u64,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    /// Non-parameter bytes of both frames.
    pub header_bytes: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerTotals {
    pub rounds: u32,
    pub records: u64,
    pub uplink_params: u64,
    pub downlink_params: u64,
    pub trained_params: u64,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    pub header_bytes: u64,
}

/// Append-only ledger of per-client, per-round costs.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CostLedger {
    records: Vec<LedgerRecord>,
    totals: LedgerTotals,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one round. Rounds must arrive in increasing order.
    pub fn append_round(&mut self, records: &[LedgerRecord]) -> Result<()> {
        let round = match records.first() {
            Some(r) => r.round,
            None => return Err(Error::Contract("empty ledger round".into())),
        };
        if records.iter().any(|r| r.round != round) || round <= self.totals.rounds {
            return Err(Error::Contract(format!("ledger round {round} out of order")));
        }
        let t = &mut self.totals;
        t.rounds = round;
        for r in records {
            t.records += 1;
            t.uplink_params += r.uplink_params;
            t.downlink_params += r.downlink_params;
            t.trained_params += r.trained_params;
            t.uplink_bytes += r.uplink_bytes;
            t.downlink_bytes += r.downlink_bytes;
            t.header_bytes += r.header_bytes;
        }
        self.records.extend_from_slice(records);
        Ok(())
    }

    pub fn records(&self) -> &[LedgerRecord] {
        &self.records
    }

    pub fn totals(&self) -> LedgerTotals {
        self.totals
    }

    /// Parameters one client sends per round (the C-Cost column). `None`
    /// when the ledger is empty or clients sent different amounts.
    pub fn c_cost(&self) -> Option<u64> {
        uniform(self.records.iter().map(|r| r.uplink_params))
    }

    /// Parameters one client updates per round (the T-Cost column).
    pub fn t_cost(&self) -> Option<u64> {
        uniform(self.records.iter().map(|r| r.trained_params))
    }
}

fn uniform(mut it: impl Iterator<Item = u64>) -> Option<u64> {
    let first = it.next()?;
    it.all(|v| v == first).then_some(first)
}

/// Per-layer parameter counts used to price a configuration label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostPreset {
    pub enc_layer: u64,
    pub dec_layer: u64,
    pub embedding: u64,
}

impl CostPreset {
    /// Counts of the full-size Transformer whose costs are published:
    /// 3,416,320 per encoder layer, 4,204,032 per decoder layer and a
    /// 33,116,512-entry embedding table.
    pub const FULL_SCALE: CostPreset = CostPreset {
        enc_layer: 3_416_320,
        dec_layer: 4_204_032,
        embedding: 33_116_512,
    };

    /// Counts for a model built from `config`.
    pub fn from_config(config: &ModelConfig) -> Self {
        Self {
            enc_layer: config.encoder_layer_params() as u64,
            dec_layer: config.decoder_layer_params() as u64,
            embedding: config.embedding_params() as u64,
        }
    }
}

/// Layer composition behind a cost figure, e.g. `2E-2D` or `8E-8D + W`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTerm {
    pub enc_layers: u64,
    pub dec_layers: u64,
    pub embedding: bool,
}

impl CostTerm {
    pub fn params(&self, preset: &CostPreset) -> u64 {
        self.enc_layers * preset.enc_layer
            + self.dec_layers * preset.dec_layer
            + if self.embedding { preset.embedding } else { 0 }
    }
}

impl std::fmt::Display for CostTerm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}E-{}D", self.enc_layers, self.dec_layers)?;
        if self.embedding {
            write!(f, " + W")?;
        }
        Ok(())
    }
}

/// Communication and training terms of a label. Communication never
/// includes the embedding table; training includes it when all layers train.
pub fn cost_terms(label: &ConfigLabel, enc_base: usize, dec_base: usize) -> Result<(CostTerm, CostTerm)> {
    let (enc_c, dec_c) = label.controllers_per_stack(enc_base, dec_base)?;
    let term = |scope: Scope, embedding: bool| match scope {
        Scope::All => CostTerm {
            enc_layers: label.enc_total as u64,
            dec_layers: label.dec_total as u64,
            embedding,
        },
        Scope::Controllers => CostTerm {
            enc_layers: enc_c as u64,
            dec_layers: dec_c as u64,
            embedding: false,
        },
    };
    Ok((term(label.share_scope, false), term(label.train_scope, true)))
}

/// (C-Cost, T-Cost) of a label in parameters, priced with `preset`.
///
/// The base depth is taken as the smaller of the label's totals and 6, the
/// depth of the published base model, which only matters for resolving how
/// many layers are controllers.
pub fn compute_cost_preset(label: &ConfigLabel, preset: &CostPreset) -> Result<(u64, u64)> {
    let (c, t) = cost_terms(label, label.enc_total.min(6), label.dec_total.min(6))?;
    Ok((c.params(preset), t.params(preset)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::parse_config_label;
    use crate::model::Model;

    fn ledger_row(round: u32, client_id: u32, up: u64, trained: u64) -> LedgerRecord {
        LedgerRecord {
            round,
            client_id,
            uplink_params: up,
            downlink_params: up,
            trained_params: trained,
            uplink_bytes: 8 * up + 10,
            downlink_bytes: 8 * up + 10,
            header_bytes: 20,
        }
    }

    #[test]
    fn ledger_is_append_only_and_ordered() {
        let mut l = CostLedger::new();
        l.append_round(&[ledger_row(1, 0, 5, 7), ledger_row(1, 1, 5, 7)]).unwrap();
        l.append_round(&[ledger_row(2, 0, 5, 7), ledger_row(2, 1, 5, 7)]).unwrap();
        assert!(l.append_round(&[ledger_row(2, 0, 5, 7)]).is_err());
        assert!(l.append_round(&[]).is_err());
        let t = l.totals();
        assert_eq!((t.rounds, t.records, t.uplink_params, t.trained_params), (2, 4, 20, 28));
        assert_eq!((l.c_cost(), l.t_cost()), (Some(5), Some(7)));
        assert_eq!(CostLedger::new().c_cost(), None);
    }

    #[test]
    fn published_costs() {
        let p = CostPreset::FULL_SCALE;
        let (_, t) = compute_cost_preset(&parse_config_label("8E-8D/A-A").unwrap(), &p).unwrap();
        assert_eq!(t, 8 * 3_416_320 + 8 * 4_204_032 + 33_116_512);
        assert_eq!(t, 94_079_328);
        let (c, t2) = compute_cost_preset(&parse_config_label("8E-8D/C-C (2-6)").unwrap(), &p).unwrap();
        assert_eq!((c, t2), (15_240_704, 15_240_704));
        assert!(((t as f64 / t2 as f64) - 6.17).abs() <= 0.01);
    }

    #[test]
    fn cost_terms_follow_the_table_columns() {
        let cases = [
            ("6E-6D/A-A", "6E-6D", "6E-6D + W"),
            ("8E-8D/A-A", "8E-8D", "8E-8D + W"),
            ("8E-8D/A-C (2-6)", "8E-8D", "2E-2D"),
            ("8E-8D/C-C (2-6)", "2E-2D", "2E-2D"),
            ("6E-6D/C-C (0-3)", "2E-2D", "2E-2D"),
        ];
        for (label, c, t) in cases {
            let (ct, tt) = cost_terms(&parse_config_label(label).unwrap(), 6, 6).unwrap();
            assert_eq!((ct.to_string().as_str(), tt.to_string().as_str()), (c, t), "{label}");
        }
    }

    #[test]
    fn preset_from_config_matches_built_model() {
        let cfg = ModelConfig {
            enc_layers: 2,
            dec_layers: 3,
            d_model: 16,
            heads: 2,
            d_ff: 24,
            vocab_size: 40,
            max_seq_len: 10,
        };
        let m = Model::build(cfg, 0).unwrap();
        let p = CostPreset::from_config(&cfg);
        let count = |prefix: &str| -> u64 {
            m.params()
                .iter()
                .filter(|e| e.name.starts_with(prefix))
                .map(|e| e.tensor.len() as u64)
                .sum()
        };
        assert_eq!(count("enc.0."), p.enc_layer);
        assert_eq!(count("dec.0."), p.dec_layer);
        assert_eq!(count("embed"), p.embedding);
    }
}
