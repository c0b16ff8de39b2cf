//! Configuration labels such as `8E-8D/C-C (2-6)`.
//!
//! `NE-MD` gives the encoder and decoder depth after controllers are added,
//! the first letter after `/` the share scope and the second the train scope
//! (`A` = all layers, `C` = controller layers only). The optional
//! parenthesised list holds controller positions, applied to both stacks.
//!
//! Position rule: when the totals equal the base depth, positions are
//! 0-based indices of existing layers that are designated as controllers.
//! When the totals exceed the base depth, new layers are inserted and the
//! positions are 0-based indices in the final stack, so `(2-6)` on an 8-layer
//! stack puts controllers at final indices 2 and 6. Without positions, the
//! extra layers go on top of each stack. `-1` is read as final index 0 (a
//! controller below every existing layer) and triggers a warning.

use std::fmt;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ControllerMode, ControllerSpec, Scope};

#[derive(Clone, Debug, Eq, Serialize, Deserialize)]
pub struct ConfigLabel {
    pub enc_total: usize,
    pub dec_total: usize,
    pub share_scope: Scope,
    pub train_scope: Scope,
    pub positions: Vec<i64>,
    /// The string the label was parsed from, if any.
    pub raw: Option<String>,
}

impl PartialEq for ConfigLabel {
    fn eq(&self, other: &Self) -> bool {
        self.enc_total == other.enc_total
            && self.dec_total == other.dec_total
            && self.share_scope == other.share_scope
            && self.train_scope == other.train_scope
            && self.positions == other.positions
    }
}

impl fmt::Display for ConfigLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}E-{}D/{}-{}",
            self.enc_total,
            self.dec_total,
            self.share_scope.letter(),
            self.train_scope.letter()
        )?;
        if !self.positions.is_empty() {
            let list: Vec<String> = self.positions.iter().map(i64::to_string).collect();
            write!(f, " ({})", list.join("-"))?;
        }
        Ok(())
    }
}

struct Cursor<'a> {
    chars: Vec<(usize, char)>,
    at: usize,
    src: &'a str,
}

impl<'a> Cursor<'a> {
    fn new(src: &'a str) -> Self {
        Self {
            chars: src.char_indices().collect(),
            at: 0,
            src,
        }
    }

    fn pos(&self) -> usize {
        self.chars.get(self.at).map_or(self.src.len(), |c| c.0)
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.at).map(|c| c.1)
    }

    fn skip_spaces(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.at += 1;
        }
    }

    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            position: self.pos(),
            message: message.into(),
        })
    }

    fn expect(&mut self, want: char) -> Result<()> {
        self.skip_spaces();
        match self.peek() {
            Some(c) if c == want => {
                self.at += 1;
                Ok(())
            }
            Some(c) => self.fail(format!("expected `{want}`, found `{c}`")),
            None => self.fail(format!("expected `{want}`, found end of label")),
        }
    }

    fn number(&mut self) -> Result<u64> {
        self.skip_spaces();
        let start = self.at;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.at += 1;
        }
        if start == self.at {
            return self.fail("expected a number");
        }
        let text: String = self.chars[start..self.at].iter().map(|c| c.1).collect();
        text.parse().or_else(|_| self.fail("number out of range"))
    }

    fn scope(&mut self) -> Result<Scope> {
        self.skip_spaces();
        let s = match self.peek() {
            Some('A') => Scope::All,
            Some('C') => Scope::Controllers,
            Some(c) => return self.fail(format!("expected scope `A` or `C`, found `{c}`")),
            None => return self.fail("expected scope `A` or `C`, found end of label"),
        };
        self.at += 1;
        Ok(s)
    }
}

/// Parses `NE-MD/X-Y` with an optional ` (p-q…)` position list.
pub fn parse_config_label(s: &str) -> Result<ConfigLabel> {
    let mut c = Cursor::new(s);
    let enc_total = c.number()? as usize;
    c.skip_spaces();
    match c.peek() {
        Some('E') => c.at += 1,
        Some('L') => {
            info!("label {s:?}: reading stack letter `L` as `E`");
            c.at += 1;
        }
        _ => return c.fail("expected `E` after the encoder depth"),
    }
    c.expect('-')?;
    let dec_total = c.number()? as usize;
    c.expect('D')?;
    c.expect('/')?;
    let share_scope = c.scope()?;
    c.expect('-')?;
    let train_scope = c.scope()?;
    c.skip_spaces();
    let mut positions = Vec::new();
    if c.peek() == Some('(') {
        c.at += 1;
        loop {
            c.skip_spaces();
            let negative = c.peek() == Some('-');
            if negative {
                c.at += 1;
            }
            let n = c.number()? as i64;
            positions.push(if negative { -n } else { n });
            c.skip_spaces();
            match c.peek() {
                Some('-') => c.at += 1,
                Some(')') => {
                    c.at += 1;
                    break;
                }
                Some(ch) => return c.fail(format!("expected `-` or `)`, found `{ch}`")),
                None => return c.fail("unclosed position list"),
            }
        }
    }
    c.skip_spaces();
    if let Some(ch) = c.peek() {
        return c.fail(format!("unexpected `{ch}` after label"));
    }
    if enc_total == 0 || dec_total == 0 {
        return Err(Error::Parse {
            position: 0,
            message: "stack depths must be positive".into(),
        });
    }
    Ok(ConfigLabel {
        enc_total,
        dec_total,
        share_scope,
        train_scope,
        positions,
        raw: Some(s.to_string()),
    })
}

impl std::str::FromStr for ConfigLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_config_label(s)
    }
}

impl ConfigLabel {
    /// Number of controller layers per stack (encoder, decoder) once the
    /// label is applied to a model with the given base depths.
    pub fn controllers_per_stack(&self, enc_base: usize, dec_base: usize) -> Result<(usize, usize)> {
        let spec = self.controller_spec(enc_base, dec_base)?.0;
        Ok((spec.enc_positions.len(), spec.dec_positions.len()))
    }

    /// Resolves the label against base depths. Returns the spec and any
    /// warnings raised while resolving positions.
    pub fn controller_spec(&self, enc_base: usize, dec_base: usize) -> Result<(ControllerSpec, Vec<String>)> {
        if self.enc_total < enc_base || self.dec_total < dec_base {
            return Err(Error::Config(format!(
                "label {self} has fewer layers than the {enc_base}+{dec_base}-layer base model"
            )));
        }
        let mut warnings = Vec::new();
        let resolved: Vec<usize> = self
            .positions
            .iter()
            .map(|&p| match p {
                -1 => {
                    let msg = format!(
                        "label {self}: position -1 read as final index 0; a controller \
                         below every existing layer may keep client models from converging"
                    );
                    warn!("{msg}");
                    warnings.push(msg);
                    Ok(0)
                }
                p if p < 0 => Err(Error::Config(format!("label {self}: position {p} is not allowed"))),
                p => Ok(p as usize),
            })
            .collect::<Result<_>>()?;

        let (enc_extra, dec_extra) = (self.enc_total - enc_base, self.dec_total - dec_base);
        let (mode, enc_positions, dec_positions) = if enc_extra == 0 && dec_extra == 0 {
            (ControllerMode::Designate, resolved.clone(), resolved)
        } else if resolved.is_empty() {
            (
                ControllerMode::Insert,
                (enc_base..self.enc_total).collect(),
                (dec_base..self.dec_total).collect(),
            )
        } else if resolved.len() == enc_extra && resolved.len() == dec_extra {
            (ControllerMode::Insert, resolved.clone(), resolved)
        } else {
            return Err(Error::Config(format!(
                "label {self}: {} positions for {enc_extra} new encoder and {dec_extra} new decoder layers",
                resolved.len()
            )));
        };
        let spec = ControllerSpec::new(mode, enc_positions, dec_positions, self.share_scope, self.train_scope);
        let (enc_final, dec_final) = (self.enc_total, self.dec_total);
        spec.validate(enc_final, dec_final)?;
        Ok((spec, warnings))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(enc: usize, dec: usize, share: Scope, train: Scope, positions: &[i64]) -> ConfigLabel {
        ConfigLabel {
            enc_total: enc,
            dec_total: dec,
            share_scope: share,
            train_scope: train,
            positions: positions.to_vec(),
            raw: None,
        }
    }

    #[test]
    fn parses_table_labels() {
        use Scope::*;
        assert_eq!(parse_config_label("8E-8D/A-C (2-6)").unwrap(), label(8, 8, All, Controllers, &[2, 6]));
        assert_eq!(parse_config_label("6E-6D/A-A").unwrap(), label(6, 6, All, All, &[]));
        assert_eq!(parse_config_label("8E-8D/C-C (0-5)").unwrap(), label(8, 8, Controllers, Controllers, &[0, 5]));
        assert_eq!(parse_config_label("8E-8D/C-C (-1-6)").unwrap().positions, [-1, 6]);
        assert_eq!(parse_config_label("6L-6D/A-A").unwrap(), label(6, 6, All, All, &[]));
    }

    #[test]
    fn table_labels_round_trip() {
        for s in [
            "6E-6D/A-A",
            "8E-8D/A-A",
            "8E-8D/A-C (2-6)",
            "8E-8D/C-A (2-6)",
            "8E-8D/C-C (2-6)",
            "8E-8D/C-C (0-5)",
            "6E-6D/C-C (0-3)",
            "8E-8D/C-C (-1-6)",
        ] {
            let l = parse_config_label(s).unwrap();
            assert_eq!(l.to_string(), s);
            assert_eq!(parse_config_label(&l.to_string()).unwrap(), l);
        }
    }

    #[test]
    fn malformed_labels_report_position() {
        for (s, at) in [("8X-8D/A-A", 1), ("8E-8D/B-A", 6), ("8E-8D/A-A (2-", 13), ("8E-8D/A-A x", 10), ("E-8D/A-A", 0)] {
            match parse_config_label(s) {
                Err(Error::Parse { position, .. }) => assert_eq!(position, at, "{s}"),
                other => panic!("{s}: {other:?}"),
            }
        }
    }

    #[test]
    fn resolution_modes() {
        let (s, w) = parse_config_label("8E-8D/C-C (2-6)").unwrap().controller_spec(6, 6).unwrap();
        assert_eq!(s.mode, ControllerMode::Insert);
        assert_eq!(s.enc_positions, [2, 6]);
        assert!(w.is_empty());

        let (s, _) = parse_config_label("6E-6D/C-C (0-3)").unwrap().controller_spec(6, 6).unwrap();
        assert_eq!(s.mode, ControllerMode::Designate);
        assert_eq!(s.dec_positions, [0, 3]);

        let (s, _) = parse_config_label("8E-8D/A-A").unwrap().controller_spec(6, 6).unwrap();
        assert_eq!(s.enc_positions, [6, 7]);

        let (s, w) = parse_config_label("8E-8D/C-C (-1-6)").unwrap().controller_spec(6, 6).unwrap();
        assert_eq!(s.enc_positions, [0, 6]);
        assert_eq!(w.len(), 1);

        assert!(parse_config_label("8E-8D/C-C (2)").unwrap().controller_spec(6, 6).is_err());
        assert!(parse_config_label("4E-4D/A-A").unwrap().controller_spec(6, 6).is_err());
        assert!(parse_config_label("6E-6D/C-C").unwrap().controller_spec(6, 6).is_err());
    }
}
