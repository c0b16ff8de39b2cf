use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::TrainMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControllerMode {
    /// New layers are created at the given final-stack indices.
    Insert,
    /// Existing layers at the given indices are re-tagged as controllers.
    Designate,
}

/// `All` or only `Controllers`: the A/C letters of a configuration label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scope {
    All,
    Controllers,
}

impl Scope {
    pub fn letter(self) -> char {
        match self {
            Scope::All => 'A',
            Scope::Controllers => 'C',
        }
    }
}

/// How a fresh controller layer is initialized on insertion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum InitPolicy {
    /// Xavier init with the output projection of every sublayer multiplied
    /// by `scale`, so the residual layer starts close to the identity.
    NearIdentity { scale: f64 },
    /// Same init as a base layer.
    Fresh,
}

impl Default for InitPolicy {
    fn default() -> Self {
        InitPolicy::NearIdentity { scale: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerSpec {
    pub mode: ControllerMode,
    pub enc_positions: Vec<usize>,
    pub dec_positions: Vec<usize>,
    pub share_scope: Scope,
    pub train_scope: Scope,
    pub train_embeddings: bool,
}

impl ControllerSpec {
    /// A spec with no controllers that shares and trains everything.
    pub fn none() -> Self {
        Self {
            mode: ControllerMode::Designate,
            enc_positions: vec![],
            dec_positions: vec![],
            share_scope: Scope::All,
            train_scope: Scope::All,
            train_embeddings: true,
        }
    }

    pub fn new(
        mode: ControllerMode,
        enc_positions: Vec<usize>,
        dec_positions: Vec<usize>,
        share_scope: Scope,
        train_scope: Scope,
    ) -> Self {
        Self {
            mode,
            enc_positions,
            dec_positions,
            share_scope,
            train_scope,
            train_embeddings: train_scope == Scope::All,
        }
    }

    pub fn controller_count(&self) -> usize {
        self.enc_positions.len() + self.dec_positions.len()
    }

    /// Partitions updated by local training.
    pub fn train_mask(&self) -> TrainMask {
        TrainMask {
            base: self.train_scope == Scope::All,
            controller: true,
            embedding: self.train_embeddings,
        }
    }

    /// Checks the positions against the final stack depths.
    pub fn validate(&self, enc_final: usize, dec_final: usize) -> Result<()> {
        for (stack, positions, len) in [
            ("encoder", &self.enc_positions, enc_final),
            ("decoder", &self.dec_positions, dec_final),
        ] {
            let mut seen = positions.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != positions.len() {
                return Err(Error::Config(format!(
                    "duplicate {stack} controller position in {positions:?}"
                )));
            }
            if let Some(&p) = positions.iter().find(|&&p| p >= len) {
                return Err(Error::Config(format!(
                    "{stack} controller position {p} out of range for a {len}-layer stack"
                )));
            }
        }
        let needs = |s: Scope| s == Scope::Controllers;
        if (needs(self.share_scope) || needs(self.train_scope))
            && (self.enc_positions.is_empty() || self.dec_positions.is_empty())
        {
            return Err(Error::Config(
                "controller-only scope needs at least one controller per stack".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form; identical specs agree bytewise.
    pub fn fingerprint(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(json).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_catches_bad_positions() {
        let s = ControllerSpec::new(ControllerMode::Insert, vec![2, 2], vec![2, 6], Scope::Controllers, Scope::Controllers);
        assert!(s.validate(8, 8).is_err());
        let s = ControllerSpec::new(ControllerMode::Insert, vec![2, 8], vec![2, 6], Scope::Controllers, Scope::Controllers);
        assert!(s.validate(8, 8).is_err());
        let s = ControllerSpec::new(ControllerMode::Insert, vec![], vec![], Scope::Controllers, Scope::Controllers);
        assert!(s.validate(6, 6).is_err());
        let s = ControllerSpec::new(ControllerMode::Insert, vec![2, 6], vec![2, 6], Scope::Controllers, Scope::Controllers);
        s.validate(8, 8).unwrap();
    }

    #[test]
    fn train_mask_follows_scope() {
        let cc = ControllerSpec::new(ControllerMode::Designate, vec![0], vec![3], Scope::Controllers, Scope::Controllers);
        assert_eq!(
            cc.train_mask(),
            TrainMask {
                base: false,
                controller: true,
                embedding: false
            }
        );
        assert_eq!(ControllerSpec::none().train_mask(), TrainMask::ALL);
    }

    #[test]
    fn fingerprint_distinguishes_specs() {
        let a = ControllerSpec::new(ControllerMode::Insert, vec![2, 6], vec![2, 6], Scope::Controllers, Scope::Controllers);
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.dec_positions = vec![0, 5];
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
