//! Checkpoint files: `"FNCK" | header_len u32 | JSON header | parameter container`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ControllerSpec, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{decode_param_set, encode_param_set, ParamSet};

const MAGIC: &[u8; 4] = b"FNCK";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub spec: ControllerSpec,
    pub enc_controllers: Vec<bool>,
    pub dec_controllers: Vec<bool>,
    pub checksum: String,
}

pub fn write_checkpoint(model: &Model) -> Vec<u8> {
    let header = CheckpointHeader {
        config: model.config,
        spec: model.spec.clone(),
        enc_controllers: model.enc_controller_flags(),
        dec_controllers: model.dec_controller_flags(),
        checksum: model.params.checksum(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(8 + json.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&encode_param_set(&model.params));
    buf
}

pub fn read_checkpoint(buf: &[u8]) -> Result<Model> {
    if buf.len() < 8 || &buf[..4] != MAGIC {
        return Err(Error::format("checkpoint", "missing FNCK magic"));
    }
    let hlen = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes")) as usize;
    let body = buf
        .get(8..8 + hlen)
        .ok_or_else(|| Error::format("checkpoint", "truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let (params, used) = decode_param_set(&buf[8 + hlen..])?;
    if 8 + hlen + used != buf.len() {
        return Err(Error::format("checkpoint", "trailing bytes after parameters"));
    }
    if params.checksum() != header.checksum {
        return Err(Error::format("checkpoint", "parameter checksum mismatch"));
    }
    Model::from_params(header.config, header.spec, &header.enc_controllers, &header.dec_controllers, params)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&buf)
}

impl Model {
    /// Reassembles a model from stored parameters, checking that names,
    /// shapes and partition tags match the described layout.
    pub fn from_params(
        config: ModelConfig,
        spec: ControllerSpec,
        enc_controllers: &[bool],
        dec_controllers: &[bool],
        params: ParamSet,
    ) -> Result<Model> {
        let mut shape = config;
        shape.enc_layers = enc_controllers.len();
        shape.dec_layers = dec_controllers.len();
        let mut skeleton = Model::build(shape, 0)?;
        skeleton.config = config;
        for (slots, flags) in [(&mut skeleton.enc, enc_controllers), (&mut skeleton.dec, dec_controllers)] {
            for (slot, &flag) in slots.iter_mut().zip(flags) {
                slot.controller = flag;
            }
        }
        skeleton.retag();
        skeleton.params.check_congruent(&params)?;
        for (want, got) in skeleton.params.iter().zip(&params) {
            if want.partition != got.partition {
                return Err(Error::Protocol(format!(
                    "tensor {} tagged {} but layout says {}",
                    got.name, got.partition, want.partition
                )));
            }
        }
        skeleton.params = params;
        skeleton.spec = spec;
        Ok(skeleton)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{ControllerMode, InitPolicy, Scope};
    use super::*;

    #[test]
    fn checkpoint_roundtrip_preserves_everything() {
        let cfg = ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            vocab_size: 20,
            max_seq_len: 8,
        };
        let spec = ControllerSpec::new(ControllerMode::Insert, vec![1], vec![2], Scope::Controllers, Scope::Controllers);
        let m = Model::build(cfg, 3)
            .unwrap()
            .insert_controllers(&spec, InitPolicy::default(), 4)
            .unwrap();
        let bytes = write_checkpoint(&m);
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.spec(), m.spec());
        assert_eq!(back.enc_controller_flags(), m.enc_controller_flags());
        assert_eq!(back.forward(&[4, 5], &[6]).unwrap(), m.forward(&[4, 5], &[6]).unwrap());

        let mut corrupt = bytes.clone();
        let last = corrupt.len() - 1;
        corrupt[last] ^= 1;
        assert!(read_checkpoint(&corrupt).is_err());
        assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        assert!(read_checkpoint(b"nope").is_err());
    }
}
