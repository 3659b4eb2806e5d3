//! Checkpoint file: magic `FQCK`, `u32` version, the model config
//! (`u32` vocab_size, hidden, layers, heads, ffn_hidden, max_input_len,
//! max_decode_len, `u8` tie flag, `u64` seed), the vocabulary (`u32` count, strings), then
//! `u32` tensor count and per tensor its name, `u8` rank, `u32` dims and
//! little-endian `f32` data.

use std::collections::HashMap;
use std::path::Path;

use super::model::FidModel;
use super::tokenizer::{Tokenizer, SPECIAL_TOKENS};
use super::ModelConfig;
use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};

const CKPT_MAGIC: &[u8; 4] = b"FQCK";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: FidModel<f32>,
    pub tokenizer: Tokenizer,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.model.config();
        let mut w = Writer::new(CKPT_MAGIC, CKPT_VERSION);
        for v in [
            cfg.vocab_size,
            cfg.hidden,
            cfg.layers,
            cfg.heads,
            cfg.ffn_hidden,
            cfg.max_input_len,
            cfg.max_decode_len,
        ] {
            w.len_u32(v);
        }
        w.u8(cfg.tie_embeddings as u8);
        w.u64(cfg.seed);
        let vocab = self.tokenizer.vocab();
        w.len_u32(vocab.len());
        for word in vocab {
            w.str(word);
        }
        let tensors = self.model.params().named();
        w.len_u32(tensors.len());
        for (name, shape, data) in tensors {
            w.str(&name);
            w.u8(shape.len() as u8);
            for d in shape {
                w.len_u32(d);
            }
            w.f32s(data);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, version) = Reader::open(bytes, CKPT_MAGIC)?;
        binio::expect_version(version, CKPT_VERSION, "checkpoint")?;
        let config = ModelConfig {
            vocab_size: r.len()?,
            hidden: r.len()?,
            layers: r.len()?,
            heads: r.len()?,
            ffn_hidden: r.len()?,
            max_input_len: r.len()?,
            max_decode_len: r.len()?,
            tie_embeddings: match r.u8()? {
                0 => false,
                1 => true,
                v => return Err(Error::Format(format!("bad tie flag {v}"))),
            },
            seed: r.u64()?,
        };
        config.validate()?;
        let n = r.len()?;
        let vocab = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        if vocab.len() != config.vocab_size || vocab.iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b)
        {
            return Err(Error::Format(
                "checkpoint vocabulary does not match config".into(),
            ));
        }
        let count = r.len()?;
        let mut stored: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::with_capacity(count);
        for _ in 0..count {
            let name = r.str()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let data = r.f32s(shape.iter().product())?;
            stored.insert(name, (shape, data));
        }
        r.finish()?;

        let mut model = FidModel::<f32>::new(config)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .params()
            .named()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        if expected.len() != stored.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                stored.len(),
                expected.len()
            )));
        }
        for ((name, shape), (_, dst)) in expected.iter().zip(model.params_mut().named_mut()) {
            let (s, data) = stored
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if s != shape {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {s:?}, expected {shape:?}"
                )));
            }
            dst.copy_from_slice(data);
        }
        Ok(Checkpoint {
            model,
            tokenizer: Tokenizer::from_vocab(vocab),
        })
    }
}

pub fn save_checkpoint(path: &Path, model: &FidModel<f32>, tokenizer: &Tokenizer) -> Result<()> {
    if tokenizer.len() != model.config().vocab_size {
        return Err(Error::InvalidArgument(format!(
            "tokenizer has {} entries but the model vocabulary is {}",
            tokenizer.len(),
            model.config().vocab_size
        )));
    }
    let ckpt = Checkpoint {
        model: model.clone(),
        tokenizer: tokenizer.clone(),
    };
    binio::write_file(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&binio::read_file(path)?)
}
