//! Checkpoint directories: `encoder.nts`, `lm.nts`, `vocab.txt`, `meta.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderDims, EncoderParams};
use crate::error::{Error, Result};
use crate::fcn::io::write_atomic;
use crate::params::{load_params_into, save_params};
use crate::toylm::{LmConfig, LmParams, Tokenizer};

pub const ENCODER_FILE: &str = "encoder.nts";
pub const LM_FILE: &str = "lm.nts";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub step: usize,
    pub config_hash: String,
    pub lm: LmConfig,
    pub encoder: Option<EncoderDims>,
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tokenizer: Tokenizer,
    pub lm: LmParams,
    pub encoder: Option<EncoderParams>,
}

/// Hex SHA-256 of any serializable configuration.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let json = serde_json::to_vec(config).map_err(|e| Error::Config(e.to_string()))?;
    let digest = Sha256::digest(&json);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if ckpt.encoder.as_ref().map(EncoderParams::dims) != ckpt.meta.encoder {
        return Err(Error::InvalidInput(
            "checkpoint metadata disagrees with encoder shape".into(),
        ));
    }
    save_params(&ckpt.lm, &dir.join(LM_FILE))?;
    if let Some(enc) = &ckpt.encoder {
        save_params(enc, &dir.join(ENCODER_FILE))?;
    }
    ckpt.tokenizer.save(&dir.join(VOCAB_FILE))?;
    let meta = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(&ckpt.meta)
        .map_err(|e| Error::format(&meta, e.to_string()))?;
    write_atomic(&meta, json.as_bytes())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let tokenizer = Tokenizer::load(&dir.join(VOCAB_FILE))?;
    if tokenizer.len() != meta.lm.vocab {
        return Err(Error::format(
            &meta_path,
            format!(
                "vocabulary has {} words, model expects {}",
                tokenizer.len(),
                meta.lm.vocab
            ),
        ));
    }
    let mut lm = LmParams::init(meta.lm, 0)?;
    load_params_into(&mut lm, &dir.join(LM_FILE))?;
    let encoder = match meta.encoder {
        Some(dims) => {
            let mut enc = EncoderParams::init(dims, 0);
            load_params_into(&mut enc, &dir.join(ENCODER_FILE))?;
            Some(enc)
        }
        None => None,
    };
    Ok(Checkpoint {
        meta,
        tokenizer,
        lm,
        encoder,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_and_without_encoder() {
        let dir = tempfile::tempdir().unwrap();
        let tok = Tokenizer::from_words(["yes", "no"]);
        let cfg = LmConfig {
            vocab: tok.len(),
            d_model: 8,
            heads: 2,
            blocks: 1,
            ff_hidden: 8,
            max_len: 32,
        };
        let lm = LmParams::init(cfg, 1).unwrap();
        let dims = EncoderDims {
            rois: 4,
            gcn_hidden: 3,
            proj_hidden: 5,
            model: 8,
        };
        let enc = EncoderParams::init(dims, 2);
        let ckpt = Checkpoint {
            meta: CheckpointMeta {
                stage: "stage1".into(),
                step: 7,
                config_hash: config_hash(&(cfg, dims)).unwrap(),
                lm: cfg,
                encoder: Some(dims),
                tau: 0.5,
            },
            tokenizer: tok.clone(),
            lm: lm.clone(),
            encoder: Some(enc.clone()),
        };
        save_checkpoint(dir.path(), &ckpt).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.meta, ckpt.meta);
        assert_eq!(back.lm, lm);
        assert_eq!(back.encoder, Some(enc));
        assert_eq!(back.meta.config_hash.len(), 64);

        let other = tempfile::tempdir().unwrap();
        let bare = Checkpoint {
            meta: CheckpointMeta {
                encoder: None,
                ..ckpt.meta.clone()
            },
            encoder: None,
            ..ckpt
        };
        save_checkpoint(other.path(), &bare).unwrap();
        assert!(load_checkpoint(other.path()).unwrap().encoder.is_none());
        assert!(!other.path().join(ENCODER_FILE).exists());
    }
}
