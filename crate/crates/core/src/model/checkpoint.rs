use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, SegmentComposition, Transformer};
use crate::error::{Error, Result};
use crate::params::TensorRecord;
use crate::scalar::Scalar;
use crate::textproc::Vocabulary;

const FORMAT: &str = "tham-checkpoint/1";

/// Self-describing model file: config, input composition, vocabulary and
/// every parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub model: ModelConfig,
    pub composition: SegmentComposition,
    pub epoch: usize,
    pub val_ce: Option<f64>,
    pub vocab_hash: String,
    pub param_hash: String,
    pub vocab: Vocabulary,
    pub params: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn new<S: Scalar>(
        model: &Transformer<S>,
        composition: &SegmentComposition,
        vocab: &Vocabulary,
        epoch: usize,
        val_ce: Option<f64>,
    ) -> Self {
        Self {
            format: FORMAT.into(),
            model: model.config.clone(),
            composition: composition.clone(),
            epoch,
            val_ce,
            vocab_hash: vocab.hash(),
            param_hash: model.params.content_hash(),
            vocab: vocab.clone(),
            params: model.params.to_record(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        let text = serde_json::to_string(self)?;
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint and checks its vocabulary hash.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format `{}`", ck.format)));
        }
        if ck.vocab.hash() != ck.vocab_hash {
            return Err(Error::Checkpoint(format!("{}: vocabulary hash mismatch", path.display())));
        }
        Ok(ck)
    }

    /// Fails unless the checkpoint was trained on `vocab`.
    pub fn verify_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if self.vocab_hash != vocab.hash() {
            return Err(Error::Checkpoint("checkpoint vocabulary differs from the corpus vocabulary".into()));
        }
        Ok(())
    }

    /// Rebuilds the model; the parameter hash must match the stored one, so
    /// loading into a narrower scalar than the one trained is rejected.
    pub fn to_model<S: Scalar>(&self) -> Result<Transformer<S>> {
        let mut m = Transformer::<S>::new(self.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        m.params.load_record(&self.params)?;
        if m.params.content_hash() != self.param_hash {
            return Err(Error::Checkpoint("parameter hash mismatch".into()));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let vocab = Vocabulary::build([["a", "b"].as_slice()]).unwrap();
        let cfg = ModelConfig {
            d: 8,
            n_heads: 2,
            n_layers: 1,
            vocab_size: vocab.len(),
            max_positions: 16,
            channel_widths: (2, 2, 1),
            ..ModelConfig::default()
        };
        let m = Transformer::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let ck = Checkpoint::new(&m, &SegmentComposition::full(), &vocab, 3, Some(1.5));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m/3.ckpt");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        let m2: Transformer<f32> = back.to_model().unwrap();
        assert_eq!(m2.params, m.params);
        back.verify_vocab(&vocab).unwrap();
        let other = Vocabulary::build([["a", "c"].as_slice()]).unwrap();
        assert!(back.verify_vocab(&other).is_err());
    }

    #[test]
    fn tampered_file_is_rejected() {
        let vocab = Vocabulary::build([["a"].as_slice()]).unwrap();
        let cfg = ModelConfig {
            d: 4,
            n_heads: 1,
            n_layers: 1,
            vocab_size: vocab.len(),
            max_positions: 8,
            channel_widths: (1, 1, 1),
            ..ModelConfig::default()
        };
        let m = Transformer::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut ck = Checkpoint::new(&m, &SegmentComposition::answer_only(), &vocab, 0, None);
        ck.params[0].data[0] += 1.0;
        assert!(matches!(ck.to_model::<f32>(), Err(Error::Checkpoint(_))));
        ck.vocab_hash = "0".into();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        ck.save(&p).unwrap();
        assert!(Checkpoint::load(&p).is_err());
    }
}
