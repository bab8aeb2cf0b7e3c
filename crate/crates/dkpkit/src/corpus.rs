use std::fs;
use std::path::{Path, PathBuf};

use dkpkit_core::config::TrainConfig;
use dkpkit_core::data::Vocab;

use crate::error::{AppError, AppResult};

/// Token streams for the three splits, encoded with the training vocabulary.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<usize>,
    pub valid: Option<Vec<usize>>,
    pub test: Option<Vec<usize>>,
}

fn read(path: &Path) -> AppResult<String> {
    fs::read_to_string(path).map_err(|e| AppError::io(path, e))
}

fn optional(path: &str) -> Option<PathBuf> {
    (!path.is_empty()).then(|| PathBuf::from(path))
}

impl Corpus {
    /// Reads the splits named in `cfg`. The vocabulary comes from the
    /// training split only; validation and test are optional.
    pub fn load(cfg: &TrainConfig) -> AppResult<Self> {
        let train_path = optional(&cfg.train_path).ok_or_else(|| AppError::Config("no training corpus (`train`) given".into()))?;
        let text = read(&train_path)?;
        let vocab = Vocab::build(&text, cfg.vocab_mode, cfg.min_count)?;
        let train = vocab.encode(&text);
        let encode = |p: &str| -> AppResult<Option<Vec<usize>>> {
            optional(p).map(|p| read(&p).map(|t| vocab.encode(&t))).transpose()
        };
        let valid = encode(&cfg.valid_path)?;
        let test = encode(&cfg.test_path)?;
        Ok(Self { vocab, train, valid, test })
    }
}
