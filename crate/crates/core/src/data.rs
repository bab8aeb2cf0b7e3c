//! Vocabulary construction and contiguous BPTT batching.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenMode {
    Char,
    Word,
}

impl TokenMode {
    pub fn name(self) -> &'static str {
        match self {
            TokenMode::Char => "char",
            TokenMode::Word => "word",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "char" => Some(TokenMode::Char),
            "word" => Some(TokenMode::Word),
            _ => None,
        }
    }
}

/// Splits text into tokens. Word mode emits `<eos>` for every newline.
pub fn tokenize(text: &str, mode: TokenMode) -> Vec<String> {
    match mode {
        TokenMode::Char => text.chars().map(|c| c.to_string()).collect(),
        TokenMode::Word => {
            let mut out = Vec::new();
            for line in text.split_inclusive('\n') {
                out.extend(line.split_whitespace().map(str::to_string));
                if line.ends_with('\n') {
                    out.push(EOS.to_string());
                }
            }
            out
        }
    }
}

/// Token/id bijection. Known tokens are ordered by descending frequency,
/// then lexicographically; the unknown token takes the last id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    mode: TokenMode,
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
    unk: usize,
}

impl Vocab {
    pub fn build(text: &str, mode: TokenMode, min_count: usize) -> Result<Self> {
        let tokens = tokenize(text, mode);
        if tokens.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in &tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
        let mut known: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count.max(1) && t != UNK)
            .collect();
        known.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut id_to_token: Vec<String> = known.into_iter().map(|(t, _)| t.to_string()).collect();
        let unk = id_to_token.len();
        id_to_token.push(UNK.to_string());
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Self {
            mode,
            token_to_id,
            id_to_token,
            unk,
        })
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn unk_id(&self) -> usize {
        self.unk
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(self.unk)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text, self.mode).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            let tok = self.token(id).unwrap_or(UNK);
            match self.mode {
                TokenMode::Char => out.push_str(tok),
                TokenMode::Word => {
                    if tok == EOS {
                        out.push('\n');
                        continue;
                    }
                    if i > 0 && !out.is_empty() && !out.ends_with('\n') {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        out
    }
}

/// `batch × len` token windows; `targets` are `inputs` shifted by one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub len: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Batch {
    pub fn input(&self, b: usize, t: usize) -> usize {
        self.inputs[b * self.len + t]
    }

    pub fn target(&self, b: usize, t: usize) -> usize {
        self.targets[b * self.len + t]
    }
}

/// Splits a token stream into `batch` contiguous rows and walks them in
/// `bptt`-length windows, so row `b` of consecutive batches continues the
/// same text. Tokens past `batch · ⌊n / batch⌋` are dropped.
#[derive(Clone, Debug)]
pub struct BatchIterator {
    data: Vec<usize>,
    batch: usize,
    row_len: usize,
    bptt: usize,
    cursor: usize,
}

impl BatchIterator {
    pub fn new(stream: &[usize], batch: usize, bptt: usize) -> Result<Self> {
        if batch == 0 || bptt == 0 {
            return Err(Error::InvalidArgument("batch size and bptt must be positive".into()));
        }
        let row_len = stream.len() / batch;
        if row_len < 2 {
            return Err(Error::InvalidArgument(alloc::format!(
                "{} tokens cannot fill {batch} rows of at least two tokens",
                stream.len()
            )));
        }
        Ok(Self {
            data: stream[..row_len * batch].to_vec(),
            batch,
            row_len,
            bptt,
            cursor: 0,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Number of batches per epoch.
    pub fn batches_per_epoch(&self) -> usize {
        (self.row_len - 1).div_ceil(self.bptt)
    }

    /// Tokens predicted per epoch.
    pub fn targets_per_epoch(&self) -> usize {
        (self.row_len - 1) * self.batch
    }

    /// Next window, or `None` once per epoch at its end. The call after
    /// `None` starts the next epoch from the beginning.
    pub fn next_batch(&mut self) -> Option<Batch> {
        if self.cursor + 1 >= self.row_len {
            self.cursor = 0;
            return None;
        }
        let len = self.bptt.min(self.row_len - 1 - self.cursor);
        let mut inputs = Vec::with_capacity(self.batch * len);
        let mut targets = Vec::with_capacity(self.batch * len);
        for b in 0..self.batch {
            let row = &self.data[b * self.row_len..(b + 1) * self.row_len];
            inputs.extend_from_slice(&row[self.cursor..self.cursor + len]);
            targets.extend_from_slice(&row[self.cursor + 1..self.cursor + len + 1]);
        }
        self.cursor += len;
        Some(Batch {
            batch: self.batch,
            len,
            inputs,
            targets,
        })
    }

    pub fn rewind(&mut self) {
        self.cursor = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn char_vocab_orders_by_frequency() {
        let v = Vocab::build("aba", TokenMode::Char, 1).unwrap();
        assert_eq!(v.tokens(), &["a", "b", UNK]);
        assert_eq!(v.len(), 3);
        assert_eq!(v.id("z"), v.unk_id());
    }

    #[test]
    fn word_vocab_min_count() {
        let v = Vocab::build("a a b", TokenMode::Word, 2).unwrap();
        assert_eq!(v.tokens(), &["a", UNK]);
        assert_eq!(v.encode("a b"), vec![0, v.unk_id()]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = Vocab::build("cab", TokenMode::Char, 1).unwrap();
        assert_eq!(v.tokens(), &["a", "b", "c", UNK]);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert_eq!(Vocab::build("", TokenMode::Char, 1), Err(Error::EmptyCorpus));
        assert_eq!(Vocab::build("  \t", TokenMode::Word, 1), Err(Error::EmptyCorpus));
    }

    #[test]
    fn round_trip_in_vocab_text() {
        let text = "the quick brown fox\njumps over the lazy dog\n";
        for mode in [TokenMode::Char, TokenMode::Word] {
            let v = Vocab::build(text, mode, 1).unwrap();
            assert_eq!(v.decode(&v.encode(text)), text);
        }
    }

    #[test]
    fn contiguous_batches() {
        let stream: Vec<usize> = (0..10).collect();
        let mut it = BatchIterator::new(&stream, 2, 2).unwrap();
        let b = it.next_batch().unwrap();
        assert_eq!(b.inputs, vec![0, 1, 5, 6]);
        assert_eq!(b.targets, vec![1, 2, 6, 7]);
        let b = it.next_batch().unwrap();
        assert_eq!(b.inputs, vec![2, 3, 7, 8]);
        assert_eq!(b.targets, vec![3, 4, 8, 9]);
        assert_eq!(it.next_batch(), None);
        // next epoch starts over
        assert_eq!(it.next_batch().unwrap().inputs, vec![0, 1, 5, 6]);
    }

    #[test]
    fn end_marker_once_per_epoch() {
        let stream: Vec<usize> = (0..23).collect();
        let mut it = BatchIterator::new(&stream, 3, 4).unwrap();
        let mut seen = 0;
        while it.next_batch().is_some() {
            seen += 1;
        }
        assert_eq!(seen, it.batches_per_epoch());
        assert!(it.next_batch().is_some());
    }

    #[test]
    fn rows_reassemble_stream() {
        let stream: Vec<usize> = (0..103).collect();
        let (batch, bptt) = (4, 7);
        let mut it = BatchIterator::new(&stream, batch, bptt).unwrap();
        let mut rows = vec![Vec::new(); batch];
        let mut last_targets = vec![0; batch];
        while let Some(b) = it.next_batch() {
            for (r, row) in rows.iter_mut().enumerate() {
                for t in 0..b.len {
                    row.push(b.input(r, t));
                    assert_eq!(b.target(r, t), b.input(r, t) + 1);
                }
                last_targets[r] = b.target(r, b.len - 1);
            }
        }
        let row_len = 103 / batch;
        for (r, row) in rows.iter_mut().enumerate() {
            row.push(last_targets[r]);
            assert_eq!(row.as_slice(), &stream[r * row_len..(r + 1) * row_len]);
        }
    }
}
