//! Byte-level corpus ingestion and batching.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
/// 256 byte values plus BOS, EOS and PAD.
pub const VOCAB_SIZE: usize = 259;

/// Fraction of the stream, from the end, held out for validation.
pub const VALIDATION_PERCENT: usize = 5;

/// Token ids with a train/validation boundary. The validation split is the
/// trailing 5% of the stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenStream {
    tokens: Vec<usize>,
    train_len: usize,
}

impl TokenStream {
    pub fn from_tokens(tokens: Vec<usize>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= VOCAB_SIZE) {
            return Err(Error::TokenOutOfRange { id, vocab: VOCAB_SIZE });
        }
        let val = tokens.len() * VALIDATION_PERCENT / 100;
        Ok(TokenStream {
            train_len: tokens.len() - val,
            tokens,
        })
    }

    /// Identity tokenization: byte `b` becomes id `b`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_tokens(bytes.iter().map(|&b| b as usize).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn train(&self) -> &[usize] {
        &self.tokens[..self.train_len]
    }

    pub fn validation(&self) -> &[usize] {
        &self.tokens[self.train_len..]
    }

    /// Checks that the training split holds at least one full batch.
    pub fn require_batch(&self, batch: usize, seq: usize) -> Result<()> {
        let need = batch * seq + 1;
        if self.train_len < need {
            return Err(Error::CorpusTooSmall {
                have: self.train_len,
                need,
            });
        }
        Ok(())
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Reads a file, or every file under a directory in sorted path order with
/// an EOS token between files.
pub fn ingest_corpus(path: &Path) -> Result<TokenStream> {
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if !meta.is_dir() {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        return TokenStream::from_bytes(&bytes);
    }
    let mut files = Vec::new();
    collect_files(path, &mut files)?;
    let mut tokens = Vec::new();
    for f in files {
        let bytes = std::fs::read(&f).map_err(|e| Error::io(&f, e))?;
        if bytes.is_empty() {
            continue;
        }
        if !tokens.is_empty() {
            tokens.push(EOS);
        }
        tokens.extend(bytes.iter().map(|&b| b as usize));
    }
    TokenStream::from_tokens(tokens)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub cursor: usize,
}

/// `batch` contiguous windows of `seq` tokens starting at `cursor`, with
/// targets shifted left by one. A window that would run past the end of
/// `stream` restarts at offset 0. The caller must ensure
/// `stream.len() > seq`.
pub fn next_batch(stream: &[usize], batch: usize, seq: usize, cursor: usize) -> Batch {
    assert!(stream.len() > seq, "stream of {} tokens cannot hold a window of {seq}", stream.len());
    let mut inputs = Vec::with_capacity(batch * seq);
    let mut targets = Vec::with_capacity(batch * seq);
    let mut c = cursor;
    for _ in 0..batch {
        if c + seq + 1 > stream.len() {
            c = 0;
        }
        inputs.extend_from_slice(&stream[c..c + seq]);
        targets.extend_from_slice(&stream[c + 1..c + seq + 1]);
        c += seq;
    }
    Batch {
        inputs,
        targets,
        cursor: c,
    }
}

/// Non-overlapping evaluation windows of length `seq` covering every
/// prediction in `stream`. The final short window is padded with [`PAD`],
/// whose targets are ignored by the loss.
pub fn eval_windows(stream: &[usize], seq: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < stream.len() {
        let end = (start + seq).min(stream.len() - 1);
        let mut inputs = stream[start..end].to_vec();
        let mut targets = stream[start + 1..end + 1].to_vec();
        inputs.resize(seq, PAD);
        targets.resize(seq, PAD);
        out.push((inputs, targets));
        start = end;
    }
    out
}

const ONSETS: [&str; 16] = ["b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "w", "st", "th"];
const NUCLEI: [&str; 6] = ["a", "e", "i", "o", "u", "ea"];
const CODAS: [&str; 8] = ["", "", "n", "r", "s", "t", "nd", "ll"];

/// Deterministic English-like text of exactly `len` bytes: words built from
/// syllables, chained by a sparse first-order Markov model over a Zipfian
/// vocabulary, grouped into capitalized sentences and paragraphs.
pub fn synthetic_text(len: usize, seed: u64) -> Vec<u8> {
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Zipf};

    const WORDS: usize = 400;
    const SUCCESSORS: usize = 12;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut lexicon: Vec<String> = Vec::with_capacity(WORDS);
    while lexicon.len() < WORDS {
        let syllables = rng.random_range(1..=3);
        let w: String = (0..syllables)
            .map(|_| {
                let pick = |r: &mut rand_chacha::ChaCha8Rng, xs: &[&'static str]| xs[r.random_range(0..xs.len())];
                format!("{}{}{}", pick(&mut rng, &ONSETS), pick(&mut rng, &NUCLEI), pick(&mut rng, &CODAS))
            })
            .collect();
        if !lexicon.contains(&w) {
            lexicon.push(w);
        }
    }
    let successors: Vec<Vec<usize>> = (0..WORDS)
        .map(|_| (0..SUCCESSORS).map(|_| rng.random_range(0..WORDS)).collect())
        .collect();
    let next = Zipf::new(SUCCESSORS as f64, 1.2).expect("valid zipf");
    let start = Zipf::new(WORDS as f64, 1.0).expect("valid zipf");

    let mut out = Vec::with_capacity(len + 64);
    let mut word = start.sample(&mut rng) as usize - 1;
    let mut sentence_len = 0;
    while out.len() < len {
        let w = lexicon[word].as_bytes();
        if sentence_len == 0 {
            out.push(w[0].to_ascii_uppercase());
            out.extend_from_slice(&w[1..]);
        } else {
            out.extend_from_slice(w);
        }
        sentence_len += 1;
        if sentence_len >= 4 && rng.random_bool(0.15) {
            out.push(if rng.random_bool(0.9) { b'.' } else { b'?' });
            out.extend_from_slice(if rng.random_bool(0.1) { b"\n\n" } else { b" " });
            sentence_len = 0;
            word = start.sample(&mut rng) as usize - 1;
        } else {
            if rng.random_bool(0.05) {
                out.push(b',');
            }
            out.push(b' ');
            word = successors[word][next.sample(&mut rng) as usize - 1];
        }
    }
    out.truncate(len);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_are_ids() {
        assert_eq!(TokenStream::from_bytes(b"abc").unwrap().tokens(), &[97, 98, 99]);
        assert!(matches!(TokenStream::from_bytes(b""), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn split_arithmetic() {
        let s = TokenStream::from_tokens(vec![7; 1 << 20]).unwrap();
        assert_eq!(s.validation().len(), 52428);
        assert_eq!(s.train().len() + s.validation().len(), 1 << 20);
        assert!(s.require_batch(16, 128).is_ok());
        let small = TokenStream::from_bytes(b"tiny corpus").unwrap();
        assert!(matches!(small.require_batch(2, 8), Err(Error::CorpusTooSmall { .. })));
    }

    #[test]
    fn shift_and_wrap() {
        let s = [1, 2, 3, 4, 5];
        let b = next_batch(&s, 1, 4, 0);
        assert_eq!(b.inputs, [1, 2, 3, 4]);
        assert_eq!(b.targets, [2, 3, 4, 5]);
        let again = next_batch(&s, 1, 4, b.cursor);
        assert_eq!(again.inputs, [1, 2, 3, 4]);
        assert_eq!(next_batch(&s, 1, 4, 0), b);
    }

    #[test]
    fn batches_are_contiguous() {
        let s: Vec<usize> = (0..50).collect();
        let b = next_batch(&s, 3, 8, 0);
        assert_eq!(&b.inputs[8..16], &(8..16).collect::<Vec<_>>()[..]);
        assert_eq!(b.cursor, 24);
    }

    #[test]
    fn eval_windows_cover_every_prediction_once() {
        let s: Vec<usize> = (0..11).collect();
        let w = eval_windows(&s, 4);
        assert_eq!(w.len(), 3);
        let targets: Vec<usize> = w.iter().flat_map(|(_, t)| t.iter().copied()).filter(|&t| t != PAD).collect();
        assert_eq!(targets, (1..11).collect::<Vec<_>>());
        assert_eq!(w[2].0, vec![8, 9, PAD, PAD]);
    }

    #[test]
    fn synthetic_text_is_deterministic_ascii() {
        let a = synthetic_text(10_000, 3);
        assert_eq!(a.len(), 10_000);
        assert_eq!(a, synthetic_text(10_000, 3));
        assert_ne!(a, synthetic_text(10_000, 4));
        assert!(a.iter().all(|b| b.is_ascii_lowercase() || b.is_ascii_uppercase() || b" .,?\n".contains(b)));
    }

    #[test]
    fn directory_ingest_is_sorted() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("b.txt"), b"yz").unwrap();
        std::fs::write(dir.path().join("a.txt"), b"x").unwrap();
        let s = ingest_corpus(dir.path()).unwrap();
        assert_eq!(s.tokens(), &[b'x' as usize, EOS, b'y' as usize, b'z' as usize]);
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(ingest_corpus(empty.path()), Err(Error::EmptyCorpus)));
        assert!(matches!(ingest_corpus(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
