//! Byte-level tokenization and calibration windows.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::XorShift64Star;

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
/// 256 byte values plus BOS, EOS and PAD.
pub const VOCAB_SIZE: usize = 259;

/// `[BOS] ++ bytes ++ [EOS]`, one token per byte.
pub fn tokenize_bytes(text: impl AsRef<[u8]>) -> Vec<u32> {
    let bytes = text.as_ref();
    let mut out = Vec::with_capacity(bytes.len() + 2);
    out.push(BOS);
    out.extend(bytes.iter().map(|&b| b as u32));
    out.push(EOS);
    out
}

/// Fixed-length token sequences used for scoring, reconstruction and
/// perplexity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub sequences: Vec<Vec<u32>>,
    pub seq_len: usize,
    pub seed: u64,
    /// SHA-256 of the source file contents.
    pub source_digest: String,
}

impl CalibrationSet {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// The first `n` sequences (all of them if there are fewer).
    pub fn head(&self, n: usize) -> &[Vec<u32>] {
        &self.sequences[..n.min(self.sequences.len())]
    }

    /// Hash over the windows themselves plus the source digest.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.source_digest.as_bytes());
        h.update((self.seq_len as u64).to_le_bytes());
        for s in &self.sequences {
            for t in s {
                h.update(t.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        for s in &self.sequences {
            if let Some(&t) = s.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::TokenOutOfRange { token: t, vocab });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusOptions {
    pub seq_len: usize,
    pub n_sequences: usize,
    pub seed: u64,
    /// Pad with PAD when the stream is shorter than one window.
    pub allow_padding: bool,
    pub vocab_size: usize,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self { seq_len: 128, n_sequences: 32, seed: 0, allow_padding: true, vocab_size: VOCAB_SIZE }
    }
}

/// Reads a corpus file as a token stream. Files ending in `.tok` hold raw
/// little-endian `u32` ids; anything else is UTF-8 text run through
/// [`tokenize_bytes`]. Returns the stream and the file's SHA-256.
pub fn load_token_stream(path: impl AsRef<Path>, vocab_size: usize) -> Result<(Vec<u32>, String)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    let pre_tokenized = path.extension().is_some_and(|e| e == "tok");
    let stream = if pre_tokenized {
        if bytes.len() % 4 != 0 {
            return Err(Error::Corpus(format!(
                "{}: length {} is not a multiple of 4",
                path.display(),
                bytes.len()
            )));
        }
        let ids: Vec<u32> = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some(&t) = ids.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::TokenOutOfRange { token: t, vocab: vocab_size });
        }
        ids
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| Error::Corpus(format!("{}: not UTF-8: {e}", path.display())))?;
        tokenize_bytes(text)
    };
    if stream.is_empty() {
        return Err(Error::Corpus(format!("{} contains no tokens", path.display())));
    }
    Ok((stream, digest))
}

/// Cuts `n_sequences` windows out of a token stream.
///
/// Window starts are drawn uniformly from `0..len-seq_len` by
/// [`XorShift64Star`] seeded with `opts.seed`, so every window is followed
/// by at least one more token of the stream. A stream no longer than one
/// window yields windows at offset 0, PAD-filled when short, or an error
/// when it is short and padding is disabled.
pub fn windows_from_stream(stream: &[u32], opts: &CorpusOptions, source_digest: String) -> Result<CalibrationSet> {
    if opts.seq_len < 2 {
        return Err(Error::Corpus("seq_len must be >= 2".into()));
    }
    if opts.n_sequences == 0 {
        return Err(Error::Corpus("n_sequences must be >= 1".into()));
    }
    if stream.is_empty() {
        return Err(Error::Corpus("empty token stream".into()));
    }
    if let Some(&t) = stream.iter().find(|&&t| t as usize >= opts.vocab_size) {
        return Err(Error::TokenOutOfRange { token: t, vocab: opts.vocab_size });
    }
    let offsets = sample_offsets(stream.len(), opts);
    if stream.len() < opts.seq_len && !opts.allow_padding {
        return Err(Error::Corpus(format!(
            "stream of {} tokens is shorter than one window of {}",
            stream.len(),
            opts.seq_len
        )));
    }
    Ok(CalibrationSet {
        sequences: windows_at(stream, &offsets, opts.seq_len),
        seq_len: opts.seq_len,
        seed: opts.seed,
        source_digest,
    })
}

/// Window start offsets for a stream of `stream_len` tokens: seeded uniform
/// draws from `0..stream_len-seq_len` (all 0 when the stream is no longer
/// than a window).
pub fn sample_offsets(stream_len: usize, opts: &CorpusOptions) -> Vec<usize> {
    if stream_len <= opts.seq_len {
        return vec![0; opts.n_sequences];
    }
    let span = (stream_len - opts.seq_len) as u64;
    let mut rng = XorShift64Star::new(opts.seed);
    (0..opts.n_sequences).map(|_| rng.below(span) as usize).collect()
}

/// Windows of `seq_len` tokens at the given offsets, PAD-filled past the end
/// of the stream.
pub fn windows_at(stream: &[u32], offsets: &[usize], seq_len: usize) -> Vec<Vec<u32>> {
    offsets
        .iter()
        .map(|&start| {
            let end = (start + seq_len).min(stream.len());
            let mut w = stream[start.min(end)..end].to_vec();
            w.resize(seq_len, PAD);
            w
        })
        .collect()
}

pub fn load_corpus(path: impl AsRef<Path>, opts: &CorpusOptions) -> Result<CalibrationSet> {
    let (stream, digest) = load_token_stream(path, opts.vocab_size)?;
    windows_from_stream(&stream, opts, digest)
}
