//! Byte vocabulary, windowing into batches, and corpus manifests.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 320;
pub const BOS_ID: u32 = 256;
pub const PAD_ID: u32 = 257;

/// 256 byte ids followed by 64 sentinels, of which only `<bos>` and
/// `<pad>` are used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab;

impl Vocab {
    pub fn size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn is_sentinel(&self, id: u32) -> bool {
        (256..VOCAB_SIZE as u32).contains(&id)
    }
}

/// `<bos>` followed by data bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ByteSequence {
    pub ids: Vec<u32>,
}

impl ByteSequence {
    /// Number of data positions `N`.
    pub fn n(&self) -> usize {
        self.ids.len() - 1
    }
}

pub fn encode(raw: &[u8]) -> ByteSequence {
    let mut ids = Vec::with_capacity(raw.len() + 1);
    ids.push(BOS_ID);
    ids.extend(raw.iter().map(|&b| b as u32));
    ByteSequence { ids }
}

/// Data bytes of a sequence; sentinel ids are dropped.
pub fn decode(seq: &ByteSequence) -> Vec<u8> {
    seq.ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect()
}

/// Equal-length windows; short windows are padded and their padded
/// targets carry zero weight.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub sequences: Vec<ByteSequence>,
    /// `targets[i][j]` is the id after `sequences[i].ids[j]`, or `<pad>`.
    pub targets: Vec<Vec<u32>>,
    /// Number of real data bytes per window.
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Unpadded data bytes of window `i`.
    pub fn data(&self, i: usize) -> Vec<u8> {
        self.sequences[i].ids[1..=self.lengths[i]]
            .iter()
            .map(|&id| id as u8)
            .collect()
    }

    pub fn windows(&self) -> Vec<Vec<u8>> {
        (0..self.len()).map(|i| self.data(i)).collect()
    }

    /// Number of targets that count toward the loss.
    pub fn target_count(&self) -> usize {
        self.targets
            .iter()
            .map(|t| t.iter().filter(|&&id| id != PAD_ID).count())
            .sum()
    }
}

/// Non-overlapping `seq_len`-byte windows of `corpus`, shuffled by `seed`.
pub fn windows(corpus: &[u8], seq_len: usize, seed: u64) -> Result<Vec<&[u8]>> {
    if seq_len < 2 {
        return Err(Error::invalid("make_batches", "seq_len must be >= 2"));
    }
    let mut w: Vec<&[u8]> = corpus.chunks(seq_len).collect();
    w.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(w)
}

pub fn make_batches(corpus: &[u8], seq_len: usize, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::invalid("make_batches", "batch_size must be >= 1"));
    }
    let w = windows(corpus, seq_len, seed)?;
    Ok(w.chunks(batch_size).map(|c| batch_of(c, seq_len)).collect())
}

pub fn batch_of(windows: &[&[u8]], seq_len: usize) -> Batch {
    let mut sequences = Vec::with_capacity(windows.len());
    let mut targets = Vec::with_capacity(windows.len());
    let mut lengths = Vec::with_capacity(windows.len());
    for w in windows {
        let mut seq = encode(w);
        seq.ids.resize(seq_len + 1, PAD_ID);
        let mut t: Vec<u32> = seq.ids[1..].to_vec();
        t.push(PAD_ID);
        sequences.push(seq);
        targets.push(t);
        lengths.push(w.len());
    }
    Batch {
        sequences,
        targets,
        lengths,
    }
}

/// Paths listed in a manifest, resolved against the manifest's directory.
/// Blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| base.join(l))
        .collect())
}

pub fn read_files(paths: &[PathBuf]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(std::fs::read(p).map_err(|e| Error::io(p, e))?);
    }
    Ok(out)
}

/// Evaluation category of a file: its parent directory's name.
pub fn category(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_examples() {
        assert_eq!(encode(b"Hi").ids, vec![256, 72, 105]);
        assert_eq!(encode(b"").ids, vec![256]);
        assert_eq!(encode(&[0, 255]).ids, vec![256, 0, 255]);
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode(&ByteSequence { ids: vec![256, 72, 105] }), b"Hi");
        assert_eq!(decode(&ByteSequence { ids: vec![256] }), b"");
        assert_eq!(decode(&ByteSequence { ids: vec![256, 72, 257, 105] }), b"Hi");
    }

    #[test]
    fn window_examples() {
        let b = make_batches(&[7u8; 16], 8, 4, 0).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].lengths, vec![8, 8]);

        let mut b = make_batches(&[7u8; 10], 8, 4, 0).unwrap();
        b[0].lengths.sort();
        assert_eq!(b[0].lengths, vec![2, 8]);
        assert!(make_batches(&[], 8, 4, 0).unwrap().is_empty());
        assert!(make_batches(b"abc", 1, 4, 0).is_err());
    }

    #[test]
    fn padded_targets() {
        let b = batch_of(&[b"ab"], 4);
        assert_eq!(b.sequences[0].ids, vec![256, 97, 98, 257, 257]);
        assert_eq!(b.targets[0], vec![97, 98, 257, 257, 257]);
        assert_eq!(b.data(0), b"ab");
    }

    #[test]
    fn manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("text")).unwrap();
        std::fs::write(dir.path().join("text/a.txt"), b"hello").unwrap();
        std::fs::write(dir.path().join("m.txt"), "# comment\ntext/a.txt  # trailing\n\n").unwrap();
        let paths = read_manifest(&dir.path().join("m.txt")).unwrap();
        assert_eq!(paths, vec![dir.path().join("text/a.txt")]);
        assert_eq!(read_files(&paths).unwrap(), b"hello");
        assert_eq!(category(&paths[0]), "text");
        assert!(read_manifest(&dir.path().join("missing")).is_err());
    }
}
