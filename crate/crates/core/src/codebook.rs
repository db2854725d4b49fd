//! Learnable motion codebook and text-similarity instruction resolution.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::{InstructionId, Vocabulary};

#[derive(Debug, Error)]
pub enum CodebookError {
    #[error("instruction id {id} out of range for codebook of {rows} rows")]
    IndexOutOfRange { id: usize, rows: usize },
    #[error("row {0} is a zero vector")]
    ZeroVector(usize),
    #[error("codebook dimension must be >= 2, got {0}")]
    DimTooSmall(usize),
    #[error("malformed codebook file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Maps text to a fixed-length unit vector.
pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Hashed bag of character trigrams, L2-normalized.
///
/// Words are first mapped through a small table of motion synonyms
/// ("rightward" -> "right", "shut" -> "closed", ...) so that paraphrases
/// share trigrams with the canonical vocabulary wording.
#[derive(Debug, Clone)]
pub struct NgramEmbedder {
    dim: usize,
}

impl Default for NgramEmbedder {
    fn default() -> Self {
        NgramEmbedder { dim: 256 }
    }
}

impl NgramEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0);
        NgramEmbedder { dim }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn canonical_word(word: &str) -> &str {
    match word {
        "rightward" | "rightwards" => "right",
        "leftward" | "leftwards" => "left",
        "up" | "upwards" | "raise" | "lift" => "upward",
        "down" | "downwards" | "lower" => "downward",
        "forwards" | "ahead" => "forward",
        "back" | "backwards" => "backward",
        "shut" | "close" | "closing" | "grasp" | "grip" => "closed",
        "opened" | "opening" | "release" => "open",
        other => other,
    }
}

fn normalize_text(text: &str) -> String {
    let cleaned: String = text.to_lowercase().chars().map(|c| if c.is_alphanumeric() { c } else { ' ' }).collect();
    let words: Vec<&str> = cleaned.split_whitespace().map(canonical_word).collect();
    format!(" {} ", words.join(" "))
}

impl TextEmbedder for NgramEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let chars: Vec<char> = normalize_text(text).chars().collect();
        for gram in chars.windows(3) {
            let s: String = gram.iter().collect();
            v[(fnv1a(s.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Trainable `N x dim` embedding table, one row per instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionCodebook {
    pub vocab_id: String,
    pub dim: usize,
    pub rng_seed: u64,
    /// Row-major `N x dim`.
    pub entries: Vec<f64>,
}

pub fn init_codebook(vocab: &Vocabulary, dim: usize, seed: u64) -> Result<MotionCodebook, CodebookError> {
    if dim < 2 {
        return Err(CodebookError::DimTooSmall(dim));
    }
    let bound = 1.0 / (dim as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = (0..vocab.len() * dim).map(|_| rng.random_range(-bound..bound)).collect();
    Ok(MotionCodebook { vocab_id: vocab.id.clone(), dim, rng_seed: seed, entries })
}

#[derive(Debug, Serialize, Deserialize)]
struct CodebookHeader {
    vocab_id: String,
    dim: usize,
    seed: u64,
    rows: usize,
}

impl MotionCodebook {
    pub fn rows(&self) -> usize {
        self.entries.len() / self.dim
    }

    pub fn lookup(&self, id: InstructionId) -> Result<&[f64], CodebookError> {
        if id.0 >= self.rows() {
            return Err(CodebookError::IndexOutOfRange { id: id.0, rows: self.rows() });
        }
        Ok(&self.entries[id.0 * self.dim..(id.0 + 1) * self.dim])
    }

    pub(crate) fn row_mut(&mut self, id: InstructionId) -> &mut [f64] {
        let d = self.dim;
        &mut self.entries[id.0 * d..(id.0 + 1) * d]
    }

    pub fn similarity(&self) -> Result<Vec<Vec<f64>>, CodebookError> {
        let rows: Vec<Vec<f64>> = self.entries.chunks(self.dim).map(<[f64]>::to_vec).collect();
        similarity_matrix(&rows)
    }

    /// JSON header line followed by one whitespace-separated row per line.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), CodebookError> {
        let header =
            CodebookHeader { vocab_id: self.vocab_id.clone(), dim: self.dim, seed: self.rng_seed, rows: self.rows() };
        writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for row in self.entries.chunks(self.dim) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self, CodebookError> {
        let mut lines = r.lines();
        let header_line = lines.next().ok_or_else(|| CodebookError::Malformed("empty file".into()))??;
        let header: CodebookHeader =
            serde_json::from_str(&header_line).map_err(|e| CodebookError::Malformed(e.to_string()))?;
        let mut entries = Vec::with_capacity(header.rows * header.dim);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
            let row = row.map_err(|e| CodebookError::Malformed(format!("bad float: {e}")))?;
            if row.len() != header.dim {
                return Err(CodebookError::Malformed(format!("row of {} values, expected {}", row.len(), header.dim)));
            }
            entries.extend(row);
        }
        if entries.len() != header.rows * header.dim {
            return Err(CodebookError::Malformed(format!(
                "{} values, expected {}",
                entries.len(),
                header.rows * header.dim
            )));
        }
        Ok(MotionCodebook { vocab_id: header.vocab_id, dim: header.dim, rng_seed: header.seed, entries })
    }
}

/// Cosine similarity between every pair of rows.
pub fn similarity_matrix(vectors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, CodebookError> {
    let norms: Vec<f64> = vectors.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(CodebookError::ZeroVector(i));
    }
    let n = vectors.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        out[i][i] = 1.0;
        for j in i + 1..n {
            let dot: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
            let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            out[i][j] = c;
            out[j][i] = c;
        }
    }
    Ok(out)
}

pub fn mean_off_diagonal(sim: &[Vec<f64>]) -> f64 {
    let n = sim.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for (i, row) in sim.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                total += v;
            }
        }
    }
    total / (n * (n - 1)) as f64
}

/// Embeddings of every canonical vocabulary text.
pub fn embed_vocabulary(vocab: &Vocabulary, embedder: &dyn TextEmbedder) -> Vec<Vec<f64>> {
    vocab.texts().map(|t| embedder.embed(t)).collect()
}

/// Best-matching vocabulary entry and its cosine score; exact text matches
/// score 1.
pub fn nearest_instruction(vocab: &Vocabulary, text: &str, embedder: &dyn TextEmbedder) -> (InstructionId, f64) {
    if let Some(id) = vocab.find_text(text) {
        return (id, 1.0);
    }
    let q = embedder.embed(text);
    let mut best = (InstructionId(0), f64::NEG_INFINITY);
    for (i, t) in vocab.texts().enumerate() {
        let s = cosine(&q, &embedder.embed(t));
        // strict comparison keeps the lowest id on ties
        if s > best.1 {
            best = (InstructionId(i), s);
        }
    }
    best
}

/// Resolves free-form instruction text to a vocabulary id. Total: any
/// non-empty text maps to some id.
pub fn resolve(cb: &MotionCodebook, vocab: &Vocabulary, text: &str, embedder: &dyn TextEmbedder) -> InstructionId {
    debug_assert_eq!(cb.vocab_id, vocab.id);
    nearest_instruction(vocab, text, embedder).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::{build_vocabulary, AnnotationConfig, VocabMode};

    fn vocab() -> Vocabulary {
        build_vocabulary(&AnnotationConfig::default(), VocabMode::Combined).unwrap()
    }

    #[test]
    fn init_is_seeded_and_shaped() {
        let v = vocab();
        let a = init_codebook(&v, 32, 7).unwrap();
        let b = init_codebook(&v, 32, 7).unwrap();
        let c = init_codebook(&v, 32, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows(), 37);
        assert_eq!(a.entries.len(), 37 * 32);
        assert!(a.entries.iter().zip(&c.entries).any(|(x, y)| x != y));
        let bound = 1.0 / 32f64.sqrt();
        assert!(a.entries.iter().all(|x| x.abs() <= bound));
        assert!(init_codebook(&v, 1, 0).is_err());
    }

    #[test]
    fn lookup_returns_rows() {
        let cb = init_codebook(&vocab(), 8, 1).unwrap();
        assert_eq!(cb.lookup(InstructionId(0)).unwrap(), &cb.entries[..8]);
        assert_eq!(cb.lookup(InstructionId(3)).unwrap(), cb.lookup(InstructionId(3)).unwrap());
        assert!(matches!(cb.lookup(InstructionId(37)), Err(CodebookError::IndexOutOfRange { .. })));
    }

    #[test]
    fn embedder_is_unit_norm_and_deterministic() {
        let e = NgramEmbedder::default();
        let a = e.embed("move arm right with gripper closed");
        assert_eq!(a, e.embed("move arm right with gripper closed"));
        let n: f64 = a.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resolve_is_identity_on_canonical_texts() {
        let v = vocab();
        let cb = init_codebook(&v, 8, 1).unwrap();
        let e = NgramEmbedder::default();
        for entry in &v.entries {
            assert_eq!(resolve(&cb, &v, &entry.text, &e), entry.id);
        }
    }

    #[test]
    fn resolve_paraphrase_matches_brute_force() {
        let v = vocab();
        let cb = init_codebook(&v, 8, 1).unwrap();
        let e = NgramEmbedder::default();
        let text = "shift the arm rightward keeping the gripper shut";
        // brute force: cosine against every canonical text, first maximum wins
        let q = e.embed(text);
        let scores: Vec<f64> = v.texts().map(|t| cosine(&q, &e.embed(t))).collect();
        let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let expected = scores.iter().position(|&s| s == best).unwrap();
        let got = resolve(&cb, &v, text, &e);
        assert_eq!(got.0, expected);
        assert_eq!(v.text(got), "move arm right with gripper closed");
    }

    #[test]
    fn resolve_is_total() {
        let v = vocab();
        let cb = init_codebook(&v, 8, 1).unwrap();
        let e = NgramEmbedder::default();
        for text in ["x", "?", "zzzzzz"] {
            assert!(v.contains(resolve(&cb, &v, text, &e)));
        }
    }

    #[test]
    fn similarity_matrix_cases() {
        let same = vec![vec![1.0, 2.0]; 3];
        let s = similarity_matrix(&same).unwrap();
        assert!(s.iter().flatten().all(|v| (v - 1.0).abs() < 1e-12));
        let eye = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let s = similarity_matrix(&eye).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(s[i][j], if i == j { 1.0 } else { 0.0 });
            }
        }
        assert!(matches!(similarity_matrix(&[vec![0.0, 0.0]]), Err(CodebookError::ZeroVector(0))));
    }

    #[test]
    fn codebook_file_round_trips() {
        let cb = init_codebook(&vocab(), 4, 3).unwrap();
        let mut buf = Vec::new();
        cb.write_to(&mut buf).unwrap();
        let back = MotionCodebook::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, cb);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cosine_is_scale_invariant(rows in proptest::collection::vec(proptest::collection::vec(0.1f64..5.0, 4), 2..6), c in 0.01f64..100.0) {
                let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x * c).collect()).collect();
                let a = similarity_matrix(&rows).unwrap();
                let b = similarity_matrix(&scaled).unwrap();
                for (ra, rb) in a.iter().zip(&b) {
                    for (x, y) in ra.iter().zip(rb) {
                        prop_assert!((x - y).abs() < 1e-12);
                    }
                }
                for i in 0..a.len() {
                    for j in 0..a.len() {
                        prop_assert_eq!(a[i][j], a[j][i]);
                        prop_assert!((-1.0..=1.0).contains(&a[i][j]));
                    }
                }
            }
        }
    }
}
