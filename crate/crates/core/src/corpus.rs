//! Byte-level tokenizer, document loading, and a synthetic text generator.
//!
//! The tokenizer is deliberately trivial: four reserved ids followed by the
//! 256 raw byte values. That keeps the vocabulary fixed at 260 and makes
//! every UTF-8 file a valid corpus with no preprocessing step.

use crate::error::{Error, Result};
use crate::rng::{derive, mix, unit_f32, RootRng, Stream};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
/// Byte value b encodes as token id b + BYTE_OFFSET.
pub const BYTE_OFFSET: u32 = 4;
pub const VOCAB_SIZE: usize = 260;

pub fn is_special(id: u32) -> bool {
    id < BYTE_OFFSET
}

/// Encodes one document into a fixed-length sequence:
/// `[CLS] byte_0 .. byte_{k-1} [SEP] [PAD]*` with the byte span truncated to
/// `seq_len - 2`. Returns the ids and a parallel pad flag vector.
pub fn encode_doc(text: &str, seq_len: usize) -> (Vec<u32>, Vec<bool>) {
    assert!(seq_len >= 2, "sequence too short for [CLS] and [SEP]");
    let mut ids = Vec::with_capacity(seq_len);
    ids.push(CLS_ID);
    for &b in text.as_bytes().iter().take(seq_len - 2) {
        ids.push(u32::from(b) + BYTE_OFFSET);
    }
    ids.push(SEP_ID);
    let mut pad = vec![false; ids.len()];
    while ids.len() < seq_len {
        ids.push(PAD_ID);
        pad.push(true);
    }
    (ids, pad)
}

/// Inverse of [`encode_doc`] for diagnostics: drops special tokens and maps
/// the rest back to bytes. Lossy only through truncation.
pub fn decode(ids: &[u32]) -> Vec<u8> {
    ids.iter()
        .filter(|&&id| id >= BYTE_OFFSET)
        .map(|&id| (id - BYTE_OFFSET) as u8)
        .collect()
}

/// A set of documents. On disk a corpus is a UTF-8 file with documents
/// separated by blank lines; whitespace-only documents are dropped.
pub struct Corpus {
    docs: Vec<String>,
}

impl Corpus {
    pub fn from_text(text: &str) -> Result<Self> {
        let docs: Vec<String> = text
            .split("\n\n")
            .map(|d| d.trim_matches('\n').to_string())
            .filter(|d| !d.trim().is_empty())
            .collect();
        if docs.is_empty() {
            return Err(Error::data("corpus contains no non-empty documents"));
        }
        Ok(Self { docs })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn doc(&self, i: usize) -> &str {
        &self.docs[i]
    }

    /// Samples `batch` documents with replacement and packs them into a
    /// flat `[batch * seq_len]` id buffer plus pad flags. Draws come from
    /// the Data stream at the given step, so batch composition is a pure
    /// function of (seed, step).
    pub fn sample_batch(
        &self,
        batch: usize,
        seq_len: usize,
        root: &RootRng,
        step: u64,
    ) -> (Vec<u32>, Vec<bool>) {
        let mut rng = root.stream(Stream::Data, step, 0);
        let mut ids = Vec::with_capacity(batch * seq_len);
        let mut pad = Vec::with_capacity(batch * seq_len);
        for _ in 0..batch {
            let (i, p) = encode_doc(&self.docs[rng.index(self.docs.len())], seq_len);
            ids.extend(i);
            pad.extend(p);
        }
        (ids, pad)
    }
}

/// Alphabet for the synthetic generator: sixteen common letters plus space.
pub const ALPHABET: &[u8] = b"etaoinshrdlucmfw ";

const SALT_WEIGHT: u64 = 0x00c0_ffee;

/// Unnormalized transition weight of the order-2 chain: probability of
/// emitting `c` after the bigram `(a, b)` is `weight(a,b,c)` over the row
/// sum. Weights live in [1, 2), which keeps every transition possible and
/// the chain fast-mixing.
pub fn transition_weight(seed: u64, a: usize, b: usize, c: usize) -> f64 {
    let state = (a * ALPHABET.len() + b) as u64;
    let key = derive(derive(seed ^ SALT_WEIGHT, state), c as u64);
    1.0 + f64::from(unit_f32(mix(key)))
}

/// Row-stochastic transition table: `p[(a*A+b)*A + c]` is the probability
/// of `c` given preceding bigram `(a, b)`.
fn transition_table(seed: u64) -> Vec<f64> {
    let a_n = ALPHABET.len();
    let mut p = vec![0.0; a_n * a_n * a_n];
    for a in 0..a_n {
        for b in 0..a_n {
            let row = (a * a_n + b) * a_n;
            let mut sum = 0.0;
            for c in 0..a_n {
                let w = transition_weight(seed, a, b, c);
                p[row + c] = w;
                sum += w;
            }
            for c in 0..a_n {
                p[row + c] /= sum;
            }
        }
    }
    p
}

/// Stationary distribution over bigram states by power iteration.
fn stationary(p: &[f64]) -> Vec<f64> {
    let a_n = ALPHABET.len();
    let states = a_n * a_n;
    let mut pi = vec![1.0 / states as f64; states];
    let mut next = vec![0.0; states];
    for _ in 0..400 {
        next.iter_mut().for_each(|x| *x = 0.0);
        for (s, &mass) in pi.iter().enumerate() {
            let b = s % a_n;
            let row = s * a_n;
            for c in 0..a_n {
                next[b * a_n + c] += mass * p[row + c];
            }
        }
        let diff: f64 = pi.iter().zip(&next).map(|(x, y)| (x - y).abs()).sum();
        std::mem::swap(&mut pi, &mut next);
        if diff < 1e-14 {
            break;
        }
    }
    pi
}

fn cdf_pick(weights: &[f64], u: f64) -> usize {
    let total: f64 = weights.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if acc > target {
            return i;
        }
    }
    weights.len() - 1
}

/// Generates `n_docs` single-line documents whose lengths are uniform in
/// `len_range` (inclusive), separated by blank lines. Text is a walk of a
/// seeded order-2 Markov chain over [`ALPHABET`]; the opening bigram of
/// each document is drawn from the chain's stationary distribution.
pub fn generate(n_docs: usize, len_range: (usize, usize), seed: u64) -> Result<String> {
    let (lo, hi) = len_range;
    if n_docs == 0 || lo == 0 || lo > hi {
        return Err(Error::config(format!(
            "generator wants n_docs >= 1 and 1 <= min_len <= max_len, got {n_docs} docs, lengths {lo}..={hi}"
        )));
    }
    let a_n = ALPHABET.len();
    let p = transition_table(seed);
    let pi = stationary(&p);
    let root = RootRng::new(seed);
    let mut out = String::with_capacity(n_docs * (hi + 2));
    for doc in 0..n_docs {
        let mut rng = root.stream(Stream::Data, doc as u64, 0);
        let len = lo + rng.index(hi - lo + 1);
        let start = cdf_pick(&pi, rng.uniform_f64());
        let (mut a, mut b) = (start / a_n, start % a_n);
        out.push(ALPHABET[a] as char);
        if len > 1 {
            out.push(ALPHABET[b] as char);
        }
        for _ in 2..len {
            let row = (a * a_n + b) * a_n;
            let c = cdf_pick(&p[row..row + a_n], rng.uniform_f64());
            out.push(ALPHABET[c] as char);
            a = b;
            b = c;
        }
        out.push('\n');
        if doc + 1 < n_docs {
            out.push('\n');
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_shapes_and_specials() {
        let (ids, pad) = encode_doc("hi", 6);
        assert_eq!(ids, vec![CLS_ID, u32::from(b'h') + 4, u32::from(b'i') + 4, SEP_ID, PAD_ID, PAD_ID]);
        assert_eq!(pad, vec![false, false, false, false, true, true]);
    }

    #[test]
    fn encode_truncates_long_docs() {
        let (ids, pad) = encode_doc("abcdefgh", 5);
        assert_eq!(ids.len(), 5);
        assert_eq!(ids[0], CLS_ID);
        assert_eq!(ids[4], SEP_ID);
        assert!(pad.iter().all(|&p| !p));
        assert_eq!(decode(&ids), b"abc");
    }

    #[test]
    fn decode_round_trips() {
        let (ids, _) = encode_doc("caf\u{e9}", 32);
        assert_eq!(decode(&ids), "caf\u{e9}".as_bytes());
    }

    #[test]
    fn all_ids_fit_vocab() {
        let text: String = (0u8..=255).map(|b| b as char).collect();
        let (ids, _) = encode_doc(&text, 600);
        assert!(ids.iter().all(|&id| (id as usize) < VOCAB_SIZE));
        assert_eq!(decode(&ids), text.as_bytes());
    }

    #[test]
    fn corpus_splits_on_blank_lines() {
        let c = Corpus::from_text("first doc\n\nsecond doc\n\n\n\nthird\n").unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.doc(0), "first doc");
        assert_eq!(c.doc(2), "third");
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(Corpus::from_text("\n\n  \n\n").is_err());
    }

    #[test]
    fn batches_are_reproducible_and_step_dependent() {
        let c = Corpus::from_text("aaa\n\nbbb\n\nccc\n\nddd").unwrap();
        let root = RootRng::new(7);
        let (i1, p1) = c.sample_batch(4, 8, &root, 3);
        let (i2, p2) = c.sample_batch(4, 8, &root, 3);
        let (i3, _) = c.sample_batch(4, 8, &root, 4);
        assert_eq!(i1, i2);
        assert_eq!(p1, p2);
        assert_ne!(i1, i3);
        assert_eq!(i1.len(), 32);
    }

    #[test]
    fn generator_is_deterministic_and_counts_docs() {
        let a = generate(100, (8, 40), 42).unwrap();
        let b = generate(100, (8, 40), 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate(100, (8, 40), 43).unwrap());
        let c = Corpus::from_text(&a).unwrap();
        assert_eq!(c.len(), 100);
        for i in 0..c.len() {
            let d = c.doc(i);
            assert!(d.len() >= 8 && d.len() <= 40, "doc {i} has length {}", d.len());
            assert!(d.bytes().all(|ch| ALPHABET.contains(&ch)));
        }
    }

    #[test]
    fn generator_rejects_bad_args() {
        assert!(generate(0, (5, 10), 1).is_err());
        assert!(generate(3, (0, 10), 1).is_err());
        assert!(generate(3, (10, 5), 1).is_err());
    }

    /// Power iteration written independently of the generator's: iterates
    /// the full state-to-state matrix rather than streaming rows.
    fn reference_stationary(seed: u64) -> Vec<f64> {
        let a_n = ALPHABET.len();
        let states = a_n * a_n;
        let mut m = vec![0.0f64; states * states];
        for a in 0..a_n {
            for b in 0..a_n {
                let mut row: Vec<f64> = (0..a_n).map(|c| transition_weight(seed, a, b, c)).collect();
                let sum: f64 = row.iter().sum();
                row.iter_mut().for_each(|w| *w /= sum);
                for (c, w) in row.iter().enumerate() {
                    m[(a * a_n + b) * states + (b * a_n + c)] = *w;
                }
            }
        }
        let mut pi = vec![1.0 / states as f64; states];
        for _ in 0..500 {
            let mut next = vec![0.0; states];
            for s in 0..states {
                for t in 0..states {
                    next[t] += pi[s] * m[s * states + t];
                }
            }
            pi = next;
        }
        pi
    }

    #[test]
    fn unigram_frequencies_match_stationary_distribution() {
        let seed = 2024;
        let text = generate(2000, (500, 500), seed).unwrap();
        let a_n = ALPHABET.len();
        let mut counts = vec![0u64; a_n];
        let mut total = 0u64;
        for ch in text.bytes().filter(|b| *b != b'\n') {
            let i = ALPHABET.iter().position(|&a| a == ch).unwrap();
            counts[i] += 1;
            total += 1;
        }
        assert_eq!(total, 1_000_000);

        let pi = reference_stationary(seed);
        for c in 0..a_n {
            let p: f64 = (0..a_n).map(|a| pi[a * a_n + c]).sum();
            let expect = p * total as f64;
            let sigma = (total as f64 * p * (1.0 - p)).sqrt();
            let dev = (counts[c] as f64 - expect).abs();
            assert!(
                dev <= 3.0 * sigma,
                "symbol {:?}: count {} vs expected {expect:.1} ({:.2} sigma)",
                ALPHABET[c] as char,
                counts[c],
                dev / sigma
            );
        }
    }
}
