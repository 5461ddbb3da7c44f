//! Byte-level corpora: loading, vocabulary construction, train/valid/test
//! splits, seeded batching, and the bundled synthetic corpora used by the
//! convergence tests.
//!
//! A corpus is a byte file prefix with a byte-value → id vocabulary built
//! from the training split (ids assigned in ascending byte order) and three
//! contiguous, disjoint splits laid out train < valid < test. No corpus is
//! ever downloaded: real datasets are local files, and when no file is
//! given a deterministic synthetic text stream stands in.

use std::io::Read;
use std::ops::Range;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Cumulative split layout over a loaded prefix. Boundaries land at
/// `floor(fraction · len)`, so (0.9, 0.05, 0.05) over 1000 bytes gives
/// splits of exactly 900/50/50.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.9, valid: 0.05, test: 0.05 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [("train", self.train), ("valid", self.valid), ("test", self.test)];
        for (name, f) in parts {
            if !f.is_finite() || f <= 0.0 {
                return Err(Error::config(
                    &format!("data.fractions.{name}"),
                    &format!("must be a positive fraction, got {f}"),
                ));
            }
        }
        let sum = self.train + self.valid + self.test;
        if sum > 1.0 + 1e-9 {
            return Err(Error::config("data.fractions", &format!("must sum to at most 1, got {sum}")));
        }
        Ok(())
    }
}

/// Which contiguous region of the corpus to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// A loaded byte corpus: the raw prefix, its byte→id vocabulary, the
/// encoded id stream, and the three split boundaries.
#[derive(Debug, Clone)]
pub struct Corpus {
    /// Encoded prefix; `ids[i]` is the vocabulary id of byte `i`.
    ids: Vec<u16>,
    /// Ascending byte value for each id (`byte_for_id[id] → byte`).
    byte_for_id: Vec<u8>,
    /// Inverse map; `u16::MAX` marks bytes absent from the vocabulary.
    id_for_byte: [u16; 256],
    train: Range<usize>,
    valid: Range<usize>,
    test: Range<usize>,
}

impl Corpus {
    /// Build a corpus from raw bytes. The vocabulary comes from the
    /// training split only; a byte that first appears in valid/test is a
    /// hard error (the model could never have learned it), reported with
    /// its offset so the caller can raise `max_bytes` or adjust fractions.
    pub fn from_bytes(bytes: &[u8], fractions: SplitFractions) -> Result<Corpus> {
        fractions.validate()?;
        let len = bytes.len();
        let b1 = (fractions.train * len as f64).floor() as usize;
        let b2 = ((fractions.train + fractions.valid) * len as f64).floor() as usize;
        let b3 = ((fractions.train + fractions.valid + fractions.test) * len as f64).floor() as usize;
        let splits = [("train", 0, b1), ("valid", b1, b2), ("test", b2, b3)];
        for (name, lo, hi) in splits {
            if hi <= lo {
                return Err(Error::Corpus(format!(
                    "{name} split is empty ({} bytes loaded, fractions {:?})",
                    len,
                    (fractions.train, fractions.valid, fractions.test)
                )));
            }
        }

        let mut id_for_byte = [u16::MAX; 256];
        let mut seen = [false; 256];
        for &b in &bytes[0..b1] {
            seen[b as usize] = true;
        }
        let mut byte_for_id = Vec::new();
        for b in 0..256usize {
            if seen[b] {
                id_for_byte[b] = byte_for_id.len() as u16;
                byte_for_id.push(b as u8);
            }
        }

        let mut ids = Vec::with_capacity(b3);
        for (i, &b) in bytes[0..b3].iter().enumerate() {
            let id = id_for_byte[b as usize];
            if id == u16::MAX {
                let split = if i < b2 { "valid" } else { "test" };
                return Err(Error::Corpus(format!(
                    "byte 0x{b:02x} at offset {i} (in the {split} split) never occurs in the \
                     training split; raise max_bytes or adjust the split fractions"
                )));
            }
            ids.push(id);
        }

        Ok(Corpus {
            ids,
            byte_for_id,
            id_for_byte,
            train: 0..b1,
            valid: b1..b2,
            test: b2..b3,
        })
    }

    /// Load the first `max_bytes` of a file (`max_bytes == 0` loads all of
    /// it) and build splits/vocabulary per [`Corpus::from_bytes`].
    pub fn load(path: &Path, max_bytes: usize, fractions: SplitFractions) -> Result<Corpus> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?;
        let mut bytes = Vec::new();
        let limit = if max_bytes == 0 { u64::MAX } else { max_bytes as u64 };
        file.take(limit)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?;
        if bytes.is_empty() {
            return Err(Error::Corpus(format!("{}: file is empty", path.display())));
        }
        Corpus::from_bytes(&bytes, fractions)
    }

    /// Load a corpus file when a path is given, otherwise fall back to the
    /// bundled synthetic text stream of `max_bytes` bytes.
    pub fn load_or_synthetic(
        path: Option<&Path>,
        max_bytes: usize,
        fractions: SplitFractions,
        seed: u64,
    ) -> Result<Corpus> {
        match path {
            Some(p) => Corpus::load(p, max_bytes, fractions),
            None => {
                let n = if max_bytes == 0 { 1_000_000 } else { max_bytes };
                Corpus::from_bytes(&synthetic_text(n, seed), fractions)
            }
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.byte_for_id.len()
    }

    /// Ascending byte values backing ids `0..vocab_size`.
    pub fn vocab_bytes(&self) -> &[u8] {
        &self.byte_for_id
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn split_range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Valid => self.valid.clone(),
            Split::Test => self.test.clone(),
        }
    }

    /// The encoded id stream of one split.
    pub fn split_ids(&self, split: Split) -> &[u16] {
        &self.ids[self.split_range(split)]
    }

    /// Encode raw bytes through this corpus' vocabulary.
    pub fn encode(&self, bytes: &[u8]) -> Result<Vec<usize>> {
        bytes
            .iter()
            .map(|&b| {
                let id = self.id_for_byte[b as usize];
                if id == u16::MAX {
                    Err(Error::Corpus(format!("byte 0x{b:02x} is not in the vocabulary")))
                } else {
                    Ok(id as usize)
                }
            })
            .collect()
    }
}

/// One training batch: `inputs[s][t]` are token ids and `targets` is the
/// row-major flattening of the same windows shifted one byte ahead, matching
/// the concatenated logits the model produces for the batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<usize>,
}

/// Seeded stream of random context windows over one split. Window starts
/// are drawn uniformly over every valid position, so the same seed always
/// yields the same batch sequence.
pub struct Batcher<'a> {
    ids: &'a [u16],
    context: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl<'a> Batcher<'a> {
    pub fn new(ids: &'a [u16], context: usize, batch_size: usize, rng: ChaCha8Rng) -> Result<Self> {
        if context == 0 || batch_size == 0 {
            return Err(Error::Corpus("batcher needs context ≥ 1 and batch_size ≥ 1".to_string()));
        }
        if ids.len() <= context {
            return Err(Error::Corpus(format!(
                "split of {} ids is too short for context {} (need at least context+1)",
                ids.len(),
                context
            )));
        }
        Ok(Batcher { ids, context, batch_size, rng })
    }

    /// Largest admissible window start (a window consumes `context + 1`
    /// ids: the inputs plus the one-ahead target of the final position).
    pub fn max_start(&self) -> usize {
        self.ids.len() - self.context - 1
    }

    /// Draw one uniformly random window start.
    pub fn draw_start(&mut self) -> usize {
        self.rng.gen_range(0..=self.max_start())
    }

    pub fn next_batch(&mut self) -> Batch {
        sample_batch(self.ids, self.context, self.batch_size, &mut self.rng)
            .expect("dimensions validated at construction")
    }
}

/// Draw one batch of uniformly random context windows from a split using
/// the caller's RNG — the primitive behind [`Batcher`].
pub fn sample_batch(
    ids: &[u16],
    context: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if ids.len() <= context {
        return Err(Error::Corpus(format!(
            "split of {} ids is too short for context {} (need at least context+1)",
            ids.len(),
            context
        )));
    }
    let max_start = ids.len() - context - 1;
    let mut inputs = Vec::with_capacity(batch_size);
    let mut targets = Vec::with_capacity(batch_size * context);
    for _ in 0..batch_size {
        let s = rng.gen_range(0..=max_start);
        inputs.push(ids[s..s + context].iter().map(|&x| x as usize).collect());
        targets.extend(ids[s + 1..s + context + 1].iter().map(|&x| x as usize));
    }
    Ok(Batch { inputs, targets })
}

/// Non-overlapping evaluation windows covering a split in order. Every
/// target id of the split (from offset 1 on) is scored exactly once; a
/// short final window is kept as long as it still has one target.
pub fn eval_windows(ids: &[u16], context: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    assert!(context > 0, "eval windows need context ≥ 1");
    let mut windows = Vec::new();
    let mut start = 0;
    while start + 1 < ids.len() {
        let end = (start + context + 1).min(ids.len());
        let inputs = ids[start..end - 1].iter().map(|&x| x as usize).collect();
        let targets = ids[start + 1..end].iter().map(|&x| x as usize).collect();
        windows.push((inputs, targets));
        start += context;
    }
    windows
}

/// Word list for the synthetic corpus: common English words, lowercase.
const WORDS: &[&str] = &[
    "the", "of", "and", "to", "in", "a", "is", "that", "for", "it", "with", "as", "on", "be",
    "at", "by", "this", "from", "or", "one", "had", "not", "but", "what", "all", "were", "when",
    "we", "there", "can", "an", "your", "which", "their", "said", "if", "do", "into", "has",
    "more", "her", "two", "like", "him", "see", "time", "could", "no", "make", "than",
];

/// Deterministic synthetic text: Zipf-weighted words whose distribution is
/// rotated by the previous word, giving real bigram structure for a
/// character model to learn, sentence lengths of 6–14 words, and a byte
/// vocabulary of lowercase letters plus space, period, and newline. The
/// same `(len, seed)` always produces the same bytes.
pub fn synthetic_text(len: usize, seed: u64) -> Vec<u8> {
    let mut gen = rng::seeded_stream(seed, rng::STREAM_MISC);
    let base: Vec<f64> = (0..WORDS.len()).map(|i| 1.0 / (i + 1) as f64).collect();
    let mut out = Vec::with_capacity(len + 16);
    let mut prev = 0usize;
    let mut words_left: usize = gen.gen_range(6..=14);
    while out.len() < len {
        let weights: Vec<f64> =
            (0..WORDS.len()).map(|i| base[(i + prev) % WORDS.len()]).collect();
        let idx = WeightedIndex::new(&weights).expect("positive weights").sample(&mut gen);
        out.extend_from_slice(WORDS[idx].as_bytes());
        prev = idx;
        words_left -= 1;
        if words_left == 0 {
            out.extend_from_slice(b".\n");
            words_left = gen.gen_range(6..=14);
        } else {
            out.push(b' ');
        }
    }
    out.truncate(len);
    out
}

/// Tile a byte pattern to the requested length — the memorizable corpus
/// used by the toy-convergence check.
pub fn repeated_pattern(pattern: &[u8], len: usize) -> Vec<u8> {
    assert!(!pattern.is_empty(), "pattern must be non-empty");
    pattern.iter().copied().cycle().take(len).collect()
}

/// A synthetic two-class classification task over corpus windows.
#[derive(Debug, Clone)]
pub struct ClassificationSet {
    pub inputs: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    /// The two marker ids; class 0 windows carry a run of `markers.0`,
    /// class 1 a run of `markers.1`.
    pub markers: (usize, usize),
}

/// Build a balanced two-class set: each sample is a training-split window
/// with a run of one of two marker ids written over a random position —
/// class 0 gets the first marker, class 1 the second. Markers are the two
/// rarest training-split ids (ties toward the lower id), so the planted
/// run dominates any background occurrences and the task is cleanly
/// separable. Labels alternate 0,1,0,1,… so every prefix is balanced.
pub fn classification_set(
    corpus: &Corpus,
    n: usize,
    context: usize,
    seed: u64,
    stream: u64,
) -> Result<ClassificationSet> {
    if corpus.vocab_size() < 2 {
        return Err(Error::Corpus("classification task needs a vocabulary of at least 2".to_string()));
    }
    let train = corpus.split_ids(Split::Train);
    if train.len() < context + 1 {
        return Err(Error::Corpus(format!(
            "training split of {} ids is too short for context {context}",
            train.len()
        )));
    }
    let mut counts = vec![0usize; corpus.vocab_size()];
    for &id in train {
        counts[id as usize] += 1;
    }
    let mut order: Vec<usize> = (0..corpus.vocab_size()).collect();
    order.sort_by_key(|&id| (counts[id], id));
    let markers = (order[0], order[1]);

    let run = (context / 4).max(4).min(context);
    let mut gen = rng::seeded_stream(seed, stream);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let start = gen.gen_range(0..=train.len() - context);
        let mut window: Vec<usize> =
            train[start..start + context].iter().map(|&x| x as usize).collect();
        let pos = gen.gen_range(0..=context - run);
        let label = i % 2;
        let marker = if label == 0 { markers.0 } else { markers.1 };
        for slot in &mut window[pos..pos + run] {
            *slot = marker;
        }
        inputs.push(window);
        labels.push(label);
    }
    Ok(ClassificationSet { inputs, labels, markers })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_fractions() -> SplitFractions {
        SplitFractions::default()
    }

    #[test]
    fn thousand_bytes_split_900_50_50() {
        let bytes: Vec<u8> = (0..1000).map(|i| (i % 256) as u8).collect();
        let c = Corpus::from_bytes(&bytes, default_fractions()).unwrap();
        assert_eq!(c.split_range(Split::Train), 0..900);
        assert_eq!(c.split_range(Split::Valid), 900..950);
        assert_eq!(c.split_range(Split::Test), 950..1000);
        assert_eq!(c.vocab_size(), 256);
        assert_eq!(c.len(), 1000);
    }

    #[test]
    fn repeated_abcd_has_vocab_4() {
        let bytes = repeated_pattern(b"abcd", 4000);
        let c = Corpus::from_bytes(&bytes, default_fractions()).unwrap();
        assert_eq!(c.vocab_size(), 4);
        assert_eq!(c.vocab_bytes(), b"abcd");
        // Ids are assigned in ascending byte order.
        assert_eq!(c.encode(b"dcba").unwrap(), vec![3, 2, 1, 0]);
    }

    #[test]
    fn million_byte_synthetic_prefix_loads_deterministically() {
        let bytes = synthetic_text(1_000_000, 11);
        let c = Corpus::from_bytes(&bytes, default_fractions()).unwrap();
        assert_eq!(c.split_range(Split::Train).end, 900_000);
        assert_eq!(c.split_range(Split::Valid).end, 950_000);
        assert_eq!(c.split_range(Split::Test).end, 1_000_000);
        assert!(c.vocab_size() <= 256);
        // The generator is deterministic, so the vocabulary is too:
        // lowercase letters of the word list plus space, period, newline.
        let again = synthetic_text(1_000_000, 11);
        assert_eq!(bytes, again);
        assert!(c.vocab_bytes().contains(&b' '));
        assert!(c.vocab_bytes().contains(&b'.'));
        assert!(c.vocab_bytes().contains(&b'\n'));
        assert!(c.vocab_size() >= 20 && c.vocab_size() <= 30, "vocab {}", c.vocab_size());
    }

    #[test]
    fn byte_outside_training_split_is_rejected_with_offset() {
        let mut bytes = vec![b'a'; 950];
        bytes.extend_from_slice(&[b'b'; 50]);
        let err = Corpus::from_bytes(&bytes, default_fractions()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("0x62"), "message was: {msg}");
        assert!(msg.contains("test split"), "message was: {msg}");
    }

    #[test]
    fn empty_split_is_rejected() {
        // 10 bytes: floor(0.9·10)=9, floor(0.95·10)=9 → valid split empty.
        let err = Corpus::from_bytes(&[b'x'; 10], default_fractions()).unwrap_err();
        assert!(err.to_string().contains("valid split is empty"), "got: {err}");
    }

    #[test]
    fn same_seed_gives_identical_batches() {
        let bytes = synthetic_text(10_000, 3);
        let c = Corpus::from_bytes(&bytes, default_fractions()).unwrap();
        let mk = || {
            Batcher::new(
                c.split_ids(Split::Train),
                32,
                4,
                rng::seeded_stream(42, rng::STREAM_DATA),
            )
            .unwrap()
        };
        let (mut a, mut b) = (mk(), mk());
        for _ in 0..5 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
        let mut other = Batcher::new(
            c.split_ids(Split::Train),
            32,
            4,
            rng::seeded_stream(43, rng::STREAM_DATA),
        )
        .unwrap();
        assert_ne!(a.next_batch(), other.next_batch());
    }

    #[test]
    fn targets_are_inputs_shifted_by_one() {
        // Strictly periodic bytes make the expected shift checkable from
        // the window contents alone (id == byte value here).
        let bytes: Vec<u8> = (0..2000).map(|i| (i % 50) as u8).collect();
        let c = Corpus::from_bytes(&bytes, default_fractions()).unwrap();
        let mut b = Batcher::new(
            c.split_ids(Split::Train),
            16,
            3,
            rng::seeded_stream(7, rng::STREAM_DATA),
        )
        .unwrap();
        let batch = b.next_batch();
        assert_eq!(batch.inputs.len(), 3);
        assert_eq!(batch.targets.len(), 3 * 16);
        for (s, input) in batch.inputs.iter().enumerate() {
            let row = &batch.targets[s * 16..(s + 1) * 16];
            // Interior targets are the next input id; the final target is
            // the id one past the window, here (last + 1) mod 50.
            assert_eq!(&input[1..], &row[..15]);
            assert_eq!(row[15], (input[15] + 1) % 50);
        }
    }

    #[test]
    fn window_starts_cover_the_split_uniformly() {
        let bytes = synthetic_text(20_000, 5);
        let c = Corpus::from_bytes(&bytes, default_fractions()).unwrap();
        let mut b = Batcher::new(
            c.split_ids(Split::Train),
            64,
            1,
            rng::seeded_stream(9, rng::STREAM_DATA),
        )
        .unwrap();
        let buckets = 20usize;
        let draws = 10_000usize;
        let top = b.max_start() + 1;
        let mut counts = vec![0usize; buckets];
        for _ in 0..draws {
            let s = b.draw_start();
            counts[s * buckets / top] += 1;
        }
        let expected = draws as f64 / buckets as f64;
        let stat: f64 =
            counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // Chi-square upper critical value at p = 0.001 with 19 degrees of
        // freedom; a uniform sampler stays below it (p > 0.001).
        assert!(stat < 43.82, "chi-square statistic {stat} suggests non-uniform starts");
    }

    #[test]
    fn too_short_split_is_rejected() {
        let bytes = repeated_pattern(b"ab", 100);
        let c = Corpus::from_bytes(&bytes, default_fractions()).unwrap();
        // Train split has 90 ids; context 90 needs 91.
        let r = Batcher::new(c.split_ids(Split::Train), 90, 1, rng::seeded_stream(0, 1));
        assert!(r.is_err());
        assert!(Batcher::new(c.split_ids(Split::Train), 89, 1, rng::seeded_stream(0, 1)).is_ok());
    }

    #[test]
    fn eval_windows_cover_every_target_once() {
        let bytes: Vec<u8> = (0..350).map(|i| (i % 40) as u8).collect();
        let c = Corpus::from_bytes(&bytes, default_fractions()).unwrap();
        let ids = c.split_ids(Split::Train); // 315 ids
        let windows = eval_windows(ids, 64);
        let covered: usize = windows.iter().map(|(_, t)| t.len()).sum();
        assert_eq!(covered, ids.len() - 1);
        // Windows tile without overlap: window w starts at 64·w.
        for (w, (input, targets)) in windows.iter().enumerate() {
            assert_eq!(input[0], ids[64 * w] as usize);
            assert_eq!(targets[0], ids[64 * w + 1] as usize);
            assert_eq!(input.len(), targets.len());
        }
    }

    #[test]
    fn classification_set_is_balanced_and_marked() {
        let bytes = synthetic_text(8_000, 13);
        let c = Corpus::from_bytes(&bytes, default_fractions()).unwrap();
        let set = classification_set(&c, 40, 64, 1, 77).unwrap();
        assert_eq!(set.inputs.len(), 40);
        assert_eq!(set.labels.iter().filter(|&&l| l == 0).count(), 20);
        let run = 16; // context 64 → max(4, 64/4)
        for (input, &label) in set.inputs.iter().zip(&set.labels) {
            assert_eq!(input.len(), 64);
            assert!(input.iter().all(|&id| id < c.vocab_size()));
            let marker = if label == 0 { set.markers.0 } else { set.markers.1 };
            let longest = input
                .iter()
                .fold((0usize, 0usize), |(best, cur), &id| {
                    let cur = if id == marker { cur + 1 } else { 0 };
                    (best.max(cur), cur)
                })
                .0;
            assert!(longest >= run, "class {label} window lacks its marker run");
        }
        // Same seed/stream reproduces the set exactly.
        let again = classification_set(&c, 40, 64, 1, 77).unwrap();
        assert_eq!(set.inputs, again.inputs);
        assert_eq!(set.labels, again.labels);
    }

    #[test]
    fn load_or_synthetic_falls_back_without_a_path() {
        let c = Corpus::load_or_synthetic(None, 5_000, default_fractions(), 21).unwrap();
        assert_eq!(c.len(), 5_000);
        let again = Corpus::load_or_synthetic(None, 5_000, default_fractions(), 21).unwrap();
        assert_eq!(c.split_ids(Split::Test), again.split_ids(Split::Test));
    }

    #[test]
    fn load_reads_only_the_requested_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.bin");
        std::fs::write(&path, repeated_pattern(b"wxyz", 10_000)).unwrap();
        let c = Corpus::load(&path, 1_000, default_fractions()).unwrap();
        assert_eq!(c.len(), 1_000);
        assert_eq!(c.vocab_size(), 4);
        let missing = Corpus::load(Path::new("/no/such/file"), 0, default_fractions());
        assert!(missing.is_err());
    }
}
