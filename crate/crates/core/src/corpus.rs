//! Tokenization, fixed-length packing, ratio-mixed batch drawing, and a seeded
//! synthetic corpus with long-range key/value recall.

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Byte-level (lossless) or character-level vocabularies.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    /// Ids `0..256` are bytes; `specials` extra ids follow.
    Bytes { specials: usize },
    /// One id per listed character.
    Chars { alphabet: Vec<char> },
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer::Bytes { specials: 0 }
    }
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Bytes { specials } => 256 + specials,
            Tokenizer::Chars { alphabet } => alphabet.len(),
        }
    }

    pub fn tokenize(&self, text: &[u8]) -> Result<Vec<usize>> {
        match self {
            Tokenizer::Bytes { .. } => Ok(text.iter().map(|&b| b as usize).collect()),
            Tokenizer::Chars { alphabet } => {
                let s = std::str::from_utf8(text).map_err(|e| Error::invalid(format!("corpus is not UTF-8: {e}")))?;
                s.chars()
                    .map(|c| {
                        alphabet
                            .iter()
                            .position(|&a| a == c)
                            .ok_or_else(|| Error::invalid(format!("character {c:?} is not in the vocabulary")))
                    })
                    .collect()
            }
        }
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<Vec<u8>> {
        match self {
            Tokenizer::Bytes { .. } => ids
                .iter()
                .map(|&i| {
                    u8::try_from(i).map_err(|_| Error::OutOfRange {
                        context: "byte detokenize",
                        index: i,
                        limit: 256,
                    })
                })
                .collect(),
            Tokenizer::Chars { alphabet } => {
                let mut s = String::new();
                for &i in ids {
                    s.push(*alphabet.get(i).ok_or(Error::OutOfRange {
                        context: "char detokenize",
                        index: i,
                        limit: alphabet.len(),
                    })?);
                }
                Ok(s.into_bytes())
            }
        }
    }
}

/// The three training sources: long texts, short texts, short-to-long texts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetName {
    D1,
    D2,
    D3,
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DatasetName::D1 => "D1",
            DatasetName::D2 => "D2",
            DatasetName::D3 => "D3",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "D1" | "d1" => Ok(DatasetName::D1),
            "D2" | "d2" => Ok(DatasetName::D2),
            "D3" | "d3" => Ok(DatasetName::D3),
            other => Err(Error::invalid(format!("unknown dataset `{other}`"))),
        }
    }
}

/// Equal-length token sequences cut from one corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedDataset {
    pub name: DatasetName,
    pub sequence_length: usize,
    pub sequences: Vec<Vec<usize>>,
    pub digest: String,
}

/// Structured-text sidecar written next to a packed token file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackedSidecar {
    pub name: DatasetName,
    pub length: usize,
    pub count: usize,
    pub digest: String,
}

fn digest_of(length: usize, sequences: &[Vec<usize>]) -> String {
    let mut h = Sha256::new();
    h.update((length as u64).to_le_bytes());
    for s in sequences {
        for &t in s {
            h.update((t as u32).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Cuts consecutive non-overlapping windows; a trailing partial window is dropped.
pub fn pack_corpus(name: DatasetName, tokens: &[usize], length: usize) -> Result<PackedDataset> {
    if length < 2 {
        return Err(Error::invalid(format!("sequence length {length} must be at least 2")));
    }
    if tokens.len() < length {
        return Err(Error::invalid(format!(
            "corpus of {} tokens is shorter than one window of {length}",
            tokens.len()
        )));
    }
    let sequences: Vec<Vec<usize>> = tokens.chunks_exact(length).map(<[usize]>::to_vec).collect();
    Ok(PackedDataset {
        name,
        sequence_length: length,
        digest: digest_of(length, &sequences),
        sequences,
    })
}

impl PackedDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn max_token(&self) -> Option<usize> {
        self.sequences.iter().flatten().copied().max()
    }

    pub fn sidecar(&self) -> PackedSidecar {
        PackedSidecar {
            name: self.name,
            length: self.sequence_length,
            count: self.sequences.len(),
            digest: self.digest.clone(),
        }
    }

    /// Writes `<name>.bin` (little-endian u32 ids) and `<name>.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        let mut bytes = Vec::with_capacity(self.len() * self.sequence_length * 4);
        for &t in self.sequences.iter().flatten() {
            bytes.extend_from_slice(&(t as u32).to_le_bytes());
        }
        let bin = dir.join(format!("{}.bin", self.name));
        fs::write(&bin, bytes).map_err(|e| Error::io(format!("write {}", bin.display()), e))?;
        let side = dir.join(format!("{}.json", self.name));
        let text = serde_json::to_string_pretty(&self.sidecar()).expect("sidecar serializes");
        fs::write(&side, text + "\n").map_err(|e| Error::io(format!("write {}", side.display()), e))?;
        Ok(())
    }

    pub fn load(dir: &Path, name: DatasetName) -> Result<Self> {
        let side = dir.join(format!("{name}.json"));
        let text = fs::read_to_string(&side).map_err(|e| Error::io(format!("read {}", side.display()), e))?;
        let meta: PackedSidecar =
            serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", side.display())))?;
        let bin = dir.join(format!("{name}.bin"));
        let bytes = fs::read(&bin).map_err(|e| Error::io(format!("read {}", bin.display()), e))?;
        if bytes.len() != meta.count * meta.length * 4 || meta.length == 0 {
            return Err(Error::invalid(format!("{} has unexpected size", bin.display())));
        }
        let tokens: Vec<usize> = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let sequences: Vec<Vec<usize>> = tokens.chunks_exact(meta.length).map(<[usize]>::to_vec).collect();
        let digest = digest_of(meta.length, &sequences);
        if digest != meta.digest {
            return Err(Error::invalid(format!("{} digest mismatch", bin.display())));
        }
        Ok(PackedDataset {
            name: meta.name,
            sequence_length: meta.length,
            sequences,
            digest,
        })
    }
}

/// Relative token quantities drawn from (D1, D2, D3) at every step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixRatio(pub [f64; 3]);

impl Default for MixRatio {
    fn default() -> Self {
        MixRatio([4.0, 3.0, 1.0])
    }
}

impl MixRatio {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&r| !(r >= 0.0) || !r.is_finite()) || self.0.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config(format!("mix ratio {:?} must be non-negative with a positive sum", self.0)));
        }
        Ok(())
    }

    /// Sequences of each dataset per step, for the given lengths and token budget.
    pub fn sequence_counts(&self, lengths: [usize; 3], batch_tokens: usize) -> Result<[usize; 3]> {
        self.validate()?;
        if batch_tokens < lengths[0] {
            return Err(Error::invalid(format!(
                "batch of {batch_tokens} tokens is smaller than one D1 sequence of {}",
                lengths[0]
            )));
        }
        let total: f64 = self.0.iter().sum();
        let mut out = [0usize; 3];
        for i in 0..3 {
            if self.0[i] > 0.0 {
                let tokens = batch_tokens as f64 * self.0[i] / total;
                out[i] = ((tokens / lengths[i] as f64).round() as usize).max(1);
            }
        }
        Ok(out)
    }
}

/// One step's sequences from each dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Batches {
    pub long: Vec<Vec<usize>>,
    pub short: Vec<Vec<usize>>,
    pub s2l: Vec<Vec<usize>>,
}

impl Batches {
    pub fn tokens(&self) -> [usize; 3] {
        [&self.long, &self.short, &self.s2l].map(|b| b.iter().map(Vec::len).sum())
    }
}

/// Epoch-wise sampling without replacement over three datasets.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    orders: [Vec<usize>; 3],
    cursors: [usize; 3],
}

impl BatchSampler {
    pub fn new(datasets: [&PackedDataset; 3]) -> Self {
        BatchSampler {
            orders: datasets.map(|d| (0..d.len()).collect()),
            // start exhausted so the first draw shuffles
            cursors: datasets.map(PackedDataset::len),
        }
    }

    fn take<R: Rng + ?Sized>(&mut self, i: usize, data: &PackedDataset, count: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.cursors[i] >= self.orders[i].len() {
                self.orders[i].shuffle(rng);
                self.cursors[i] = 0;
            }
            out.push(data.sequences[self.orders[i][self.cursors[i]]].clone());
            self.cursors[i] += 1;
        }
        out
    }

    /// Draws token quantities proportional to `ratio`, each within one sequence length.
    pub fn draw_batch<R: Rng + ?Sized>(
        &mut self,
        datasets: [&PackedDataset; 3],
        ratio: MixRatio,
        batch_tokens: usize,
        rng: &mut R,
    ) -> Result<Batches> {
        let lengths = datasets.map(|d| d.sequence_length);
        let counts = ratio.sequence_counts(lengths, batch_tokens)?;
        for (i, d) in datasets.iter().enumerate() {
            if counts[i] > 0 && d.is_empty() {
                return Err(Error::invalid(format!("dataset {} is empty", d.name)));
            }
        }
        Ok(Batches {
            long: self.take(0, datasets[0], counts[0], rng),
            short: self.take(1, datasets[1], counts[1], rng),
            s2l: self.take(2, datasets[2], counts[2], rng),
        })
    }
}

/// A document with the byte ranges whose prediction requires recalling an earlier value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecallDoc {
    pub text: Vec<u8>,
    /// Positions of recalled value bytes (targets of next-token prediction).
    pub targets: Vec<Range<usize>>,
}

const KEY_LEN: usize = 2;
const VALUE_LEN: usize = 3;
/// `#kk=vvv.`
const RECORD_LEN: usize = 1 + KEY_LEN + 1 + VALUE_LEN + 1;

/// Word-level Markov text interleaved with key/value definitions that are queried later.
#[derive(Clone, Debug)]
pub struct SyntheticGenerator {
    words: Vec<String>,
    /// Cumulative successor weights per word.
    next: Vec<Vec<(usize, f64)>>,
}

impl SyntheticGenerator {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, vocab_words: usize, branching: usize) -> Self {
        assert!(vocab_words >= 2 && branching >= 1);
        let mut words = Vec::with_capacity(vocab_words);
        while words.len() < vocab_words {
            let len = rng.gen_range(2..=6);
            let w: String = (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
            if !words.contains(&w) {
                words.push(w);
            }
        }
        let next = (0..vocab_words)
            .map(|_| {
                let mut acc = 0.0;
                (0..branching)
                    .map(|_| {
                        acc += rng.gen_range(0.2..1.0);
                        (rng.gen_range(0..vocab_words), acc)
                    })
                    .collect()
            })
            .collect();
        SyntheticGenerator { words, next }
    }

    /// Exactly `len` bytes of Markov text.
    pub fn filler<R: Rng + ?Sized>(&self, rng: &mut R, len: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(len + 8);
        let mut w = rng.gen_range(0..self.words.len());
        while out.len() < len {
            out.extend_from_slice(self.words[w].as_bytes());
            out.push(b' ');
            let succ = &self.next[w];
            let total = succ.last().unwrap().1;
            let x = rng.gen_range(0.0..total);
            w = succ.iter().find(|(_, c)| x < *c).map_or(succ[0].0, |(i, _)| *i);
        }
        out.truncate(len);
        out
    }

    /// A document of `len` bytes with `pairs` definitions in its first quarter and
    /// matching queries at its end.
    pub fn recall_document<R: Rng + ?Sized>(&self, rng: &mut R, len: usize, pairs: usize) -> RecallDoc {
        assert!(
            len >= 4 * pairs * RECORD_LEN,
            "document of {len} bytes too short for {pairs} recall pairs"
        );
        let mut text = self.filler(rng, len);
        let mut keys: Vec<[u8; KEY_LEN]> = Vec::with_capacity(pairs);
        while keys.len() < pairs {
            let k = [rng.gen_range(b'a'..=b'z'), rng.gen_range(b'a'..=b'z')];
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let values: Vec<[u8; VALUE_LEN]> = (0..pairs)
            .map(|_| [0; VALUE_LEN].map(|_| rng.gen_range(b'0'..=b'9')))
            .collect();
        let record = |mark: u8, k: &[u8; KEY_LEN], v: &[u8; VALUE_LEN]| {
            let mut r = vec![mark];
            r.extend_from_slice(k);
            r.push(b'=');
            r.extend_from_slice(v);
            r.push(b'.');
            r
        };
        // definitions in slots of the first quarter, jittered within each slot
        let quarter = len / 4;
        let slot = quarter / pairs.max(1);
        for i in 0..pairs {
            let jitter = slot.saturating_sub(RECORD_LEN);
            let at = i * slot + if jitter > 0 { rng.gen_range(0..=jitter) } else { 0 };
            text[at..at + RECORD_LEN].copy_from_slice(&record(b'#', &keys[i], &values[i]));
        }
        let mut order: Vec<usize> = (0..pairs).collect();
        order.shuffle(rng);
        let mut targets = Vec::with_capacity(pairs);
        let tail_start = len - pairs * RECORD_LEN;
        for (j, &i) in order.iter().enumerate() {
            let at = tail_start + j * RECORD_LEN;
            text[at..at + RECORD_LEN].copy_from_slice(&record(b'?', &keys[i], &values[i]));
            let v = at + 1 + KEY_LEN + 1;
            targets.push(v..v + VALUE_LEN);
        }
        RecallDoc { text, targets }
    }

    /// Concatenated recall documents of exactly `doc_len` bytes each.
    pub fn corpus<R: Rng + ?Sized>(&self, rng: &mut R, docs: usize, doc_len: usize, pairs: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(docs * doc_len);
        for _ in 0..docs {
            out.extend(self.recall_document(rng, doc_len, pairs).text);
        }
        out
    }
}

/// Sizes of generated datasets. D2 is a separately drawn split of the same
/// generator; D1 documents span the long length, D2 and D3 the input length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub vocab_words: usize,
    pub branching: usize,
    pub long_docs: usize,
    pub short_docs: usize,
    pub input_docs: usize,
    pub long_pairs: usize,
    pub input_pairs: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            vocab_words: 48,
            branching: 3,
            long_docs: 256,
            short_docs: 256,
            input_docs: 256,
            long_pairs: 2,
            input_pairs: 1,
        }
    }
}

/// Builds D1 (long), D2 (short) and D3 (input length) from one generator.
pub fn synthetic_datasets<R: Rng + ?Sized>(
    cfg: &SyntheticConfig,
    lengths: [usize; 3],
    rng: &mut R,
) -> Result<[PackedDataset; 3]> {
    let [t_l, t_s, t] = lengths;
    let gen = SyntheticGenerator::new(rng, cfg.vocab_words, cfg.branching);
    let tok = Tokenizer::default();
    let long = gen.corpus(rng, cfg.long_docs, t_l, cfg.long_pairs);
    let short = gen.corpus(rng, cfg.short_docs, t, cfg.input_pairs);
    let input = gen.corpus(rng, cfg.input_docs, t, cfg.input_pairs);
    Ok([
        pack_corpus(DatasetName::D1, &tok.tokenize(&long)?, t_l)?,
        pack_corpus(DatasetName::D2, &tok.tokenize(&short)?, t_s)?,
        pack_corpus(DatasetName::D3, &tok.tokenize(&input)?, t)?,
    ])
}
