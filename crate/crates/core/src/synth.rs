//! Deterministic synthetic long-document corpora with planted label signals.
//!
//! Documents are sequences of whole-word filler tokens (`tok00421`) with
//! reserved trigger words (`triga`, `trigb`, ..) planted at chosen positions.
//! Every token survives normalization and maps to exactly one vocabulary id.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_corpus, Record};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalKind {
    /// Class `c ≥ 1` carries trigger `c - 1` once; class 0 carries none.
    KeywordAnywhere,
    /// Binary. Every document has one trigger inside the first chunk and one at
    /// or past `signal_offset_tokens`. Label 1 iff the two triggers differ.
    LongRangePair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_test: usize,
    /// Number of distinct filler words.
    pub vocab_size: usize,
    pub doc_len_mean: usize,
    /// Lengths are uniform on `mean ± jitter`.
    pub doc_len_jitter: usize,
    pub n_class: usize,
    pub signal_kind: SignalKind,
    pub signal_offset_tokens: usize,
    /// Tokens that fit in the first chunk; early triggers land before this position.
    pub first_chunk_tokens: usize,
    /// KeywordAnywhere only: restrict the trigger to `[start, end)`.
    pub plant_window: Option<(usize, usize)>,
    /// Copies of each planted trigger, at distinct random positions in its region.
    pub trigger_repeats: usize,
    pub seed: u64,
}

pub fn trigger_token(i: usize) -> String {
    let letter = (b'a' + (i % 26) as u8) as char;
    if i < 26 {
        format!("trig{letter}")
    } else {
        format!("trig{letter}{}", i / 26)
    }
}

pub fn filler_token(i: usize) -> String {
    format!("tok{i:05}")
}

impl SynthSpec {
    /// 2000/500 long-range corpus: two chunks of 202 content tokens, each
    /// trigger planted 20 times in its region.
    pub fn long_range(seed: u64) -> Self {
        SynthSpec {
            n_train: 2000,
            n_test: 500,
            vocab_size: 500,
            doc_len_mean: 250,
            doc_len_jitter: 20,
            n_class: 2,
            signal_kind: SignalKind::LongRangePair,
            signal_offset_tokens: 202,
            first_chunk_tokens: 202,
            plant_window: None,
            trigger_repeats: 20,
            seed,
        }
    }

    pub fn keyword(seed: u64) -> Self {
        SynthSpec {
            signal_kind: SignalKind::KeywordAnywhere,
            trigger_repeats: 1,
            ..Self::long_range(seed)
        }
    }

    pub fn min_len(&self) -> usize {
        self.doc_len_mean.saturating_sub(self.doc_len_jitter)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_class < 2 {
            return Err(Error::invalid("synth needs at least 2 classes"));
        }
        if self.vocab_size == 0 || self.min_len() == 0 || self.trigger_repeats == 0 {
            return Err(Error::invalid("synth needs filler words, non-empty documents and at least one trigger copy"));
        }
        let k = self.trigger_repeats;
        match self.signal_kind {
            SignalKind::LongRangePair => {
                if self.n_class != 2 {
                    return Err(Error::invalid("long-range-pair is binary"));
                }
                if self.first_chunk_tokens == 0 || self.signal_offset_tokens < self.first_chunk_tokens {
                    return Err(Error::invalid(format!(
                        "signal offset {} must be at least the first-chunk size {}",
                        self.signal_offset_tokens, self.first_chunk_tokens
                    )));
                }
                if self.first_chunk_tokens < k || self.min_len() < self.signal_offset_tokens + k {
                    return Err(Error::invalid(format!(
                            "shortest document ({} tokens) cannot hold {k} trigger copies at offset {}",
                        self.min_len(),
                        self.signal_offset_tokens
                    )));
                }
            }
            SignalKind::KeywordAnywhere => {
                if let Some((s, e)) = self.plant_window {
                    if e < s + k || e > self.min_len() {
                        return Err(Error::invalid(format!(
                            "plant window [{s}, {e}) must hold {k} copies inside the shortest document"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn plant(words: &mut [String], region: std::ops::Range<usize>, token: &str, copies: usize, rng: &mut ChaCha8Rng) {
    for i in rand::seq::index::sample(rng, region.len(), copies) {
        words[region.start + i] = token.to_string();
    }
}

fn document(spec: &SynthSpec, index: usize, rng: &mut ChaCha8Rng) -> (Vec<String>, usize) {
    let len = rng.gen_range(spec.min_len()..=spec.doc_len_mean + spec.doc_len_jitter);
    let mut words: Vec<String> = (0..len).map(|_| filler_token(rng.gen_range(0..spec.vocab_size))).collect();
    let label = index % spec.n_class;
    match spec.signal_kind {
        SignalKind::KeywordAnywhere => {
            if label > 0 {
                let (s, e) = spec.plant_window.unwrap_or((0, len));
                plant(&mut words, s..e, &trigger_token(label - 1), spec.trigger_repeats, rng);
            }
        }
        SignalKind::LongRangePair => {
            // Pairs cycle AB, BA among positives and AA, BB among negatives, so each
            // trigger occurs equally often in both classes and in both positions.
            let flip = (index / 2) % 2 == 1;
            let (early, late) = match (label, flip) {
                (1, false) => (0, 1),
                (1, true) => (1, 0),
                (_, false) => (0, 0),
                (_, true) => (1, 1),
            };
            let head = spec.first_chunk_tokens.min(len);
            plant(&mut words, 0..head, &trigger_token(early), spec.trigger_repeats, rng);
            plant(&mut words, spec.signal_offset_tokens..len, &trigger_token(late), spec.trigger_repeats, rng);
        }
    }
    (words, label)
}

fn split(spec: &SynthSpec, key: u64, n: usize, prefix: &str) -> Vec<Record> {
    let mut rng = substream(spec.seed, Stream::Synth, key);
    (0..n)
        .map(|i| {
            let (words, label) = document(spec, i, &mut rng);
            Record {
                id: format!("{prefix}{i:06}"),
                text: words.join(" "),
                label,
            }
        })
        .collect()
}

/// Returns `(train, test)`.
pub fn generate(spec: &SynthSpec) -> Result<(Vec<Record>, Vec<Record>)> {
    spec.validate()?;
    Ok((split(spec, 0, spec.n_train, "train-"), split(spec, 1, spec.n_test, "test-")))
}

/// Writes `train.jsonl`, `test.jsonl` and a `spec.json` echo into `dir`.
pub fn write(spec: &SynthSpec, dir: &Path) -> Result<()> {
    let (train, test) = generate(spec)?;
    fs::create_dir_all(dir)?;
    write_corpus(&dir.join("train.jsonl"), &train)?;
    write_corpus(&dir.join("test.jsonl"), &test)?;
    fs::write(dir.join("spec.json"), serde_json::to_string_pretty(spec)? + "\n")?;
    Ok(())
}
