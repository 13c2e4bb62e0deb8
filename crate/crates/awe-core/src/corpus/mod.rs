//! Time-aligned spoken word segments: ingestion, feature extraction,
//! synthetic generation, and train/valid/test splits.

pub mod manifest;
pub mod mfsc;
pub mod ngram;
pub mod synth;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::Tensor;

pub use manifest::{load_manifest, read_feature_file, write_feature_file, write_manifest};
pub use mfsc::{extract_mfsc, MfscConfig};
pub use ngram::{ngram_inventory, ngrams_of, NgramInventory};
pub use synth::{synthesize_corpus, SynthConfig};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus: {0}")]
    Config(String),
    #[error("corpus: waveform of {samples} samples is shorter than one {window}-sample window")]
    WaveformTooShort { samples: usize, window: usize },
    #[error("corpus: manifest line {line}: {msg}")]
    ManifestLine { line: usize, msg: String },
    #[error("corpus: segment '{segment_id}': {msg}")]
    Segment { segment_id: String, msg: String },
    #[error("corpus: duplicate segment id '{0}'")]
    DuplicateSegment(String),
    #[error("corpus: missing file '{0}'")]
    MissingFile(String),
    #[error("corpus: phone n-gram '{0}' not in inventory (strict mode)")]
    UnknownNgram(String),
    #[error("corpus: io error: {0}")]
    Io(String),
}

/// One spoken word token with its acoustics and symbolic annotation.
#[derive(Debug, Clone)]
pub struct WordSegment {
    pub segment_id: String,
    pub word_type: String,
    pub phones: Vec<String>,
    /// `T x n_mels` feature matrix.
    pub frames: Tensor<f32>,
    pub speaker_id: String,
    pub duration_s: f64,
}

impl WordSegment {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    fn validate(&self, n_mels: usize) -> Result<(), CorpusError> {
        let shape = self.frames.shape();
        if shape.len() != 2 || shape[0] < 1 || shape[1] != n_mels {
            return Err(CorpusError::Segment {
                segment_id: self.segment_id.clone(),
                msg: format!("frame matrix {shape:?} is not T x {n_mels} with T >= 1"),
            });
        }
        if self.duration_s <= 0.0 {
            return Err(CorpusError::Segment {
                segment_id: self.segment_id.clone(),
                msg: "duration must be positive".into(),
            });
        }
        if self.phones.is_empty() {
            return Err(CorpusError::Segment {
                segment_id: self.segment_id.clone(),
                msg: "phone sequence is empty".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// A corpus partitioned into train/valid/test with a type-level vocabulary.
#[derive(Debug, Clone, Default)]
pub struct CorpusSplit {
    pub train: Vec<WordSegment>,
    pub valid: Vec<WordSegment>,
    pub test: Vec<WordSegment>,
    /// Word type -> canonical phone sequence (first seen).
    pub vocabulary: BTreeMap<String, Vec<String>>,
}

impl CorpusSplit {
    pub fn split(&self, which: Split) -> &[WordSegment] {
        match which {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn n_segments(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn all_segments(&self) -> impl Iterator<Item = (Split, &WordSegment)> {
        self.train
            .iter()
            .map(|s| (Split::Train, s))
            .chain(self.valid.iter().map(|s| (Split::Valid, s)))
            .chain(self.test.iter().map(|s| (Split::Test, s)))
    }

    fn insert(&mut self, split: Split, segment: WordSegment) {
        self.vocabulary
            .entry(segment.word_type.clone())
            .or_insert_with(|| segment.phones.clone());
        match split {
            Split::Train => self.train.push(segment),
            Split::Valid => self.valid.push(segment),
            Split::Test => self.test.push(segment),
        }
    }

    fn check_disjoint(&self) -> Result<(), CorpusError> {
        let mut seen = std::collections::HashSet::new();
        for (_, seg) in self.all_segments() {
            if !seen.insert(seg.segment_id.as_str()) {
                return Err(CorpusError::DuplicateSegment(seg.segment_id.clone()));
            }
        }
        Ok(())
    }
}
