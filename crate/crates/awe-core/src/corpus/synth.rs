//! Synthetic desk-scale corpora.
//!
//! Word types are random phone strings over the feature-table inventory; each
//! phone owns a fixed 39-dimensional prototype vector derived from a random
//! linear map of its feature vector, so phones that sound alike in the
//! feature space also lie close in the acoustic space. A segment is the
//! concatenation of per-phone prototype blocks plus a speaker offset and
//! Gaussian frame noise. Everything is deterministic given the seed, with
//! per-segment streams keyed by `seed ^ fnv1a(segment_id)`.

use std::collections::BTreeMap;

use super::{CorpusError, CorpusSplit, Split, WordSegment};
use crate::phonology::FeatureTable;
use crate::rng::{fnv1a, SeededRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub n_word_types: usize,
    pub n_speakers: usize,
    pub segments_per_type: usize,
    #[serde(default = "default_proto_dim")]
    pub phone_proto_dim: usize,
    pub noise_std: f64,
    pub speaker_shift_std: f64,
    pub duration_jitter: f64,
    pub seed: u64,
    #[serde(default = "default_min_phones")]
    pub min_phones: usize,
    #[serde(default = "default_max_phones")]
    pub max_phones: usize,
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    #[serde(default = "default_valid_frac")]
    pub valid_frac: f64,
}

fn default_proto_dim() -> usize {
    39
}
fn default_min_phones() -> usize {
    4
}
fn default_max_phones() -> usize {
    9
}
fn default_train_frac() -> f64 {
    0.7
}
fn default_valid_frac() -> f64 {
    0.15
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_word_types: 20,
            n_speakers: 5,
            segments_per_type: 20,
            phone_proto_dim: 39,
            noise_std: 0.3,
            speaker_shift_std: 0.2,
            duration_jitter: 0.8,
            seed: 1,
            min_phones: 4,
            max_phones: 9,
            train_frac: 0.7,
            valid_frac: 0.15,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), CorpusError> {
        if self.n_word_types < 1 || self.n_speakers < 1 || self.segments_per_type < 1 {
            return Err(CorpusError::Config("all counts must be >= 1".into()));
        }
        if self.noise_std < 0.0 || self.speaker_shift_std < 0.0 || self.duration_jitter < 0.0 {
            return Err(CorpusError::Config("std values must be >= 0".into()));
        }
        if self.min_phones < 1 || self.min_phones > self.max_phones {
            return Err(CorpusError::Config("invalid phone-count range".into()));
        }
        if !(0.0..=1.0).contains(&(self.train_frac + self.valid_frac)) {
            return Err(CorpusError::Config("split fractions exceed 1".into()));
        }
        Ok(())
    }
}

/// Fixed prototype vector per phone: a shared random linear map of the
/// ternary feature vector plus small per-phone jitter.
pub fn phone_prototypes(cfg: &SynthConfig, table: &FeatureTable) -> BTreeMap<String, Vec<f32>> {
    let dim = cfg.phone_proto_dim;
    let f = table.n_features();
    let mut rng = SeededRng::derive(cfg.seed, "phone-prototypes");
    let scale = 1.0 / (f as f64).sqrt();
    let map: Vec<f64> = (0..dim * f).map(|_| rng.normal() * scale).collect();
    let mut protos = BTreeMap::new();
    for symbol in table.symbols() {
        let phone = table.phone(symbol).expect("symbol from table");
        let feats = table.features(&phone).expect("row exists");
        let mut v = Vec::with_capacity(dim);
        for d in 0..dim {
            let mut acc = 0.0;
            for (j, &fv) in feats.iter().enumerate() {
                acc += map[d * f + j] * fv as f64;
            }
            v.push(acc);
        }
        let mut jitter_rng = SeededRng::derive(cfg.seed, &format!("proto-jitter/{symbol}"));
        for x in v.iter_mut() {
            *x += jitter_rng.normal() * 0.25;
        }
        protos.insert(symbol.clone(), v.iter().map(|&x| x as f32).collect());
    }
    protos
}

/// Generate a corpus. Word types share phone structure across their
/// segments; segments differ by speaker offset, frame noise and duration
/// jitter. Bit-identical for equal configs.
pub fn synthesize_corpus(
    cfg: &SynthConfig,
    table: &FeatureTable,
) -> Result<CorpusSplit, CorpusError> {
    cfg.validate()?;
    let mut master = SeededRng::derive(cfg.seed, "synth-master");
    let protos = phone_prototypes(cfg, table);
    let inventory: Vec<String> = table.symbols().to_vec();

    // Word types: distinct random phone strings.
    let mut vocabulary: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut type_names = Vec::with_capacity(cfg.n_word_types);
    let mut seen = std::collections::HashSet::new();
    for k in 0..cfg.n_word_types {
        let phones = loop {
            let len = master.range_inclusive(cfg.min_phones, cfg.max_phones);
            let candidate: Vec<String> = (0..len)
                .map(|_| master.choose(&inventory).clone())
                .collect();
            if seen.insert(candidate.join(" ")) {
                break candidate;
            }
        };
        let name = format!("w{k:03}");
        vocabulary.insert(name.clone(), phones);
        type_names.push(name);
    }

    // Base frame count per phone position, shared by all segments of a type.
    let mut base_lens: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for name in &type_names {
        let lens = vocabulary[name]
            .iter()
            .map(|_| master.range_inclusive(4, 7))
            .collect();
        base_lens.insert(name.clone(), lens);
    }

    // Speaker offsets.
    let speaker_ids: Vec<String> = (0..cfg.n_speakers).map(|s| format!("s{s:02}")).collect();
    let mut speaker_offsets: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for sid in &speaker_ids {
        let mut rng = SeededRng::derive(cfg.seed, &format!("speaker/{sid}"));
        let v = (0..cfg.phone_proto_dim)
            .map(|_| rng.normal() * cfg.speaker_shift_std)
            .collect();
        speaker_offsets.insert(sid.clone(), v);
    }

    let mut corpus = CorpusSplit::default();
    corpus.vocabulary = vocabulary.clone();

    for name in &type_names {
        let phones = &vocabulary[name];
        let lens = &base_lens[name];
        // Deterministic split sizes per type.
        let n = cfg.segments_per_type;
        let n_train = (cfg.train_frac * n as f64).round() as usize;
        let n_valid = (cfg.valid_frac * n as f64).round() as usize;
        let n_train = n_train.min(n);
        let n_valid = n_valid.min(n - n_train);
        for k in 0..n {
            let speaker = &speaker_ids[master.below(speaker_ids.len())];
            let segment_id = format!("{name}_{speaker}_{k:03}");
            let mut rng = SeededRng::new(cfg.seed ^ fnv1a(segment_id.as_bytes()));
            let offset = &speaker_offsets[speaker];
            let mut rows: Vec<f32> = Vec::new();
            let mut t_total = 0usize;
            for (p, base) in phones.iter().zip(lens) {
                let jitter = rng.normal() * cfg.duration_jitter;
                let len = ((*base as f64 + jitter).round() as i64).clamp(3, 8) as usize;
                let proto = &protos[p];
                for _ in 0..len {
                    for d in 0..cfg.phone_proto_dim {
                        let noise = rng.normal() * cfg.noise_std;
                        rows.push((proto[d] as f64 + offset[d] + noise) as f32);
                    }
                }
                t_total += len;
            }
            let frames = Tensor::from_vec(&[t_total, cfg.phone_proto_dim], rows)
                .expect("row count matches");
            let segment = WordSegment {
                segment_id,
                word_type: name.clone(),
                phones: phones.clone(),
                frames,
                speaker_id: speaker.clone(),
                // 10 ms hop plus the 15 ms window tail.
                duration_s: t_total as f64 * 0.010 + 0.015,
            };
            segment.validate(cfg.phone_proto_dim)?;
            let split = if k < n_train {
                Split::Train
            } else if k < n_train + n_valid {
                Split::Valid
            } else {
                Split::Test
            };
            corpus.insert(split, segment);
        }
    }
    corpus.check_disjoint()?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phonology::bundled_feature_table;

    fn tiny_cfg() -> SynthConfig {
        SynthConfig {
            n_word_types: 4,
            n_speakers: 2,
            segments_per_type: 6,
            noise_std: 0.1,
            speaker_shift_std: 0.1,
            duration_jitter: 0.5,
            seed: 11,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let table = bundled_feature_table();
        let cfg = tiny_cfg();
        let a = synthesize_corpus(&cfg, &table).unwrap();
        let b = synthesize_corpus(&cfg, &table).unwrap();
        assert_eq!(a.n_segments(), b.n_segments());
        for ((_, x), (_, y)) in a.all_segments().zip(b.all_segments()) {
            assert_eq!(x.segment_id, y.segment_id);
            assert_eq!(x.frames.data(), y.frames.data());
        }
    }

    #[test]
    fn zero_noise_makes_type_segments_identical() {
        let table = bundled_feature_table();
        let cfg = SynthConfig {
            noise_std: 0.0,
            speaker_shift_std: 0.0,
            duration_jitter: 0.0,
            ..tiny_cfg()
        };
        let corpus = synthesize_corpus(&cfg, &table).unwrap();
        let mut by_type: BTreeMap<&str, Vec<&WordSegment>> = BTreeMap::new();
        for (_, seg) in corpus.all_segments() {
            by_type.entry(&seg.word_type).or_default().push(seg);
        }
        for segs in by_type.values() {
            for s in &segs[1..] {
                assert_eq!(s.frames.data(), segs[0].frames.data());
            }
        }
    }

    #[test]
    fn shared_phones_mean_closer_prototypes() {
        let table = bundled_feature_table();
        let cfg = tiny_cfg();
        let protos = phone_prototypes(&cfg, &table);
        // Two words sharing 3 of 4 phones vs. two disjoint words.
        let w1 = ["a", "b", "t", "s"];
        let w2 = ["a", "b", "t", "m"];
        let w3 = ["i", "ç", "ʊ", "g"];
        let dist = |x: &[&str], y: &[&str]| -> f64 {
            let mut total = 0.0;
            for (px, py) in x.iter().zip(y) {
                let vx = &protos[*px];
                let vy = &protos[*py];
                total += vx
                    .iter()
                    .zip(vy)
                    .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
            }
            total / x.len() as f64
        };
        assert!(dist(&w1, &w2) < dist(&w1, &w3));
    }

    #[test]
    fn vocabulary_covers_all_segments() {
        let table = bundled_feature_table();
        let corpus = synthesize_corpus(&tiny_cfg(), &table).unwrap();
        for (_, seg) in corpus.all_segments() {
            assert!(corpus.vocabulary.contains_key(&seg.word_type));
        }
        assert!(!corpus.train.is_empty());
        assert!(!corpus.valid.is_empty());
        assert!(!corpus.test.is_empty());
    }
}
