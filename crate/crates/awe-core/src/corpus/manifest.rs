//! Manifest ingestion and the raw feature-file format.
//!
//! A manifest is a UTF-8 TSV with header
//! `segment_id  split  word_type  phones  speaker_id  source  path  start_s  end_s`
//! where `phones` is space-separated and `source` is `audio` (a WAV file cut
//! by `start_s..end_s`) or `feats` (a precomputed feature file). Feature
//! files are little-endian 32-bit floats preceded by two little-endian u32
//! header words `T, dim`.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::{extract_mfsc, CorpusError, CorpusSplit, MfscConfig, Split, WordSegment};
use crate::phonology::FeatureTable;
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: &str =
    "segment_id\tsplit\tword_type\tphones\tspeaker_id\tsource\tpath\tstart_s\tend_s";

pub fn write_feature_file(path: &Path, frames: &Tensor<f32>) -> Result<(), CorpusError> {
    let shape = frames.shape();
    let mut bytes = Vec::with_capacity(8 + frames.numel() * 4);
    bytes.extend_from_slice(&(shape[0] as u32).to_le_bytes());
    bytes.extend_from_slice(&(shape[1] as u32).to_le_bytes());
    for v in frames.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| CorpusError::Io(format!("{}: {e}", path.display())))
}

pub fn read_feature_file(path: &Path) -> Result<Tensor<f32>, CorpusError> {
    let mut file = std::fs::File::open(path)
        .map_err(|_| CorpusError::MissingFile(path.display().to_string()))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| CorpusError::Io(format!("{}: {e}", path.display())))?;
    if bytes.len() < 8 {
        return Err(CorpusError::Io(format!(
            "{}: truncated feature header",
            path.display()
        )));
    }
    let t = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = 8 + t * dim * 4;
    if bytes.len() != expected {
        return Err(CorpusError::Io(format!(
            "{}: expected {expected} bytes for {t}x{dim}, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&[t, dim], data)
        .map_err(|e| CorpusError::Io(format!("{}: {e}", path.display())))
}

fn read_wav_span(
    path: &Path,
    start_s: f64,
    end_s: f64,
    segment_id: &str,
    expected_rate: u32,
) -> Result<Vec<f32>, CorpusError> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|_| CorpusError::MissingFile(path.display().to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(CorpusError::Segment {
            segment_id: segment_id.to_owned(),
            msg: format!("{}: expected mono audio, found {} channels", path.display(), spec.channels),
        });
    }
    if spec.sample_rate != expected_rate {
        return Err(CorpusError::Segment {
            segment_id: segment_id.to_owned(),
            msg: format!(
                "{}: sample rate {} does not match configured {expected_rate}",
                path.display(),
                spec.sample_rate
            ),
        });
    }
    let samples: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(|e| CorpusError::Io(format!("{}: {e}", path.display())))?,
        hound::SampleFormat::Int => {
            let denom = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / denom))
                .collect::<Result<_, _>>()
                .map_err(|e| CorpusError::Io(format!("{}: {e}", path.display())))?
        }
    };
    let sr = spec.sample_rate as f64;
    let a = (start_s * sr).round() as usize;
    let b = (end_s * sr).round() as usize;
    if end_s <= start_s || b > samples.len() {
        return Err(CorpusError::Segment {
            segment_id: segment_id.to_owned(),
            msg: format!(
                "span {start_s}..{end_s}s outside file of {} samples",
                samples.len()
            ),
        });
    }
    Ok(samples[a..b].to_vec())
}

/// Load a manifest, materializing frames from audio or precomputed feature
/// files. Relative paths resolve against the manifest's directory.
pub fn load_manifest(
    path: &Path,
    table: &FeatureTable,
    mfsc: &MfscConfig,
) -> Result<CorpusSplit, CorpusError> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| CorpusError::MissingFile(path.display().to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut corpus = CorpusSplit::default();
    let mut seen: HashSet<String> = HashSet::new();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == MANIFEST_HEADER => {}
        Some((_, other)) => {
            return Err(CorpusError::ManifestLine {
                line: 1,
                msg: format!("bad header '{other}'"),
            })
        }
        None => {
            return Err(CorpusError::ManifestLine {
                line: 1,
                msg: "empty manifest".into(),
            })
        }
    }
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 9 {
            return Err(CorpusError::ManifestLine {
                line: lineno,
                msg: format!("expected 9 tab-separated fields, found {}", fields.len()),
            });
        }
        let segment_id = fields[0].to_owned();
        if segment_id.is_empty() {
            return Err(CorpusError::ManifestLine {
                line: lineno,
                msg: "empty segment_id".into(),
            });
        }
        if !seen.insert(segment_id.clone()) {
            return Err(CorpusError::DuplicateSegment(segment_id));
        }
        let split = Split::parse(fields[1]).ok_or_else(|| CorpusError::Segment {
            segment_id: segment_id.clone(),
            msg: format!("unknown split '{}'", fields[1]),
        })?;
        let word_type = fields[2].to_owned();
        let phones: Vec<String> = fields[3].split(' ').map(str::to_owned).collect();
        if phones.is_empty() || phones.iter().any(String::is_empty) {
            return Err(CorpusError::Segment {
                segment_id: segment_id.clone(),
                msg: "empty phone sequence".into(),
            });
        }
        for p in &phones {
            if !table.contains(p) {
                return Err(CorpusError::Segment {
                    segment_id: segment_id.clone(),
                    msg: format!("phone '{p}' not in feature table"),
                });
            }
        }
        let speaker_id = fields[4].to_owned();
        let source = fields[5];
        let file_path = {
            let p = PathBuf::from(fields[6]);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let parse_secs = |s: &str, name: &str| -> Result<f64, CorpusError> {
            s.parse::<f64>().map_err(|_| CorpusError::Segment {
                segment_id: segment_id.clone(),
                msg: format!("bad {name} '{s}'"),
            })
        };
        let start_s = parse_secs(fields[7], "start_s")?;
        let end_s = parse_secs(fields[8], "end_s")?;
        let frames = match source {
            "feats" => read_feature_file(&file_path)?,
            "audio" => {
                let pcm = read_wav_span(&file_path, start_s, end_s, &segment_id, mfsc.sample_rate_hz)?;
                extract_mfsc(&pcm, mfsc).map_err(|e| CorpusError::Segment {
                    segment_id: segment_id.clone(),
                    msg: e.to_string(),
                })?
            }
            other => {
                return Err(CorpusError::Segment {
                    segment_id: segment_id.clone(),
                    msg: format!("unknown source '{other}' (expected audio|feats)"),
                })
            }
        };
        let duration_s = if end_s > start_s {
            end_s - start_s
        } else {
            frames.shape()[0] as f64 * mfsc.hop_ms / 1000.0 + (mfsc.window_ms - mfsc.hop_ms) / 1000.0
        };
        let segment = WordSegment {
            segment_id,
            word_type,
            phones,
            frames,
            speaker_id,
            duration_s,
        };
        segment.validate(mfsc.n_mels)?;
        corpus.insert(split, segment);
    }
    if corpus.n_segments() == 0 {
        return Err(CorpusError::ManifestLine {
            line: 1,
            msg: "manifest has no segments".into(),
        });
    }
    corpus.check_disjoint()?;
    Ok(corpus)
}

/// Write a corpus as `manifest.tsv` plus per-segment feature files under
/// `feats/`. Returns the manifest path.
pub fn write_manifest(corpus: &CorpusSplit, dir: &Path) -> Result<PathBuf, CorpusError> {
    let feats_dir = dir.join("feats");
    std::fs::create_dir_all(&feats_dir)
        .map_err(|e| CorpusError::Io(format!("{}: {e}", feats_dir.display())))?;
    let manifest_path = dir.join("manifest.tsv");
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for (split, seg) in corpus.all_segments() {
        let rel = format!("feats/{}.bin", seg.segment_id);
        write_feature_file(&dir.join(&rel), &seg.frames)?;
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\tfeats\t{}\t0\t{:.6}\n",
            seg.segment_id,
            split.as_str(),
            seg.word_type,
            seg.phones.join(" "),
            seg.speaker_id,
            rel,
            seg.duration_s,
        ));
    }
    let mut f = std::fs::File::create(&manifest_path)
        .map_err(|e| CorpusError::Io(format!("{}: {e}", manifest_path.display())))?;
    f.write_all(out.as_bytes())
        .map_err(|e| CorpusError::Io(format!("{}: {e}", manifest_path.display())))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth::{synthesize_corpus, SynthConfig};
    use crate::phonology::bundled_feature_table;

    #[test]
    fn feature_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let t = Tensor::from_vec(&[2, 3], vec![1.0f32, -2.5, 0.0, 4.25, 1e-7, 9.0]).unwrap();
        write_feature_file(&path, &t).unwrap();
        let back = read_feature_file(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn truncated_feature_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, [1, 0, 0, 0, 3, 0, 0, 0, 9]).unwrap();
        assert!(matches!(
            read_feature_file(&path),
            Err(CorpusError::Io(_))
        ));
    }

    #[test]
    fn manifest_roundtrip_preserves_metadata() {
        let table = bundled_feature_table();
        let cfg = SynthConfig {
            n_word_types: 3,
            n_speakers: 2,
            segments_per_type: 4,
            seed: 5,
            ..SynthConfig::default()
        };
        let corpus = synthesize_corpus(&cfg, &table).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(&corpus, dir.path()).unwrap();
        let loaded = load_manifest(&path, &table, &MfscConfig::default()).unwrap();
        assert_eq!(loaded.n_segments(), corpus.n_segments());
        assert_eq!(loaded.vocabulary, corpus.vocabulary);
        for ((s1, a), (s2, b)) in corpus.all_segments().zip(loaded.all_segments()) {
            assert_eq!(s1, s2);
            assert_eq!(a.segment_id, b.segment_id);
            assert_eq!(a.word_type, b.word_type);
            assert_eq!(a.phones, b.phones);
            assert_eq!(a.speaker_id, b.speaker_id);
            assert_eq!(a.frames.data(), b.frames.data());
        }
    }

    #[test]
    fn three_row_manifest_splits() {
        let table = bundled_feature_table();
        let dir = tempfile::tempdir().unwrap();
        let feat = Tensor::from_vec(&[2, 39], vec![0.5f32; 78]).unwrap();
        for name in ["a.bin", "b.bin", "c.bin"] {
            write_feature_file(&dir.path().join(name), &feat).unwrap();
        }
        let manifest = format!(
            "{MANIFEST_HEADER}\n\
             seg-a\ttrain\twort\ta b\tsp0\tfeats\ta.bin\t0\t0.1\n\
             seg-b\tvalid\twort\ta b\tsp0\tfeats\tb.bin\t0\t0.1\n\
             seg-c\ttest\twort\ta b\tsp1\tfeats\tc.bin\t0\t0.1\n"
        );
        let path = dir.path().join("manifest.tsv");
        std::fs::write(&path, manifest).unwrap();
        let corpus = load_manifest(&path, &table, &MfscConfig::default()).unwrap();
        assert_eq!(corpus.train.len(), 1);
        assert_eq!(corpus.valid.len(), 1);
        assert_eq!(corpus.test.len(), 1);
    }

    #[test]
    fn missing_file_error_names_path() {
        let table = bundled_feature_table();
        let dir = tempfile::tempdir().unwrap();
        let manifest = format!(
            "{MANIFEST_HEADER}\nseg-a\ttrain\twort\ta\tsp0\tfeats\tnope.bin\t0\t0.1\n"
        );
        let path = dir.path().join("manifest.tsv");
        std::fs::write(&path, manifest).unwrap();
        let err = load_manifest(&path, &table, &MfscConfig::default()).unwrap_err();
        match err {
            CorpusError::MissingFile(p) => assert!(p.contains("nope.bin")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_segment_id_conflicts() {
        let table = bundled_feature_table();
        let dir = tempfile::tempdir().unwrap();
        let feat = Tensor::from_vec(&[1, 39], vec![0.0f32; 39]).unwrap();
        write_feature_file(&dir.path().join("a.bin"), &feat).unwrap();
        let manifest = format!(
            "{MANIFEST_HEADER}\n\
             seg-a\ttrain\twort\ta\tsp0\tfeats\ta.bin\t0\t0.1\n\
             seg-a\ttest\twort\ta\tsp0\tfeats\ta.bin\t0\t0.1\n"
        );
        let path = dir.path().join("manifest.tsv");
        std::fs::write(&path, manifest).unwrap();
        assert!(matches!(
            load_manifest(&path, &table, &MfscConfig::default()),
            Err(CorpusError::DuplicateSegment(id)) if id == "seg-a"
        ));
    }

    #[test]
    fn bad_phone_names_segment() {
        let table = bundled_feature_table();
        let dir = tempfile::tempdir().unwrap();
        let feat = Tensor::from_vec(&[1, 39], vec![0.0f32; 39]).unwrap();
        write_feature_file(&dir.path().join("a.bin"), &feat).unwrap();
        let manifest = format!(
            "{MANIFEST_HEADER}\nseg-a\ttrain\twort\tzz9\tsp0\tfeats\ta.bin\t0\t0.1\n"
        );
        let path = dir.path().join("manifest.tsv");
        std::fs::write(&path, manifest).unwrap();
        let err = load_manifest(&path, &table, &MfscConfig::default()).unwrap_err();
        match err {
            CorpusError::Segment { segment_id, msg } => {
                assert_eq!(segment_id, "seg-a");
                assert!(msg.contains("zz9"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn audio_source_roundtrips_through_wav() {
        let table = bundled_feature_table();
        let dir = tempfile::tempdir().unwrap();
        let wav_path = dir.path().join("tone.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&wav_path, spec).unwrap();
        for i in 0..8000 {
            let v = (std::f64::consts::TAU * 440.0 * i as f64 / 16000.0).sin();
            writer.write_sample((v * 20000.0) as i16).unwrap();
        }
        writer.finalize().unwrap();
        let manifest = format!(
            "{MANIFEST_HEADER}\nseg-a\ttrain\twort\ta\tsp0\taudio\ttone.wav\t0.05\t0.35\n"
        );
        let path = dir.path().join("manifest.tsv");
        std::fs::write(&path, manifest).unwrap();
        let corpus = load_manifest(&path, &table, &MfscConfig::default()).unwrap();
        let seg = &corpus.train[0];
        // 0.3 s of audio at 16 kHz: floor((4800 - 400)/160) + 1 = 28 frames.
        assert_eq!(seg.frames.shape(), &[28, 39]);
        assert!((seg.duration_s - 0.3).abs() < 1e-9);
    }
}
