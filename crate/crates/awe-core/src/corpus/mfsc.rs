//! Mel-frequency spectral coefficients: log mel-filterbank energies per
//! frame, with no cepstral transform.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::CorpusError;
use crate::tensor::Tensor;

/// Framing and filterbank parameters. Defaults follow 25 ms windows with a
/// 10 ms hop over 16 kHz audio and 39 mel bands.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MfscConfig {
    pub sample_rate_hz: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub log_floor: f64,
}

impl Default for MfscConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 39,
            log_floor: 1e-10,
        }
    }
}

impl MfscConfig {
    pub fn window_samples(&self) -> usize {
        (self.sample_rate_hz as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.sample_rate_hz as f64 * self.hop_ms / 1000.0).round() as usize
    }

    fn validate(&self) -> Result<(), CorpusError> {
        if self.window_ms <= self.hop_ms || self.hop_ms <= 0.0 {
            return Err(CorpusError::Config(format!(
                "window {} ms must exceed hop {} ms > 0",
                self.window_ms, self.hop_ms
            )));
        }
        if self.n_mels == 0 {
            return Err(CorpusError::Config("n_mels must be >= 1".into()));
        }
        Ok(())
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10.0f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank over FFT bins `0..=n_fft/2`.
/// Returns one weight vector per band.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: f64) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let mel_max = hz_to_mel(sample_rate / 2.0);
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate / n_fft as f64;
    let mut bank = Vec::with_capacity(n_mels);
    for f in 0..n_mels {
        let (lo, center, hi) = (points[f], points[f + 1], points[f + 2]);
        let mut weights = vec![0.0; n_bins];
        for (b, w) in weights.iter_mut().enumerate() {
            let freq = b as f64 * bin_hz;
            if freq > lo && freq < hi {
                *w = if freq <= center {
                    (freq - lo) / (center - lo)
                } else {
                    (hi - freq) / (hi - center)
                };
            }
        }
        bank.push(weights);
    }
    bank
}

fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (std::f64::consts::TAU * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Extract a `T x n_mels` feature matrix from a mono waveform.
///
/// `T = floor((len - window) / hop) + 1`; each frame is the log of the mel
/// filterbank energies of the Hamming-windowed power spectrum, offset by
/// `log_floor`. Deterministic.
pub fn extract_mfsc(pcm: &[f32], cfg: &MfscConfig) -> Result<Tensor<f32>, CorpusError> {
    cfg.validate()?;
    let window = cfg.window_samples();
    let hop = cfg.hop_samples();
    if pcm.len() < window {
        return Err(CorpusError::WaveformTooShort {
            samples: pcm.len(),
            window,
        });
    }
    let n_frames = (pcm.len() - window) / hop + 1;
    let win = hamming(window);
    let bank = mel_filterbank(cfg.n_mels, window, cfg.sample_rate_hz as f64);
    let n_bins = window / 2 + 1;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(window);
    let mut out = Vec::with_capacity(n_frames * cfg.n_mels);
    let mut buf = vec![Complex::new(0.0, 0.0); window];
    for t in 0..n_frames {
        let start = t * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(pcm[start + i] as f64 * win[i], 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();
        for weights in &bank {
            let energy: f64 = weights
                .iter()
                .zip(&power)
                .map(|(&w, &p)| w * p)
                .sum();
            out.push((energy + cfg.log_floor).ln() as f32);
        }
    }
    Ok(Tensor::from_vec(&[n_frames, cfg.n_mels], out).expect("frame count matches data"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_second_at_16k_gives_98_frames() {
        let cfg = MfscConfig::default();
        let pcm = vec![0.0f32; 16_000];
        let t = extract_mfsc(&pcm, &cfg).unwrap();
        assert_eq!(t.shape(), &[98, 39]);
    }

    #[test]
    fn zeros_map_to_log_floor() {
        let cfg = MfscConfig::default();
        let pcm = vec![0.0f32; 800];
        let t = extract_mfsc(&pcm, &cfg).unwrap();
        let expect = (cfg.log_floor).ln() as f32;
        assert!(t.data().iter().all(|&v| (v - expect).abs() < 1e-6));
    }

    #[test]
    fn too_short_waveform_is_rejected() {
        let cfg = MfscConfig::default();
        let err = extract_mfsc(&[0.0; 100], &cfg).unwrap_err();
        assert!(matches!(err, CorpusError::WaveformTooShort { .. }));
    }

    #[test]
    fn sine_at_band_center_concentrates_energy_and_matches_dft_oracle() {
        let cfg = MfscConfig::default();
        let window = cfg.window_samples();
        let sr = cfg.sample_rate_hz as f64;
        let bank = mel_filterbank(cfg.n_mels, window, sr);
        // Pick the FFT bin with the largest weight in band 20 and synthesize
        // a sine exactly on that bin.
        let band = 20;
        let bin = bank[band]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let freq = bin as f64 * sr / window as f64;
        let pcm: Vec<f32> = (0..window)
            .map(|i| (std::f64::consts::TAU * freq * i as f64 / sr).sin() as f32)
            .collect();
        let feats = extract_mfsc(&pcm, &cfg).unwrap();
        assert_eq!(feats.shape()[0], 1);

        // Energy concentrated at (or adjacent to) the target band.
        let argmax = feats
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        assert!(
            (argmax as i64 - band as i64).abs() <= 1,
            "energy peaked at band {argmax}, expected near {band}"
        );

        // Naive O(N^2) DFT-summation oracle for the same frame.
        let win = hamming(window);
        let windowed: Vec<f64> = pcm
            .iter()
            .zip(&win)
            .map(|(&x, &w)| x as f64 * w)
            .collect();
        for (b, weights) in bank.iter().enumerate() {
            let mut energy = 0.0;
            for (k, &w) in weights.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let mut re = 0.0;
                let mut im = 0.0;
                for (n, &x) in windowed.iter().enumerate() {
                    let ang = std::f64::consts::TAU * k as f64 * n as f64 / window as f64;
                    re += x * ang.cos();
                    im -= x * ang.sin();
                }
                energy += w * (re * re + im * im);
            }
            let oracle = (energy + cfg.log_floor).ln();
            let got = feats.data()[b] as f64;
            assert!(
                (oracle - got).abs() < 1e-4,
                "band {b}: oracle {oracle} vs fft {got}"
            );
        }
    }
}
