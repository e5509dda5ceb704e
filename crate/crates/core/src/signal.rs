//! Acoustic front-end: 80-channel log-Mel filterbanks, utterance-level CMVN
//! and SpecAugment masking.
//!
//! Training order is `logmel → cmvn → spec_augment`, so masks are filled
//! with the normalised mean (zero).

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidWaveform("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidWaveform(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads a mono 16-bit PCM WAV file.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let audio_err = |msg: String| Error::Audio {
            path: path.to_path_buf(),
            msg,
        };
        let mut reader = hound::WavReader::open(path).map_err(|e| audio_err(e.to_string()))?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::WavFormat(format!(
                "{}: {} channels, only mono is supported",
                path.display(),
                spec.channels
            )));
        }
        if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
            return Err(Error::WavFormat(format!(
                "{}: expected 16-bit PCM, got {:?} {} bits",
                path.display(),
                spec.sample_format,
                spec.bits_per_sample
            )));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| audio_err(e.to_string()))?;
        Self::new(samples, spec.sample_rate)
    }

    /// Writes mono 16-bit PCM; samples are clipped to [-1, 1].
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let to_err = |e: hound::Error| Error::Audio {
            path: path.to_path_buf(),
            msg: e.to_string(),
        };
        let mut writer = hound::WavWriter::create(path, spec).map_err(to_err)?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(v).map_err(to_err)?;
        }
        writer.finalize().map_err(to_err)
    }
}

/// Time × channel feature matrix, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub frames: Vec<f32>,
    pub num_frames: usize,
    pub channels: usize,
    pub frame_shift: f64,
    pub utterance_id: String,
}

impl FeatureMatrix {
    pub fn new(frames: Vec<f32>, channels: usize, frame_shift: f64, utterance_id: impl Into<String>) -> Result<Self> {
        if channels == 0 || frames.is_empty() || !frames.len().is_multiple_of(channels) {
            return Err(Error::InvalidWaveform(format!(
                "feature data of length {} is not a positive multiple of {channels} channels",
                frames.len()
            )));
        }
        Ok(Self {
            num_frames: frames.len() / channels,
            frames,
            channels,
            frame_shift,
            utterance_id: utterance_id.into(),
        })
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.frames[t * self.channels..(t + 1) * self.channels]
    }

    pub fn get(&self, t: usize, c: usize) -> f32 {
        self.frames[t * self.channels + c]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    /// Upper band edge; `None` means Nyquist.
    pub f_max: Option<f64>,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            win_length: 400,
            hop_length: 160,
            n_fft: 512,
            n_mels: 80,
            f_min: 20.0,
            f_max: None,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn frame_shift(&self) -> f64 {
        self.hop_length as f64 / self.sample_rate as f64
    }

    pub fn num_frames(&self, num_samples: usize) -> Option<usize> {
        (num_samples >= self.win_length).then(|| (num_samples - self.win_length) / self.hop_length + 1)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Precomputed window, triangular filterbank and FFT plan.
pub struct MelExtractor {
    cfg: MelConfig,
    window: Vec<f64>,
    /// `n_mels` rows of `(first_bin, weights)`.
    filters: Vec<(usize, Vec<f64>)>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelExtractor {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        if cfg.win_length == 0 || cfg.hop_length == 0 || cfg.n_fft < cfg.win_length || cfg.n_mels == 0 {
            return Err(Error::InvalidWaveform(format!("invalid mel config {cfg:?}")));
        }
        let window = (0..cfg.win_length)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / cfg.win_length as f64).cos())
            .collect();
        let nyquist = cfg.sample_rate as f64 / 2.0;
        let f_max = cfg.f_max.unwrap_or(nyquist).min(nyquist);
        let (m_lo, m_hi) = (hz_to_mel(cfg.f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let n_bins = cfg.n_fft / 2 + 1;
        let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
        let filters = (0..cfg.n_mels)
            .map(|m| {
                let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let weights: Vec<(usize, f64)> = (0..n_bins)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = if f > lo && f <= center {
                            (f - lo) / (center - lo)
                        } else if f > center && f < hi {
                            (hi - f) / (hi - center)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w))
                    })
                    .collect();
                let first = weights.first().map_or(0, |w| w.0);
                (first, weights.into_iter().map(|w| w.1).collect())
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self {
            cfg,
            window,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Centre frequency of every filter in Hz.
    pub fn center_frequencies(&self) -> Vec<f64> {
        let nyquist = self.cfg.sample_rate as f64 / 2.0;
        let f_max = self.cfg.f_max.unwrap_or(nyquist).min(nyquist);
        let (m_lo, m_hi) = (hz_to_mel(self.cfg.f_min), hz_to_mel(f_max));
        (1..=self.cfg.n_mels)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (self.cfg.n_mels + 1) as f64))
            .collect()
    }

    pub fn compute(&self, wave: &Waveform, utterance_id: &str) -> Result<FeatureMatrix> {
        let cfg = &self.cfg;
        if wave.sample_rate != cfg.sample_rate {
            return Err(Error::InvalidWaveform(format!(
                "sample rate {} does not match feature config {}",
                wave.sample_rate, cfg.sample_rate
            )));
        }
        let num_frames = cfg.num_frames(wave.samples.len()).ok_or(Error::TooShort {
            samples: wave.samples.len(),
            window: cfg.win_length,
        })?;
        let n_bins = cfg.n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0f64; n_bins];
        let mut out = Vec::with_capacity(num_frames * cfg.n_mels);
        for t in 0..num_frames {
            let start = t * cfg.hop_length;
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < cfg.win_length {
                    Complex::new(wave.samples[start + i] as f64 * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (first, weights) in &self.filters {
                let energy: f64 = weights.iter().zip(&power[*first..]).map(|(w, p)| w * p).sum();
                out.push((energy + cfg.log_floor).ln() as f32);
            }
        }
        FeatureMatrix::new(out, cfg.n_mels, cfg.frame_shift(), utterance_id)
    }
}

/// Log-Mel filterbank features: `floor((len − win) / hop) + 1` frames.
pub fn logmel(wave: &Waveform, cfg: &MelConfig) -> Result<FeatureMatrix> {
    MelExtractor::new(cfg.clone())?.compute(wave, "")
}

pub const CMVN_VARIANCE_FLOOR: f64 = 1e-8;

/// Per-utterance, per-channel mean and variance normalisation.
pub fn cmvn(feat: &FeatureMatrix) -> FeatureMatrix {
    let (t_len, c_len) = (feat.num_frames, feat.channels);
    let mut out = feat.clone();
    for c in 0..c_len {
        let mean = (0..t_len).map(|t| feat.get(t, c) as f64).sum::<f64>() / t_len as f64;
        let var = (0..t_len)
            .map(|t| (feat.get(t, c) as f64 - mean).powi(2))
            .sum::<f64>()
            / t_len as f64;
        let inv_std = 1.0 / var.max(CMVN_VARIANCE_FLOOR).sqrt();
        for t in 0..t_len {
            out.frames[t * c_len + c] = ((feat.get(t, c) as f64 - mean) * inv_std) as f32;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecAugmentConfig {
    pub num_freq_masks: usize,
    pub max_freq_width: usize,
    pub num_time_masks: usize,
    pub max_time_width: usize,
    pub seed: u64,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            num_freq_masks: 2,
            max_freq_width: 27,
            num_time_masks: 2,
            max_time_width: 40,
            seed: 0,
        }
    }
}

impl SpecAugmentConfig {
    pub fn disabled() -> Self {
        Self {
            num_freq_masks: 0,
            num_time_masks: 0,
            ..Self::default()
        }
    }
}

/// Zeroes random contiguous channel and frame bands. Widths are drawn
/// uniformly from `0..=max` after clamping `max` to the matrix dimensions.
pub fn spec_augment(feat: &FeatureMatrix, cfg: &SpecAugmentConfig) -> FeatureMatrix {
    let mut out = feat.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (t_len, c_len) = (feat.num_frames, feat.channels);
    let max_f = cfg.max_freq_width.min(c_len);
    for _ in 0..cfg.num_freq_masks {
        let w = rng.gen_range(0..=max_f);
        let f0 = rng.gen_range(0..=c_len - w);
        for t in 0..t_len {
            out.frames[t * c_len + f0..t * c_len + f0 + w].fill(0.0);
        }
    }
    let max_t = cfg.max_time_width.min(t_len);
    for _ in 0..cfg.num_time_masks {
        let w = rng.gen_range(0..=max_t);
        let t0 = rng.gen_range(0..=t_len - w);
        out.frames[t0 * c_len..(t0 + w) * c_len].fill(0.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, seconds: f64, sr: u32) -> Waveform {
        let n = (seconds * sr as f64) as usize;
        let samples = (0..n)
            .map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin()) as f32)
            .collect();
        Waveform::new(samples, sr).unwrap()
    }

    fn random_matrix(t: usize, c: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * c).map(|_| rng.gen_range(-5.0f32..5.0)).collect();
        FeatureMatrix::new(data, c, 0.01, "r").unwrap()
    }

    #[test]
    fn zero_signal_gives_log_floor() {
        let wave = Waveform::new(vec![0.0; 16000], 16000).unwrap();
        let feat = logmel(&wave, &MelConfig::default()).unwrap();
        assert_eq!((feat.num_frames, feat.channels), (98, 80));
        let floor = (1e-10f64).ln() as f32;
        assert!(feat.frames.iter().all(|&v| v == floor));
    }

    #[test]
    fn frame_count_formula() {
        let cfg = MelConfig::default();
        for n in [400, 401, 559, 560, 16000, 12345] {
            let wave = Waveform::new(vec![0.1; n], 16000).unwrap();
            let feat = logmel(&wave, &cfg).unwrap();
            assert_eq!(feat.num_frames, (n - 400) / 160 + 1, "n = {n}");
        }
    }

    #[test]
    fn too_short_is_an_error() {
        let wave = Waveform::new(vec![0.0; 399], 16000).unwrap();
        let err = logmel(&wave, &MelConfig::default()).unwrap_err();
        assert!(err.to_string().contains("utterance shorter than one frame"));
    }

    #[test]
    fn sample_rate_mismatch_is_an_error() {
        let wave = Waveform::new(vec![0.0; 8000], 8000).unwrap();
        assert!(logmel(&wave, &MelConfig::default()).is_err());
    }

    #[test]
    fn tone_peaks_at_nearest_mel_centre() {
        // independent mel oracle: HTK mel scale, 82 equally spaced edges
        let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let (lo, hi) = (mel(20.0), mel(8000.0));
        let centres: Vec<f64> = (1..=80).map(|i| inv(lo + (hi - lo) * i as f64 / 81.0)).collect();
        let nearest = centres
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 440.0).abs().total_cmp(&(b.1 - 440.0).abs()))
            .unwrap()
            .0;

        let feat = logmel(&tone(440.0, 0.5, 16000), &MelConfig::default()).unwrap();
        for t in 0..feat.num_frames {
            let row = feat.row(t);
            let argmax = (0..80).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, nearest, "frame {t}");
        }
    }

    #[test]
    fn wav_round_trip_and_channel_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let wave = tone(300.0, 0.1, 16000);
        wave.write_wav(&path).unwrap();
        let back = Waveform::read_wav(&path).unwrap();
        assert_eq!(back.samples.len(), wave.samples.len());
        assert!(back.samples.iter().zip(&wave.samples).all(|(a, b)| (a - b).abs() < 1e-4));

        let stereo = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        for _ in 0..10 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        let err = Waveform::read_wav(&stereo).unwrap_err();
        assert!(matches!(err, Error::WavFormat(_)), "{err}");
    }

    #[test]
    fn cmvn_constant_channel_is_zero() {
        let mut m = random_matrix(20, 4, 1);
        for t in 0..20 {
            m.frames[t * 4 + 2] = 7.5;
        }
        let n = cmvn(&m);
        assert!((0..20).all(|t| n.get(t, 2) == 0.0));
    }

    #[test]
    fn cmvn_statistics() {
        let n = cmvn(&random_matrix(50, 80, 2));
        for c in 0..80 {
            let mean = (0..50).map(|t| n.get(t, c) as f64).sum::<f64>() / 50.0;
            let std = ((0..50).map(|t| (n.get(t, c) as f64 - mean).powi(2)).sum::<f64>() / 50.0).sqrt();
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((std - 1.0).abs() < 1e-3, "std {std}");
        }
    }

    #[test]
    fn cmvn_affine_invariant_and_idempotent() {
        let x = random_matrix(30, 80, 3);
        let mut y = x.clone();
        y.frames.iter_mut().for_each(|v| *v = 2.0 * *v + 3.0);
        let (a, b) = (cmvn(&x), cmvn(&y));
        assert!(a.frames.iter().zip(&b.frames).all(|(p, q)| (p - q).abs() < 1e-5));
        let twice = cmvn(&a);
        assert!(a.frames.iter().zip(&twice.frames).all(|(p, q)| (p - q).abs() < 1e-6));
    }

    #[test]
    fn spec_augment_disabled_is_identity() {
        let x = random_matrix(98, 80, 4);
        assert_eq!(spec_augment(&x, &SpecAugmentConfig::disabled()), x);
    }

    #[test]
    fn spec_augment_deterministic() {
        let x = random_matrix(98, 80, 5);
        let cfg = SpecAugmentConfig {
            seed: 9,
            ..Default::default()
        };
        assert_eq!(spec_augment(&x, &cfg), spec_augment(&x, &cfg));
    }

    #[test]
    fn single_frequency_mask_zeroes_contiguous_channels() {
        let x = random_matrix(98, 80, 6);
        for seed in 0..50 {
            let cfg = SpecAugmentConfig {
                num_freq_masks: 1,
                max_freq_width: 2,
                num_time_masks: 0,
                max_time_width: 0,
                seed,
            };
            let y = spec_augment(&x, &cfg);
            let changed: Vec<usize> = (0..80).filter(|&c| (0..98).any(|t| y.get(t, c) != x.get(t, c))).collect();
            let w = changed.len();
            assert!(w <= 2);
            if w == 2 {
                assert_eq!(changed[1], changed[0] + 1);
            }
            let zeroed = y.frames.iter().zip(&x.frames).filter(|(a, b)| a != b).count();
            assert_eq!(zeroed, w * 98);
            for &c in &changed {
                assert!((0..98).all(|t| y.get(t, c) == 0.0));
            }
        }
    }
}
