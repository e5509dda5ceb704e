//! Energy-based voice activity detection standing in for speaker diarization.
//!
//! Frames (25 ms / 10 ms) whose smoothed RMS exceeds
//! `max(abs_floor, factor · median RMS)` are speech; speech runs separated by
//! less than `hangover` seconds are merged, and segments shorter than
//! `min_duration` are dropped.

use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::signal::Waveform;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VadConfig {
    pub frame_seconds: f64,
    pub hop_seconds: f64,
    pub threshold_factor: f64,
    /// Absolute RMS floor below which nothing counts as speech.
    pub abs_floor: f64,
    /// Centred moving-average length in frames (odd).
    pub smoothing_frames: usize,
    pub hangover: f64,
    pub min_duration: f64,
}

impl VadConfig {
    /// Reads the `vad.` section over the defaults.
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let mut s = kv.section("vad");
        let mut c = Self::default();
        s.take("threshold_factor", &mut c.threshold_factor)?;
        s.take("abs_floor", &mut c.abs_floor)?;
        s.take("smoothing_frames", &mut c.smoothing_frames)?;
        s.take("hangover", &mut c.hangover)?;
        s.take("min_duration", &mut c.min_duration)?;
        s.finish()?;
        Ok(c)
    }
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            frame_seconds: 0.025,
            hop_seconds: 0.010,
            threshold_factor: 3.0,
            abs_floor: 1e-3,
            smoothing_frames: 3,
            hangover: 0.2,
            min_duration: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub utterance_id: String,
}

impl Segment {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// One line of the segments JSONL output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub recording_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub utterance_id: String,
}

impl SegmentRecord {
    pub fn new(recording_id: &str, seg: &Segment) -> Self {
        Self {
            recording_id: recording_id.to_string(),
            start_s: seg.start,
            end_s: seg.end,
            utterance_id: format!("{recording_id}_{}", seg.utterance_id),
        }
    }
}

fn frame_rms(wave: &Waveform, win: usize, hop: usize) -> Vec<f64> {
    if wave.samples.len() < win {
        return Vec::new();
    }
    let n = (wave.samples.len() - win) / hop + 1;
    (0..n)
        .map(|i| {
            let frame = &wave.samples[i * hop..i * hop + win];
            (frame.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / win as f64).sqrt()
        })
        .collect()
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Sorted, disjoint speech segments of at least `cfg.min_duration` seconds.
pub fn detect_segments(wave: &Waveform, cfg: &VadConfig) -> Vec<Segment> {
    let sr = wave.sample_rate as f64;
    let win = ((cfg.frame_seconds * sr).round() as usize).max(1);
    let hop = ((cfg.hop_seconds * sr).round() as usize).max(1);
    let rms = frame_rms(wave, win, hop);
    if rms.is_empty() {
        return Vec::new();
    }
    let half = cfg.smoothing_frames / 2;
    let smoothed: Vec<f64> = (0..rms.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(rms.len());
            rms[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let threshold = cfg.abs_floor.max(cfg.threshold_factor * median(&rms));

    // speech runs as inclusive frame ranges
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut current: Option<usize> = None;
    for (i, &e) in smoothed.iter().enumerate() {
        match (e > threshold, current) {
            (true, None) => current = Some(i),
            (false, Some(s)) => {
                runs.push((s, i - 1));
                current = None;
            }
            _ => {}
        }
    }
    if let Some(s) = current {
        runs.push((s, smoothed.len() - 1));
    }

    // frame i covers hop samples centred on its window
    let offset = win as f64 / 2.0 - hop as f64 / 2.0;
    let frame_start = |i: usize| ((i * hop) as f64 + offset).max(0.0) / sr;
    let frame_end = |i: usize| ((i + 1) * hop) as f64 / sr + offset / sr;
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for (s, e) in runs {
        let (start, end) = (frame_start(s), frame_end(e));
        match merged.last_mut() {
            Some(last) if start - last.1 < cfg.hangover => last.1 = end,
            _ => merged.push((start, end)),
        }
    }
    let duration = wave.duration();
    merged
        .into_iter()
        .map(|(s, e)| (s, e.min(duration)))
        .filter(|(s, e)| e - s >= cfg.min_duration)
        .enumerate()
        .map(|(i, (start, end))| Segment {
            start,
            end,
            utterance_id: format!("seg{i:04}"),
        })
        .collect()
}

/// Samples `[round(start·sr), round(end·sr))`.
pub fn slice(wave: &Waveform, seg: &Segment) -> Result<Waveform> {
    let sr = wave.sample_rate as f64;
    let start = (seg.start * sr).round();
    let end = (seg.end * sr).round();
    if seg.start < 0.0 || start >= end || end as usize > wave.samples.len() {
        return Err(Error::SegmentBounds {
            start: seg.start,
            end: seg.end,
            duration: wave.duration(),
        });
    }
    Waveform::new(wave.samples[start as usize..end as usize].to_vec(), wave.sample_rate)
}
