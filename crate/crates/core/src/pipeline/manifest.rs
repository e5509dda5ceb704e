use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::{slice, Segment};
use crate::signal::{cmvn, FeatureMatrix, MelConfig, MelExtractor, Waveform};
use crate::subword::Vocabulary;
use crate::train::{SampleInput, SourceTag, TaggedSample};

/// One training record. Speech records carry audio, transcript and tag;
/// text records carry a source and a target sentence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub utterance_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tgt_text: Option<String>,
}

/// A long recording with its per-utterance references.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingRecord {
    pub recording_id: String,
    pub audio_path: PathBuf,
    #[serde(default)]
    pub transcripts: Vec<String>,
    #[serde(default)]
    pub translations: Vec<String>,
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let f = std::fs::File::open(path.as_ref())?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    read_jsonl(path)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    write_jsonl(path, records)
}

fn missing(line: usize, id: &str, field: &str) -> Error {
    Error::Manifest {
        line,
        msg: format!("record `{id}` lacks `{field}`"),
    }
}

/// Resolves `p` against the manifest's directory unless it is absolute.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn read_audio(path: &Path) -> Result<Waveform> {
    Waveform::read_wav(path).map_err(|e| Error::Audio {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// CMVN-normalised filterbanks of every speech record, honouring
/// `offset_s` and `duration_s` when present.
pub fn record_features(records: &[ManifestRecord], base: &Path, mel: &MelConfig) -> Result<Vec<FeatureMatrix>> {
    let extractor = MelExtractor::new(mel.clone())?;
    let mut cache: HashMap<PathBuf, Waveform> = HashMap::new();
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let id = &r.utterance_id;
            let audio = r.audio_path.as_ref().ok_or_else(|| missing(i + 1, id, "audio_path"))?;
            let path = resolve(base, audio);
            if !cache.contains_key(&path) {
                let w = read_audio(&path)?;
                cache.insert(path.clone(), w);
            }
            let wave = &cache[&path];
            let wave = match (r.offset_s, r.duration_s) {
                (None, None) => wave.clone(),
                (off, dur) => {
                    let start = off.unwrap_or(0.0);
                    let end = dur.map_or(wave.duration(), |d| (start + d).min(wave.duration()));
                    let seg = Segment {
                        start,
                        end,
                        utterance_id: id.clone(),
                    };
                    slice(wave, &seg)?
                }
            };
            Ok(cmvn(&extractor.compute(&wave, id)?))
        })
        .collect()
}

/// Loads speech records as tagged training samples.
pub fn asr_samples(records: &[ManifestRecord], base: &Path, vocab: &Vocabulary, mel: &MelConfig) -> Result<Vec<TaggedSample>> {
    let feats = record_features(records, base, mel)?;
    records
        .iter()
        .zip(feats)
        .enumerate()
        .map(|(i, (r, f))| {
            let id = &r.utterance_id;
            let text = r.transcript.as_ref().ok_or_else(|| missing(i + 1, id, "transcript"))?;
            let tag = r.source_tag.as_ref().ok_or_else(|| missing(i + 1, id, "source_tag"))?;
            Ok(TaggedSample {
                id: id.clone(),
                input: SampleInput::Features(f),
                target: vocab.encode(text),
                tag: Some(SourceTag::resolve(vocab, tag)?),
            })
        })
        .collect()
}

/// `(source, target)` sentence pairs of text records.
pub fn text_pairs(records: &[ManifestRecord]) -> Result<Vec<(String, String)>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let src = r.src_text.clone().ok_or_else(|| missing(i + 1, &r.utterance_id, "src_text"))?;
            let tgt = r.tgt_text.clone().ok_or_else(|| missing(i + 1, &r.utterance_id, "tgt_text"))?;
            Ok((src, tgt))
        })
        .collect()
}
