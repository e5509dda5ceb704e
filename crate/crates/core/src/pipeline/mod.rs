//! End-to-end orchestration: segmentation, filterbanks, tag-forced ASR
//! decoding and MT decoding per segment, plus scoring of text outputs.

mod manifest;
mod synth;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decode::{decode_source, DecodeConfig, Hypothesis, Source};
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, SetScores};
use crate::model::{ModelKind, ModelParameters};
use crate::segment::{detect_segments, slice, SegmentRecord, VadConfig};
use crate::signal::{cmvn, MelConfig, MelExtractor, Waveform};
use crate::subword::Vocabulary;
use crate::train::VOCAB_METADATA_KEY;

pub use manifest::{
    asr_samples, read_audio, read_jsonl, read_manifest, record_features, resolve, text_pairs, write_jsonl, write_manifest, ManifestRecord,
    RecordingRecord,
};
pub use synth::{
    gen_synthetic_corpus, render_words, word_f0, Casing, MtRule, Punctuation, StyleSpec, SynthConfig, SynthCorpus,
    GAP_SECONDS, TONE_SECONDS, WORD_SECONDS,
};

/// Tag used to force the ASR output style when none is configured.
pub const DEFAULT_ASR_TAG: &str = "[MC]";

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeConfig {
    pub vad: VadConfig,
    pub mel: MelConfig,
    pub asr_decode: DecodeConfig,
    pub mt_decode: DecodeConfig,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            vad: VadConfig::default(),
            mel: MelConfig::default(),
            asr_decode: DecodeConfig {
                initial_token: DEFAULT_ASR_TAG.into(),
                ..DecodeConfig::default()
            },
            mt_decode: DecodeConfig::default(),
        }
    }
}

/// ASR and MT models (each possibly an ensemble) with their vocabularies.
pub struct CascadeModels<'a> {
    pub asr: Vec<&'a ModelParameters>,
    pub asr_vocab: &'a Vocabulary,
    pub mt: Vec<&'a ModelParameters>,
    pub mt_vocab: &'a Vocabulary,
}

impl CascadeModels<'_> {
    pub fn validate(&self) -> Result<()> {
        check_models(&self.asr, self.asr_vocab, ModelKind::Asr)?;
        check_models(&self.mt, self.mt_vocab, ModelKind::Mt)
    }
}

fn check_models(models: &[&ModelParameters], vocab: &Vocabulary, kind: ModelKind) -> Result<()> {
    if models.is_empty() {
        return Err(Error::DecodeConfig(format!("no {kind:?} model given")));
    }
    let fp = vocab.fingerprint();
    for m in models {
        if m.config.kind != kind {
            return Err(Error::ModelMismatch(format!("expected a {kind:?} model, got {:?}", m.config.kind)));
        }
        if m.config.tgt_vocab_size != vocab.len() {
            return Err(Error::ModelMismatch(format!(
                "{kind:?} model has {} output tokens, vocabulary has {}",
                m.config.tgt_vocab_size,
                vocab.len()
            )));
        }
        if let Some(recorded) = m.metadata.get(VOCAB_METADATA_KEY) {
            if *recorded != fp {
                return Err(Error::ModelMismatch(format!("{kind:?} model was trained with a different vocabulary")));
            }
        }
    }
    Ok(())
}

/// One line of the pipeline trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub recording_id: String,
    pub segment: SegmentRecord,
    pub transcript: String,
    pub translation: String,
    pub asr_logprob: f64,
    pub mt_logprob: f64,
}

fn best(hyps: &[Hypothesis]) -> Option<&Hypothesis> {
    hyps.first()
}

/// Transcribes one audio chunk with the forced tag from `cfg`.
pub fn transcribe(wave: &Waveform, id: &str, models: &CascadeModels<'_>, cfg: &CascadeConfig) -> Result<(String, f64)> {
    let feats = cmvn(&MelExtractor::new(cfg.mel.clone())?.compute(wave, id)?);
    let hyps = decode_source(&models.asr, Source::Features(&feats), models.asr_vocab, &cfg.asr_decode)?;
    match best(&hyps) {
        Some(h) => Ok((h.text(models.asr_vocab)?, h.logprob)),
        None => Ok((String::new(), 0.0)),
    }
}

/// Translates one sentence; empty input gives empty output.
pub fn translate(text: &str, models: &CascadeModels<'_>, cfg: &CascadeConfig) -> Result<(String, f64)> {
    let src = models.mt_vocab.encode(text);
    if src.is_empty() {
        return Ok((String::new(), 0.0));
    }
    let hyps = decode_source(&models.mt, Source::Tokens(&src.ids), models.mt_vocab, &cfg.mt_decode)?;
    match best(&hyps) {
        Some(h) => Ok((h.text(models.mt_vocab)?, h.logprob)),
        None => Ok((String::new(), 0.0)),
    }
}

/// Segments a recording and runs ASR then MT on every segment, in time order.
pub fn run_cascade(
    recording_id: &str,
    wave: &Waveform,
    models: &CascadeModels<'_>,
    cfg: &CascadeConfig,
) -> Result<Vec<TraceRecord>> {
    models.validate()?;
    detect_segments(wave, &cfg.vad)
        .into_iter()
        .map(|seg| {
            let rec = SegmentRecord::new(recording_id, &seg);
            let chunk = slice(wave, &seg)?;
            let (transcript, asr_logprob) = transcribe(&chunk, &rec.utterance_id, models, cfg)?;
            let (translation, mt_logprob) = translate(&transcript, models, cfg)?;
            Ok(TraceRecord {
                recording_id: recording_id.to_string(),
                segment: rec,
                transcript,
                translation,
                asr_logprob,
                mt_logprob,
            })
        })
        .collect()
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?.lines().map(str::to_string).collect())
}

/// Scores a hypothesis file against a line-aligned reference file.
pub fn score_run(hyp_path: &Path, ref_path: &Path, set_name: &str, with_wer: bool) -> Result<EvalReport> {
    let hyps = read_lines(hyp_path)?;
    let refs = read_lines(ref_path)?;
    if hyps.len() != refs.len() {
        return Err(Error::Misaligned {
            hyp: hyps.len(),
            reference: refs.len(),
        });
    }
    Ok(EvalReport {
        rows: vec![SetScores::compute(set_name, &refs, &hyps, with_wer)?],
    })
}
