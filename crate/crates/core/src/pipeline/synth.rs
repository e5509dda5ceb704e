//! Synthetic speech corpora. Every toy word is a harmonic tone with its own
//! fundamental; sources differ only in how transcripts are written.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, ManifestRecord, RecordingRecord};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::signal::Waveform;

pub const TONE_SECONDS: f64 = 0.3;
pub const GAP_SECONDS: f64 = 0.05;
pub const WORD_SECONDS: f64 = TONE_SECONDS + GAP_SECONDS;
const HARMONICS: [f64; 3] = [1.0, 0.5, 0.25];
const FADE_SECONDS: f64 = 0.01;

const SOURCE_WORDS: [&str; 26] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet", "kilo", "lima", "mike",
    "november", "oscar", "papa", "quebec", "romeo", "sierra", "tango", "uniform", "victor", "whiskey", "xray", "yankee",
    "zulu",
];
const SYLLABLES: [&str; 8] = ["ka", "lo", "mi", "ne", "su", "ta", "ro", "vi"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Casing {
    Upper,
    Lower,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Punctuation {
    None,
    Period,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub tag: String,
    pub casing: Casing,
    pub punctuation: Punctuation,
    /// Training utterances for this source; falls back to the corpus default.
    pub utterances: Option<usize>,
}

impl StyleSpec {
    pub fn new(tag: &str, casing: Casing, punctuation: Punctuation) -> Self {
        Self {
            tag: tag.to_string(),
            casing,
            punctuation,
            utterances: None,
        }
    }

    pub fn render(&self, words: &[&str]) -> String {
        let mut s = words
            .iter()
            .map(|w| match self.casing {
                Casing::Upper => w.to_uppercase(),
                Casing::Lower => w.to_lowercase(),
            })
            .collect::<Vec<_>>()
            .join(" ");
        if self.punctuation == Punctuation::Period {
            s.push('.');
        }
        s
    }

    /// True when `text` follows this style's casing and punctuation.
    pub fn matches(&self, text: &str) -> bool {
        let letters: Vec<char> = text.chars().filter(|c| c.is_alphabetic()).collect();
        if letters.is_empty() {
            return false;
        }
        let casing_ok = match self.casing {
            Casing::Upper => letters.iter().all(|c| c.is_uppercase()),
            Casing::Lower => letters.iter().all(|c| c.is_lowercase()),
        };
        let punct_ok = match self.punctuation {
            Punctuation::Period => text.trim_end().ends_with('.') && text.matches('.').count() == 1,
            Punctuation::None => !text.contains('.'),
        };
        casing_ok && punct_ok
    }

    fn parse(raw: &str) -> Option<Self> {
        let parts: Vec<&str> = raw.split(':').map(str::trim).collect();
        if !(3..=4).contains(&parts.len()) {
            return None;
        }
        let casing = match parts[1] {
            "upper" => Casing::Upper,
            "lower" => Casing::Lower,
            _ => return None,
        };
        let punctuation = match parts[2] {
            "none" => Punctuation::None,
            "period" => Punctuation::Period,
            _ => return None,
        };
        let utterances = match parts.get(3) {
            Some(n) => Some(n.parse().ok()?),
            None => None,
        };
        Some(Self {
            tag: parts[0].to_string(),
            casing,
            punctuation,
            utterances,
        })
    }
}

/// Word-for-word translation; the target order is reversed when `reverse` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtRule {
    pub mapping: Vec<String>,
    pub reverse: bool,
}

impl MtRule {
    pub fn translate(&self, word_ids: &[usize]) -> String {
        let mut out: Vec<&str> = word_ids.iter().map(|&i| self.mapping[i].as_str()).collect();
        if self.reverse {
            out.reverse();
        }
        let mut s = out.join(" ");
        s.push('.');
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub styles: Vec<StyleSpec>,
    /// Default training utterances per style.
    pub utterances: usize,
    /// Dev and test utterances per style.
    pub eval_utterances: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub sample_rate: u32,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Relative per-utterance pitch jitter of the rendering "speaker".
    pub pitch_jitter: f64,
    pub mt_pretrain_pairs: usize,
    /// Share of pretraining pairs that follow the in-domain (reversing) rule.
    pub mt_indomain_share: f64,
    pub mt_indomain_pairs: usize,
    pub mt_eval_pairs: usize,
    pub recordings: usize,
    pub utterances_per_recording: usize,
    /// Style whose casing and punctuation is used for MT source text.
    pub mt_source_style: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 10,
            styles: vec![
                StyleSpec::new("[LS]", Casing::Lower, Punctuation::None),
                StyleSpec::new("[MC]", Casing::Upper, Punctuation::Period),
            ],
            utterances: 500,
            eval_utterances: 20,
            min_words: 3,
            max_words: 5,
            sample_rate: 16_000,
            noise: 0.005,
            pitch_jitter: 0.02,
            mt_pretrain_pairs: 2000,
            mt_indomain_share: 0.2,
            mt_indomain_pairs: 400,
            mt_eval_pairs: 50,
            recordings: 4,
            utterances_per_recording: 3,
            mt_source_style: "[MC]".into(),
            seed: 1,
        }
    }
}

impl SynthConfig {
    /// Reads the `synth.` section of a config file.
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let mut s = kv.section("synth");
        let mut c = Self::default();
        s.take("vocab_size", &mut c.vocab_size)?;
        s.take("utterances", &mut c.utterances)?;
        s.take("eval_utterances", &mut c.eval_utterances)?;
        s.take("min_words", &mut c.min_words)?;
        s.take("max_words", &mut c.max_words)?;
        s.take("sample_rate", &mut c.sample_rate)?;
        s.take("noise", &mut c.noise)?;
        s.take("pitch_jitter", &mut c.pitch_jitter)?;
        s.take("mt_pretrain_pairs", &mut c.mt_pretrain_pairs)?;
        s.take("mt_indomain_share", &mut c.mt_indomain_share)?;
        s.take("mt_indomain_pairs", &mut c.mt_indomain_pairs)?;
        s.take("mt_eval_pairs", &mut c.mt_eval_pairs)?;
        s.take("recordings", &mut c.recordings)?;
        s.take("utterances_per_recording", &mut c.utterances_per_recording)?;
        s.take("mt_source_style", &mut c.mt_source_style)?;
        s.take("seed", &mut c.seed)?;
        if let Some(raw) = s.take_raw("styles") {
            c.styles = raw
                .split(',')
                .map(|p| {
                    StyleSpec::parse(p).ok_or_else(|| Error::Config {
                        path: s.path().to_path_buf(),
                        msg: format!("`synth.styles`: expected TAG:upper|lower:none|period[:COUNT], got `{p}`"),
                    })
                })
                .collect::<Result<_>>()?;
        }
        s.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config {
            path: PathBuf::from("<synth>"),
            msg,
        });
        if self.vocab_size == 0 || self.vocab_size > SOURCE_WORDS.len() {
            return bad(format!("vocab_size must be in 1..={}", SOURCE_WORDS.len()));
        }
        if self.min_words == 0 || self.max_words < self.min_words {
            return bad("need 1 <= min_words <= max_words".into());
        }
        if self.styles.is_empty() {
            return bad("at least one style is required".into());
        }
        if !self.styles.iter().any(|s| s.tag == self.mt_source_style) {
            return bad(format!("mt_source_style {} is not among the styles", self.mt_source_style));
        }
        if !(0.0..=1.0).contains(&self.mt_indomain_share) {
            return bad("mt_indomain_share must be in [0, 1]".into());
        }
        Ok(())
    }

    pub fn words(&self) -> Vec<&'static str> {
        SOURCE_WORDS[..self.vocab_size].to_vec()
    }

    pub fn style(&self, tag: &str) -> Option<&StyleSpec> {
        self.styles.iter().find(|s| s.tag == tag)
    }

    /// Out-of-domain and in-domain translation rules; they share the word
    /// mapping and differ in word order.
    pub fn mt_rules(&self) -> (MtRule, MtRule) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6d74_5f72_756c_6573);
        let mut targets: Vec<String> = (0..SYLLABLES.len() * SYLLABLES.len())
            .map(|i| format!("{}{}", SYLLABLES[i / SYLLABLES.len()], SYLLABLES[i % SYLLABLES.len()]))
            .collect();
        targets.shuffle(&mut rng);
        targets.truncate(self.vocab_size);
        (
            MtRule {
                mapping: targets.clone(),
                reverse: false,
            },
            MtRule {
                mapping: targets,
                reverse: true,
            },
        )
    }
}

/// Fundamental frequency of toy word `index`.
pub fn word_f0(index: usize) -> f64 {
    200.0 + 35.0 * index as f64
}

/// Renders words as consecutive tones followed by short gaps. `pitch` scales
/// every fundamental and `gain` the amplitude.
pub fn render_words(word_ids: &[usize], sample_rate: u32, pitch: f64, gain: f64) -> Vec<f32> {
    let sr = sample_rate as f64;
    let tone = (TONE_SECONDS * sr).round() as usize;
    let gap = (GAP_SECONDS * sr).round() as usize;
    let fade = (FADE_SECONDS * sr).round() as usize;
    let norm: f64 = HARMONICS.iter().sum();
    let mut out = Vec::with_capacity(word_ids.len() * (tone + gap));
    for &w in word_ids {
        let f0 = word_f0(w) * pitch;
        for i in 0..tone {
            let t = i as f64 / sr;
            let env = (i.min(tone - 1 - i) as f64 / fade as f64).min(1.0);
            let v: f64 = HARMONICS
                .iter()
                .enumerate()
                .map(|(h, a)| a * (2.0 * std::f64::consts::PI * f0 * (h + 1) as f64 * t).sin())
                .sum();
            out.push((gain * env * v / norm) as f32);
        }
        out.extend(std::iter::repeat_n(0.0, gap));
    }
    out
}

fn add_noise(samples: &mut [f32], sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).expect("positive sigma");
        for s in samples {
            *s += n.sample(rng) as f32;
        }
    }
}

fn draw_words(rng: &mut ChaCha8Rng, cfg: &SynthConfig, min_words: usize) -> Vec<usize> {
    let lo = cfg.min_words.max(min_words);
    let hi = cfg.max_words.max(lo);
    let n = rng.gen_range(lo..=hi);
    (0..n).map(|_| rng.gen_range(0..cfg.vocab_size)).collect()
}

fn speaker(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> (f64, f64) {
    let pitch = 1.0 + cfg.pitch_jitter * rng.gen_range(-1.0..=1.0);
    let gain = rng.gen_range(0.5..=0.9);
    (pitch, gain)
}

/// Paths of a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub root: PathBuf,
    pub asr_train: PathBuf,
    pub asr_dev: PathBuf,
    pub asr_test: PathBuf,
    pub mt_pretrain: PathBuf,
    pub mt_indomain: PathBuf,
    pub mt_dev: PathBuf,
    pub mt_test: PathBuf,
    pub recordings: PathBuf,
    /// One in-domain reference translation per recording segment, in order.
    pub recording_translations: PathBuf,
    pub recording_transcripts: PathBuf,
}

/// Writes audio, manifests and references under `out`. The result depends
/// only on `cfg`.
pub fn gen_synthetic_corpus(cfg: &SynthConfig, out: &Path) -> Result<SynthCorpus> {
    cfg.validate()?;
    std::fs::create_dir_all(out.join("audio"))?;
    std::fs::create_dir_all(out.join("recordings"))?;
    let words = cfg.words();
    let (out_rule, in_rule) = cfg.mt_rules();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut splits: [Vec<ManifestRecord>; 3] = Default::default();
    for style in &cfg.styles {
        let name = style.tag.trim_matches(|c| c == '[' || c == ']').to_lowercase();
        let counts = [
            style.utterances.unwrap_or(cfg.utterances),
            cfg.eval_utterances,
            cfg.eval_utterances,
        ];
        for (split, (&count, label)) in counts.iter().zip(["train", "dev", "test"]).enumerate() {
            for i in 0..count {
                let ids = draw_words(&mut rng, cfg, 1);
                let (pitch, gain) = speaker(&mut rng, cfg);
                let mut samples = render_words(&ids, cfg.sample_rate, pitch, gain);
                add_noise(&mut samples, cfg.noise, &mut rng);
                let utt = format!("{name}_{label}_{i:05}");
                let rel = PathBuf::from("audio").join(format!("{utt}.wav"));
                let wave = Waveform::new(samples, cfg.sample_rate)?;
                wave.write_wav(out.join(&rel))?;
                let text: Vec<&str> = ids.iter().map(|&w| words[w]).collect();
                splits[split].push(ManifestRecord {
                    utterance_id: utt,
                    audio_path: Some(rel),
                    offset_s: Some(0.0),
                    duration_s: Some(wave.duration()),
                    transcript: Some(style.render(&text)),
                    source_tag: Some(style.tag.clone()),
                    ..Default::default()
                });
            }
        }
    }
    let [train, dev, test] = splits;
    write_manifest(out.join("asr_train.jsonl"), &train)?;
    write_manifest(out.join("asr_dev.jsonl"), &dev)?;
    write_manifest(out.join("asr_test.jsonl"), &test)?;

    let src_style = cfg.style(&cfg.mt_source_style).expect("validated");
    let mut bitext = |n: usize, label: &str, pick: &mut dyn FnMut(&mut ChaCha8Rng) -> bool| {
        (0..n)
            .map(|i| {
                let ids = draw_words(&mut rng, cfg, 1);
                let rule = if pick(&mut rng) { &in_rule } else { &out_rule };
                let text: Vec<&str> = ids.iter().map(|&w| words[w]).collect();
                ManifestRecord {
                    utterance_id: format!("{label}_{i:05}"),
                    src_text: Some(src_style.render(&text)),
                    tgt_text: Some(rule.translate(&ids)),
                    ..Default::default()
                }
            })
            .collect::<Vec<_>>()
    };
    let share = cfg.mt_indomain_share;
    let pretrain = bitext(cfg.mt_pretrain_pairs, "mtpre", &mut |r| r.gen::<f64>() < share);
    let indomain = bitext(cfg.mt_indomain_pairs, "mtin", &mut |_| true);
    let mt_dev = bitext(cfg.mt_eval_pairs, "mtdev", &mut |_| true);
    let mt_test = bitext(cfg.mt_eval_pairs, "mttest", &mut |_| true);
    write_manifest(out.join("mt_pretrain.jsonl"), &pretrain)?;
    write_manifest(out.join("mt_indomain.jsonl"), &indomain)?;
    write_manifest(out.join("mt_dev.jsonl"), &mt_dev)?;
    write_manifest(out.join("mt_test.jsonl"), &mt_test)?;

    // long recordings: utterances separated by silences longer than the speech
    let mut recs = Vec::new();
    let (mut all_translations, mut all_transcripts) = (String::new(), String::new());
    let sr = cfg.sample_rate as f64;
    for r in 0..cfg.recordings {
        let lead = (rng.gen_range(1.0..1.5) * sr) as usize;
        let mut samples = vec![0.0f32; lead];
        let (mut transcripts, mut translations) = (Vec::new(), Vec::new());
        for _ in 0..cfg.utterances_per_recording {
            let ids = draw_words(&mut rng, cfg, 4);
            let (pitch, gain) = speaker(&mut rng, cfg);
            samples.extend(render_words(&ids, cfg.sample_rate, pitch, gain));
            let pause = (rng.gen_range(1.5..2.0) * sr) as usize;
            samples.extend(std::iter::repeat_n(0.0, pause));
            let text: Vec<&str> = ids.iter().map(|&w| words[w]).collect();
            transcripts.push(src_style.render(&text));
            translations.push(in_rule.translate(&ids));
        }
        add_noise(&mut samples, cfg.noise, &mut rng);
        let id = format!("rec{r:03}");
        let rel = PathBuf::from("recordings").join(format!("{id}.wav"));
        Waveform::new(samples, cfg.sample_rate)?.write_wav(out.join(&rel))?;
        for (a, t) in transcripts.iter().zip(&translations) {
            all_transcripts.push_str(a);
            all_transcripts.push('\n');
            all_translations.push_str(t);
            all_translations.push('\n');
        }
        recs.push(RecordingRecord {
            recording_id: id,
            audio_path: rel,
            transcripts,
            translations,
        });
    }
    super::manifest::write_jsonl(out.join("recordings.jsonl"), &recs)?;
    std::fs::write(out.join("recordings_translations.txt"), all_translations)?;
    std::fs::write(out.join("recordings_transcripts.txt"), all_transcripts)?;
    std::fs::write(out.join("synth_config.json"), serde_json::to_string_pretty(cfg)?)?;

    Ok(SynthCorpus {
        root: out.to_path_buf(),
        asr_train: out.join("asr_train.jsonl"),
        asr_dev: out.join("asr_dev.jsonl"),
        asr_test: out.join("asr_test.jsonl"),
        mt_pretrain: out.join("mt_pretrain.jsonl"),
        mt_indomain: out.join("mt_indomain.jsonl"),
        mt_dev: out.join("mt_dev.jsonl"),
        mt_test: out.join("mt_test.jsonl"),
        recordings: out.join("recordings.jsonl"),
        recording_translations: out.join("recordings_translations.txt"),
        recording_transcripts: out.join("recordings_transcripts.txt"),
    })
}
