use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cascade_core::config::KeyValues;
use cascade_core::decode::{decode_source, Source};
use cascade_core::model::{build_model, load_checkpoint, save_checkpoint, ModelKind};
use cascade_core::pipeline::{
    asr_samples, gen_synthetic_corpus, read_audio, read_jsonl, read_manifest, record_features, resolve, run_cascade, score_run,
    text_pairs, write_jsonl, CascadeConfig, CascadeModels, ManifestRecord, RecordingRecord, SynthConfig,
    DEFAULT_ASR_TAG,
};
use cascade_core::subword::{Vocabulary, BOS, DEFAULT_TAGS};
use cascade_core::train::{
    average_checkpoint_files, finetune, text_samples, train_asr, train_mt, TrainObserver, FIRST_TOKEN_METADATA_KEY,
};
use cascade_core::{DecodeConfig, MelConfig, ModelConfig, ModelParameters, TrainConfig, VadConfig};

#[derive(Parser)]
#[command(name = "cascade-st", version, about = "Cascaded speech translation: synthetic data, training, decoding and scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic speech and bitext corpus.
    GenSynth {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a tag-conditioned ASR model on a speech manifest.
    TrainAsr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for the vocabulary and per-epoch checkpoints.
        #[arg(long)]
        output: PathBuf,
        /// Reuse an existing vocabulary instead of learning one.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Train an MT model on a bitext manifest.
    TrainMt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Fine-tune a pretrained MT model on in-domain bitext.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Pretrained checkpoint.
        #[arg(long)]
        init: PathBuf,
        /// Vocabulary the model was pretrained with.
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Average checkpoints. A directory stands for its last `avg_last_n` checkpoints.
    AvgCkpt {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        ensemble: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Beam-search decode a manifest with one model or an ensemble.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        ensemble: Vec<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Forced first decoder token, e.g. `[MC]`.
        #[arg(long)]
        tag: Option<String>,
        #[arg(long)]
        beam: Option<usize>,
        /// Hypotheses, one per line.
        #[arg(long)]
        output: PathBuf,
        /// Optional JSONL with utterance id, text, log-probability and tag.
        #[arg(long)]
        jsonl: Option<PathBuf>,
    },
    /// Segment recordings and run ASR followed by MT.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Recordings JSONL with `recording_id` and `audio_path`.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        asr: Vec<PathBuf>,
        #[arg(long)]
        asr_vocab: PathBuf,
        /// MT checkpoint(s); several form an ensemble.
        #[arg(long, value_delimiter = ',', required = true)]
        ensemble: Vec<PathBuf>,
        #[arg(long)]
        mt_vocab: PathBuf,
        /// Tag forced on the ASR decoder.
        #[arg(long)]
        tag: Option<String>,
        #[arg(long)]
        beam: Option<usize>,
        /// Translations, one line per segment.
        #[arg(long)]
        output: PathBuf,
        /// Trace JSONL; defaults to the output path with `.trace.jsonl`.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Score a hypothesis file against a reference file.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        /// Row label in the table.
        #[arg(long, default_value = "test")]
        set: String,
        /// Also report word error rate.
        #[arg(long)]
        wer: bool,
        /// JSON report path.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Every configuration section, parsed up front so unknown keys are
/// rejected whichever subcommand reads the file.
struct Settings {
    kv: KeyValues,
    train: TrainConfig,
    synth: SynthConfig,
    vad: VadConfig,
}

impl Settings {
    fn load(common: &Common) -> Result<Self> {
        let mut kv = match &common.config {
            Some(p) => KeyValues::load(p)?,
            None => KeyValues::default(),
        };
        if let Some(seed) = common.seed {
            kv.insert("seed", seed.to_string());
            kv.insert("synth.seed", seed.to_string());
        }
        let train = TrainConfig::from_kv(&mut kv)?;
        let synth = SynthConfig::from_kv(&mut kv)?;
        let vad = VadConfig::from_kv(&mut kv)?;
        Ok(Self { kv, train, synth, vad })
    }

    fn model(&mut self, kind: ModelKind, vocab: usize, input_dim: usize) -> Result<ModelConfig> {
        Ok(ModelConfig::from_kv(&mut self.kv, kind, vocab, input_dim)?)
    }

    fn decode(&mut self, default_tag: &str, tag: Option<String>, beam: Option<usize>) -> Result<DecodeConfig> {
        let mut d = DecodeConfig::from_kv(&mut self.kv, default_tag)?;
        if let Some(t) = tag {
            d.initial_token = t;
        }
        if let Some(b) = beam {
            d.beam_size = b;
        }
        d.validate()?;
        Ok(d)
    }

    /// Rejects keys outside the known sections.
    fn finish(mut self) -> Result<()> {
        self.kv.discard_section("model");
        self.kv.discard_section("decode");
        Ok(self.kv.finish()?)
    }
}

struct Progress;

impl TrainObserver for Progress {
    fn on_step(&mut self, step: u64, loss: f64, lr: f64) {
        if step.is_multiple_of(100) {
            eprintln!("step {step:>7}  loss {loss:.4}  lr {lr:.3e}");
        }
    }
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn save_all(dir: &Path, prefix: &str, checkpoints: &[ModelParameters]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, ck) in checkpoints.iter().enumerate() {
        let path = dir.join(format!("{prefix}_{:03}.ckpt", i + 1));
        save_checkpoint(ck, &path).with_context(|| format!("writing {}", path.display()))?;
    }
    eprintln!("wrote {} checkpoint(s) to {}", checkpoints.len(), dir.display());
    Ok(())
}

fn vocab_tags(extra: &BTreeSet<String>) -> Vec<&str> {
    let mut tags: Vec<&str> = DEFAULT_TAGS.to_vec();
    tags.extend(extra.iter().map(String::as_str).filter(|t| !DEFAULT_TAGS.contains(t)));
    tags
}

fn obtain_vocab<S: AsRef<str>>(given: Option<&Path>, corpus: &[S], size: usize, tags: &[&str], out: &Path) -> Result<Vocabulary> {
    let vocab = match given {
        Some(p) => Vocabulary::load(p)?,
        None => Vocabulary::learn(corpus, size, tags)?,
    };
    std::fs::create_dir_all(out)?;
    vocab.save(out.join("vocab.json"))?;
    Ok(vocab)
}

fn cmd_gen_synth(common: Common, output: PathBuf) -> Result<()> {
    let s = Settings::load(&common)?;
    let synth = s.synth.clone();
    s.finish()?;
    let corpus = gen_synthetic_corpus(&synth, &output)?;
    eprintln!("corpus written to {}", corpus.root.display());
    Ok(())
}

fn cmd_train_asr(common: Common, manifest: PathBuf, output: PathBuf, vocab: Option<PathBuf>) -> Result<()> {
    let mut s = Settings::load(&common)?;
    let records = read_manifest(&manifest)?;
    let transcripts: Vec<String> = records.iter().filter_map(|r| r.transcript.clone()).collect();
    let tags: BTreeSet<String> = records.iter().filter_map(|r| r.source_tag.clone()).collect();
    let vocab = obtain_vocab(vocab.as_deref(), &transcripts, s.train.vocab_size, &vocab_tags(&tags), &output)?;
    let mel = MelConfig::default();
    let samples = asr_samples(&records, &base_dir(&manifest), &vocab, &mel)?;
    let mcfg = s.model(ModelKind::Asr, vocab.len(), mel.n_mels)?;
    let cfg = s.train.clone();
    s.finish()?;
    let init = build_model(&mcfg, cfg.seed)?;
    eprintln!("training ASR: {} samples, {} parameters", samples.len(), init.param_count());
    let ckpts = train_asr(init, &samples, &vocab, &cfg, &mut Progress)?;
    save_all(&output, "epoch", &ckpts)
}

fn cmd_train_mt(common: Common, manifest: PathBuf, output: PathBuf, vocab: Option<PathBuf>) -> Result<()> {
    let mut s = Settings::load(&common)?;
    let pairs = text_pairs(&read_manifest(&manifest)?)?;
    let corpus: Vec<&str> = pairs.iter().flat_map(|(a, b)| [a.as_str(), b.as_str()]).collect();
    let vocab = obtain_vocab(vocab.as_deref(), &corpus, s.train.vocab_size, &DEFAULT_TAGS, &output)?;
    let samples = text_samples(&pairs, &vocab, "mt");
    let mcfg = s.model(ModelKind::Mt, vocab.len(), 0)?;
    let cfg = s.train.clone();
    s.finish()?;
    let init = build_model(&mcfg, cfg.seed)?;
    eprintln!("training MT: {} pairs, {} parameters", samples.len(), init.param_count());
    let ckpts = train_mt(init, &samples, &vocab, &cfg, &mut Progress)?;
    save_all(&output, "epoch", &ckpts)
}

fn cmd_finetune(common: Common, manifest: PathBuf, init: PathBuf, vocab: PathBuf, output: PathBuf) -> Result<()> {
    let s = Settings::load(&common)?;
    let cfg = s.train.clone();
    s.finish()?;
    let vocab = Vocabulary::load(&vocab)?;
    let pairs = text_pairs(&read_manifest(&manifest)?)?;
    let samples = text_samples(&pairs, &vocab, "ft");
    let pretrained = load_checkpoint(&init)?;
    let ckpts = finetune(pretrained, &samples, &vocab, &cfg, &mut Progress)?;
    std::fs::create_dir_all(&output)?;
    vocab.save(output.join("vocab.json"))?;
    save_all(&output, "quarter", &ckpts)
}

/// Expands directories to their last `n` checkpoints in name order.
fn expand_checkpoints(paths: &[PathBuf], n: usize) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            found.retain(|f| f.extension().is_some_and(|x| x == "ckpt"));
            found.sort();
            if found.is_empty() {
                bail!("no checkpoints in {}", p.display());
            }
            out.extend(found.split_off(found.len().saturating_sub(n)));
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn cmd_avg_ckpt(common: Common, ensemble: Vec<PathBuf>, output: PathBuf) -> Result<()> {
    let s = Settings::load(&common)?;
    let n = s.train.avg_last_n;
    s.finish()?;
    let paths = expand_checkpoints(&ensemble, n)?;
    for p in &paths {
        eprintln!("averaging {}", p.display());
    }
    let avg = average_checkpoint_files(&paths)?;
    save_checkpoint(&avg, &output)?;
    Ok(())
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<ModelParameters>> {
    paths
        .iter()
        .map(|p| load_checkpoint(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

fn default_tag(model: &ModelParameters) -> &'static str {
    match model.metadata.get(FIRST_TOKEN_METADATA_KEY).map(String::as_str) {
        Some("tag") => DEFAULT_ASR_TAG,
        _ => BOS,
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_decode(
    common: Common,
    ensemble: Vec<PathBuf>,
    vocab: PathBuf,
    manifest: PathBuf,
    tag: Option<String>,
    beam: Option<usize>,
    output: PathBuf,
    jsonl: Option<PathBuf>,
) -> Result<()> {
    let mut s = Settings::load(&common)?;
    let models = load_models(&ensemble)?;
    let refs: Vec<&ModelParameters> = models.iter().collect();
    let kind = refs[0].config.kind;
    let dcfg = s.decode(default_tag(refs[0]), tag, beam)?;
    s.finish()?;
    let vocab = Vocabulary::load(&vocab)?;
    let records: Vec<ManifestRecord> = read_manifest(&manifest)?;
    let mut texts = Vec::with_capacity(records.len());
    let mut lines = Vec::with_capacity(records.len());
    let feats = match kind {
        ModelKind::Asr => Some(record_features(&records, &base_dir(&manifest), &MelConfig::default())?),
        ModelKind::Mt => None,
    };
    for (i, r) in records.iter().enumerate() {
        let hyps = match &feats {
            Some(f) => decode_source(&refs, Source::Features(&f[i]), &vocab, &dcfg)?,
            None => {
                let src = r
                    .src_text
                    .as_deref()
                    .with_context(|| format!("record `{}` has no src_text", r.utterance_id))?;
                let ids = vocab.encode(src).ids;
                if ids.is_empty() {
                    Vec::new()
                } else {
                    decode_source(&refs, Source::Tokens(&ids), &vocab, &dcfg)?
                }
            }
        };
        let (text, logprob) = match hyps.first() {
            Some(h) => (h.text(&vocab)?, h.logprob),
            None => (String::new(), 0.0),
        };
        lines.push((r.utterance_id.clone(), text.clone(), logprob));
        texts.push(text);
    }
    write_lines(&output, &texts)?;
    if let Some(path) = jsonl {
        let rows: Vec<serde_json::Value> = lines
            .iter()
            .map(|(id, text, lp)| {
                serde_json::json!({ "utterance_id": id, "text": text, "logprob": lp, "tag": dcfg.initial_token })
            })
            .collect();
        write_jsonl(&path, &rows)?;
    }
    Ok(())
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for l in lines {
        writeln!(f, "{l}")?;
    }
    f.flush()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_pipeline(
    common: Common,
    manifest: PathBuf,
    asr: Vec<PathBuf>,
    asr_vocab: PathBuf,
    ensemble: Vec<PathBuf>,
    mt_vocab: PathBuf,
    tag: Option<String>,
    beam: Option<usize>,
    output: PathBuf,
    trace: Option<PathBuf>,
) -> Result<()> {
    let mut s = Settings::load(&common)?;
    let asr_decode = s.decode(DEFAULT_ASR_TAG, tag, beam)?;
    let vad = s.vad.clone();
    s.finish()?;
    let mt_decode = DecodeConfig {
        initial_token: BOS.into(),
        max_len: None,
        ..asr_decode.clone()
    };
    let asr_models = load_models(&asr)?;
    let mt_models = load_models(&ensemble)?;
    let asr_vocab = Vocabulary::load(&asr_vocab)?;
    let mt_vocab = Vocabulary::load(&mt_vocab)?;
    let models = CascadeModels {
        asr: asr_models.iter().collect(),
        asr_vocab: &asr_vocab,
        mt: mt_models.iter().collect(),
        mt_vocab: &mt_vocab,
    };
    let cfg = CascadeConfig {
        vad,
        mel: MelConfig::default(),
        asr_decode,
        mt_decode,
    };
    let recordings: Vec<RecordingRecord> = read_jsonl(&manifest)?;
    let base = base_dir(&manifest);
    let mut translations = Vec::new();
    let mut rows = Vec::new();
    for rec in &recordings {
        let wave = read_audio(&resolve(&base, &rec.audio_path))?;
        let out = run_cascade(&rec.recording_id, &wave, &models, &cfg)?;
        eprintln!("{}: {} segment(s)", rec.recording_id, out.len());
        translations.extend(out.iter().map(|t| t.translation.clone()));
        rows.extend(out);
    }
    write_lines(&output, &translations)?;
    let trace = trace.unwrap_or_else(|| output.with_extension("trace.jsonl"));
    write_jsonl(&trace, &rows)?;
    Ok(())
}

fn cmd_score(common: Common, reference: PathBuf, hyp: PathBuf, set: String, wer: bool, output: Option<PathBuf>) -> Result<()> {
    Settings::load(&common)?.finish()?;
    let report = score_run(&hyp, &reference, &set, wer)?;
    print!("{}", report.table());
    if let Some(path) = output {
        std::fs::write(&path, report.to_json()?).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenSynth { common, output } => cmd_gen_synth(common, output),
        Command::TrainAsr {
            common,
            manifest,
            output,
            vocab,
        } => cmd_train_asr(common, manifest, output, vocab),
        Command::TrainMt {
            common,
            manifest,
            output,
            vocab,
        } => cmd_train_mt(common, manifest, output, vocab),
        Command::Finetune {
            common,
            manifest,
            init,
            vocab,
            output,
        } => cmd_finetune(common, manifest, init, vocab, output),
        Command::AvgCkpt { common, ensemble, output } => cmd_avg_ckpt(common, ensemble, output),
        Command::Decode {
            common,
            ensemble,
            vocab,
            manifest,
            tag,
            beam,
            output,
            jsonl,
        } => cmd_decode(common, ensemble, vocab, manifest, tag, beam, output, jsonl),
        Command::Pipeline {
            common,
            manifest,
            asr,
            asr_vocab,
            ensemble,
            mt_vocab,
            tag,
            beam,
            output,
            trace,
        } => cmd_pipeline(common, manifest, asr, asr_vocab, ensemble, mt_vocab, tag, beam, output, trace),
        Command::Score {
            common,
            reference,
            hyp,
            set,
            wer,
            output,
        } => cmd_score(common, reference, hyp, set, wer, output),
    }
}
