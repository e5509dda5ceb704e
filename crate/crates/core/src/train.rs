//! Training loops: tag-conditioned multi-source ASR, MT pretraining and
//! constant-rate fine-tuning, plus the optimizer, schedule, batching,
//! checkpoint averaging and back-translation they rely on.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{positive, KeyValues};
use crate::decode::{decode_source, DecodeConfig, Source};
use crate::error::{Error, Result};
use crate::model::{forward_step, load_checkpoint, BoundParams, EncoderBatch, ForwardOptions, ModelKind, ModelParameters};
use crate::signal::{spec_augment, FeatureMatrix, SpecAugmentConfig};
use crate::subword::{TokenSequence, Vocabulary, BOS_ID, EOS_ID};
use crate::tensor::{Graph, Real, Reduction, Tensor};

/// Metadata key holding the vocabulary fingerprint a model was trained with.
pub const VOCAB_METADATA_KEY: &str = "vocab_fingerprint";
/// Metadata key recording whether the decoder was trained to start from a
/// source tag (`tag`) or from `[BOS]` (`bos`).
pub const FIRST_TOKEN_METADATA_KEY: &str = "first_token";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceTag {
    pub name: String,
    pub id: u32,
}

impl SourceTag {
    pub fn resolve(vocab: &Vocabulary, name: &str) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            id: vocab.tag_id(name)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SampleInput {
    Features(FeatureMatrix),
    Tokens(TokenSequence),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaggedSample {
    pub id: String,
    pub input: SampleInput,
    pub target: TokenSequence,
    pub tag: Option<SourceTag>,
}

impl TaggedSample {
    /// Frames for speech input; source plus target tokens (with `[EOS]`) for text.
    pub fn batch_cost(&self) -> usize {
        match &self.input {
            SampleInput::Features(f) => f.num_frames,
            SampleInput::Tokens(t) => t.len() + self.target.len() + 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_frames_per_batch: usize,
    pub max_tokens_per_batch: usize,
    pub warmup: u64,
    pub peak_lr: f64,
    pub finetune_lr: f64,
    pub epochs: usize,
    pub avg_last_n: usize,
    pub seed: u64,
    pub label_smoothing: f64,
    /// Tag replaces `[BOS]` as the first decoder input when set.
    pub multi_source: bool,
    /// Stop after this many updates even mid-epoch (0 = no limit).
    pub max_steps: u64,
    pub grad_accum: usize,
    pub finetune_steps: u64,
    pub spec_augment: bool,
    pub specaug_time_width: usize,
    pub vocab_size: usize,
    /// Per-tag repetition count per epoch, e.g. `[LS]:1,[MC]:2`.
    pub source_weights: BTreeMap<String, usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_frames_per_batch: 40_000,
            max_tokens_per_batch: 32_768,
            warmup: 10_000,
            peak_lr: 5e-4,
            finetune_lr: 1e-5,
            epochs: 50,
            avg_last_n: 4,
            seed: 1,
            label_smoothing: 0.1,
            multi_source: true,
            max_steps: 0,
            grad_accum: 1,
            finetune_steps: 10_000,
            spec_augment: true,
            specaug_time_width: 40,
            vocab_size: 20_000,
            source_weights: BTreeMap::new(),
        }
    }
}

impl TrainConfig {
    /// Reads the bare (non-namespaced) keys of `kv` over the defaults.
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let mut c = Self::default();
        kv.take("max_frames_per_batch", &mut c.max_frames_per_batch)?;
        kv.take("max_tokens_per_batch", &mut c.max_tokens_per_batch)?;
        kv.take("warmup", &mut c.warmup)?;
        kv.take("peak_lr", &mut c.peak_lr)?;
        kv.take("finetune_lr", &mut c.finetune_lr)?;
        kv.take("epochs", &mut c.epochs)?;
        kv.take("avg_last_n", &mut c.avg_last_n)?;
        kv.take("seed", &mut c.seed)?;
        kv.take("label_smoothing", &mut c.label_smoothing)?;
        kv.take("multi_source", &mut c.multi_source)?;
        kv.take("max_steps", &mut c.max_steps)?;
        kv.take("grad_accum", &mut c.grad_accum)?;
        kv.take("finetune_steps", &mut c.finetune_steps)?;
        kv.take("spec_augment", &mut c.spec_augment)?;
        kv.take("specaug_time_width", &mut c.specaug_time_width)?;
        kv.take("vocab_size", &mut c.vocab_size)?;
        if let Some(raw) = kv.take_raw("source_weights") {
            for part in raw.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                let parsed = part
                    .rsplit_once(':')
                    .and_then(|(tag, w)| w.trim().parse::<usize>().ok().map(|w| (tag.trim().to_string(), w)));
                let (tag, w) = parsed.ok_or_else(|| Error::Config {
                    path: kv.path().to_path_buf(),
                    msg: format!("`source_weights`: expected TAG:COUNT, got `{part}`"),
                })?;
                c.source_weights.insert(tag, w);
            }
        }
        c.validate_at(kv.path())?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_at(Path::new("<config>"))
    }

    fn validate_at(&self, path: &Path) -> Result<()> {
        positive(path, "max_frames_per_batch", self.max_frames_per_batch)?;
        positive(path, "max_tokens_per_batch", self.max_tokens_per_batch)?;
        positive(path, "warmup", self.warmup)?;
        positive(path, "peak_lr", self.peak_lr)?;
        positive(path, "finetune_lr", self.finetune_lr)?;
        positive(path, "epochs", self.epochs)?;
        positive(path, "avg_last_n", self.avg_last_n)?;
        positive(path, "grad_accum", self.grad_accum)?;
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config {
                path: path.to_path_buf(),
                msg: format!("`label_smoothing` must be in [0, 1), got {}", self.label_smoothing),
            });
        }
        Ok(())
    }
}

/// `peak · min(step / warmup, sqrt(warmup / step))`
pub fn lr_schedule(step: u64, warmup: u64, peak: f64) -> f64 {
    let (s, w) = (step.max(1) as f64, warmup.max(1) as f64);
    peak * (s / w).min((w / s).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, plus the update count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T = f32> {
    pub step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

/// One bias-corrected Adam update. Every gradient is checked before any
/// parameter changes; a non-finite value aborts the step and names the tensor.
pub fn adam_step<T: Real>(
    params: &mut BTreeMap<String, Tensor<T>>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads.get(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
        if g.shape() != p.shape() {
            return Err(Error::ParamShape {
                name: name.clone(),
                found: g.shape().to_vec(),
                expected: p.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = mi.to_f64().unwrap() / bc1;
            let v_hat = vi.to_f64().unwrap() / bc2;
            let update = lr * m_hat / (v_hat.sqrt() + cfg.eps);
            *w = T::from_f64_lossy(w.to_f64().unwrap() - update);
        }
    }
    Ok(())
}

fn sample_cap(sample: &TaggedSample, cfg: &TrainConfig) -> usize {
    match sample.input {
        SampleInput::Features(_) => cfg.max_frames_per_batch,
        SampleInput::Tokens(_) => cfg.max_tokens_per_batch,
    }
}

/// Groups sample indices into batches whose summed cost stays within the cap.
/// Samples are ordered by length (ties broken by a seeded draw) and packed
/// greedily; the batch order is then shuffled with the same seed.
pub fn make_batches(samples: &[TaggedSample], cfg: &TrainConfig, seed: u64) -> Result<Vec<Vec<usize>>> {
    let order: Vec<usize> = (0..samples.len()).collect();
    batch_indices(samples, &order, cfg, seed)
}

fn batch_indices(samples: &[TaggedSample], pool: &[usize], cfg: &TrainConfig, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(usize, u64, usize)> = pool
        .iter()
        .map(|&i| (samples[i].batch_cost(), rng.gen::<u64>(), i))
        .collect();
    keyed.sort_unstable();
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut used = 0;
    for (cost, _, i) in keyed {
        let cap = sample_cap(&samples[i], cfg);
        if cost > cap {
            return Err(Error::Oversize {
                id: samples[i].id.clone(),
                size: cost,
                cap,
            });
        }
        if used + cost > cap && !current.is_empty() {
            batches.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(i);
        used += cost;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    for i in (1..batches.len()).rev() {
        batches.swap(i, rng.gen_range(0..=i));
    }
    Ok(batches)
}

/// Instrumentation hooks called by the training loops.
pub trait TrainObserver {
    /// Decoder inputs of every micro-batch, before the forward pass.
    fn on_batch(&mut self, _decoder_inputs: &[Vec<u32>]) {}
    fn on_step(&mut self, _step: u64, _loss: f64, _lr: f64) {}
    fn on_checkpoint(&mut self, _params: &ModelParameters) {}
}

/// Observer that ignores everything.
pub struct Silent;

impl TrainObserver for Silent {}

/// How the first decoder input is chosen for each sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FirstToken {
    Bos,
    Tag,
}

fn first_token(sample: &TaggedSample, mode: FirstToken) -> Result<u32> {
    match mode {
        FirstToken::Bos => Ok(BOS_ID),
        FirstToken::Tag => sample
            .tag
            .as_ref()
            .map(|t| t.id)
            .ok_or_else(|| Error::UnknownTag(format!("sample `{}` has no source tag", sample.id))),
    }
}

/// Teacher forcing: input `[first, y₁ … yₙ]`, target `[y₁ … yₙ, EOS]`.
pub fn decoder_io(sample: &TaggedSample, mode: FirstToken) -> Result<(Vec<u32>, Vec<u32>)> {
    let first = first_token(sample, mode)?;
    let mut input = Vec::with_capacity(sample.target.len() + 1);
    input.push(first);
    input.extend(&sample.target.ids);
    let mut target = sample.target.ids.clone();
    target.push(EOS_ID);
    Ok((input, target))
}

struct BatchResult {
    loss_sum: f64,
    tokens: usize,
    grads: Option<BTreeMap<String, Tensor<f32>>>,
}

struct BatchOptions<'a> {
    mode: FirstToken,
    smoothing: f64,
    dropout_seed: Option<u64>,
    augment: Option<&'a SpecAugmentConfig>,
    with_grads: bool,
}

fn run_batch(params: &ModelParameters, batch: &[&TaggedSample], opts: &BatchOptions<'_>, observer: &mut dyn TrainObserver) -> Result<BatchResult> {
    let mut dec_in = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for s in batch {
        if s.target.is_empty() {
            return Err(Error::Op {
                op: "training",
                msg: format!("sample `{}` has an empty target", s.id),
            });
        }
        let (i, t) = decoder_io(s, opts.mode)?;
        dec_in.push(i);
        targets.push(t);
    }
    observer.on_batch(&dec_in);

    let augmented: Vec<FeatureMatrix>;
    let feats: Vec<&FeatureMatrix>;
    let toks: Vec<&[u32]>;
    let enc = match &batch[0].input {
        SampleInput::Features(_) => {
            let raw = batch.iter().map(|s| match &s.input {
                SampleInput::Features(f) => Ok(f),
                SampleInput::Tokens(_) => Err(Error::ModelMismatch("mixed speech and text samples in one batch".into())),
            });
            feats = match opts.augment {
                Some(cfg) => {
                    augmented = raw
                        .enumerate()
                        .map(|(k, f)| {
                            let c = SpecAugmentConfig {
                                seed: cfg.seed.wrapping_add(k as u64),
                                ..cfg.clone()
                            };
                            f.map(|f| spec_augment(f, &c))
                        })
                        .collect::<Result<_>>()?;
                    augmented.iter().collect()
                }
                None => raw.collect::<Result<_>>()?,
            };
            EncoderBatch::Features(&feats)
        }
        SampleInput::Tokens(_) => {
            toks = batch
                .iter()
                .map(|s| match &s.input {
                    SampleInput::Tokens(t) => Ok(t.ids.as_slice()),
                    SampleInput::Features(_) => Err(Error::ModelMismatch("mixed speech and text samples in one batch".into())),
                })
                .collect::<Result<_>>()?;
            EncoderBatch::Tokens(&toks)
        }
    };

    let mut g = Graph::<f32>::new();
    let bound = BoundParams::bind(&mut g, params, opts.with_grads);
    let mut rng = opts.dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let mut fopts = ForwardOptions { dropout_rng: rng.as_mut() };
    let logits = forward_step(&mut g, &bound, &params.config, enc, &dec_in, &mut fopts)?;
    let t_max = logits.tgt_len;
    let flat: Vec<Option<usize>> = targets
        .iter()
        .flat_map(|t| (0..t_max).map(move |i| t.get(i).map(|&v| v as usize)))
        .collect();
    let tokens = flat.iter().flatten().count();
    let v = params.config.tgt_vocab_size;
    let rows = g.reshape(logits.var, &[batch.len() * t_max, v])?;
    let loss = g.cross_entropy(rows, &flat, opts.smoothing, Reduction::Sum)?;
    let loss_sum = g.value(loss).item()? as f64;
    let grads = if opts.with_grads {
        let names: Vec<(String, crate::tensor::Var)> = bound.iter().map(|(n, v)| (n.clone(), *v)).collect();
        let mut gr = g.backward(loss)?;
        Some(names.into_iter().map(|(n, v)| (n, gr.take(v).expect("param gradient"))).collect())
    } else {
        None
    };
    Ok(BatchResult { loss_sum, tokens, grads })
}

/// Mean per-token cross-entropy (no smoothing, no dropout) over `samples`.
pub fn mean_loss(params: &ModelParameters, samples: &[TaggedSample], mode: FirstToken) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let opts = BatchOptions {
        mode,
        smoothing: 0.0,
        dropout_seed: None,
        augment: None,
        with_grads: false,
    };
    let (mut total, mut tokens) = (0.0, 0usize);
    for chunk in samples.chunks(16) {
        let refs: Vec<&TaggedSample> = chunk.iter().collect();
        let r = run_batch(params, &refs, &opts, &mut Silent)?;
        total += r.loss_sum;
        tokens += r.tokens;
    }
    Ok(total / tokens as f64)
}

#[derive(Clone, Copy, Debug)]
enum Schedule {
    InverseSqrt { warmup: u64, peak: f64 },
    Constant(f64),
}

#[derive(Clone, Copy, Debug)]
enum Cadence {
    /// One checkpoint at the end of every epoch, for `epochs` epochs.
    PerEpoch { epochs: usize },
    /// Checkpoints at each quarter of a fixed step budget.
    Quarters { steps: u64 },
}

fn run_training(
    mut params: ModelParameters,
    samples: &[TaggedSample],
    cfg: &TrainConfig,
    mode: FirstToken,
    schedule: Schedule,
    cadence: Cadence,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<ModelParameters>> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut pool = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let reps = s
            .tag
            .as_ref()
            .and_then(|t| cfg.source_weights.get(&t.name))
            .copied()
            .unwrap_or(1);
        pool.extend(std::iter::repeat_n(i, reps));
    }
    let budget = match cadence {
        Cadence::PerEpoch { .. } => (cfg.max_steps > 0).then_some(cfg.max_steps),
        Cadence::Quarters { steps } => Some(steps),
    };
    let mut checkpoints = Vec::new();
    if budget == Some(0) {
        checkpoints.push(params);
        return Ok(checkpoints);
    }
    let quarter_marks: Vec<u64> = match cadence {
        Cadence::Quarters { steps } => (1..=4).map(|q| (steps * q).div_ceil(4)).collect(),
        Cadence::PerEpoch { .. } => Vec::new(),
    };
    let mut state = AdamState::default();
    let adam = AdamConfig::default();
    let mut local_step = 0u64;
    let mut epoch = 0usize;
    let mut buffer: Vec<Vec<usize>> = Vec::new();
    loop {
        let epoch_seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch as u64);
        let batches = batch_indices(samples, &pool, cfg, epoch_seed)?;
        for batch in batches {
            buffer.push(batch);
            if buffer.len() < cfg.grad_accum {
                continue;
            }
            let group = std::mem::take(&mut buffer);
            local_step += 1;
            let loss = accumulate_and_step(&mut params, samples, &group, cfg, mode, &mut state, &adam, schedule, local_step, observer)?;
            let _ = loss;
            if quarter_marks.contains(&local_step) {
                observer.on_checkpoint(&params);
                checkpoints.push(params.clone());
            }
            if budget == Some(local_step) {
                if matches!(cadence, Cadence::PerEpoch { .. }) {
                    observer.on_checkpoint(&params);
                    checkpoints.push(params.clone());
                }
                return Ok(checkpoints);
            }
        }
        epoch += 1;
        if let Cadence::PerEpoch { epochs } = cadence {
            observer.on_checkpoint(&params);
            checkpoints.push(params.clone());
            if epoch >= epochs {
                return Ok(checkpoints);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn accumulate_and_step(
    params: &mut ModelParameters,
    samples: &[TaggedSample],
    group: &[Vec<usize>],
    cfg: &TrainConfig,
    mode: FirstToken,
    state: &mut AdamState,
    adam: &AdamConfig,
    schedule: Schedule,
    local_step: u64,
    observer: &mut dyn TrainObserver,
) -> Result<f64> {
    let global_step = params.step + 1;
    let mut total: Option<BTreeMap<String, Tensor<f32>>> = None;
    let (mut loss_sum, mut tokens) = (0.0, 0usize);
    for (k, batch) in group.iter().enumerate() {
        let refs: Vec<&TaggedSample> = batch.iter().map(|&i| &samples[i]).collect();
        let stream = cfg.seed ^ global_step.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ ((k as u64) << 48);
        let aug = SpecAugmentConfig {
            max_time_width: cfg.specaug_time_width,
            seed: stream,
            ..SpecAugmentConfig::default()
        };
        let opts = BatchOptions {
            mode,
            smoothing: cfg.label_smoothing,
            dropout_seed: Some(stream.rotate_left(17)),
            augment: cfg.spec_augment.then_some(&aug),
            with_grads: true,
        };
        let r = run_batch(params, &refs, &opts, observer)?;
        loss_sum += r.loss_sum;
        tokens += r.tokens;
        let grads = r.grads.expect("requested gradients");
        match &mut total {
            None => total = Some(grads),
            Some(acc) => {
                for (name, g) in grads {
                    let dst = acc.get_mut(&name).expect("same parameter set");
                    for (a, b) in dst.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
            }
        }
    }
    let mut grads = total.expect("non-empty group");
    let norm = 1.0 / tokens.max(1) as f32;
    for g in grads.values_mut() {
        for x in g.data_mut() {
            *x *= norm;
        }
    }
    let loss = loss_sum / tokens.max(1) as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(global_step));
    }
    let lr = match schedule {
        Schedule::InverseSqrt { warmup, peak } => lr_schedule(local_step, warmup, peak),
        Schedule::Constant(lr) => lr,
    };
    adam_step(&mut params.tensors, &grads, state, lr, adam)?;
    params.step = global_step;
    observer.on_step(global_step, loss, lr);
    Ok(loss)
}

fn check_targets(samples: &[TaggedSample], params: &ModelParameters) -> Result<()> {
    let cfg = &params.config;
    for s in samples {
        if s.target.is_empty() {
            return Err(Error::Op {
                op: "training",
                msg: format!("sample `{}` has an empty target", s.id),
            });
        }
        if let Some(&bad) = s.target.ids.iter().find(|&&id| id as usize >= cfg.tgt_vocab_size) {
            return Err(Error::InvalidTokenId {
                id: bad,
                size: cfg.tgt_vocab_size,
            });
        }
        match (&s.input, cfg.kind) {
            (SampleInput::Features(f), ModelKind::Asr) if f.channels == cfg.input_dim => {}
            (SampleInput::Tokens(t), ModelKind::Mt) => {
                if let Some(&bad) = t.ids.iter().find(|&&id| id as usize >= cfg.src_vocab_size) {
                    return Err(Error::InvalidTokenId {
                        id: bad,
                        size: cfg.src_vocab_size,
                    });
                }
            }
            _ => {
                return Err(Error::ModelMismatch(format!(
                    "sample `{}` does not fit a {:?} model",
                    s.id, cfg.kind
                )))
            }
        }
    }
    Ok(())
}

fn check_vocab(params: &ModelParameters, vocab: &Vocabulary) -> Result<()> {
    if params.config.tgt_vocab_size != vocab.len() {
        return Err(Error::ModelMismatch(format!(
            "model has {} output tokens, vocabulary has {}",
            params.config.tgt_vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}

/// Tag-conditioned ASR training. In multi-source mode every sample's tag
/// must exist in `vocab` and is fed in place of `[BOS]`. Returns one
/// checkpoint per epoch.
pub fn train_asr(
    init: ModelParameters,
    samples: &[TaggedSample],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<ModelParameters>> {
    cfg.validate()?;
    if init.config.kind != ModelKind::Asr {
        return Err(Error::ModelMismatch("train_asr needs an ASR model".into()));
    }
    check_vocab(&init, vocab)?;
    check_targets(samples, &init)?;
    if cfg.multi_source {
        for s in samples {
            let tag = s
                .tag
                .as_ref()
                .ok_or_else(|| Error::UnknownTag(format!("sample `{}` has no source tag", s.id)))?;
            if vocab.tag_id(&tag.name)? != tag.id {
                return Err(Error::UnknownTag(format!("{} (id {} disagrees with vocabulary)", tag.name, tag.id)));
            }
        }
    }
    let mut init = init;
    init.metadata.insert(VOCAB_METADATA_KEY.into(), vocab.fingerprint());
    let mode = if cfg.multi_source { FirstToken::Tag } else { FirstToken::Bos };
    let first = if cfg.multi_source { "tag" } else { "bos" };
    init.metadata.insert(FIRST_TOKEN_METADATA_KEY.into(), first.into());
    run_training(
        init,
        samples,
        cfg,
        mode,
        Schedule::InverseSqrt {
            warmup: cfg.warmup,
            peak: cfg.peak_lr,
        },
        Cadence::PerEpoch { epochs: cfg.epochs },
        observer,
    )
}

/// MT pretraining with `[BOS]`-initial decoder inputs; one checkpoint per epoch.
pub fn train_mt(
    init: ModelParameters,
    bitext: &[TaggedSample],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<ModelParameters>> {
    cfg.validate()?;
    if init.config.kind != ModelKind::Mt {
        return Err(Error::ModelMismatch("train_mt needs an MT model".into()));
    }
    check_vocab(&init, vocab)?;
    check_targets(bitext, &init)?;
    let mut init = init;
    init.metadata.insert(VOCAB_METADATA_KEY.into(), vocab.fingerprint());
    run_training(
        init,
        bitext,
        cfg,
        FirstToken::Bos,
        Schedule::InverseSqrt {
            warmup: cfg.warmup,
            peak: cfg.peak_lr,
        },
        Cadence::PerEpoch { epochs: cfg.epochs },
        observer,
    )
}

/// Continues training a pretrained MT model at the constant `finetune_lr`
/// for `finetune_steps` updates, checkpointing at every quarter. The
/// vocabulary must be the one the model was pretrained with.
pub fn finetune(
    pretrained: ModelParameters,
    bitext: &[TaggedSample],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<ModelParameters>> {
    cfg.validate()?;
    if pretrained.config.kind != ModelKind::Mt {
        return Err(Error::ModelMismatch("finetune needs an MT model".into()));
    }
    check_vocab(&pretrained, vocab)?;
    match pretrained.metadata.get(VOCAB_METADATA_KEY) {
        Some(fp) if *fp == vocab.fingerprint() => {}
        Some(_) => {
            return Err(Error::ModelMismatch(
                "fine-tuning vocabulary differs from the pretraining vocabulary".into(),
            ))
        }
        None => return Err(Error::ModelMismatch("pretrained model records no vocabulary".into())),
    }
    check_targets(bitext, &pretrained)?;
    run_training(
        pretrained,
        bitext,
        cfg,
        FirstToken::Bos,
        Schedule::Constant(cfg.finetune_lr),
        Cadence::Quarters {
            steps: cfg.finetune_steps,
        },
        observer,
    )
}

/// Elementwise mean of every tensor. Values are sorted per element before
/// summation, so the result is independent of input order and exact for
/// identical inputs. The step is the largest input step.
pub fn average_checkpoints(models: &[ModelParameters]) -> Result<ModelParameters> {
    let first = models.first().ok_or(Error::EmptyCorpus)?;
    for (i, m) in models.iter().enumerate().skip(1) {
        if m.config != first.config {
            return Err(Error::ModelMismatch(format!("checkpoint {i} has a different model configuration")));
        }
        for name in m.tensors.keys() {
            if !first.tensors.contains_key(name) {
                return Err(Error::UnexpectedParam(format!("{name} (checkpoint {i})")));
            }
        }
        for (name, t) in &first.tensors {
            let other = m
                .tensors
                .get(name)
                .ok_or_else(|| Error::MissingParam(format!("{name} (checkpoint {i})")))?;
            if other.shape() != t.shape() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    found: other.shape().to_vec(),
                    expected: t.shape().to_vec(),
                });
            }
        }
    }
    let n = models.len() as f64;
    let mut column = vec![0f32; models.len()];
    let tensors = first
        .tensors
        .iter()
        .map(|(name, t)| {
            let data = (0..t.numel())
                .map(|e| {
                    for (c, m) in column.iter_mut().zip(models) {
                        *c = m.tensors[name].data()[e];
                    }
                    column.sort_by(f32::total_cmp);
                    (column.iter().map(|&v| v as f64).sum::<f64>() / n) as f32
                })
                .collect();
            (name.clone(), Tensor::new(t.shape().to_vec(), data).expect("same shape"))
        })
        .collect();
    Ok(ModelParameters {
        config: first.config.clone(),
        step: models.iter().map(|m| m.step).max().unwrap_or(0),
        tensors,
        metadata: first.metadata.clone(),
    })
}

pub fn average_checkpoint_files<P: AsRef<Path>>(paths: &[P]) -> Result<ModelParameters> {
    let models = paths.iter().map(load_checkpoint).collect::<Result<Vec<_>>>()?;
    average_checkpoints(&models)
}

/// Synthetic `(source, target)` pairs: each monolingual target line is
/// translated by the reverse model(s); the target side is the line itself.
pub fn back_translate(
    reverse: &[&ModelParameters],
    lines: &[String],
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<Vec<(String, String)>> {
    lines
        .iter()
        .map(|line| {
            let src = vocab.encode(line);
            if src.is_empty() {
                return Ok((String::new(), line.clone()));
            }
            let hyps = decode_source(reverse, Source::Tokens(&src.ids), vocab, cfg)?;
            let text = match hyps.first() {
                Some(h) => h.text(vocab)?,
                None => String::new(),
            };
            Ok((text, line.clone()))
        })
        .collect()
}

/// Text pairs to training samples over one joint vocabulary.
pub fn text_samples(pairs: &[(String, String)], vocab: &Vocabulary, prefix: &str) -> Vec<TaggedSample> {
    pairs
        .iter()
        .enumerate()
        .filter_map(|(i, (src, tgt))| {
            let (s, t) = (vocab.encode(src), vocab.encode(tgt));
            (!s.is_empty() && !t.is_empty()).then(|| TaggedSample {
                id: format!("{prefix}{i:06}"),
                input: SampleInput::Tokens(s),
                target: t,
                tag: None,
            })
        })
        .collect()
}
