//! Beam search over any [`StepScorer`], with a forced first decoder token
//! (`[BOS]` or a source tag) and probability-averaging ensembles.

use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::{run_decoder, run_encoder, BoundParams, EncoderBatch, EncoderOutput, ForwardOptions, ModelKind, ModelParameters};
use crate::signal::FeatureMatrix;
use crate::subword::{TokenSequence, Vocabulary, BOS, BOS_ID, EOS_ID, PAD_ID};
use crate::tensor::{Graph, Tensor};

/// Next-token distributions for a set of decoder prefixes. Each prefix
/// starts with the forced initial token.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn next_logprobs(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>>;
}

impl<S: StepScorer + ?Sized> StepScorer for &mut S {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn next_logprobs(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        (**self).next_logprobs(prefixes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Output tokens, without the forced initial token; ends in `[EOS]` iff finished.
    pub tokens: TokenSequence,
    pub logprob: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn normalized_score(&self, length_penalty: f64) -> f64 {
        self.logprob / (self.tokens.len().max(1) as f64).powf(length_penalty)
    }

    /// Tokens with the trailing `[EOS]` removed.
    pub fn content(&self) -> &[u32] {
        match self.tokens.ids.split_last() {
            Some((&EOS_ID, rest)) if self.finished => rest,
            _ => &self.tokens.ids,
        }
    }

    pub fn text(&self, vocab: &Vocabulary) -> Result<String> {
        vocab.decode(&TokenSequence::from(self.content().to_vec()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub length_penalty: f64,
    /// `[BOS]` or one of the vocabulary's source tags.
    pub initial_token: String,
    /// Overrides the per-kind default output length limit.
    pub max_len: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            length_penalty: 1.0,
            initial_token: BOS.to_string(),
            max_len: None,
        }
    }
}

impl DecodeConfig {
    /// Reads the `decode.` section (`beam_size`, `length_penalty`, `tag`, and
    /// `max_len` where 0 keeps the per-kind default).
    pub fn from_kv(kv: &mut KeyValues, default_tag: &str) -> Result<Self> {
        let mut s = kv.section("decode");
        let mut c = Self {
            initial_token: default_tag.to_string(),
            ..Self::default()
        };
        s.take("beam_size", &mut c.beam_size)?;
        s.take("length_penalty", &mut c.length_penalty)?;
        s.take("tag", &mut c.initial_token)?;
        let mut max_len = 0usize;
        s.take("max_len", &mut max_len)?;
        c.max_len = (max_len > 0).then_some(max_len);
        s.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::DecodeConfig("beam size must be at least 1".into()));
        }
        if !(self.length_penalty >= 0.0) {
            return Err(Error::DecodeConfig(format!(
                "length penalty must be non-negative, got {}",
                self.length_penalty
            )));
        }
        if self.max_len == Some(0) {
            return Err(Error::DecodeConfig("max_len must be positive".into()));
        }
        Ok(())
    }

    pub fn initial_id(&self, vocab: &Vocabulary) -> Result<u32> {
        if self.initial_token == BOS {
            Ok(BOS_ID)
        } else {
            vocab.tag_id(&self.initial_token)
        }
    }
}

/// `2·len + 10` for MT sources, `frames/4 + 20` for ASR inputs.
pub fn default_max_len(kind: ModelKind, input_len: usize) -> usize {
    match kind {
        ModelKind::Mt => 2 * input_len + 10,
        ModelKind::Asr => input_len / 4 + 20,
    }
}

/// Log of the arithmetic mean of the members' probabilities, per token.
///
/// Member values are sorted before summation so the result does not depend
/// on member order.
pub fn ensemble_logprob(members: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = members.first().ok_or_else(|| Error::DecodeConfig("ensemble needs at least one model".into()))?;
    if let Some(bad) = members.iter().find(|m| m.len() != first.len()) {
        return Err(Error::ModelMismatch(format!(
            "ensemble vocabularies differ: {} vs {}",
            first.len(),
            bad.len()
        )));
    }
    let ln_n = (members.len() as f64).ln();
    let mut column = vec![0.0; members.len()];
    Ok((0..first.len())
        .map(|t| {
            for (c, m) in column.iter_mut().zip(members) {
                *c = m[t];
            }
            column.sort_by(f64::total_cmp);
            let max = column[column.len() - 1];
            if column[0] == max || max == f64::NEG_INFINITY {
                return max;
            }
            max + column.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() - ln_n
        })
        .collect())
}

/// Combines several scorers by [`ensemble_logprob`].
pub struct Ensemble<S> {
    members: Vec<S>,
}

impl<S: StepScorer> Ensemble<S> {
    pub fn new(members: Vec<S>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::DecodeConfig("ensemble needs at least one model".into()))?;
        let v = first.vocab_size();
        if let Some(bad) = members.iter().find(|m| m.vocab_size() != v) {
            return Err(Error::ModelMismatch(format!(
                "ensemble vocabularies differ: {v} vs {}",
                bad.vocab_size()
            )));
        }
        Ok(Self { members })
    }
}

impl<S: StepScorer> StepScorer for Ensemble<S> {
    fn vocab_size(&self) -> usize {
        self.members[0].vocab_size()
    }

    fn next_logprobs(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let per_model = self
            .members
            .iter_mut()
            .map(|m| m.next_logprobs(prefixes))
            .collect::<Result<Vec<_>>>()?;
        (0..prefixes.len())
            .map(|row| {
                let rows: Vec<Vec<f64>> = per_model.iter().map(|m| m[row].clone()).collect();
                ensemble_logprob(&rows)
            })
            .collect()
    }
}

/// Encoder input for a single utterance.
#[derive(Clone, Copy, Debug)]
pub enum Source<'a> {
    Features(&'a FeatureMatrix),
    Tokens(&'a [u32]),
}

impl Source<'_> {
    pub fn len(&self) -> usize {
        match self {
            Self::Features(f) => f.num_frames,
            Self::Tokens(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scores prefixes with one Transformer; the encoder runs once at construction.
pub struct TransformerScorer<'m> {
    params: &'m ModelParameters,
    memory: Tensor<f32>,
    src_len: usize,
}

impl<'m> TransformerScorer<'m> {
    pub fn new(params: &'m ModelParameters, source: Source<'_>) -> Result<Self> {
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, params, false);
        let feats;
        let toks;
        let batch = match source {
            Source::Features(f) => {
                feats = [f];
                EncoderBatch::Features(&feats)
            }
            Source::Tokens(t) => {
                toks = [t];
                EncoderBatch::Tokens(&toks)
            }
        };
        let enc = run_encoder(&mut g, &bound, &params.config, batch, &mut ForwardOptions::inference())?;
        Ok(Self {
            params,
            memory: g.value(enc.out).clone(),
            src_len: enc.lengths[0],
        })
    }
}

impl StepScorer for TransformerScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.params.config.tgt_vocab_size
    }

    fn next_logprobs(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let n = prefixes.len();
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, self.params, false);
        let shape = self.memory.shape();
        let (s, d) = (shape[1], shape[2]);
        let repeated = self.memory.data().repeat(n);
        let enc = EncoderOutput {
            out: g.constant(Tensor::new(vec![n, s, d], repeated)?),
            lengths: vec![self.src_len; n],
            max_len: s,
        };
        let logits = run_decoder(&mut g, &bound, &self.params.config, &enc, prefixes, &mut ForwardOptions::inference())?;
        let v = self.vocab_size();
        let t = logits.tgt_len;
        let data = g.value(logits.var).data();
        Ok(prefixes
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let row = &data[(i * t + p.len() - 1) * v..(i * t + p.len()) * v];
                log_softmax(row)
            })
            .collect())
    }
}

fn log_softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().map(|&x| x as f64).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&x| x as f64 - lse).collect()
}

/// Beam search from a forced `initial` token. Candidates are ranked by
/// cumulative log-probability with ties going to the lower token id; `[EOS]`
/// candidates inside the top `beam_size` finish. Finished hypotheses are
/// ranked by `logprob / len^α`. Tokens in `banned` are never emitted.
pub fn beam_search<S: StepScorer + ?Sized>(
    scorer: &mut S,
    initial: u32,
    banned: &[u32],
    cfg: &DecodeConfig,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let vocab = scorer.vocab_size();
    if initial as usize >= vocab {
        return Err(Error::InvalidTokenId { id: initial, size: vocab });
    }
    let mut allowed = vec![true; vocab];
    for &b in banned {
        if let Some(a) = allowed.get_mut(b as usize) {
            *a = false;
        }
    }
    let mut active = vec![Hypothesis {
        tokens: TokenSequence::default(),
        logprob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len.max(1) {
        let prefixes: Vec<Vec<u32>> = active
            .iter()
            .map(|h| std::iter::once(initial).chain(h.tokens.ids.iter().copied()).collect())
            .collect();
        let dists = scorer.next_logprobs(&prefixes)?;
        let mut cands: Vec<(f64, u32, usize)> = Vec::with_capacity(active.len() * vocab);
        for (hi, (h, dist)) in active.iter().zip(&dists).enumerate() {
            if dist.len() != vocab {
                return Err(Error::ModelMismatch(format!("scorer returned {} scores for {vocab} tokens", dist.len())));
            }
            for (t, &lp) in dist.iter().enumerate() {
                if allowed[t] && lp > f64::NEG_INFINITY {
                    cands.push((h.logprob + lp, t as u32, hi));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(cfg.beam_size);
        for (rank, &(score, tok, hi)) in cands.iter().enumerate() {
            if next.len() == cfg.beam_size {
                break;
            }
            let mut ids = active[hi].tokens.ids.clone();
            ids.push(tok);
            let hyp = Hypothesis {
                tokens: ids.into(),
                logprob: score,
                finished: tok == EOS_ID,
            };
            if hyp.finished {
                if rank < cfg.beam_size {
                    finished.push(hyp);
                }
            } else {
                next.push(hyp);
            }
        }
        active = next;
        if active.is_empty() || finished.len() >= cfg.beam_size {
            break;
        }
    }
    let mut out = if finished.is_empty() { active } else { finished };
    out.sort_by(|a, b| {
        b.normalized_score(cfg.length_penalty)
            .total_cmp(&a.normalized_score(cfg.length_penalty))
            .then_with(|| a.tokens.ids.cmp(&b.tokens.ids))
    });
    Ok(out)
}

/// Ids a decoder must never emit: padding, `[BOS]` and every source tag.
pub fn banned_ids(vocab: &Vocabulary) -> Vec<u32> {
    let mut ids = vec![PAD_ID, BOS_ID];
    ids.extend((0..vocab.tags().len()).map(|i| 4 + i as u32));
    ids
}

/// Decodes one utterance with one model or an ensemble of models.
pub fn decode_source(
    models: &[&ModelParameters],
    source: Source<'_>,
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let first = models.first().ok_or_else(|| Error::DecodeConfig("no model given".into()))?;
    for m in models {
        if m.config.kind != first.config.kind || m.config.tgt_vocab_size != first.config.tgt_vocab_size {
            return Err(Error::ModelMismatch("ensemble members differ in kind or vocabulary".into()));
        }
    }
    if first.config.tgt_vocab_size != vocab.len() {
        return Err(Error::ModelMismatch(format!(
            "model has {} output tokens, vocabulary has {}",
            first.config.tgt_vocab_size,
            vocab.len()
        )));
    }
    let initial = cfg.initial_id(vocab)?;
    let max_len = cfg.max_len.unwrap_or_else(|| default_max_len(first.config.kind, source.len()));
    let members = models
        .iter()
        .map(|m| TransformerScorer::new(m, source))
        .collect::<Result<Vec<_>>>()?;
    let mut scorer = Ensemble::new(members)?;
    beam_search(&mut scorer, initial, &banned_ids(vocab), cfg, max_len)
}
