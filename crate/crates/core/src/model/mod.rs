//! The two networks of the cascade: an ASR Transformer whose encoder starts
//! with two strided 1-d convolutions over filterbank frames, and an MT
//! Transformer with a token-embedding encoder. Both use pre-norm layers and
//! fixed sinusoidal positions.

mod checkpoint;
mod transformer;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use transformer::{
    forward_step, run_decoder, run_encoder, BoundParams, EncoderBatch, EncoderOutput, ForwardOptions, Logits,
    LAYER_NORM_EPS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Asr,
    Mt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvConfig {
    pub layers: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Default for ConvConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            kernel: 5,
            stride: 2,
        }
    }
}

impl ConvConfig {
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    /// Encoder length after the convolution stack.
    pub fn output_len(&self, frames: usize) -> usize {
        (0..self.layers).fold(frames, |t, _| {
            crate::tensor::conv_out_len(t, self.kernel, self.stride, self.padding()).unwrap_or(0)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub n_heads: usize,
    pub d_hidden: usize,
    pub d_ffn: usize,
    /// Source vocabulary (MT only; 0 for ASR).
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    /// Feature channels (ASR only; 0 for MT).
    pub input_dim: usize,
    pub dropout: f64,
    pub conv: Option<ConvConfig>,
}

impl ModelConfig {
    /// 12 encoder / 6 decoder layers, 16 heads, 1024 hidden, 4096 FFN.
    pub fn paper_asr(vocab: usize) -> Self {
        Self {
            kind: ModelKind::Asr,
            n_encoder_layers: 12,
            n_decoder_layers: 6,
            n_heads: 16,
            d_hidden: 1024,
            d_ffn: 4096,
            src_vocab_size: 0,
            tgt_vocab_size: vocab,
            input_dim: 80,
            dropout: 0.1,
            conv: Some(ConvConfig::default()),
        }
    }

    /// Transformer-big with an 8192-wide FFN.
    pub fn paper_mt(vocab: usize) -> Self {
        Self {
            kind: ModelKind::Mt,
            n_encoder_layers: 6,
            n_decoder_layers: 6,
            n_heads: 16,
            d_hidden: 1024,
            d_ffn: 8192,
            src_vocab_size: vocab,
            tgt_vocab_size: vocab,
            input_dim: 0,
            dropout: 0.1,
            conv: None,
        }
    }

    pub fn toy_asr(vocab: usize) -> Self {
        Self {
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            n_heads: 4,
            d_hidden: 64,
            d_ffn: 128,
            ..Self::paper_asr(vocab)
        }
    }

    pub fn toy_mt(vocab: usize) -> Self {
        Self {
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            n_heads: 4,
            d_hidden: 64,
            d_ffn: 128,
            ..Self::paper_mt(vocab)
        }
    }

    /// Reads the `model.` section: `preset` (`toy` or `paper`, default
    /// `paper`) followed by per-field overrides.
    pub fn from_kv(kv: &mut KeyValues, kind: ModelKind, vocab: usize, input_dim: usize) -> Result<Self> {
        let mut s = kv.section("model");
        let mut preset = String::from("paper");
        s.take("preset", &mut preset)?;
        let mut c = match (preset.as_str(), kind) {
            ("paper", ModelKind::Asr) => Self::paper_asr(vocab),
            ("paper", ModelKind::Mt) => Self::paper_mt(vocab),
            ("toy", ModelKind::Asr) => Self::toy_asr(vocab),
            ("toy", ModelKind::Mt) => Self::toy_mt(vocab),
            _ => {
                return Err(Error::Config {
                    path: s.path().to_path_buf(),
                    msg: format!("`model.preset` must be toy or paper, got `{preset}`"),
                })
            }
        };
        if kind == ModelKind::Asr {
            c.input_dim = input_dim;
        }
        s.take("n_encoder_layers", &mut c.n_encoder_layers)?;
        s.take("n_decoder_layers", &mut c.n_decoder_layers)?;
        s.take("n_heads", &mut c.n_heads)?;
        s.take("d_hidden", &mut c.d_hidden)?;
        s.take("d_ffn", &mut c.d_ffn)?;
        s.take("dropout", &mut c.dropout)?;
        s.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::ModelConfig(msg));
        if self.n_heads == 0 || self.d_hidden == 0 || !self.d_hidden.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_hidden ({}) must be a positive multiple of n_heads ({})",
                self.d_hidden, self.n_heads
            ));
        }
        if self.d_ffn == 0 {
            return fail("d_ffn must be positive".into());
        }
        if self.tgt_vocab_size < 5 {
            return fail(format!("tgt_vocab_size {} is smaller than the special tokens", self.tgt_vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        match (self.kind, &self.conv) {
            (ModelKind::Asr, None) => return fail("asr model requires a conv front-end".into()),
            (ModelKind::Mt, Some(_)) => return fail("conv front-end is only valid for asr".into()),
            (ModelKind::Asr, Some(c)) => {
                if c.layers == 0 || c.kernel == 0 || c.stride == 0 {
                    return fail(format!("invalid conv block {c:?}"));
                }
                if self.input_dim == 0 {
                    return fail("asr input_dim must be positive".into());
                }
            }
            (ModelKind::Mt, None) => {
                if self.src_vocab_size < 5 {
                    return fail(format!("src_vocab_size {} too small", self.src_vocab_size));
                }
            }
        }
        Ok(())
    }

    /// Every parameter name with its shape, in initialisation order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_hidden, self.d_ffn);
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
        match (&self.conv, self.kind) {
            (Some(conv), ModelKind::Asr) => {
                for i in 0..conv.layers {
                    let c_in = if i == 0 { self.input_dim } else { d };
                    push(format!("encoder.conv{i}.weight"), vec![d, c_in, conv.kernel]);
                    push(format!("encoder.conv{i}.bias"), vec![d]);
                }
            }
            _ => push("encoder.embed".into(), vec![self.src_vocab_size, d]),
        }
        let norm = |push: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            push(format!("{p}.gamma"), vec![d]);
            push(format!("{p}.beta"), vec![d]);
        };
        let attn = |push: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            for proj in ["q", "k", "v", "o"] {
                push(format!("{p}.{proj}.weight"), vec![d, d]);
                push(format!("{p}.{proj}.bias"), vec![d]);
            }
        };
        let ffn = |push: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            push(format!("{p}.fc1.weight"), vec![d, f]);
            push(format!("{p}.fc1.bias"), vec![f]);
            push(format!("{p}.fc2.weight"), vec![f, d]);
            push(format!("{p}.fc2.bias"), vec![d]);
        };
        for l in 0..self.n_encoder_layers {
            let p = format!("encoder.layers.{l}");
            norm(&mut push, &format!("{p}.self_attn_norm"));
            attn(&mut push, &format!("{p}.self_attn"));
            norm(&mut push, &format!("{p}.ffn_norm"));
            ffn(&mut push, &format!("{p}.ffn"));
        }
        norm(&mut push, "encoder.final_norm");
        push("decoder.embed".into(), vec![self.tgt_vocab_size, d]);
        for l in 0..self.n_decoder_layers {
            let p = format!("decoder.layers.{l}");
            norm(&mut push, &format!("{p}.self_attn_norm"));
            attn(&mut push, &format!("{p}.self_attn"));
            norm(&mut push, &format!("{p}.cross_attn_norm"));
            attn(&mut push, &format!("{p}.cross_attn"));
            norm(&mut push, &format!("{p}.ffn_norm"));
            ffn(&mut push, &format!("{p}.ffn"));
        }
        norm(&mut push, "decoder.final_norm");
        push("decoder.output.weight".into(), vec![d, self.tgt_vocab_size]);
        push("decoder.output.bias".into(), vec![self.tgt_vocab_size]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    pub fn num_encoder_layers(&self) -> usize {
        self.param_shapes()
            .iter()
            .filter(|(n, _)| n.starts_with("encoder.layers.") && n.ends_with("self_attn.q.weight"))
            .count()
    }

    /// Encoder sequence length for `input_len` frames or tokens.
    pub fn encoder_len(&self, input_len: usize) -> usize {
        match &self.conv {
            Some(c) => c.output_len(input_len),
            None => input_len,
        }
    }
}

/// Named tensors plus the configuration that determines their shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters<T = f32> {
    pub config: ModelConfig,
    pub step: u64,
    pub tensors: BTreeMap<String, Tensor<T>>,
    pub metadata: BTreeMap<String, String>,
}

impl<T: Real> ModelParameters<T> {
    /// Checks names and shapes against the config and that every value is finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = self.config.param_shapes();
        for (name, shape) in &expected {
            let t = self.tensors.get(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    found: t.shape().to_vec(),
                    expected: shape.clone(),
                });
            }
            if !t.is_finite() {
                return Err(Error::ModelConfig(format!("tensor `{name}` has non-finite values")));
            }
        }
        if self.tensors.len() != expected.len() {
            let known: std::collections::BTreeSet<&String> = expected.iter().map(|(n, _)| n).collect();
            if let Some(extra) = self.tensors.keys().find(|k| !known.contains(k)) {
                return Err(Error::UnexpectedParam(extra.clone()));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelParameters<U> {
        ModelParameters {
            config: self.config.clone(),
            step: self.step,
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            metadata: self.metadata.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

/// Deterministic initialisation: fan-based uniform (Glorot) weights, zero
/// biases, unit layer-norm gains.
pub fn build_model<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ModelParameters<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape) in cfg.param_shapes() {
        let n: usize = shape.iter().product();
        let data: Vec<T> = if name.ends_with(".gamma") {
            vec![T::one(); n]
        } else if name.ends_with(".bias") || name.ends_with(".beta") {
            vec![T::zero(); n]
        } else {
            let (fan_in, fan_out) = match shape.len() {
                // conv weight [out, in, k]
                3 => (shape[1] * shape[2], shape[0] * shape[2]),
                _ => (shape[0], shape[1]),
            };
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| T::from_f64_lossy(rng.gen_range(-a..a))).collect()
        };
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    Ok(ModelParameters {
        config: cfg.clone(),
        step: 0,
        tensors,
        metadata: BTreeMap::new(),
    })
}
