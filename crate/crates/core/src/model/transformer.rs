use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelKind, ModelParameters};
use crate::error::{Error, Result};
use crate::signal::FeatureMatrix;
use crate::tensor::{Graph, Real, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const MASK_VALUE: f64 = -1e9;

/// Parameter leaves of one forward pass, looked up by name.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Copies every tensor into `g`; `trainable` leaves receive gradients.
    pub fn bind<T: Real>(g: &mut Graph<T>, params: &ModelParameters<T>, trainable: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Encoder-side batch: filterbank matrices for ASR, token ids for MT.
#[derive(Clone, Copy, Debug)]
pub enum EncoderBatch<'a> {
    Features(&'a [&'a FeatureMatrix]),
    Tokens(&'a [&'a [u32]]),
}

impl EncoderBatch<'_> {
    pub fn len(&self) -> usize {
        match self {
            Self::Features(f) => f.len(),
            Self::Tokens(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_lengths(&self) -> Vec<usize> {
        match self {
            Self::Features(f) => f.iter().map(|m| m.num_frames).collect(),
            Self::Tokens(t) => t.iter().map(|s| s.len()).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[batch, max_len, d_hidden]`
    pub out: Var,
    pub lengths: Vec<usize>,
    pub max_len: usize,
}

#[derive(Clone, Debug)]
pub struct Logits {
    /// `[batch, tgt_len, vocab]`
    pub var: Var,
    pub tgt_len: usize,
}

/// Dropout is active only when an RNG is supplied.
pub struct ForwardOptions<'r> {
    pub dropout_rng: Option<&'r mut ChaCha8Rng>,
}

impl ForwardOptions<'_> {
    pub fn inference() -> Self {
        Self { dropout_rng: None }
    }
}

pub(crate) fn sinusoidal<T: Real>(len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data.push(T::from_f64_lossy(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, d], data).expect("shape matches")
}

struct Ctx<'a, 'r, T> {
    g: &'a mut Graph<T>,
    p: &'a BoundParams,
    cfg: &'a ModelConfig,
    opts: &'a mut ForwardOptions<'r>,
}

impl<T: Real> Ctx<'_, '_, T> {
    fn dropout(&mut self, x: Var) -> Var {
        match self.opts.dropout_rng.as_deref_mut() {
            Some(rng) => self.g.dropout(x, self.cfg.dropout, rng),
            None => x,
        }
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p.get(&format!("{prefix}.weight"))?;
        let b = self.p.get(&format!("{prefix}.bias"))?;
        let y = self.g.matmul(x, w)?;
        self.g.add(y, b)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p.get(&format!("{prefix}.gamma"))?;
        let beta = self.p.get(&format!("{prefix}.beta"))?;
        let n = self.g.layer_norm(x, LAYER_NORM_EPS)?;
        let n = self.g.mul(n, gamma)?;
        self.g.add(n, beta)
    }

    /// Multi-head attention; `mask[b][q][k]` true means "do not attend".
    fn attention(&mut self, xq: Var, xkv: Var, mask: &[bool], prefix: &str) -> Result<Var> {
        let (b, tq, d) = dims3(self.g.shape(xq));
        let tk = self.g.shape(xkv)[1];
        let h = self.cfg.n_heads;
        let dh = d / h;
        let q = self.linear(xq, &format!("{prefix}.q"))?;
        let q = self.g.reshape(q, &[b, tq, h, dh])?;
        let q = self.g.permute(q, &[0, 2, 1, 3])?;
        let k = self.linear(xkv, &format!("{prefix}.k"))?;
        let k = self.g.reshape(k, &[b, tk, h, dh])?;
        let k = self.g.permute(k, &[0, 2, 3, 1])?;
        let v = self.linear(xkv, &format!("{prefix}.v"))?;
        let v = self.g.reshape(v, &[b, tk, h, dh])?;
        let v = self.g.permute(v, &[0, 2, 1, 3])?;

        let scores = self.g.matmul(q, k)?;
        let scores = self.g.scale(scores, T::from_f64_lossy(1.0 / (dh as f64).sqrt()));
        let mut full = Vec::with_capacity(b * h * tq * tk);
        for bi in 0..b {
            let m = &mask[bi * tq * tk..(bi + 1) * tq * tk];
            for _ in 0..h {
                full.extend_from_slice(m);
            }
        }
        let scores = self.g.masked_fill(scores, &full, T::from_f64_lossy(MASK_VALUE))?;
        let attn = self.g.softmax(scores, 3)?;
        let attn = self.dropout(attn);
        let ctx = self.g.matmul(attn, v)?;
        let ctx = self.g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = self.g.reshape(ctx, &[b, tq, d])?;
        self.linear(ctx, &format!("{prefix}.o"))
    }

    fn ffn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let hdn = self.linear(x, &format!("{prefix}.fc1"))?;
        let hdn = self.g.relu(hdn);
        let hdn = self.dropout(hdn);
        self.linear(hdn, &format!("{prefix}.fc2"))
    }

    fn residual(&mut self, x: Var, sub: Var) -> Result<Var> {
        let sub = self.dropout(sub);
        self.g.add(x, sub)
    }

    fn add_positions(&mut self, x: Var) -> Result<Var> {
        let (_, t, d) = dims3(self.g.shape(x));
        let pe = self.g.constant(sinusoidal(t, d));
        let x = self.g.add(x, pe)?;
        Ok(self.dropout(x))
    }

    fn embed(&mut self, table: &str, ids: &[Vec<u32>], len: usize) -> Result<Var> {
        let b = ids.len();
        let d = self.cfg.d_hidden;
        let flat: Vec<usize> = ids
            .iter()
            .flat_map(|s| (0..len).map(move |i| s.get(i).copied().unwrap_or(0) as usize))
            .collect();
        let table = self.p.get(table)?;
        let e = self.g.embedding(table, &flat)?;
        let e = self.g.reshape(e, &[b, len, d])?;
        let e = self.g.scale(e, T::from_f64_lossy((d as f64).sqrt()));
        self.add_positions(e)
    }

    fn conv_front_end(&mut self, feats: &[&FeatureMatrix]) -> Result<(Var, Vec<usize>)> {
        let conv = self.cfg.conv.expect("validated asr config");
        let c = self.cfg.input_dim;
        let b = feats.len();
        let t_max = feats.iter().map(|f| f.num_frames).max().unwrap_or(0);
        let mut data = vec![T::zero(); b * t_max * c];
        for (bi, f) in feats.iter().enumerate() {
            if f.channels != c {
                return Err(Error::Shape {
                    op: "asr input",
                    lhs: vec![f.num_frames, f.channels],
                    rhs: vec![t_max, c],
                });
            }
            for (dst, &src) in data[bi * t_max * c..].iter_mut().zip(&f.frames) {
                *dst = T::from_f32(src).unwrap();
            }
        }
        let x = self.g.constant(Tensor::new(vec![b, t_max, c], data)?);
        let mut x = self.g.permute(x, &[0, 2, 1])?;
        let mut lengths: Vec<usize> = feats.iter().map(|f| f.num_frames).collect();
        let mut t = t_max;
        for i in 0..conv.layers {
            let w = self.p.get(&format!("encoder.conv{i}.weight"))?;
            let bias = self.p.get(&format!("encoder.conv{i}.bias"))?;
            x = self.g.conv1d(x, w, Some(bias), conv.stride, conv.padding())?;
            x = self.g.relu(x);
            let step = |n: usize| crate::tensor::conv_out_len(n, conv.kernel, conv.stride, conv.padding()).unwrap_or(0);
            t = step(t);
            lengths = lengths.into_iter().map(step).collect();
            // zero positions past each utterance so padding never leaks into valid frames
            let d = self.cfg.d_hidden;
            let mut mask = Vec::with_capacity(b * d * t);
            for &len in &lengths {
                for _ in 0..d {
                    mask.extend((0..t).map(|ti| ti >= len));
                }
            }
            if mask.iter().any(|&m| m) {
                x = self.g.masked_fill(x, &mask, T::zero())?;
            }
        }
        if t == 0 {
            return Err(Error::Op {
                op: "asr front-end",
                msg: "input too short for the convolution stack".into(),
            });
        }
        let x = self.g.permute(x, &[0, 2, 1])?;
        let x = self.add_positions(x)?;
        Ok((x, lengths))
    }

    fn encode(&mut self, batch: EncoderBatch<'_>) -> Result<EncoderOutput> {
        let (mut x, lengths) = match (batch, self.cfg.kind) {
            (EncoderBatch::Features(f), ModelKind::Asr) => self.conv_front_end(f)?,
            (EncoderBatch::Tokens(t), ModelKind::Mt) => {
                let ids: Vec<Vec<u32>> = t.iter().map(|s| s.to_vec()).collect();
                let len = ids.iter().map(Vec::len).max().unwrap_or(0);
                if len == 0 {
                    return Err(Error::Op {
                        op: "encode",
                        msg: "empty source sequence".into(),
                    });
                }
                (self.embed("encoder.embed", &ids, len)?, ids.iter().map(Vec::len).collect())
            }
            _ => {
                return Err(Error::ModelMismatch(format!(
                    "{:?} model cannot encode this input type",
                    self.cfg.kind
                )))
            }
        };
        let (b, s, _) = dims3(self.g.shape(x));
        let mut mask = Vec::with_capacity(b * s * s);
        for &len in &lengths {
            for _ in 0..s {
                mask.extend((0..s).map(|k| k >= len));
            }
        }
        for l in 0..self.cfg.n_encoder_layers {
            let p = format!("encoder.layers.{l}");
            let n = self.norm(x, &format!("{p}.self_attn_norm"))?;
            let a = self.attention(n, n, &mask, &format!("{p}.self_attn"))?;
            x = self.residual(x, a)?;
            let n = self.norm(x, &format!("{p}.ffn_norm"))?;
            let f = self.ffn(n, &format!("{p}.ffn"))?;
            x = self.residual(x, f)?;
        }
        let out = self.norm(x, "encoder.final_norm")?;
        Ok(EncoderOutput {
            out,
            lengths,
            max_len: s,
        })
    }

    fn decode(&mut self, enc: &EncoderOutput, dec_input: &[Vec<u32>]) -> Result<Logits> {
        let b = dec_input.len();
        if b != enc.lengths.len() {
            return Err(Error::Shape {
                op: "decoder batch",
                lhs: vec![b],
                rhs: vec![enc.lengths.len()],
            });
        }
        let t = dec_input.iter().map(Vec::len).max().unwrap_or(0);
        if t == 0 {
            return Err(Error::Op {
                op: "decode",
                msg: "decoder input must start with [BOS] or a source tag".into(),
            });
        }
        if let Some(bad) = dec_input.iter().flatten().find(|&&id| id as usize >= self.cfg.tgt_vocab_size) {
            return Err(Error::InvalidTokenId {
                id: *bad,
                size: self.cfg.tgt_vocab_size,
            });
        }
        let s = enc.max_len;
        let mut self_mask = Vec::with_capacity(b * t * t);
        let mut cross_mask = Vec::with_capacity(b * t * s);
        for (seq, &src_len) in dec_input.iter().zip(&enc.lengths) {
            for q in 0..t {
                self_mask.extend((0..t).map(|k| k > q || k >= seq.len()));
                cross_mask.extend((0..s).map(|k| k >= src_len));
            }
        }
        let mut x = self.embed("decoder.embed", dec_input, t)?;
        for l in 0..self.cfg.n_decoder_layers {
            let p = format!("decoder.layers.{l}");
            let n = self.norm(x, &format!("{p}.self_attn_norm"))?;
            let a = self.attention(n, n, &self_mask, &format!("{p}.self_attn"))?;
            x = self.residual(x, a)?;
            let n = self.norm(x, &format!("{p}.cross_attn_norm"))?;
            let a = self.attention(n, enc.out, &cross_mask, &format!("{p}.cross_attn"))?;
            x = self.residual(x, a)?;
            let n = self.norm(x, &format!("{p}.ffn_norm"))?;
            let f = self.ffn(n, &format!("{p}.ffn"))?;
            x = self.residual(x, f)?;
        }
        let x = self.norm(x, "decoder.final_norm")?;
        let var = self.linear(x, "decoder.output")?;
        Ok(Logits { var, tgt_len: t })
    }
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2])
}

/// Runs the encoder on `batch`.
pub fn run_encoder<T: Real>(
    g: &mut Graph<T>,
    params: &BoundParams,
    cfg: &ModelConfig,
    batch: EncoderBatch<'_>,
    opts: &mut ForwardOptions<'_>,
) -> Result<EncoderOutput> {
    if batch.is_empty() {
        return Err(Error::Op {
            op: "encode",
            msg: "empty batch".into(),
        });
    }
    Ctx { g, p: params, cfg, opts }.encode(batch)
}

/// Runs the decoder against an encoder output; rows of `dec_input` shorter
/// than the longest are padded and masked.
pub fn run_decoder<T: Real>(
    g: &mut Graph<T>,
    params: &BoundParams,
    cfg: &ModelConfig,
    enc: &EncoderOutput,
    dec_input: &[Vec<u32>],
    opts: &mut ForwardOptions<'_>,
) -> Result<Logits> {
    Ctx { g, p: params, cfg, opts }.decode(enc, dec_input)
}

/// Next-token logits `[batch, tgt_len, vocab]` for teacher-forced decoder input.
pub fn forward_step<T: Real>(
    g: &mut Graph<T>,
    params: &BoundParams,
    cfg: &ModelConfig,
    encoder_input: EncoderBatch<'_>,
    decoder_input: &[Vec<u32>],
    opts: &mut ForwardOptions<'_>,
) -> Result<Logits> {
    if encoder_input.len() != decoder_input.len() {
        return Err(Error::Shape {
            op: "forward_step",
            lhs: vec![encoder_input.len()],
            rhs: vec![decoder_input.len()],
        });
    }
    let enc = run_encoder(g, params, cfg, encoder_input, opts)?;
    run_decoder(g, params, cfg, &enc, decoder_input, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;
    use rand::{Rng, SeedableRng};

    fn features(frames: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..frames * 80).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
        FeatureMatrix::new(data, 80, 0.01, "u").unwrap()
    }

    fn run_asr(
        params: &ModelParameters<f64>,
        feats: &[&FeatureMatrix],
        dec: &[Vec<u32>],
    ) -> (Vec<usize>, Vec<f64>) {
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, params, false);
        let logits = forward_step(
            &mut g,
            &bound,
            &params.config,
            EncoderBatch::Features(feats),
            dec,
            &mut ForwardOptions::inference(),
        )
        .unwrap();
        let v = g.value(logits.var);
        (v.shape().to_vec(), v.data().to_vec())
    }

    #[test]
    fn asr_output_shape_and_softmax() {
        let cfg = ModelConfig::toy_asr(30);
        let params = build_model::<f64>(&cfg, 3).unwrap();
        let (a, b) = (features(100, 1), features(77, 2));
        let dec = vec![vec![5, 9, 10, 11], vec![4, 12]];
        let (shape, data) = run_asr(&params, &[&a, &b], &dec);
        assert_eq!(shape, vec![2, 4, 30]);
        assert!(data.iter().all(|v| v.is_finite()));
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(shape, data).unwrap());
        let sm = g.softmax(x, 2).unwrap();
        for row in g.value(sm).data().chunks(30) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn decoder_is_causal() {
        let cfg = ModelConfig::toy_asr(30);
        let params = build_model::<f64>(&cfg, 4).unwrap();
        let f = features(60, 3);
        let base = vec![5u32, 10, 11, 12, 13];
        let (_, reference) = run_asr(&params, &[&f], std::slice::from_ref(&base));
        for j in 1..base.len() {
            let mut pert = base.clone();
            pert[j] = 20;
            let (_, out) = run_asr(&params, &[&f], &[pert]);
            for pos in 0..j {
                assert_eq!(&out[pos * 30..(pos + 1) * 30], &reference[pos * 30..(pos + 1) * 30], "j={j} pos={pos}");
            }
            assert_ne!(&out[j * 30..(j + 1) * 30], &reference[j * 30..(j + 1) * 30]);
        }
    }

    #[test]
    fn padding_is_invisible() {
        let cfg = ModelConfig::toy_asr(30);
        let params = build_model::<f64>(&cfg, 5).unwrap();
        let short = features(50, 4);
        let long = features(90, 5);
        let dec_short = vec![6u32, 10, 11];
        let (_, alone) = run_asr(&params, &[&short], std::slice::from_ref(&dec_short));
        let (shape, batched) = run_asr(&params, &[&short, &long], &[dec_short.clone(), vec![6, 7, 8, 9, 10]]);
        assert_eq!(shape, vec![2, 5, 30]);
        for pos in 0..3 {
            for v in 0..30 {
                let a = alone[pos * 30 + v];
                let b = batched[pos * 30 + v];
                assert!((a - b).abs() < 1e-9, "pos {pos}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn mt_forward_and_tag_mismatch() {
        let cfg = ModelConfig::toy_mt(25);
        let params = build_model::<f64>(&cfg, 6).unwrap();
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &params, false);
        let src: Vec<&[u32]> = vec![&[8, 9, 10], &[11]];
        let logits = forward_step(
            &mut g,
            &bound,
            &cfg,
            EncoderBatch::Tokens(&src),
            &[vec![1, 8], vec![1, 9, 10]],
            &mut ForwardOptions::inference(),
        )
        .unwrap();
        assert_eq!(g.shape(logits.var), &[2, 3, 25]);
        let f = features(40, 1);
        let err = forward_step(
            &mut g,
            &bound,
            &cfg,
            EncoderBatch::Features(&[&f]),
            &[vec![1]],
            &mut ForwardOptions::inference(),
        );
        assert!(matches!(err, Err(Error::ModelMismatch(_))));
        let err = forward_step(
            &mut g,
            &bound,
            &cfg,
            EncoderBatch::Tokens(&src),
            &[vec![1]],
            &mut ForwardOptions::inference(),
        );
        assert!(err.is_err());
    }
}
