use std::collections::HashMap;

use rand::Rng;

use super::kernels::{dot, gemm_nn, gemm_nt, gemm_tn, permute};
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        s: T,
    },
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        cols: Vec<T>,
        geom: ConvGeom,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Relu {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<Option<usize>>,
        smoothing: T,
        scale: T,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    Dropout {
        x: Var,
        keep: Vec<T>,
    },
    Sum {
        x: Var,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    t_in: usize,
    c_out: usize,
    t_out: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of recorded operations. Single writer; build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to the graph's parameters.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Output length of a 1-d convolution.
pub fn conv_out_len(t: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = t + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `a[..., m, k] · b[k, n]` or `a[..., m, k] · b[..., k, n]` with equal leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead_a = &sa[..sa.len() - 2];
        let shared_rhs = sb.len() == 2;
        if k != kb || (!shared_rhs && lead_a != &sb[..sb.len() - 2]) {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let batch = numel(lead_a);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            if shared_rhs {
                // fold the batch into the row dimension
                gemm_nn(ad, bd, &mut out, batch * m, k, n);
            } else {
                for i in 0..batch {
                    gemm_nn(
                        &ad[i * m * k..(i + 1) * m * k],
                        &bd[i * k * n..(i + 1) * k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            rg,
        ))
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    /// Elementwise sum; `b` may match the trailing dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        let av = self.value(a);
        let bd = self.value(b).data();
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(bd.len().max(1)) {
            for (x, y) in chunk.iter_mut().zip(bd) {
                *x += *y;
            }
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Add { a, b }, rg))
    }

    /// Elementwise product; `b` may match the trailing dimensions of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("mul", a, b)?;
        let av = self.value(a);
        let bd = self.value(b).data();
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(bd.len().max(1)) {
            for (x, y) in chunk.iter_mut().zip(bd) {
                *x *= *y;
            }
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * s).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, Op::Scale { a, s }, rg)
    }

    /// `x[B, C_in, T] ⊛ w[C_out, C_in, K] (+ bias[C_out]) → [B, C_out, T_out]`
    /// with `T_out = floor((T + 2·pad − K) / stride) + 1`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(shape_err("conv1d", &sx, &sw));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(shape_err("conv1d bias", self.shape(b), &[sw[0]]));
            }
        }
        let (batch, c_in, t_in) = (sx[0], sx[1], sx[2]);
        let (c_out, kernel) = (sw[0], sw[2]);
        let t_out = conv_out_len(t_in, kernel, stride, pad).ok_or_else(|| Error::Op {
            op: "conv1d",
            msg: format!("input length {t_in} too short for kernel {kernel} with padding {pad}"),
        })?;
        let geom = ConvGeom {
            batch,
            c_in,
            t_in,
            c_out,
            t_out,
            kernel,
            stride,
            pad,
        };
        let ck = c_in * kernel;
        let xd = self.value(x).data();
        let mut cols = vec![T::zero(); batch * t_out * ck];
        for b in 0..batch {
            for t in 0..t_out {
                let row = &mut cols[(b * t_out + t) * ck..(b * t_out + t + 1) * ck];
                for c in 0..c_in {
                    for j in 0..kernel {
                        let pos = (t * stride + j) as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < t_in {
                            row[c * kernel + j] = xd[(b * c_in + c) * t_in + pos as usize];
                        }
                    }
                }
            }
        }
        let wd = self.value(w).data();
        let mut out = vec![T::zero(); batch * c_out * t_out];
        for b in 0..batch {
            gemm_nt(
                wd,
                &cols[b * t_out * ck..(b + 1) * t_out * ck],
                &mut out[b * c_out * t_out..(b + 1) * c_out * t_out],
                c_out,
                ck,
                t_out,
            );
        }
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for b in 0..batch {
                for o in 0..c_out {
                    let base = (b * c_out + o) * t_out;
                    for v in &mut out[base..base + t_out] {
                        *v += bd[o];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor {
                shape: vec![batch, c_out, t_out],
                data: out,
            },
            Op::Conv1d {
                x,
                w,
                bias,
                cols,
                geom,
            },
            rg,
        ))
    }

    /// Rows of `table[V, d]` selected by `ids`, shape `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(shape_err("embedding", &st, &[ids.len()]));
        }
        let (vocab, d) = (st[0], st[1]);
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Op {
                    op: "embedding",
                    msg: format!("id {id} out of range for table of {vocab} rows"),
                });
            }
            data.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), d],
                data,
            },
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Normalises the last dimension to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let d = *shape.last().ok_or_else(|| shape_err("layer_norm", &shape, &[]))?;
        let eps = T::from_f64_lossy(eps);
        let dn = T::from_usize(d).unwrap();
        let rows = xv.numel() / d.max(1);
        let mut data = xv.data().to_vec();
        let mut rstd = Vec::with_capacity(rows);
        for row in data.chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::LayerNorm { x, rstd }, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Op {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let mut data = xv.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(data[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (data[base + j * inner] - max).exp();
                    data[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    data[base + j * inner] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor { shape, data },
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(T::zero())).collect();
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, Op::Relu { x }, rg)
    }

    /// Label-smoothed cross-entropy over the last dimension of `logits`.
    ///
    /// Per row: `−(1−ε)·log p[y] − (ε/V)·Σ_v log p[v]`. Rows whose target is
    /// `None` are ignored; `Mean` divides by the number of kept rows.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        smoothing: f64,
        reduction: Reduction,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let shape = lv.shape().to_vec();
        let vocab = *shape.last().ok_or_else(|| shape_err("cross_entropy", &shape, &[]))?;
        let rows = lv.numel() / vocab.max(1);
        if rows != targets.len() {
            return Err(shape_err("cross_entropy", &shape, &[targets.len()]));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::Op {
                op: "cross_entropy",
                msg: format!("target {bad} out of range for {vocab} classes"),
            });
        }
        let eps = T::from_f64_lossy(smoothing);
        let vn = T::from_usize(vocab).unwrap();
        let mut probs = vec![T::zero(); lv.numel()];
        let mut total = T::zero();
        let mut kept = 0usize;
        for (r, target) in targets.iter().enumerate() {
            let row = &lv.data()[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            let prow = &mut probs[r * vocab..(r + 1) * vocab];
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            if let Some(t) = *target {
                let sum_logp = row.iter().map(|&v| v - lse).sum::<T>();
                total += -(T::one() - eps) * (row[t] - lse) - eps / vn * sum_logp;
                kept += 1;
            }
        }
        let scale = match reduction {
            Reduction::Sum => T::one(),
            Reduction::Mean if kept > 0 => T::one() / T::from_usize(kept).unwrap(),
            Reduction::Mean => T::zero(),
        };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total * scale),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                smoothing: eps,
                scale,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if numel(shape) != xv.numel() {
            return Err(shape_err("reshape", xv.shape(), shape));
        }
        let data = xv.data().to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Reshape { x },
            rg,
        ))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
        {
            return Err(shape_err("permute", xv.shape(), axes));
        }
        let (data, shape) = permute(xv.data(), xv.shape(), axes);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor { shape, data },
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        if a >= rank || b >= rank {
            return Err(shape_err("transpose", self.shape(x), &[a, b]));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(a, b);
        self.permute(x, &axes)
    }

    /// Replaces entries where `mask` is true by `value`. The mask covers the
    /// trailing dimensions of `x` and repeats over the leading ones.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: T) -> Result<Var> {
        let xv = self.value(x);
        if mask.is_empty() || !xv.numel().is_multiple_of(mask.len()) {
            return Err(shape_err("masked_fill", xv.shape(), &[mask.len()]));
        }
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(mask.len()) {
            for (v, &m) in chunk.iter_mut().zip(mask) {
                if m {
                    *v = value;
                }
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor { shape, data },
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep_scale = T::from_f64_lossy(1.0 / (1.0 - p));
        let xv = self.value(x);
        let keep: Vec<T> = (0..xv.numel())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = xv.data().iter().zip(&keep).map(|(&v, &k)| v * k).collect();
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, Op::Dropout { x, keep }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Consumes the recorded forward pass and back-propagates from a scalar
    /// `loss`. Every parameter leaf gets an entry (zeros when unreachable).
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::Op {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", loss_node.value.shape()),
            });
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
        }

        let mut out = HashMap::new();
        for (i, node) in nodes.into_iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let data = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                out.insert(
                    Var(i),
                    Tensor {
                        shape: node.value.shape,
                        data,
                    },
                );
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, f: impl FnOnce(&mut [T])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
    f(slot);
}

fn backprop_node<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_rhs,
        } => {
            let (ad, bd) = (val(a), val(b));
            accumulate(grads, nodes, a, |ga| {
                if shared_rhs {
                    gemm_nt(g, bd, ga, batch * m, n, k);
                } else {
                    for i in 0..batch {
                        gemm_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
            });
            accumulate(grads, nodes, b, |gb| {
                if shared_rhs {
                    gemm_tn(ad, g, gb, batch * m, k, n);
                } else {
                    for i in 0..batch {
                        gemm_tn(
                            &ad[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            });
        }
        &Op::Add { a, b } => {
            accumulate(grads, nodes, a, |ga| {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += *y;
                }
            });
            accumulate(grads, nodes, b, |gb| {
                let len = gb.len();
                for chunk in g.chunks(len) {
                    for (x, y) in gb.iter_mut().zip(chunk) {
                        *x += *y;
                    }
                }
            });
        }
        &Op::Mul { a, b } => {
            let (ad, bd) = (val(a), val(b));
            let len = bd.len();
            accumulate(grads, nodes, a, |ga| {
                for (i, x) in ga.iter_mut().enumerate() {
                    *x += g[i] * bd[i % len];
                }
            });
            accumulate(grads, nodes, b, |gb| {
                for (i, (&gv, &av)) in g.iter().zip(ad).enumerate() {
                    gb[i % len] += gv * av;
                }
            });
        }
        &Op::Scale { a, s } => accumulate(grads, nodes, a, |ga| {
            for (x, y) in ga.iter_mut().zip(g) {
                *x += *y * s;
            }
        }),
        Op::Conv1d {
            x,
            w,
            bias,
            cols,
            geom,
        } => {
            let ConvGeom {
                batch,
                c_in,
                t_in,
                c_out,
                t_out,
                kernel,
                stride,
                pad,
            } = *geom;
            let ck = c_in * kernel;
            accumulate(grads, nodes, *w, |gw| {
                for b in 0..batch {
                    gemm_nn(
                        &g[b * c_out * t_out..(b + 1) * c_out * t_out],
                        &cols[b * t_out * ck..(b + 1) * t_out * ck],
                        gw,
                        c_out,
                        t_out,
                        ck,
                    );
                }
            });
            if let Some(bv) = *bias {
                accumulate(grads, nodes, bv, |gb| {
                    for b in 0..batch {
                        for (o, gbo) in gb.iter_mut().enumerate() {
                            let base = (b * c_out + o) * t_out;
                            *gbo += g[base..base + t_out].iter().copied().sum::<T>();
                        }
                    }
                });
            }
            let wd = val(*w);
            accumulate(grads, nodes, *x, |gx| {
                let mut dcols = vec![T::zero(); t_out * ck];
                for b in 0..batch {
                    dcols.iter_mut().for_each(|v| *v = T::zero());
                    gemm_tn(
                        &g[b * c_out * t_out..(b + 1) * c_out * t_out],
                        wd,
                        &mut dcols,
                        c_out,
                        t_out,
                        ck,
                    );
                    for t in 0..t_out {
                        for c in 0..c_in {
                            for j in 0..kernel {
                                let pos = (t * stride + j) as isize - pad as isize;
                                if pos >= 0 && (pos as usize) < t_in {
                                    gx[(b * c_in + c) * t_in + pos as usize] += dcols[t * ck + c * kernel + j];
                                }
                            }
                        }
                    }
                }
            });
        }
        Op::Embedding { table, ids } => {
            let d = nodes[table.0].value.shape()[1];
            accumulate(grads, nodes, *table, |gt| {
                for (r, &id) in ids.iter().enumerate() {
                    for (x, y) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *x += *y;
                    }
                }
            });
        }
        Op::LayerNorm { x, rstd } => {
            let y = node.value.data();
            let d = *node.value.shape().last().unwrap();
            let dn = T::from_usize(d).unwrap();
            accumulate(grads, nodes, *x, |gx| {
                for (r, &rs) in rstd.iter().enumerate() {
                    let gy = &g[r * d..(r + 1) * d];
                    let yr = &y[r * d..(r + 1) * d];
                    let mean_g = gy.iter().copied().sum::<T>() / dn;
                    let mean_gy = dot(gy, yr) / dn;
                    for i in 0..d {
                        gx[r * d + i] += rs * (gy[i] - mean_g - yr[i] * mean_gy);
                    }
                }
            });
        }
        &Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            let y = node.value.data();
            accumulate(grads, nodes, x, |gx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut s = T::zero();
                        for j in 0..len {
                            s += g[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            gx[p] += y[p] * (g[p] - s);
                        }
                    }
                }
            });
        }
        &Op::Relu { x } => {
            let xd = val(x);
            accumulate(grads, nodes, x, |gx| {
                for i in 0..gx.len() {
                    if xd[i] > T::zero() {
                        gx[i] += g[i];
                    }
                }
            });
        }
        Op::CrossEntropy {
            logits,
            probs,
            targets,
            smoothing,
            scale,
        } => {
            let vocab = *nodes[logits.0].value.shape().last().unwrap();
            let vn = T::from_usize(vocab).unwrap();
            let gs = g[0] * *scale;
            accumulate(grads, nodes, *logits, |gl| {
                for (r, target) in targets.iter().enumerate() {
                    let Some(t) = *target else { continue };
                    let prow = &probs[r * vocab..(r + 1) * vocab];
                    let grow = &mut gl[r * vocab..(r + 1) * vocab];
                    let uniform = *smoothing / vn;
                    for (gv, &p) in grow.iter_mut().zip(prow) {
                        *gv += gs * (p - uniform);
                    }
                    grow[t] -= gs * (T::one() - *smoothing);
                }
            });
        }
        &Op::Reshape { x } => accumulate(grads, nodes, x, |gx| {
            for (a, b) in gx.iter_mut().zip(g) {
                *a += *b;
            }
        }),
        Op::Permute { x, axes } => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let (back, _) = permute(g, node.value.shape(), &inverse);
            accumulate(grads, nodes, *x, |gx| {
                for (a, b) in gx.iter_mut().zip(&back) {
                    *a += *b;
                }
            });
        }
        Op::MaskedFill { x, mask } => accumulate(grads, nodes, *x, |gx| {
            let len = mask.len();
            for (i, v) in gx.iter_mut().enumerate() {
                if !mask[i % len] {
                    *v += g[i];
                }
            }
        }),
        Op::Dropout { x, keep } => accumulate(grads, nodes, *x, |gx| {
            for ((v, &k), &gv) in gx.iter_mut().zip(keep).zip(g) {
                *v += gv * k;
            }
        }),
        &Op::Sum { x } => accumulate(grads, nodes, x, |gx| {
            for v in gx.iter_mut() {
                *v += g[0];
            }
        }),
    }
}
