//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation in execution order together with the
//! inputs its backward pass needs. Node ids only ever reference earlier
//! nodes, so walking the record back to front visits the graph in reverse
//! topological order exactly once. One graph runs on one thread; independent
//! graphs are free to run concurrently.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

struct Node {
    out: Tensor,
    op: Op,
    needs_grad: bool,
}

enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Scale(ValueId, f64),
    Silu(ValueId),
    Relu(ValueId),
    Sum(ValueId),
    Mean(ValueId),
    Mse(ValueId, ValueId),
    ConcatChannels(ValueId, ValueId),
    Upsample2x(ValueId),
    Dropout {
        x: ValueId,
        mask: Arc<Vec<f64>>,
    },
    AddChannelBias {
        x: ValueId,
        bias: ValueId,
    },
    Conv3d {
        x: ValueId,
        w: ValueId,
        stride: usize,
        padding: usize,
    },
    Linear {
        x: ValueId,
        w: ValueId,
        b: ValueId,
    },
    LayerNorm {
        x: ValueId,
        gain: ValueId,
        shift: ValueId,
        xhat: Arc<Vec<f64>>,
        inv_std: Arc<Vec<f64>>,
    },
    ChannelNorm {
        x: ValueId,
        gain: ValueId,
        shift: ValueId,
        xhat: Arc<Vec<f64>>,
        inv_std: Arc<Vec<f64>>,
    },
    Attention {
        q: ValueId,
        k: ValueId,
        v: ValueId,
        probs: Arc<Vec<f64>>,
    },
    BroadcastToBatch {
        x: ValueId,
        batch: usize,
    },
    ProjChannelsToSeq {
        x: ValueId,
        w: ValueId,
    },
    ProjSeqToChannels {
        x: ValueId,
        w: ValueId,
        spatial: [usize; 3],
    },
    GatherRows {
        table: ValueId,
        ids: Arc<Vec<usize>>,
    },
    CrossEntropy {
        logits: ValueId,
        targets: Arc<Vec<usize>>,
        log_probs: Arc<Vec<f64>>,
    },
    MeanSpatial(ValueId),
    Reshape(ValueId),
}

/// Gradients keyed by tape node. Leaves that did not participate in the loss
/// report exact zeros.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ValueId, tape: &Tape) -> Tensor {
        let shape = tape.value(id).shape().to_vec();
        match &self.grads[id.0] {
            Some(g) => Tensor::new(&shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn has(&self, id: ValueId) -> bool {
        self.grads[id.0].is_some()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].out
    }

    /// Record a constant input. No gradient is tracked through it.
    pub fn leaf(&mut self, t: Tensor) -> ValueId {
        self.push(t, Op::Leaf, false)
    }

    /// Record a trainable input. `backward` reports its gradient.
    pub fn param(&mut self, t: Tensor) -> ValueId {
        self.push(t, Op::Leaf, true)
    }

    fn push(&mut self, out: Tensor, op: Op, needs_grad: bool) -> ValueId {
        debug_assert!(
            out.all_finite(),
            "non-finite values produced by node {}",
            self.nodes.len()
        );
        self.nodes.push(Node {
            out,
            op,
            needs_grad,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = self.value(a).sub(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> ValueId {
        let out = self.value(a).scale(c);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn silu(&mut self, a: ValueId) -> ValueId {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.needs(a);
        self.push(out, Op::Silu(a), ng)
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sum(&mut self, a: ValueId) -> ValueId {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: ValueId) -> ValueId {
        let out = Tensor::scalar(self.value(a).mean());
        let ng = self.needs(a);
        self.push(out, Op::Mean(a), ng)
    }

    /// Scalar mean squared error between same-shape tensors.
    pub fn mse(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = Tensor::scalar(self.value(a).mse(self.value(b))?);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mse(a, b), ng))
    }

    pub fn reshape(&mut self, a: ValueId, shape: &[usize]) -> Result<ValueId> {
        let out = self.value(a).reshape(shape)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    // ---- structural ----

    /// Concatenate two 5-axis tensors along the channel axis.
    pub fn concat_channels(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ba, ca, da, ha, wa) = self.value(a).dims5()?;
        let (bb, cb, db, hb, wb) = self.value(b).dims5()?;
        if (ba, da, ha, wa) != (bb, db, hb, wb) {
            return Err(Error::shape(format!(
                "concat_channels: non-channel axes differ ({:?} vs {:?})",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let sp = da * ha * wa;
        let mut data = Vec::with_capacity(ba * (ca + cb) * sp);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for bi in 0..ba {
            data.extend_from_slice(&av[bi * ca * sp..(bi + 1) * ca * sp]);
            data.extend_from_slice(&bv[bi * cb * sp..(bi + 1) * cb * sp]);
        }
        let out = Tensor::new(&[ba, ca + cb, da, ha, wa], data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::ConcatChannels(a, b), ng))
    }

    /// Nearest-neighbour doubling of the three spatial axes.
    pub fn upsample2x(&mut self, a: ValueId) -> Result<ValueId> {
        let (b, c, d, h, w) = self.value(a).dims5()?;
        let src = self.value(a).data();
        let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
        let mut data = vec![0.0; b * c * d2 * h2 * w2];
        for bc in 0..b * c {
            let sbase = bc * d * h * w;
            let obase = bc * d2 * h2 * w2;
            for z in 0..d2 {
                for y in 0..h2 {
                    let srow = sbase + ((z / 2) * h + y / 2) * w;
                    let orow = obase + (z * h2 + y) * w2;
                    for x in 0..w2 {
                        data[orow + x] = src[srow + x / 2];
                    }
                }
            }
        }
        let out = Tensor::new(&[b, c, d2, h2, w2], data)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Upsample2x(a), ng))
    }

    /// Inverted dropout: zero with probability `rate`, survivors scaled by
    /// 1/(1-rate). Identity when not training.
    pub fn dropout(
        &mut self,
        a: ValueId,
        rate: f64,
        rng: &mut CounterRng,
        training: bool,
    ) -> Result<ValueId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} not in [0,1)")));
        }
        if !training || rate == 0.0 {
            let out = self.value(a).clone();
            let ng = self.needs(a);
            return Ok(self.push(out, Op::Reshape(a), ng)); // identity pass-through
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let n = self.value(a).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep_scale })
            .collect();
        let shape = self.value(a).shape().to_vec();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| x * m)
            .collect();
        let out = Tensor::new(&shape, data)?;
        let ng = self.needs(a);
        Ok(self.push(
            out,
            Op::Dropout {
                x: a,
                mask: Arc::new(mask),
            },
            ng,
        ))
    }

    /// Add a per-channel bias `[C]` to a feature map `[B,C,D,H,W]`.
    pub fn add_channel_bias(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let (b, c, d, h, w) = self.value(x).dims5()?;
        let bshape = self.value(bias).shape();
        if bshape != [c] {
            return Err(Error::shape(format!(
                "add_channel_bias: bias {bshape:?} vs {c} channels"
            )));
        }
        let sp = d * h * w;
        let xs = self.value(x).data();
        let bs = self.value(bias).data();
        let mut data = vec![0.0; xs.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * sp;
                let bv = bs[ci];
                for i in 0..sp {
                    data[base + i] = xs[base + i] + bv;
                }
            }
        }
        let out = Tensor::new(&[b, c, d, h, w], data)?;
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddChannelBias { x, bias }, ng))
    }

    // ---- dense/conv ----

    /// 3D cross-correlation: input [B,Cin,D,H,W], weight [Cout,Cin,k,k,k].
    pub fn conv3d(
        &mut self,
        x: ValueId,
        w: ValueId,
        stride: usize,
        padding: usize,
    ) -> Result<ValueId> {
        let dims = self.conv_dims(x, w, stride, padding)?;
        let out_data = kernels::conv3d_forward(self.value(x).data(), self.value(w).data(), &dims);
        let out = Tensor::new(
            &[dims.batch, dims.c_out, dims.out_d, dims.out_h, dims.out_w],
            out_data,
        )?;
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(
            out,
            Op::Conv3d {
                x,
                w,
                stride,
                padding,
            },
            ng,
        ))
    }

    fn conv_dims(&self, x: ValueId, w: ValueId, stride: usize, padding: usize) -> Result<ConvDims> {
        let (b, cin, d, h, wd) = self.value(x).dims5()?;
        let (cout, cin_w, k0, k1, k2) = self.value(w).dims5()?;
        if k0 != k1 || k1 != k2 {
            return Err(Error::shape(format!(
                "conv3d: kernel must be cubic, got {k0}x{k1}x{k2}"
            )));
        }
        if k0 % 2 == 0 {
            return Err(Error::invalid(format!("conv3d: kernel extent {k0} must be odd")));
        }
        if cin_w != cin {
            return Err(Error::shape(format!(
                "conv3d: input channel axis is {cin}, weight expects {cin_w}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv3d: stride must be >= 1"));
        }
        let out_d = kernels::conv_out_extent(d, k0, stride, padding)
            .ok_or_else(|| Error::shape(format!("conv3d: depth axis {d} too small for kernel {k0}")))?;
        let out_h = kernels::conv_out_extent(h, k0, stride, padding)
            .ok_or_else(|| Error::shape(format!("conv3d: height axis {h} too small for kernel {k0}")))?;
        let out_w = kernels::conv_out_extent(wd, k0, stride, padding)
            .ok_or_else(|| Error::shape(format!("conv3d: width axis {wd} too small for kernel {k0}")))?;
        Ok(ConvDims {
            batch: b,
            c_in: cin,
            c_out: cout,
            k: k0,
            stride,
            padding,
            in_d: d,
            in_h: h,
            in_w: wd,
            out_d,
            out_h,
            out_w,
        })
    }

    /// Affine map over the trailing axis: x [..., F], w [F, G], b [G].
    pub fn linear(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let xshape = self.value(x).shape().to_vec();
        let (f, g) = self.value(w).dims2()?;
        let last = *xshape.last().unwrap();
        if last != f {
            return Err(Error::shape(format!(
                "linear: trailing axis {last} vs weight rows {f}"
            )));
        }
        if self.value(b).shape() != [g] {
            return Err(Error::shape(format!(
                "linear: bias {:?} vs {g} outputs",
                self.value(b).shape()
            )));
        }
        let rows = self.value(x).numel() / f;
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bs = self.value(b).data();
        let mut data = vec![0.0; rows * g];
        for r in 0..rows {
            let xrow = &xs[r * f..(r + 1) * f];
            let orow = &mut data[r * g..(r + 1) * g];
            orow.copy_from_slice(bs);
            for (fi, &xv) in xrow.iter().enumerate() {
                let wrow = &ws[fi * g..(fi + 1) * g];
                for (o, wv) in orow.iter_mut().zip(wrow.iter()) {
                    *o += xv * *wv;
                }
            }
        }
        let mut oshape = xshape;
        *oshape.last_mut().unwrap() = g;
        let out = Tensor::new(&oshape, data)?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    /// Normalize over the trailing axis, then apply gain and shift.
    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gain: ValueId,
        shift: ValueId,
        eps: f64,
    ) -> Result<ValueId> {
        if eps <= 0.0 {
            return Err(Error::invalid(format!("layer_norm: eps {eps} must be > 0")));
        }
        let shape = self.value(x).shape().to_vec();
        let f = *shape.last().unwrap();
        if self.value(gain).shape() != [f] || self.value(shift).shape() != [f] {
            return Err(Error::shape(format!(
                "layer_norm: gain/shift must be [{f}]"
            )));
        }
        let rows = self.value(x).numel() / f;
        let xs = self.value(x).data();
        let gs = self.value(gain).data();
        let ss = self.value(shift).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * f..(r + 1) * f];
            let mean = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for i in 0..f {
                let xh = (row[i] - mean) * istd;
                xhat[r * f + i] = xh;
                data[r * f + i] = xh * gs[i] + ss[i];
            }
        }
        let out = Tensor::new(&shape, data)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(shift);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat: Arc::new(xhat),
                inv_std: Arc::new(inv_std),
            },
            ng,
        ))
    }

    /// Normalize a feature map over its channel axis per spatial position.
    pub fn channel_norm(
        &mut self,
        x: ValueId,
        gain: ValueId,
        shift: ValueId,
        eps: f64,
    ) -> Result<ValueId> {
        if eps <= 0.0 {
            return Err(Error::invalid(format!("channel_norm: eps {eps} must be > 0")));
        }
        let (b, c, d, h, w) = self.value(x).dims5()?;
        if self.value(gain).shape() != [c] || self.value(shift).shape() != [c] {
            return Err(Error::shape(format!(
                "channel_norm: gain/shift must be [{c}]"
            )));
        }
        let sp = d * h * w;
        let xs = self.value(x).data();
        let gs = self.value(gain).data();
        let ss = self.value(shift).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; b * sp];
        let mut data = vec![0.0; xs.len()];
        let cf = c as f64;
        for bi in 0..b {
            let base = bi * c * sp;
            let mut mean = vec![0.0; sp];
            let mut m2 = vec![0.0; sp];
            for ci in 0..c {
                let row = &xs[base + ci * sp..base + (ci + 1) * sp];
                for i in 0..sp {
                    mean[i] += row[i];
                    m2[i] += row[i] * row[i];
                }
            }
            for i in 0..sp {
                mean[i] /= cf;
                let var = (m2[i] / cf - mean[i] * mean[i]).max(0.0);
                inv_std[bi * sp + i] = 1.0 / (var + eps).sqrt();
            }
            for ci in 0..c {
                let off = base + ci * sp;
                for i in 0..sp {
                    let xh = (xs[off + i] - mean[i]) * inv_std[bi * sp + i];
                    xhat[off + i] = xh;
                    data[off + i] = xh * gs[ci] + ss[ci];
                }
            }
        }
        let out = Tensor::new(&[b, c, d, h, w], data)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(shift);
        Ok(self.push(
            out,
            Op::ChannelNorm {
                x,
                gain,
                shift,
                xhat: Arc::new(xhat),
                inv_std: Arc::new(inv_std),
            },
            ng,
        ))
    }

    /// Scaled dot-product attention, single head.
    /// q [B,Nq,E], k [B,Nk,E], v [B,Nk,E] -> [B,Nq,E].
    pub fn attention(&mut self, q: ValueId, k: ValueId, v: ValueId) -> Result<ValueId> {
        let (b, nq, e) = self.value(q).dims3()?;
        let (bk, nk, ek) = self.value(k).dims3()?;
        let (bv, nv, ev) = self.value(v).dims3()?;
        if bk != b || bv != b {
            return Err(Error::shape("attention: batch axes differ"));
        }
        if ek != e || ev != e {
            return Err(Error::shape(format!(
                "attention: embed axes differ (q {e}, k {ek}, v {ev})"
            )));
        }
        if nv != nk {
            return Err(Error::shape(format!(
                "attention: key rows {nk} vs value rows {nv}"
            )));
        }
        let scale = 1.0 / (e as f64).sqrt();
        let qs = self.value(q).data();
        let ks = self.value(k).data();
        let vs = self.value(v).data();
        let mut probs = vec![0.0; b * nq * nk];
        let mut data = vec![0.0; b * nq * e];
        for bi in 0..b {
            let qb = &qs[bi * nq * e..(bi + 1) * nq * e];
            let kb = &ks[bi * nk * e..(bi + 1) * nk * e];
            let vb = &vs[bi * nk * e..(bi + 1) * nk * e];
            for i in 0..nq {
                let qrow = &qb[i * e..(i + 1) * e];
                let prow = &mut probs[(bi * nq + i) * nk..(bi * nq + i + 1) * nk];
                let mut max = f64::NEG_INFINITY;
                for j in 0..nk {
                    let krow = &kb[j * e..(j + 1) * e];
                    let mut dot = 0.0;
                    for t in 0..e {
                        dot += qrow[t] * krow[t];
                    }
                    prow[j] = dot * scale;
                    max = max.max(prow[j]);
                }
                let mut denom = 0.0;
                for p in prow.iter_mut() {
                    *p = (*p - max).exp();
                    denom += *p;
                }
                for p in prow.iter_mut() {
                    *p /= denom;
                }
                let orow = &mut data[(bi * nq + i) * e..(bi * nq + i + 1) * e];
                for j in 0..nk {
                    let pv = prow[j];
                    let vrow = &vb[j * e..(j + 1) * e];
                    for t in 0..e {
                        orow[t] += pv * vrow[t];
                    }
                }
            }
        }
        let out = Tensor::new(&[b, nq, e], data)?;
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                probs: Arc::new(probs),
            },
            ng,
        ))
    }

    /// Repeat a [N,E] tensor across a new batch axis -> [batch,N,E].
    pub fn broadcast_to_batch(&mut self, x: ValueId, batch: usize) -> Result<ValueId> {
        let (n, e) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(batch * n * e);
        for _ in 0..batch {
            data.extend_from_slice(src);
        }
        let out = Tensor::new(&[batch, n, e], data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::BroadcastToBatch { x, batch }, ng))
    }

    /// Project a feature map's channel axis into a token sequence:
    /// x [B,C,D,H,W], w [C,E] -> [B, D*H*W, E].
    pub fn proj_channels_to_seq(&mut self, x: ValueId, w: ValueId) -> Result<ValueId> {
        let (b, c, d, h, wd) = self.value(x).dims5()?;
        let (cw, e) = self.value(w).dims2()?;
        if cw != c {
            return Err(Error::shape(format!(
                "proj_channels_to_seq: {c} channels vs weight rows {cw}"
            )));
        }
        let n = d * h * wd;
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut data = vec![0.0; b * n * e];
        for bi in 0..b {
            let ob = &mut data[bi * n * e..(bi + 1) * n * e];
            for ci in 0..c {
                let xrow = &xs[(bi * c + ci) * n..(bi * c + ci + 1) * n];
                let wrow = &ws[ci * e..(ci + 1) * e];
                for i in 0..n {
                    let xv = xrow[i];
                    let orow = &mut ob[i * e..(i + 1) * e];
                    for t in 0..e {
                        orow[t] += xv * wrow[t];
                    }
                }
            }
        }
        let out = Tensor::new(&[b, n, e], data)?;
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(out, Op::ProjChannelsToSeq { x, w }, ng))
    }

    /// Project a token sequence back onto channels:
    /// x [B,N,E], w [E,C] -> [B,C,D,H,W] with N == D*H*W.
    pub fn proj_seq_to_channels(
        &mut self,
        x: ValueId,
        w: ValueId,
        spatial: [usize; 3],
    ) -> Result<ValueId> {
        let (b, n, e) = self.value(x).dims3()?;
        let (ew, c) = self.value(w).dims2()?;
        if ew != e {
            return Err(Error::shape(format!(
                "proj_seq_to_channels: embed {e} vs weight rows {ew}"
            )));
        }
        let [d, h, wd] = spatial;
        if d * h * wd != n {
            return Err(Error::shape(format!(
                "proj_seq_to_channels: spatial {spatial:?} product != {n} rows"
            )));
        }
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        // Transposed copy of w for contiguous dot products.
        let mut wt = vec![0.0; c * e];
        for ei in 0..e {
            for ci in 0..c {
                wt[ci * e + ei] = ws[ei * c + ci];
            }
        }
        let mut data = vec![0.0; b * c * n];
        for bi in 0..b {
            for i in 0..n {
                let xrow = &xs[(bi * n + i) * e..(bi * n + i + 1) * e];
                for ci in 0..c {
                    let wrow = &wt[ci * e..(ci + 1) * e];
                    let mut acc = 0.0;
                    for t in 0..e {
                        acc += xrow[t] * wrow[t];
                    }
                    data[(bi * c + ci) * n + i] = acc;
                }
            }
        }
        let out = Tensor::new(&[b, c, d, h, wd], data)?;
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(out, Op::ProjSeqToChannels { x, w, spatial }, ng))
    }

    /// Row lookup: table [V,E], ids -> [len(ids), E].
    pub fn gather_rows(&mut self, table: ValueId, ids: &[usize]) -> Result<ValueId> {
        let (v, e) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(Error::invalid("gather_rows: empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!(
                "gather_rows: id {bad} outside table of {v} rows"
            )));
        }
        let ts = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            data.extend_from_slice(&ts[i * e..(i + 1) * e]);
        }
        let out = Tensor::new(&[ids.len(), e], data)?;
        let ng = self.needs(table);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: Arc::new(ids.to_vec()),
            },
            ng,
        ))
    }

    /// Mean cross-entropy of logits [B,K] against integer targets.
    pub fn cross_entropy(&mut self, logits: ValueId, targets: &[usize]) -> Result<ValueId> {
        let (b, k) = self.value(logits).dims2()?;
        if targets.len() != b {
            return Err(Error::shape(format!(
                "cross_entropy: {b} rows vs {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(format!(
                "cross_entropy: target {bad} outside {k} classes"
            )));
        }
        let ls = self.value(logits).data();
        let mut log_probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for bi in 0..b {
            let row = &ls[bi * k..(bi + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for i in 0..k {
                log_probs[bi * k + i] = row[i] - lse;
            }
            loss -= log_probs[bi * k + targets[bi]];
        }
        let out = Tensor::scalar(loss / b as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: Arc::new(targets.to_vec()),
                log_probs: Arc::new(log_probs),
            },
            ng,
        ))
    }

    /// Global average over the spatial axes: [B,C,D,H,W] -> [B,C].
    pub fn mean_spatial(&mut self, x: ValueId) -> Result<ValueId> {
        let (b, c, d, h, w) = self.value(x).dims5()?;
        let sp = (d * h * w) as f64;
        let xs = self.value(x).data();
        let mut data = vec![0.0; b * c];
        for bc in 0..b * c {
            let row = &xs[bc * d * h * w..(bc + 1) * d * h * w];
            data[bc] = row.iter().sum::<f64>() / sp;
        }
        let out = Tensor::new(&[b, c], data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::MeanSpatial(x), ng))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Returns per-node gradients.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got {:?}",
                lt.shape()
            )));
        }
        if !lt.item().is_finite() {
            return Err(Error::numeric(format!("backward: loss is {}", lt.item())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let go = grads[idx].take().unwrap();
            self.step_backward(idx, &go, &mut grads);
            grads[idx] = Some(go);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: ValueId, add: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.value(id).numel()]);
        }
        add(slot.as_mut().unwrap());
    }

    #[allow(clippy::too_many_lines)]
    fn step_backward(&self, idx: usize, go: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |g| {
                    for (gi, &v) in g.iter_mut().zip(go) {
                        *gi += v;
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for (gi, &v) in g.iter_mut().zip(go) {
                        *gi += v;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |g| {
                    for (gi, &v) in g.iter_mut().zip(go) {
                        *gi += v;
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for (gi, &v) in g.iter_mut().zip(go) {
                        *gi -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += go[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for i in 0..g.len() {
                        g[i] += go[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, |g| {
                    for (gi, &v) in g.iter_mut().zip(go) {
                        *gi += c * v;
                    }
                });
            }
            Op::Silu(a) => {
                let xv = self.value(*a).data();
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        let s = sigmoid(xv[i]);
                        g[i] += go[i] * (s + xv[i] * s * (1.0 - s));
                    }
                });
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            g[i] += go[i];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let v = go[0];
                self.accumulate(grads, *a, |g| {
                    for gi in g.iter_mut() {
                        *gi += v;
                    }
                });
            }
            Op::Mean(a) => {
                let v = go[0] / self.value(*a).numel() as f64;
                self.accumulate(grads, *a, |g| {
                    for gi in g.iter_mut() {
                        *gi += v;
                    }
                });
            }
            Op::Mse(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let scale = 2.0 * go[0] / av.len() as f64;
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += scale * (av[i] - bv[i]);
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for i in 0..g.len() {
                        g[i] -= scale * (av[i] - bv[i]);
                    }
                });
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, |g| {
                    for (gi, &v) in g.iter_mut().zip(go) {
                        *gi += v;
                    }
                });
            }
            Op::ConcatChannels(a, b) => {
                let (ba, ca, d, h, w) = self.value(*a).dims5().unwrap();
                let (_, cb, ..) = self.value(*b).dims5().unwrap();
                let sp = d * h * w;
                self.accumulate(grads, *a, |g| {
                    for bi in 0..ba {
                        let src = bi * (ca + cb) * sp;
                        let dst = bi * ca * sp;
                        for i in 0..ca * sp {
                            g[dst + i] += go[src + i];
                        }
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for bi in 0..ba {
                        let src = bi * (ca + cb) * sp + ca * sp;
                        let dst = bi * cb * sp;
                        for i in 0..cb * sp {
                            g[dst + i] += go[src + i];
                        }
                    }
                });
            }
            Op::Upsample2x(a) => {
                let (b, c, d, h, w) = self.value(*a).dims5().unwrap();
                let (h2, w2) = (2 * h, 2 * w);
                self.accumulate(grads, *a, |g| {
                    for bc in 0..b * c {
                        let sbase = bc * d * h * w;
                        let obase = bc * 8 * d * h * w;
                        for z in 0..2 * d {
                            for y in 0..h2 {
                                let srow = sbase + ((z / 2) * h + y / 2) * w;
                                let orow = obase + (z * h2 + y) * w2;
                                for x in 0..w2 {
                                    g[srow + x / 2] += go[orow + x];
                                }
                            }
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                let mask = Arc::clone(mask);
                self.accumulate(grads, *x, |g| {
                    for i in 0..g.len() {
                        g[i] += go[i] * mask[i];
                    }
                });
            }
            Op::AddChannelBias { x, bias } => {
                let (b, c, d, h, w) = self.value(*x).dims5().unwrap();
                let sp = d * h * w;
                self.accumulate(grads, *x, |g| {
                    for (gi, &v) in g.iter_mut().zip(go) {
                        *gi += v;
                    }
                });
                self.accumulate(grads, *bias, |g| {
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * sp;
                            let mut acc = 0.0;
                            for i in 0..sp {
                                acc += go[base + i];
                            }
                            g[ci] += acc;
                        }
                    }
                });
            }
            Op::Conv3d {
                x,
                w,
                stride,
                padding,
            } => {
                let dims = self.conv_dims(*x, *w, *stride, *padding).unwrap();
                if self.nodes[x.0].needs_grad {
                    let gi = kernels::conv3d_backward_input(go, self.value(*w).data(), &dims);
                    self.accumulate(grads, *x, |g| {
                        for i in 0..g.len() {
                            g[i] += gi[i];
                        }
                    });
                }
                if self.nodes[w.0].needs_grad {
                    let gw = kernels::conv3d_backward_weight(self.value(*x).data(), go, &dims);
                    self.accumulate(grads, *w, |g| {
                        for i in 0..g.len() {
                            g[i] += gw[i];
                        }
                    });
                }
            }
            Op::Linear { x, w, b } => {
                let (f, gdim) = self.value(*w).dims2().unwrap();
                let rows = self.value(*x).numel() / f;
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                self.accumulate(grads, *x, |g| {
                    for r in 0..rows {
                        let gout = &go[r * gdim..(r + 1) * gdim];
                        let grow = &mut g[r * f..(r + 1) * f];
                        for fi in 0..f {
                            let wrow = &ws[fi * gdim..(fi + 1) * gdim];
                            let mut acc = 0.0;
                            for t in 0..gdim {
                                acc += gout[t] * wrow[t];
                            }
                            grow[fi] += acc;
                        }
                    }
                });
                self.accumulate(grads, *w, |g| {
                    for r in 0..rows {
                        let gout = &go[r * gdim..(r + 1) * gdim];
                        let xrow = &xs[r * f..(r + 1) * f];
                        for fi in 0..f {
                            let xv = xrow[fi];
                            let grow = &mut g[fi * gdim..(fi + 1) * gdim];
                            for t in 0..gdim {
                                grow[t] += xv * gout[t];
                            }
                        }
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for r in 0..rows {
                        let gout = &go[r * gdim..(r + 1) * gdim];
                        for t in 0..gdim {
                            g[t] += gout[t];
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            } => {
                let f = *self.value(*x).shape().last().unwrap();
                let rows = self.value(*x).numel() / f;
                let gs = self.value(*gain).data();
                let xhat = Arc::clone(xhat);
                let inv_std = Arc::clone(inv_std);
                self.accumulate(grads, *x, |g| {
                    for r in 0..rows {
                        let xh = &xhat[r * f..(r + 1) * f];
                        let gout = &go[r * f..(r + 1) * f];
                        let istd = inv_std[r];
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for i in 0..f {
                            let dxh = gout[i] * gs[i];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xh[i];
                        }
                        mean_dxhat /= f as f64;
                        mean_dxhat_xhat /= f as f64;
                        let grow = &mut g[r * f..(r + 1) * f];
                        for i in 0..f {
                            let dxh = gout[i] * gs[i];
                            grow[i] += istd * (dxh - mean_dxhat - xh[i] * mean_dxhat_xhat);
                        }
                    }
                });
                self.accumulate(grads, *gain, |g| {
                    for r in 0..rows {
                        for i in 0..f {
                            g[i] += go[r * f + i] * xhat[r * f + i];
                        }
                    }
                });
                self.accumulate(grads, *shift, |g| {
                    for r in 0..rows {
                        for i in 0..f {
                            g[i] += go[r * f + i];
                        }
                    }
                });
            }
            Op::ChannelNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            } => {
                let (b, c, d, h, w) = self.value(*x).dims5().unwrap();
                let sp = d * h * w;
                let gs = self.value(*gain).data();
                let xhat = Arc::clone(xhat);
                let inv_std = Arc::clone(inv_std);
                let cf = c as f64;
                self.accumulate(grads, *x, |g| {
                    for bi in 0..b {
                        let base = bi * c * sp;
                        let mut mean_dxhat = vec![0.0; sp];
                        let mut mean_dxhat_xhat = vec![0.0; sp];
                        for ci in 0..c {
                            let off = base + ci * sp;
                            let gv = gs[ci];
                            for i in 0..sp {
                                let dxh = go[off + i] * gv;
                                mean_dxhat[i] += dxh;
                                mean_dxhat_xhat[i] += dxh * xhat[off + i];
                            }
                        }
                        for i in 0..sp {
                            mean_dxhat[i] /= cf;
                            mean_dxhat_xhat[i] /= cf;
                        }
                        for ci in 0..c {
                            let off = base + ci * sp;
                            let gv = gs[ci];
                            for i in 0..sp {
                                let dxh = go[off + i] * gv;
                                g[off + i] += inv_std[bi * sp + i]
                                    * (dxh - mean_dxhat[i] - xhat[off + i] * mean_dxhat_xhat[i]);
                            }
                        }
                    }
                });
                self.accumulate(grads, *gain, |g| {
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * sp;
                            let mut acc = 0.0;
                            for i in 0..sp {
                                acc += go[off + i] * xhat[off + i];
                            }
                            g[ci] += acc;
                        }
                    }
                });
                self.accumulate(grads, *shift, |g| {
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * sp;
                            let mut acc = 0.0;
                            for i in 0..sp {
                                acc += go[off + i];
                            }
                            g[ci] += acc;
                        }
                    }
                });
            }
            Op::Attention { q, k, v, probs } => {
                let (b, nq, e) = self.value(*q).dims3().unwrap();
                let (_, nk, _) = self.value(*k).dims3().unwrap();
                let scale = 1.0 / (e as f64).sqrt();
                let qs = self.value(*q).data();
                let ks = self.value(*k).data();
                let vs = self.value(*v).data();
                let probs = Arc::clone(probs);
                // dS = P * (dP - rowsum(dP .* P)), dP = dO V^T
                let mut ds = vec![0.0; b * nq * nk];
                for bi in 0..b {
                    for i in 0..nq {
                        let gout = &go[(bi * nq + i) * e..(bi * nq + i + 1) * e];
                        let prow = &probs[(bi * nq + i) * nk..(bi * nq + i + 1) * nk];
                        let dsrow = &mut ds[(bi * nq + i) * nk..(bi * nq + i + 1) * nk];
                        let mut dot_sum = 0.0;
                        for j in 0..nk {
                            let vrow = &vs[(bi * nk + j) * e..(bi * nk + j + 1) * e];
                            let mut dp = 0.0;
                            for t in 0..e {
                                dp += gout[t] * vrow[t];
                            }
                            dsrow[j] = dp;
                            dot_sum += dp * prow[j];
                        }
                        for j in 0..nk {
                            dsrow[j] = prow[j] * (dsrow[j] - dot_sum);
                        }
                    }
                }
                self.accumulate(grads, *q, |g| {
                    for bi in 0..b {
                        for i in 0..nq {
                            let dsrow = &ds[(bi * nq + i) * nk..(bi * nq + i + 1) * nk];
                            let grow = &mut g[(bi * nq + i) * e..(bi * nq + i + 1) * e];
                            for j in 0..nk {
                                let w = dsrow[j] * scale;
                                let krow = &ks[(bi * nk + j) * e..(bi * nk + j + 1) * e];
                                for t in 0..e {
                                    grow[t] += w * krow[t];
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *k, |g| {
                    for bi in 0..b {
                        for i in 0..nq {
                            let dsrow = &ds[(bi * nq + i) * nk..(bi * nq + i + 1) * nk];
                            let qrow = &qs[(bi * nq + i) * e..(bi * nq + i + 1) * e];
                            for j in 0..nk {
                                let w = dsrow[j] * scale;
                                let grow = &mut g[(bi * nk + j) * e..(bi * nk + j + 1) * e];
                                for t in 0..e {
                                    grow[t] += w * qrow[t];
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *v, |g| {
                    for bi in 0..b {
                        for i in 0..nq {
                            let gout = &go[(bi * nq + i) * e..(bi * nq + i + 1) * e];
                            let prow = &probs[(bi * nq + i) * nk..(bi * nq + i + 1) * nk];
                            for j in 0..nk {
                                let pv = prow[j];
                                let grow = &mut g[(bi * nk + j) * e..(bi * nk + j + 1) * e];
                                for t in 0..e {
                                    grow[t] += pv * gout[t];
                                }
                            }
                        }
                    }
                });
            }
            Op::BroadcastToBatch { x, batch } => {
                let n = self.value(*x).numel();
                let batch = *batch;
                self.accumulate(grads, *x, |g| {
                    for bi in 0..batch {
                        for i in 0..n {
                            g[i] += go[bi * n + i];
                        }
                    }
                });
            }
            Op::ProjChannelsToSeq { x, w } => {
                let (b, c, d, h, wd) = self.value(*x).dims5().unwrap();
                let (_, e) = self.value(*w).dims2().unwrap();
                let n = d * h * wd;
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                self.accumulate(grads, *x, |g| {
                    for bi in 0..b {
                        for ci in 0..c {
                            let wrow = &ws[ci * e..(ci + 1) * e];
                            let grow = &mut g[(bi * c + ci) * n..(bi * c + ci + 1) * n];
                            for i in 0..n {
                                let gout = &go[(bi * n + i) * e..(bi * n + i + 1) * e];
                                let mut acc = 0.0;
                                for t in 0..e {
                                    acc += gout[t] * wrow[t];
                                }
                                grow[i] += acc;
                            }
                        }
                    }
                });
                self.accumulate(grads, *w, |g| {
                    for bi in 0..b {
                        for ci in 0..c {
                            let xrow = &xs[(bi * c + ci) * n..(bi * c + ci + 1) * n];
                            let grow = &mut g[ci * e..(ci + 1) * e];
                            for i in 0..n {
                                let xv = xrow[i];
                                let gout = &go[(bi * n + i) * e..(bi * n + i + 1) * e];
                                for t in 0..e {
                                    grow[t] += xv * gout[t];
                                }
                            }
                        }
                    }
                });
            }
            Op::ProjSeqToChannels { x, w, spatial } => {
                let (b, n, e) = self.value(*x).dims3().unwrap();
                let (_, c) = self.value(*w).dims2().unwrap();
                debug_assert_eq!(spatial.iter().product::<usize>(), n);
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                let mut wt = vec![0.0; c * e];
                for ei in 0..e {
                    for ci in 0..c {
                        wt[ci * e + ei] = ws[ei * c + ci];
                    }
                }
                self.accumulate(grads, *x, |g| {
                    for bi in 0..b {
                        for i in 0..n {
                            let grow = &mut g[(bi * n + i) * e..(bi * n + i + 1) * e];
                            for ci in 0..c {
                                let gv = go[(bi * c + ci) * n + i];
                                let wrow = &wt[ci * e..(ci + 1) * e];
                                for t in 0..e {
                                    grow[t] += gv * wrow[t];
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *w, |g| {
                    // accumulate into [c][e] layout then transpose
                    let mut acc = vec![0.0; c * e];
                    for bi in 0..b {
                        for i in 0..n {
                            let xrow = &xs[(bi * n + i) * e..(bi * n + i + 1) * e];
                            for ci in 0..c {
                                let gv = go[(bi * c + ci) * n + i];
                                let arow = &mut acc[ci * e..(ci + 1) * e];
                                for t in 0..e {
                                    arow[t] += gv * xrow[t];
                                }
                            }
                        }
                    }
                    for ei in 0..e {
                        for ci in 0..c {
                            g[ei * c + ci] += acc[ci * e + ei];
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let (_, e) = self.value(*table).dims2().unwrap();
                let ids = Arc::clone(ids);
                self.accumulate(grads, *table, |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        for t in 0..e {
                            g[id * e + t] += go[r * e + t];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                log_probs,
            } => {
                let (b, k) = self.value(*logits).dims2().unwrap();
                let scale = go[0] / b as f64;
                let targets = Arc::clone(targets);
                let log_probs = Arc::clone(log_probs);
                self.accumulate(grads, *logits, |g| {
                    for bi in 0..b {
                        for i in 0..k {
                            let p = log_probs[bi * k + i].exp();
                            let ind = if targets[bi] == i { 1.0 } else { 0.0 };
                            g[bi * k + i] += scale * (p - ind);
                        }
                    }
                });
            }
            Op::MeanSpatial(x) => {
                let (b, c, d, h, w) = self.value(*x).dims5().unwrap();
                let sp = d * h * w;
                let inv = 1.0 / sp as f64;
                self.accumulate(grads, *x, |g| {
                    for bc in 0..b * c {
                        let gv = go[bc] * inv;
                        let grow = &mut g[bc * sp..(bc + 1) * sp];
                        for gi in grow.iter_mut() {
                            *gi += gv;
                        }
                    }
                });
            }
        }
    }
}
