//! Forward constructors and vector-Jacobian products for every primitive.

use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{
    broadcast_shape, col2im, gelu, gelu_grad, gemm, im2col, inverse_perm, permute, Bcast,
    ConvGeom, MatView,
};
use crate::params::ParamId;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) struct MatMulSpec {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `b` is stored `[n, k]` and used transposed.
    pub trans_b: bool,
    /// `b` carries its own batch dimension.
    pub batched_b: bool,
}

pub(crate) enum Op<T> {
    Leaf { grad: bool },
    Param(#[allow(dead_code)] ParamId),
    StopGradient,
    Add(Bcast, Bcast),
    Sub(Bcast, Bcast),
    Mul(Bcast, Bcast),
    Scale(T),
    AddScalar,
    MatMul(MatMulSpec),
    Conv2d { geom: ConvGeom, batch: usize, out_ch: usize },
    ConvT2d { geom: ConvGeom, batch: usize, in_ch: usize, out_ch: usize },
    LayerNorm { mean: Vec<T>, rstd: Vec<T> },
    Softmax,
    Gelu,
    Relu,
    LeakyRelu(T),
    IndexSelect(Vec<usize>),
    Attention(AttnSaved<T>),
    MeanPoolMasked { mask: Vec<bool>, counts: Vec<usize>, n: usize },
    CrossEntropy { targets: Vec<usize>, smoothing: T, probs: Vec<T> },
    BceLogits { targets: Vec<T> },
    L1,
    L2,
    Reshape,
    Permute(Vec<usize>),
    Concat { axis: usize, sizes: Vec<usize> },
    SumAll,
    MeanAll,
    MeanAxis { outer: usize, len: usize, inner: usize },
    L2Normalize { norms: Vec<T> },
}

pub(crate) struct AttnSaved<T> {
    groups: usize,
    nq: usize,
    nk: usize,
    dh: usize,
    dv: usize,
    scale: T,
    probs: Vec<T>,
}

fn binary_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    match broadcast_shape(a, b) {
        Some(s) => Ok(s),
        None => shape_err(op, a, b),
    }
}

impl<T: Real> Graph<T> {
    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Var, Bcast, Bcast, Tensor<T>)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = binary_shape(name, &sa, &sb)?;
        let ba = Bcast::new(&sa, &out_shape);
        let bb = Bcast::new(&sb, &out_shape);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let out = Tensor::from_fn(&out_shape, |i| f(va[ba.index(i)], vb[bb.index(i)]));
        Ok((a, ba, bb, out))
    }

    /// Elementwise `a + b` with numpy broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, ba, bb, out) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(ba, bb), vec![a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, ba, bb, out) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(ba, bb), vec![a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, ba, bb, out) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(ba, bb), vec![a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(c), vec![a.0])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar, vec![a.0])
    }

    /// Forwards the value and blocks every gradient path through it.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(out, Op::StopGradient, vec![a.0])
    }

    fn run_matmul(&mut self, a: Var, b: Var, spec: MatMulSpec, out_shape: Vec<usize>) -> Var {
        let mut out = vec![T::zero(); spec.batch * spec.m * spec.n];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            for g in 0..spec.batch {
                let b_off = if spec.batched_b { g * spec.k * spec.n } else { 0 };
                let bv = if spec.trans_b {
                    MatView::rm_t(b_off, spec.k)
                } else {
                    MatView::rm(b_off, spec.n)
                };
                gemm(
                    spec.m,
                    spec.k,
                    spec.n,
                    T::one(),
                    va,
                    MatView::rm(g * spec.m * spec.k, spec.k),
                    vb,
                    bv,
                    T::zero(),
                    &mut out,
                    MatView::rm(g * spec.m * spec.n, spec.n),
                );
            }
        }
        let t = Tensor::new(&out_shape, out).expect("matmul output shape");
        self.push(t, Op::MatMul(spec), vec![a.0, b.0])
    }

    /// `a[.., k] @ b[k, n]`, leading dims of `a` flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return shape_err("matmul", &sa, &sb);
        }
        let k = sb[0];
        let m = sa.iter().product::<usize>() / k.max(1);
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = sb[1];
        let spec = MatMulSpec { batch: 1, m, k, n: sb[1], trans_b: false, batched_b: false };
        Ok(self.run_matmul(a, b, spec, out_shape))
    }

    /// `a[.., k] @ b[n, k]^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[1] {
            return shape_err("matmul_t", &sa, &sb);
        }
        let k = sb[1];
        let m = sa.iter().product::<usize>() / k.max(1);
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = sb[0];
        let spec = MatMulSpec { batch: 1, m, k, n: sb[0], trans_b: true, batched_b: false };
        Ok(self.run_matmul(a, b, spec, out_shape))
    }

    /// Batched `a[g, m, k] @ b[g, k, n]` (or `b[g, n, k]^T` with `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return shape_err("bmm", &sa, &sb);
        }
        let n = if trans_b { sb[1] } else { sb[2] };
        let spec = MatMulSpec { batch: sa[0], m: sa[1], k: sa[2], n, trans_b, batched_b: true };
        Ok(self.run_matmul(a, b, spec, vec![sa[0], sa[1], n]))
    }

    /// 2-D convolution, NCHW input, weight `[out, in, kh, kw]`, bias `[out]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return shape_err("conv2d", &sx, &sw);
        }
        let Some(geom) = ConvGeom::new(sx[1], (sx[2], sx[3]), (sw[2], sw[3]), stride, pad) else {
            return shape_err("conv2d", &sx, &sw);
        };
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return shape_err("conv2d bias", &sw, self.shape(b));
            }
        }
        let (batch, out_ch) = (sx[0], sw[0]);
        let (kr, p) = (geom.col_rows(), geom.col_cols());
        let in_sz = sx[1] * sx[2] * sx[3];
        let mut out = vec![T::zero(); batch * out_ch * p];
        let mut cols = vec![T::zero(); kr * p];
        {
            let (vx, vw) = (self.value(x).data(), self.value(w).data());
            for n in 0..batch {
                im2col(&vx[n * in_sz..(n + 1) * in_sz], &geom, &mut cols);
                gemm(
                    out_ch, kr, p, T::one(),
                    vw, MatView::rm(0, kr),
                    &cols, MatView::rm(0, p),
                    T::zero(),
                    &mut out, MatView::rm(n * out_ch * p, p),
                );
            }
            if let Some(b) = bias {
                let vb = self.value(b).data();
                for (i, chunk) in out.chunks_mut(p).enumerate() {
                    let bv = vb[i % out_ch];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let t = Tensor::new(&[batch, out_ch, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![x.0, w.0];
        inputs.extend(bias.map(|b| b.0));
        Ok(self.push(t, Op::Conv2d { geom, batch, out_ch }, inputs))
    }

    /// Transposed 2-D convolution (adjoint of [`Graph::conv2d`]),
    /// weight `[in, out, kh, kw]`. Output size `(h - 1) * s - 2p + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] {
            return shape_err("conv_transpose2d", &sx, &sw);
        }
        let (batch, in_ch, out_ch) = (sx[0], sx[1], sw[1]);
        let oh = ((sx[2] - 1) * stride.0 + sw[2]).checked_sub(2 * pad.0);
        let ow = ((sx[3] - 1) * stride.1 + sw[3]).checked_sub(2 * pad.1);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return shape_err("conv_transpose2d", &sx, &sw);
        };
        let geom = match ConvGeom::new(out_ch, (oh, ow), (sw[2], sw[3]), stride, pad) {
            Some(g) if g.out_h == sx[2] && g.out_w == sx[3] => g,
            _ => return shape_err("conv_transpose2d", &sx, &sw),
        };
        if let Some(b) = bias {
            if self.shape(b) != [out_ch] {
                return shape_err("conv_transpose2d bias", &sw, self.shape(b));
            }
        }
        let (kr, p) = (geom.col_rows(), geom.col_cols());
        let out_sz = out_ch * oh * ow;
        let mut out = vec![T::zero(); batch * out_sz];
        let mut cols = vec![T::zero(); kr * p];
        {
            let (vx, vw) = (self.value(x).data(), self.value(w).data());
            for n in 0..batch {
                gemm(
                    kr, in_ch, p, T::one(),
                    vw, MatView::rm_t(0, kr),
                    vx, MatView::rm(n * in_ch * p, p),
                    T::zero(),
                    &mut cols, MatView::rm(0, p),
                );
                col2im(&cols, &geom, &mut out[n * out_sz..(n + 1) * out_sz]);
            }
            if let Some(b) = bias {
                let vb = self.value(b).data();
                let hw = oh * ow;
                for (i, chunk) in out.chunks_mut(hw).enumerate() {
                    let bv = vb[i % out_ch];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let t = Tensor::new(&[batch, out_ch, oh, ow], out)?;
        let mut inputs = vec![x.0, w.0];
        inputs.extend(bias.map(|b| b.0));
        Ok(self.push(t, Op::ConvT2d { geom, batch, in_ch, out_ch }, inputs))
    }

    /// Layer normalization over the last axis with gain and bias.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return shape_err("layernorm", &sx, self.shape(gain));
        }
        let rows = self.value(x).numel() / d.max(1);
        let (vx, vg, vb) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut out = vec![T::zero(); vx.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &vx[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                let xh = (row[j].f64() - mean) * rstd;
                out[r * d + j] = T::of(xh) * vg[j] + vb[j];
            }
            means.push(T::of(mean));
            rstds.push(T::of(rstd));
        }
        let t = Tensor::new(&sx, out)?;
        Ok(self.push(t, Op::LayerNorm { mean: means, rstd: rstds }, vec![x.0, gain.0, bias.0]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&1);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            softmax_row(row);
        }
        let t = Tensor::new(&sx, out).expect("softmax shape");
        self.push(t, Op::Softmax, vec![x.0])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu, vec![x.0])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu, vec![x.0])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        self.push(out, Op::LeakyRelu(s), vec![x.0])
    }

    /// Rows of `x` (viewed as `[rows, rest..]`) gathered by index.
    pub fn index_select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() {
            return invalid("index_select", "scalar input");
        }
        let rows = sx[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return invalid("index_select", format!("index {bad} out of range for {rows} rows"));
        }
        let w = self.value(x).numel() / rows.max(1);
        let vx = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            out.extend_from_slice(&vx[i * w..(i + 1) * w]);
        }
        let mut shape = sx.clone();
        shape[0] = idx.len();
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::IndexSelect(idx.to_vec()), vec![x.0]))
    }

    /// Embedding lookup: rows of `table[V, d]` for each id, output shaped
    /// `prefix ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        if prefix.iter().product::<usize>() != ids.len() {
            return invalid("embedding", format!("prefix {prefix:?} does not hold {} ids", ids.len()));
        }
        let d = self.shape(table)[1];
        let rows = self.index_select(table, ids)?;
        let mut shape = prefix.to_vec();
        shape.push(d);
        self.reshape(rows, &shape)
    }

    /// Scaled dot-product attention over `groups = batch * heads` slices.
    ///
    /// `q[g, nq, dh]`, `k[g, nk, dh]`, `v[g, nk, dv]`. `key_mask[b, nk]`
    /// marks valid keys for each batch row; group `g` uses row
    /// `g / heads`. Masked keys receive exactly zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        let ok = sq.len() == 3
            && sk.len() == 3
            && sv.len() == 3
            && sq[0] == sk[0]
            && sk[0] == sv[0]
            && sq[2] == sk[2]
            && sk[1] == sv[1];
        if !ok {
            return shape_err("attention", &sq, &sk);
        }
        let (groups, nq, dh, nk, dv) = (sq[0], sq[1], sq[2], sk[1], sv[2]);
        if heads == 0 || groups % heads != 0 {
            return invalid("attention", format!("{groups} groups not divisible by {heads} heads"));
        }
        if let Some(m) = key_mask {
            if m.len() != (groups / heads) * nk {
                return invalid("attention", format!("mask length {} != {}", m.len(), (groups / heads) * nk));
            }
        }
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (vq, vk, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); groups * nq * nk];
        let mut out = vec![T::zero(); groups * nq * dv];
        for g in 0..groups {
            let p = &mut probs[g * nq * nk..(g + 1) * nq * nk];
            gemm(
                nq, dh, nk, scale,
                vq, MatView::rm(g * nq * dh, dh),
                vk, MatView::rm_t(g * nk * dh, dh),
                T::zero(),
                p, MatView::rm(0, nk),
            );
            let mrow = key_mask.map(|m| &m[(g / heads) * nk..(g / heads + 1) * nk]);
            for row in p.chunks_mut(nk) {
                masked_softmax_row(row, mrow);
            }
            gemm(
                nq, nk, dv, T::one(),
                p, MatView::rm(0, nk),
                vv, MatView::rm(g * nk * dv, dv),
                T::zero(),
                &mut out, MatView::rm(g * nq * dv, dv),
            );
        }
        let t = Tensor::new(&[groups, nq, dv], out)?;
        let saved = AttnSaved { groups, nq, nk, dh, dv, scale, probs };
        Ok(self.push(t, Op::Attention(saved), vec![q.0, k.0, v.0]))
    }

    /// Mean over valid positions: `x[b, n, d]`, `mask[b, n]` -> `[b, d]`.
    /// Rows without any valid position pool to zero.
    pub fn mean_pool_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || mask.len() != sx[0] * sx[1] {
            return invalid("mean_pool_masked", format!("x {sx:?} with mask of {}", mask.len()));
        }
        let (b, n, d) = (sx[0], sx[1], sx[2]);
        let vx = self.value(x).data();
        let mut out = vec![T::zero(); b * d];
        let mut counts = vec![0usize; b];
        for bi in 0..b {
            let mut acc = vec![0.0f64; d];
            for i in 0..n {
                if mask[bi * n + i] {
                    counts[bi] += 1;
                    let row = &vx[(bi * n + i) * d..(bi * n + i + 1) * d];
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v.f64();
                    }
                }
            }
            if counts[bi] > 0 {
                for j in 0..d {
                    out[bi * d + j] = T::of(acc[j] / counts[bi] as f64);
                }
            }
        }
        let t = Tensor::new(&[b, d], out)?;
        Ok(self.push(t, Op::MeanPoolMasked { mask: mask.to_vec(), counts, n }, vec![x.0]))
    }

    /// Mean cross-entropy of `logits[n, K]` against integer targets with
    /// label smoothing: target distribution `(1 - eps) * onehot + eps / K`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() || sl[0] == 0 {
            return invalid("cross_entropy", format!("logits {sl:?} with {} targets", targets.len()));
        }
        let kk = sl[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= kk) {
            return invalid("cross_entropy", format!("target {bad} >= {kk} classes"));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0f64;
        for (row, &t) in probs.chunks_mut(kk).zip(targets) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
            let lse = max + row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln();
            let mut row_loss = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                let logp = v.f64() - lse;
                let q = smoothing / kk as f64 + if j == t { 1.0 - smoothing } else { 0.0 };
                row_loss -= q * logp;
                *v = T::of(logp.exp());
            }
            total += row_loss;
        }
        let loss = Tensor::scalar(T::of(total / targets.len() as f64));
        let op = Op::CrossEntropy { targets: targets.to_vec(), smoothing: T::of(smoothing), probs };
        Ok(self.push(loss, op, vec![logits.0]))
    }

    /// Mean binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let n = self.value(logits).numel();
        if n != targets.len() || n == 0 {
            return invalid("bce_with_logits", format!("{n} logits with {} targets", targets.len()));
        }
        let vz = self.value(logits).data();
        let total: f64 = vz
            .iter()
            .zip(targets)
            .map(|(z, &t)| {
                let z = z.f64();
                z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let loss = Tensor::scalar(T::of(total / n as f64));
        let op = Op::BceLogits { targets: targets.iter().map(|&t| T::of(t)).collect() };
        Ok(self.push(loss, op, vec![logits.0]))
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("l1", self.shape(a), self.shape(b));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let s: f64 = va.iter().zip(vb).map(|(x, y)| (x.f64() - y.f64()).abs()).sum();
        let loss = Tensor::scalar(T::of(s / va.len().max(1) as f64));
        Ok(self.push(loss, Op::L1, vec![a.0, b.0]))
    }

    /// Mean squared difference.
    pub fn l2_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("l2", self.shape(a), self.shape(b));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let s: f64 = va.iter().zip(vb).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum();
        let loss = Tensor::scalar(T::of(s / va.len().max(1) as f64));
        Ok(self.push(loss, Op::L2, vec![a.0, b.0]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape, vec![x.0]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true)) {
            return invalid("permute", format!("{perm:?} is not a permutation of rank {}", sx.len()));
        }
        let (shape, data) = permute(self.value(x).data(), &sx, perm);
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::Permute(perm.to_vec()), vec![x.0]))
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return invalid("concat", "no inputs");
        };
        let s0 = self.shape(first).to_vec();
        if axis >= s0.len() {
            return invalid("concat", format!("axis {axis} for rank {}", s0.len()));
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let same_rest = s.len() == s0.len()
                && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return shape_err("concat", &s0, s);
            }
            sizes.push(s[axis]);
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &len) in xs.iter().zip(&sizes) {
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = s0.clone();
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Concat { axis, sizes }, xs.iter().map(|v| v.0).collect()))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        self.push(Tensor::scalar(T::of(s)), Op::SumAll, vec![x.0])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let s: f64 = d.iter().map(|v| v.f64()).sum::<f64>() / d.len().max(1) as f64;
        self.push(Tensor::scalar(T::of(s)), Op::MeanAll, vec![x.0])
    }

    /// Mean over one axis; with `keepdim` the axis stays with size 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return invalid("mean_axis", format!("axis {axis} for rank {}", sx.len()));
        }
        let outer: usize = sx[..axis].iter().product();
        let len = sx[axis];
        let inner: usize = sx[axis + 1..].iter().product();
        let vx = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len).map(|l| vx[(o * len + l) * inner + i].f64()).sum();
                out[o * inner + i] = T::of(s / len.max(1) as f64);
            }
        }
        let mut shape = sx.clone();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::MeanAxis { outer, len, inner }, vec![x.0]))
    }

    /// Rows scaled to unit L2 norm over the last axis: `x / sqrt(|x|^2 + eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&1);
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / d.max(1));
        for row in out.chunks_mut(d.max(1)) {
            let n = (row.iter().map(|v| v.f64() * v.f64()).sum::<f64>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v = T::of(v.f64() / n));
            norms.push(T::of(n));
        }
        let t = Tensor::new(&sx, out).expect("normalize shape");
        self.push(t, Op::L2Normalize { norms }, vec![x.0])
    }
}

fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut s = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += v.f64();
    }
    let inv = T::of(1.0 / s);
    row.iter_mut().for_each(|v| *v *= inv);
}

fn masked_softmax_row<T: Real>(row: &mut [T], mask: Option<&[bool]>) {
    let Some(mask) = mask else {
        softmax_row(row);
        return;
    };
    let mut max = T::neg_infinity();
    for (v, &m) in row.iter().zip(mask) {
        if m {
            max = max.max(*v);
        }
    }
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut s = 0.0f64;
    for (v, &m) in row.iter_mut().zip(mask) {
        *v = if m { (*v - max).exp() } else { T::zero() };
        s += v.f64();
    }
    let inv = T::of(1.0 / s);
    row.iter_mut().for_each(|v| *v *= inv);
}

fn reduce_bcast<T: Real>(g: &[T], b: &Bcast, shape: &[usize], f: impl Fn(usize, T) -> T) -> Tensor<T> {
    let mut out = Tensor::zeros(shape);
    let d = out.data_mut();
    match b {
        Bcast::Same => {
            for (i, (o, &gv)) in d.iter_mut().zip(g).enumerate() {
                *o = f(i, gv);
            }
        }
        _ => {
            for (i, &gv) in g.iter().enumerate() {
                d[b.index(i)] += f(i, gv);
            }
        }
    }
    out
}

type Grads<T> = Vec<Option<Tensor<T>>>;

/// Vector-Jacobian product of one node. Returns one optional contribution
/// per input, computed only where `needs` is set.
pub(crate) fn backward_op<T: Real>(
    op: &Op<T>,
    inputs: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &Tensor<T>,
    needs: &[bool],
) -> Result<Grads<T>> {
    let gd = g.data();
    let res: Grads<T> = match op {
        Op::Leaf { .. } | Op::Param(_) | Op::StopGradient => vec![None; inputs.len()],
        Op::Add(ba, bb) => vec![
            needs[0].then(|| reduce_bcast(gd, ba, inputs[0].shape(), |_, v| v)),
            needs[1].then(|| reduce_bcast(gd, bb, inputs[1].shape(), |_, v| v)),
        ],
        Op::Sub(ba, bb) => vec![
            needs[0].then(|| reduce_bcast(gd, ba, inputs[0].shape(), |_, v| v)),
            needs[1].then(|| reduce_bcast(gd, bb, inputs[1].shape(), |_, v| -v)),
        ],
        Op::Mul(ba, bb) => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            vec![
                needs[0].then(|| reduce_bcast(gd, ba, inputs[0].shape(), |i, v| v * b[bb.index(i)])),
                needs[1].then(|| reduce_bcast(gd, bb, inputs[1].shape(), |i, v| v * a[ba.index(i)])),
            ]
        }
        Op::Scale(c) => vec![Some(g.map(|v| v * *c))],
        Op::AddScalar | Op::Reshape => vec![Some(g.clone().reshape(inputs[0].shape())?)],
        Op::MatMul(spec) => matmul_backward(spec, inputs[0], inputs[1], g, needs),
        Op::Conv2d { geom, batch, out_ch } => conv_backward(geom, *batch, *out_ch, inputs, g, needs),
        Op::ConvT2d { geom, batch, in_ch, out_ch } => {
            convt_backward(geom, *batch, *in_ch, *out_ch, inputs, g, needs)
        }
        Op::LayerNorm { mean, rstd } => layernorm_backward(inputs, mean, rstd, g, needs),
        Op::Softmax => {
            let y = out.data();
            let d = *out.shape().last().unwrap_or(&1);
            let mut dx = vec![T::zero(); y.len()];
            for r in 0..y.len() / d.max(1) {
                let (yr, gr) = (&y[r * d..(r + 1) * d], &gd[r * d..(r + 1) * d]);
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.f64() * b.f64()).sum();
                for j in 0..d {
                    dx[r * d + j] = T::of(yr[j].f64() * (gr[j].f64() - dot));
                }
            }
            vec![Some(Tensor::new(out.shape(), dx)?)]
        }
        Op::Gelu => {
            let x = inputs[0].data();
            vec![Some(Tensor::from_fn(g.shape(), |i| gd[i] * gelu_grad(x[i])))]
        }
        Op::Relu => {
            let x = inputs[0].data();
            vec![Some(Tensor::from_fn(g.shape(), |i| if x[i] > T::zero() { gd[i] } else { T::zero() }))]
        }
        Op::LeakyRelu(s) => {
            let x = inputs[0].data();
            vec![Some(Tensor::from_fn(g.shape(), |i| if x[i] > T::zero() { gd[i] } else { gd[i] * *s }))]
        }
        Op::IndexSelect(idx) => {
            let mut dx = Tensor::zeros(inputs[0].shape());
            let w = inputs[0].numel() / inputs[0].shape()[0].max(1);
            let d = dx.data_mut();
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..w {
                    d[i * w + j] += gd[r * w + j];
                }
            }
            vec![Some(dx)]
        }
        Op::Attention(s) => attention_backward(s, inputs, g, needs),
        Op::MeanPoolMasked { mask, counts, n } => {
            let (b, d) = (counts.len(), g.shape()[1]);
            let mut dx = vec![T::zero(); b * n * d];
            for bi in 0..b {
                if counts[bi] == 0 {
                    continue;
                }
                let inv = T::of(1.0 / counts[bi] as f64);
                for i in 0..*n {
                    if mask[bi * n + i] {
                        for j in 0..d {
                            dx[(bi * n + i) * d + j] = gd[bi * d + j] * inv;
                        }
                    }
                }
            }
            vec![Some(Tensor::new(inputs[0].shape(), dx)?)]
        }
        Op::CrossEntropy { targets, smoothing, probs } => {
            let kk = inputs[0].shape()[1];
            let scale = gd[0].f64() / targets.len() as f64;
            let eps = smoothing.f64();
            let mut dx = vec![T::zero(); probs.len()];
            for (r, &t) in targets.iter().enumerate() {
                for j in 0..kk {
                    let q = eps / kk as f64 + if j == t { 1.0 - eps } else { 0.0 };
                    dx[r * kk + j] = T::of((probs[r * kk + j].f64() - q) * scale);
                }
            }
            vec![Some(Tensor::new(inputs[0].shape(), dx)?)]
        }
        Op::BceLogits { targets } => {
            let z = inputs[0].data();
            let scale = gd[0].f64() / z.len() as f64;
            let dx = Tensor::from_fn(inputs[0].shape(), |i| {
                let s = 1.0 / (1.0 + (-z[i].f64()).exp());
                T::of((s - targets[i].f64()) * scale)
            });
            vec![Some(dx)]
        }
        Op::L1 => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            let scale = T::of(gd[0].f64() / a.len().max(1) as f64);
            let sign = |i: usize| {
                let d = a[i] - b[i];
                if d > T::zero() {
                    scale
                } else if d < T::zero() {
                    -scale
                } else {
                    T::zero()
                }
            };
            let da = Tensor::from_fn(inputs[0].shape(), sign);
            let db = needs[1].then(|| da.map(|v| -v));
            vec![needs[0].then_some(da), db]
        }
        Op::L2 => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            let scale = T::of(2.0 * gd[0].f64() / a.len().max(1) as f64);
            let da = Tensor::from_fn(inputs[0].shape(), |i| (a[i] - b[i]) * scale);
            let db = needs[1].then(|| da.map(|v| -v));
            vec![needs[0].then_some(da), db]
        }
        Op::Permute(perm) => {
            let inv = inverse_perm(perm);
            let (shape, data) = permute(gd, g.shape(), &inv);
            vec![Some(Tensor::new(&shape, data)?)]
        }
        Op::Concat { axis, sizes } => {
            let shape = g.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total: usize = sizes.iter().sum();
            let mut res = Vec::with_capacity(sizes.len());
            let mut start = 0;
            for (idx, &len) in sizes.iter().enumerate() {
                if !needs[idx] {
                    res.push(None);
                    start += len;
                    continue;
                }
                let mut d = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = (o * total + start) * inner;
                    d.extend_from_slice(&gd[base..base + len * inner]);
                }
                res.push(Some(Tensor::new(inputs[idx].shape(), d)?));
                start += len;
            }
            res
        }
        Op::SumAll => vec![Some(Tensor::full(inputs[0].shape(), gd[0]))],
        Op::MeanAll => {
            let n = inputs[0].numel().max(1);
            vec![Some(Tensor::full(inputs[0].shape(), T::of(gd[0].f64() / n as f64)))]
        }
        Op::MeanAxis { outer, len, inner } => {
            let inv = T::of(1.0 / (*len).max(1) as f64);
            let mut dx = vec![T::zero(); outer * len * inner];
            for o in 0..*outer {
                for l in 0..*len {
                    for i in 0..*inner {
                        dx[(o * len + l) * inner + i] = gd[o * inner + i] * inv;
                    }
                }
            }
            vec![Some(Tensor::new(inputs[0].shape(), dx)?)]
        }
        Op::L2Normalize { norms } => {
            let y = out.data();
            let d = *out.shape().last().unwrap_or(&1);
            let mut dx = vec![T::zero(); y.len()];
            for (r, n) in norms.iter().enumerate() {
                let (yr, gr) = (&y[r * d..(r + 1) * d], &gd[r * d..(r + 1) * d]);
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.f64() * b.f64()).sum();
                for j in 0..d {
                    dx[r * d + j] = T::of((gr[j].f64() - yr[j].f64() * dot) / n.f64());
                }
            }
            vec![Some(Tensor::new(out.shape(), dx)?)]
        }
    };
    Ok(res)
}

fn matmul_backward<T: Real>(
    spec: &MatMulSpec,
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    needs: &[bool],
) -> Grads<T> {
    let MatMulSpec { batch, m, k, n, trans_b, batched_b } = *spec;
    let (va, vb, gd) = (a.data(), b.data(), g.data());
    let mut da = needs[0].then(|| vec![T::zero(); va.len()]);
    let mut db = needs[1].then(|| vec![T::zero(); vb.len()]);
    for gi in 0..batch {
        let a_off = gi * m * k;
        let b_off = if batched_b { gi * k * n } else { 0 };
        let g_off = gi * m * n;
        if let Some(da) = da.as_mut() {
            // dA = dC · B'^T
            let bt = if trans_b { MatView::rm(b_off, k) } else { MatView::rm_t(b_off, n) };
            gemm(m, n, k, T::one(), gd, MatView::rm(g_off, n), vb, bt, T::zero(), da, MatView::rm(a_off, k));
        }
        if let Some(db) = db.as_mut() {
            let beta = if batched_b || gi == 0 { T::zero() } else { T::one() };
            if trans_b {
                // dB[n, k] = dC^T · A
                gemm(n, m, k, T::one(), gd, MatView::rm_t(g_off, n), va, MatView::rm(a_off, k), beta, db, MatView::rm(b_off, k));
            } else {
                // dB[k, n] = A^T · dC
                gemm(k, m, n, T::one(), va, MatView::rm_t(a_off, k), gd, MatView::rm(g_off, n), beta, db, MatView::rm(b_off, n));
            }
        }
    }
    vec![
        da.map(|d| Tensor::new(a.shape(), d).expect("matmul grad a")),
        db.map(|d| Tensor::new(b.shape(), d).expect("matmul grad b")),
    ]
}

fn conv_backward<T: Real>(
    geom: &ConvGeom,
    batch: usize,
    out_ch: usize,
    inputs: &[&Tensor<T>],
    g: &Tensor<T>,
    needs: &[bool],
) -> Grads<T> {
    let (x, w) = (inputs[0], inputs[1]);
    let (kr, p) = (geom.col_rows(), geom.col_cols());
    let in_sz = geom.channels * geom.in_h * geom.in_w;
    let gd = g.data();
    let mut dx = needs[0].then(|| vec![T::zero(); x.numel()]);
    let mut dw = needs[1].then(|| vec![T::zero(); w.numel()]);
    let mut cols = vec![T::zero(); kr * p];
    for n in 0..batch {
        let gn = MatView::rm(n * out_ch * p, p);
        if let Some(dw) = dw.as_mut() {
            im2col(&x.data()[n * in_sz..(n + 1) * in_sz], geom, &mut cols);
            gemm(out_ch, p, kr, T::one(), gd, gn, &cols, MatView::rm_t(0, p), T::one(), dw, MatView::rm(0, kr));
        }
        if let Some(dx) = dx.as_mut() {
            gemm(kr, out_ch, p, T::one(), w.data(), MatView::rm_t(0, kr), gd, gn, T::zero(), &mut cols, MatView::rm(0, p));
            col2im(&cols, geom, &mut dx[n * in_sz..(n + 1) * in_sz]);
        }
    }
    let mut res = vec![
        dx.map(|d| Tensor::new(x.shape(), d).expect("conv dx")),
        dw.map(|d| Tensor::new(w.shape(), d).expect("conv dw")),
    ];
    if inputs.len() == 3 {
        res.push(needs[2].then(|| {
            let mut db = vec![T::zero(); out_ch];
            for (i, chunk) in gd.chunks(p).enumerate() {
                db[i % out_ch] += chunk.iter().copied().sum::<T>();
            }
            Tensor::new(&[out_ch], db).expect("conv db")
        }));
    }
    res
}

fn convt_backward<T: Real>(
    geom: &ConvGeom,
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    inputs: &[&Tensor<T>],
    g: &Tensor<T>,
    needs: &[bool],
) -> Grads<T> {
    let (x, w) = (inputs[0], inputs[1]);
    let (kr, p) = (geom.col_rows(), geom.col_cols());
    let out_sz = out_ch * geom.in_h * geom.in_w;
    let gd = g.data();
    let mut dx = needs[0].then(|| vec![T::zero(); x.numel()]);
    let mut dw = needs[1].then(|| vec![T::zero(); w.numel()]);
    let mut cols = vec![T::zero(); kr * p];
    for n in 0..batch {
        im2col(&gd[n * out_sz..(n + 1) * out_sz], geom, &mut cols);
        if let Some(dx) = dx.as_mut() {
            gemm(in_ch, kr, p, T::one(), w.data(), MatView::rm(0, kr), &cols, MatView::rm(0, p), T::zero(), dx, MatView::rm(n * in_ch * p, p));
        }
        if let Some(dw) = dw.as_mut() {
            gemm(in_ch, p, kr, T::one(), x.data(), MatView::rm(n * in_ch * p, p), &cols, MatView::rm_t(0, p), T::one(), dw, MatView::rm(0, kr));
        }
    }
    let mut res = vec![
        dx.map(|d| Tensor::new(x.shape(), d).expect("convT dx")),
        dw.map(|d| Tensor::new(w.shape(), d).expect("convT dw")),
    ];
    if inputs.len() == 3 {
        res.push(needs[2].then(|| {
            let hw = geom.in_h * geom.in_w;
            let mut db = vec![T::zero(); out_ch];
            for (i, chunk) in gd.chunks(hw).enumerate() {
                db[i % out_ch] += chunk.iter().copied().sum::<T>();
            }
            Tensor::new(&[out_ch], db).expect("convT db")
        }));
    }
    res
}

fn layernorm_backward<T: Real>(
    inputs: &[&Tensor<T>],
    mean: &[T],
    rstd: &[T],
    g: &Tensor<T>,
    needs: &[bool],
) -> Grads<T> {
    let (x, gain) = (inputs[0].data(), inputs[1].data());
    let d = gain.len();
    let gd = g.data();
    let mut dx = vec![T::zero(); x.len()];
    let mut dg = vec![0.0f64; d];
    let mut db = vec![0.0f64; d];
    for r in 0..mean.len() {
        let (mu, rs) = (mean[r].f64(), rstd[r].f64());
        let xr = &x[r * d..(r + 1) * d];
        let gr = &gd[r * d..(r + 1) * d];
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for j in 0..d {
            let xh = (xr[j].f64() - mu) * rs;
            let dxh = gr[j].f64() * gain[j].f64();
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
            dg[j] += gr[j].f64() * xh;
            db[j] += gr[j].f64();
        }
        let (m1, m2) = (sum_dxh / d as f64, sum_dxh_xh / d as f64);
        for j in 0..d {
            let xh = (xr[j].f64() - mu) * rs;
            let dxh = gr[j].f64() * gain[j].f64();
            dx[r * d + j] = T::of(rs * (dxh - m1 - xh * m2));
        }
    }
    let to_t = |v: Vec<f64>| Tensor::new(&[d], v.into_iter().map(T::of).collect()).expect("ln grad");
    vec![
        needs[0].then(|| Tensor::new(inputs[0].shape(), dx).expect("ln dx")),
        needs[1].then(|| to_t(dg)),
        needs[2].then(|| to_t(db)),
    ]
}

fn attention_backward<T: Real>(s: &AttnSaved<T>, inputs: &[&Tensor<T>], g: &Tensor<T>, needs: &[bool]) -> Grads<T> {
    let AttnSaved { groups, nq, nk, dh, dv, scale, ref probs } = *s;
    let (q, k, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
    let gd = g.data();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dvv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); nq * nk];
    for gi in 0..groups {
        let p = &probs[gi * nq * nk..(gi + 1) * nq * nk];
        let go = MatView::rm(gi * nq * dv, dv);
        if needs[2] {
            // dV = P^T dO
            gemm(nk, nq, dv, T::one(), p, MatView::rm_t(0, nk), gd, go, T::zero(), &mut dvv, MatView::rm(gi * nk * dv, dv));
        }
        if !(needs[0] || needs[1]) {
            continue;
        }
        // dP = dO V^T
        gemm(nq, dv, nk, T::one(), gd, go, v, MatView::rm_t(gi * nk * dv, dv), T::zero(), &mut dp, MatView::rm(0, nk));
        for r in 0..nq {
            let pr = &p[r * nk..(r + 1) * nk];
            let dr = &mut dp[r * nk..(r + 1) * nk];
            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a.f64() * b.f64()).sum();
            for j in 0..nk {
                dr[j] = T::of(pr[j].f64() * (dr[j].f64() - dot));
            }
        }
        if needs[0] {
            gemm(nq, nk, dh, scale, &dp, MatView::rm(0, nk), k, MatView::rm(gi * nk * dh, dh), T::zero(), &mut dq, MatView::rm(gi * nq * dh, dh));
        }
        if needs[1] {
            gemm(nk, nq, dh, scale, &dp, MatView::rm_t(0, nk), q, MatView::rm(gi * nq * dh, dh), T::zero(), &mut dk, MatView::rm(gi * nk * dh, dh));
        }
    }
    vec![
        needs[0].then(|| Tensor::new(inputs[0].shape(), dq).expect("attn dq")),
        needs[1].then(|| Tensor::new(inputs[1].shape(), dk).expect("attn dk")),
        needs[2].then(|| Tensor::new(inputs[2].shape(), dvv).expect("attn dv")),
    ]
}
