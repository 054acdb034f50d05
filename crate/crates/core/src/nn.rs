//! Layers built on the tape: linear maps, layer norm, pre-norm transformer
//! blocks and convolutions.

use clef_grad::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::Result;
use crate::rng::StageRng;

pub type Store = ParamStore<f32>;
pub type G = Graph<f32>;

/// Per-forward state: training flag and the stream dropout masks draw from.
pub struct Ctx<'a> {
    pub train: bool,
    pub rng: Option<&'a mut StageRng>,
}

impl<'a> Ctx<'a> {
    pub fn eval() -> Self {
        Self { train: false, rng: None }
    }

    pub fn train(rng: &'a mut StageRng) -> Self {
        Self { train: true, rng: Some(rng) }
    }

    pub fn dropout(&mut self, g: &mut G, x: Var, p: f64) -> Result<Var> {
        if !self.train || p <= 0.0 {
            return Ok(x);
        }
        let rng = self.rng.as_mut().expect("training context carries an rng");
        let keep = 1.0 / (1.0 - p);
        let shape = g.shape(x).to_vec();
        let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep as f32 });
        let m = g.constant(mask);
        Ok(g.mul(x, m)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut Store, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut StageRng) -> Self {
        Self::scaled(store, name, d_in, d_out, bias, 1.0, rng)
    }

    pub fn scaled(store: &mut Store, name: &str, d_in: usize, d_out: usize, bias: bool, gain: f64, rng: &mut StageRng) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::randn(&[d_in, d_out], gain / (d_in as f64).sqrt(), rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[d_out])));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut G, store: &Store, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                Ok(g.add(y, b)?)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut Store, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.g"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut G, store: &Store, x: Var) -> Result<Var> {
        let (a, b) = (g.param(store, self.gain), g.param(store, self.bias));
        Ok(g.layernorm(x, a, b, 1e-5)?)
    }
}

/// Pre-norm transformer block with GELU MLP.
#[derive(Clone, Debug)]
pub struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    dropout: f64,
}

impl Block {
    pub fn new(store: &mut Store, name: &str, d: usize, heads: usize, mlp_ratio: usize, dropout: f64, depth: usize, rng: &mut StageRng) -> Self {
        let out_gain = 1.0 / (2.0 * depth.max(1) as f64).sqrt();
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, true, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng),
            proj: Linear::scaled(store, &format!("{name}.proj"), d, d, true, out_gain, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            fc1: Linear::new(store, &format!("{name}.fc1"), d, d * mlp_ratio, true, rng),
            fc2: Linear::scaled(store, &format!("{name}.fc2"), d * mlp_ratio, d, true, out_gain, rng),
            heads,
            dropout,
        }
    }

    /// `x[b, n, d]`; `key_mask[b * n]` marks valid positions.
    pub fn forward(&self, g: &mut G, store: &Store, x: Var, key_mask: Option<&[bool]>, ctx: &mut Ctx) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, n, d) = (s[0], s[1], s[2]);
        let h = self.heads;
        let dh = d / h;
        let xn = self.ln1.forward(g, store, x)?;
        let split = |g: &mut G, t: Var| -> Result<Var> {
            let t = g.reshape(t, &[b, n, h, dh])?;
            let t = g.permute(t, &[0, 2, 1, 3])?;
            Ok(g.reshape(t, &[b * h, n, dh])?)
        };
        let q = self.q.forward(g, store, xn)?;
        let k = self.k.forward(g, store, xn)?;
        let v = self.v.forward(g, store, xn)?;
        let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
        let a = g.attention(q, k, v, h, key_mask)?;
        let a = g.reshape(a, &[b, h, n, dh])?;
        let a = g.permute(a, &[0, 2, 1, 3])?;
        let a = g.reshape(a, &[b, n, d])?;
        let a = self.proj.forward(g, store, a)?;
        let a = ctx.dropout(g, a, self.dropout)?;
        let x = g.add(x, a)?;
        let xn = self.ln2.forward(g, store, x)?;
        let m = self.fc1.forward(g, store, xn)?;
        let m = g.gelu(m);
        let m = self.fc2.forward(g, store, m)?;
        let m = ctx.dropout(g, m, self.dropout)?;
        Ok(g.add(x, m)?)
    }
}

/// Stack of blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct Transformer {
    blocks: Vec<Block>,
    ln_f: LayerNorm,
}

impl Transformer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(store: &mut Store, name: &str, d: usize, depth: usize, heads: usize, mlp_ratio: usize, dropout: f64, rng: &mut StageRng) -> Self {
        let blocks = (0..depth)
            .map(|i| Block::new(store, &format!("{name}.blk{i}"), d, heads, mlp_ratio, dropout, depth, rng))
            .collect();
        Self {
            blocks,
            ln_f: LayerNorm::new(store, &format!("{name}.ln_f"), d),
        }
    }

    pub fn forward(&self, g: &mut G, store: &Store, mut x: Var, key_mask: Option<&[bool]>, ctx: &mut Ctx) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, store, x, key_mask, ctx)?;
        }
        self.ln_f.forward(g, store, x)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub transposed: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut Store,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        gain: f64,
        rng: &mut StageRng,
    ) -> Self {
        let fan_in = (c_in * kernel.0 * kernel.1) as f64;
        let std = gain * (2.0 / fan_in).sqrt();
        Self {
            w: store.add(format!("{name}.w"), Tensor::randn(&[c_out, c_in, kernel.0, kernel.1], std, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[c_out])),
            stride,
            pad,
            transposed: false,
        }
    }

    /// Transposed convolution; weight laid out `[in, out, kh, kw]`.
    #[allow(clippy::too_many_arguments)]
    pub fn transposed(
        store: &mut Store,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        rng: &mut StageRng,
    ) -> Self {
        let fan_in = (c_in * kernel.0 * kernel.1) as f64 / (stride.0 * stride.1) as f64;
        let std = (2.0 / fan_in).sqrt();
        Self {
            w: store.add(format!("{name}.w"), Tensor::randn(&[c_in, c_out, kernel.0, kernel.1], std, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[c_out])),
            stride,
            pad,
            transposed: true,
        }
    }

    pub fn forward(&self, g: &mut G, store: &Store, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        if self.transposed {
            Ok(g.conv_transpose2d(x, w, Some(b), self.stride, self.pad)?)
        } else {
            Ok(g.conv2d(x, w, Some(b), self.stride, self.pad)?)
        }
    }
}

/// `x + conv(act(conv(act(x))))` with 3×3 kernels.
#[derive(Clone, Debug)]
pub struct ResBlock {
    c1: Conv,
    c2: Conv,
}

impl ResBlock {
    pub fn new(store: &mut Store, name: &str, c: usize, rng: &mut StageRng) -> Self {
        Self {
            c1: Conv::new(store, &format!("{name}.c1"), c, c, (3, 3), (1, 1), (1, 1), 1.0, rng),
            c2: Conv::new(store, &format!("{name}.c2"), c, c, (3, 3), (1, 1), (1, 1), 0.2, rng),
        }
    }

    pub fn forward(&self, g: &mut G, store: &Store, x: Var) -> Result<Var> {
        let h = g.leaky_relu(x, 0.2);
        let h = self.c1.forward(g, store, h)?;
        let h = g.leaky_relu(h, 0.2);
        let h = self.c2.forward(g, store, h)?;
        Ok(g.add(x, h)?)
    }
}

/// Learnable table initialized with small Gaussian entries.
pub fn embedding_table(store: &mut Store, name: &str, rows: usize, d: usize, std: f64, rng: &mut StageRng) -> ParamId {
    store.add(name, Tensor::randn(&[rows, d], std, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn block_respects_key_mask() {
        let mut rng = rng_from(1);
        let mut store = Store::new();
        let t = Transformer::new(&mut store, "t", 8, 2, 2, 2, 0.0, &mut rng);
        let x0 = Tensor::<f32>::randn(&[1, 4, 8], 1.0, &mut rng);
        let mask = [true, true, true, false];
        let run = |x: Tensor<f32>| {
            let mut g = G::new();
            let xv = g.constant(x);
            let y = t.forward(&mut g, &store, xv, Some(&mask), &mut Ctx::eval()).unwrap();
            g.value(y).data()[..24].to_vec()
        };
        let mut x1 = x0.clone();
        for j in 0..8 {
            x1.data_mut()[24 + j] = 100.0;
        }
        assert_eq!(run(x0), run(x1));
    }

    #[test]
    fn dropout_only_in_training() {
        let mut rng = rng_from(2);
        let mut g = G::new();
        let x = g.constant(Tensor::full(&[100], 1.0));
        let y = Ctx::eval().dropout(&mut g, x, 0.5).unwrap();
        assert_eq!(y, x);
        let y = Ctx::train(&mut rng).dropout(&mut g, x, 0.5).unwrap();
        let zeros = g.value(y).data().iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 25 && zeros < 75);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
