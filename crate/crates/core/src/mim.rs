//! Session-scale masked token modeling over tokenizer grids.
//!
//! Each model window is an `h × w` token grid with one raw spectrogram patch
//! per token. The encoder sees visible tokens, learnable mask slots for
//! masked-but-kept positions and a leading proxy token; dropped positions
//! are removed. A shallow decoder rebuilds the full grid from encoder states
//! and the projected proxy, and predicts masked codes through the token
//! table.

use clef_grad::{Adam, AdamConfig, Checkpoint, CheckpointMeta, CosineSchedule, Ema, ParamId, Tensor, Var, TABLE_EMA};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::Spectrogram;
use crate::error::{data, CoreError, Result};
use crate::nn::{embedding_table, Ctx, LayerNorm, Linear, Store, Transformer, G};
use crate::profile::{MimConfig, Profile};
use crate::rng::{derive_index, rng_from, stage_rng, StageRng};
use crate::vqtok::TokenCache;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MimDims {
    /// Codebook size.
    pub k: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Flattened `C × patch_h × patch_w`.
    pub patch_dim: usize,
}

impl MimDims {
    pub fn from_profile(p: &Profile) -> Self {
        let (gh, gw) = p.token_grid();
        Self {
            k: p.tokenizer.codebook_size,
            grid_h: gh,
            grid_w: gw,
            patch_dim: p.cohort.channels.len() * p.mim.patch_h * p.mim.patch_w,
        }
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// One model window: codes, raw patches `[N, P]` and validity, row-major
/// over the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MimWindow {
    pub tokens: Vec<usize>,
    pub patches: Vec<f32>,
    pub valid: Vec<bool>,
}

impl MimWindow {
    /// Window `index` of a session; columns past `valid_w` are padding.
    pub fn from_session(cache: &TokenCache, spec: &Spectrogram, dims: &MimDims, index: usize) -> Result<Self> {
        Self::at_column(cache, spec, dims, index * dims.grid_w)
    }

    /// Window whose first token column is `col0`.
    pub fn at_column(cache: &TokenCache, spec: &Spectrogram, dims: &MimDims, col0: usize) -> Result<Self> {
        let (gh, gw) = (dims.grid_h, dims.grid_w);
        if cache.h != gh || cache.session_id != spec.session_id {
            return data(format!(
                "token cache {} ({} rows) does not fit spectrogram {} with grid height {gh}",
                cache.session_id, cache.h, spec.session_id
            ));
        }
        let ph = spec.bins / gh;
        let c = spec.channels;
        let pw = dims.patch_dim / (c * ph);
        let mut tokens = Vec::with_capacity(gh * gw);
        let mut valid = Vec::with_capacity(gh * gw);
        let mut patches = vec![-1f32; gh * gw * dims.patch_dim];
        for r in 0..gh {
            for col in 0..gw {
                let gc = col0 + col;
                let i = r * gw + col;
                tokens.push(if gc < cache.w { cache.at(r, gc) } else { 0 });
                valid.push(gc < cache.valid_w);
                let dst = &mut patches[i * dims.patch_dim..(i + 1) * dims.patch_dim];
                for ch in 0..c {
                    for y in 0..ph {
                        for x in 0..pw {
                            let f = gc * pw + x;
                            if f < spec.frames {
                                dst[(ch * ph + y) * pw + x] = spec.at(ch, r * ph + y, f);
                            }
                        }
                    }
                }
            }
        }
        Ok(Self { tokens, patches, valid })
    }

    /// Number of model windows covering a session.
    pub fn count(cache: &TokenCache, dims: &MimDims) -> usize {
        cache.valid_w.div_ceil(dims.grid_w).max(1)
    }

    /// Zeroes the patch entries of every channel not in `keep`.
    pub fn mask_channels(&mut self, keep: &[bool]) {
        let per = self.patches.len() / self.tokens.len().max(1);
        let block = per / keep.len();
        for t in 0..self.tokens.len() {
            for (ch, &k) in keep.iter().enumerate() {
                if !k {
                    self.patches[t * per + ch * block..t * per + (ch + 1) * block].fill(0.0);
                }
            }
        }
    }
}

/// Source of training windows.
pub trait WindowSource {
    fn len(&self) -> usize;
    fn window(&self, i: usize) -> Result<MimWindow>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl WindowSource for [MimWindow] {
    fn len(&self) -> usize {
        <[MimWindow]>::len(self)
    }

    fn window(&self, i: usize) -> Result<MimWindow> {
        Ok(self[i].clone())
    }
}

impl WindowSource for Vec<MimWindow> {
    fn len(&self) -> usize {
        <[MimWindow]>::len(self)
    }

    fn window(&self, i: usize) -> Result<MimWindow> {
        Ok(self[i].clone())
    }
}

/// Token caches paired with their spectrograms, windowed on demand.
pub struct Corpus<'a> {
    pub dims: MimDims,
    pub specs: &'a [Spectrogram],
    pub caches: &'a [TokenCache],
    index: Vec<(usize, usize)>,
}

impl<'a> Corpus<'a> {
    pub fn new(dims: MimDims, specs: &'a [Spectrogram], caches: &'a [TokenCache]) -> Result<Self> {
        if specs.len() != caches.len() {
            return data(format!("{} spectrograms but {} token caches", specs.len(), caches.len()));
        }
        let mut index = Vec::new();
        for (s, c) in caches.iter().enumerate() {
            if c.session_id != specs[s].session_id {
                return data(format!("token cache {} paired with spectrogram {}", c.session_id, specs[s].session_id));
            }
            for w in 0..MimWindow::count(c, &dims) {
                index.push((s, w));
            }
        }
        Ok(Self { dims, specs, caches, index })
    }

    /// Restricts to sessions accepted by `keep`.
    pub fn filter(mut self, keep: impl Fn(&TokenCache) -> bool) -> Self {
        let caches = self.caches;
        self.index.retain(|&(s, _)| keep(&caches[s]));
        self
    }

    pub fn session_of(&self, i: usize) -> usize {
        self.index[i].0
    }
}

impl WindowSource for Corpus<'_> {
    fn len(&self) -> usize {
        self.index.len()
    }

    fn window(&self, i: usize) -> Result<MimWindow> {
        let (s, w) = self.index[i];
        MimWindow::from_session(&self.caches[s], &self.specs[s], &self.dims, w)
    }
}

/// Masked set and its dropped subset, as sorted grid positions.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub ratio: f64,
    pub masked: Vec<usize>,
    pub dropped: Vec<usize>,
}

impl MaskPlan {
    /// Drops `positions` without masking any kept token.
    pub fn drop_only(mut positions: Vec<usize>) -> Self {
        positions.sort_unstable();
        Self {
            ratio: 0.0,
            masked: positions.clone(),
            dropped: positions,
        }
    }

    pub fn none() -> Self {
        Self::drop_only(Vec::new())
    }
}

/// Ratio from `N(mu, sigma²)` truncated to `bounds` by rejection.
pub fn sample_mask_ratio(mu: f64, sigma: f64, bounds: [f64; 2], rng: &mut StageRng) -> f64 {
    let [lo, hi] = bounds;
    if sigma <= 0.0 || lo >= hi {
        return mu.clamp(lo, hi);
    }
    let normal = Normal::new(mu, sigma).expect("positive sigma");
    loop {
        let r = normal.sample(rng);
        if (lo..=hi).contains(&r) {
            return r;
        }
    }
}

/// Masks `ceil(ratio * n)` positions chosen uniformly and drops
/// `floor(r_drop * |M|)` of them.
pub fn sample_mask_plan(n: usize, mu: f64, sigma: f64, bounds: [f64; 2], r_drop: f64, rng: &mut StageRng) -> MaskPlan {
    let ratio = sample_mask_ratio(mu, sigma, bounds, rng);
    let m = ((ratio * n as f64).ceil() as usize).min(n);
    let chosen = sample(rng, n, m).into_vec();
    let n_drop = (r_drop * m as f64).floor() as usize;
    let mut dropped: Vec<usize> = chosen[..n_drop].to_vec();
    let mut masked = chosen;
    masked.sort_unstable();
    dropped.sort_unstable();
    MaskPlan { ratio, masked, dropped }
}

/// Random drop of `floor(r * n_valid)` valid positions.
pub fn sample_drop_plan(valid: &[bool], r: f64, rng: &mut StageRng) -> MaskPlan {
    let pos: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
    let n = ((r * pos.len() as f64).floor() as usize).min(pos.len().saturating_sub(1));
    let chosen = sample(rng, pos.len(), n).into_iter().map(|i| pos[i]).collect();
    MaskPlan::drop_only(chosen)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Proxy,
    Visible(usize),
    Masked(usize),
    Pad,
}

/// Encoder output with the slot layout it was built from.
pub struct EncOut {
    /// `[B, L, d]`
    pub hidden: Var,
    pub slots: Vec<Vec<Slot>>,
    pub len: usize,
}

impl EncOut {
    pub fn key_mask(&self) -> Vec<bool> {
        self.slots.iter().flatten().map(|s| *s != Slot::Pad).collect()
    }

    pub fn pool_mask(&self, include_proxy: bool) -> Vec<bool> {
        self.slots
            .iter()
            .flatten()
            .map(|s| matches!(s, Slot::Visible(_)) || (include_proxy && *s == Slot::Proxy))
            .collect()
    }
}

/// Token and patch embedding plus the transformer encoder.
#[derive(Clone, Debug)]
pub struct MimEncoder {
    pub dims: MimDims,
    pub dim: usize,
    pub proxy_in_pool: bool,
    pub tok_table: ParamId,
    patch_proj: Linear,
    pos_freq: ParamId,
    pos_time: ParamId,
    mask_emb: ParamId,
    proxy: ParamId,
    body: Transformer,
}

impl MimEncoder {
    pub fn new(store: &mut Store, dims: MimDims, cfg: &MimConfig, rng: &mut StageRng) -> Self {
        let d = cfg.dim;
        let std = 1.0 / (d as f64).sqrt();
        Self {
            dims,
            dim: d,
            proxy_in_pool: cfg.proxy_in_pool,
            tok_table: embedding_table(store, "enc.tok", dims.k, d, std, rng),
            patch_proj: Linear::scaled(store, "enc.patch", dims.patch_dim, d, false, std, rng),
            pos_freq: embedding_table(store, "enc.pos_freq", dims.grid_h, d, std, rng),
            pos_time: embedding_table(store, "enc.pos_time", dims.grid_w, d, std, rng),
            mask_emb: embedding_table(store, "enc.mask", 1, d, std, rng),
            proxy: embedding_table(store, "enc.proxy", 1, d, std, rng),
            body: Transformer::new(store, "enc.body", d, cfg.depth, cfg.heads, cfg.mlp_ratio, cfg.dropout, rng),
        }
    }

    fn layout(&self, window: &MimWindow, plan: &MaskPlan) -> Vec<Slot> {
        let mut slots = vec![Slot::Proxy];
        for (pos, &v) in window.valid.iter().enumerate() {
            if !v || plan.dropped.binary_search(&pos).is_ok() {
                continue;
            }
            if plan.masked.binary_search(&pos).is_ok() {
                slots.push(Slot::Masked(pos));
            } else {
                slots.push(Slot::Visible(pos));
            }
        }
        slots
    }

    /// Sum of token, patch and factorized position embeddings, with mask and
    /// proxy slots substituted, as `[B, L, d]`.
    pub fn embed(&self, g: &mut G, store: &Store, windows: &[MimWindow], plans: &[MaskPlan]) -> Result<(Var, Vec<Vec<Slot>>, usize)> {
        let mut slots: Vec<Vec<Slot>> = windows.iter().zip(plans).map(|(w, p)| self.layout(w, p)).collect();
        let len = slots.iter().map(|s| s.len()).max().unwrap_or(1);
        for s in &mut slots {
            s.resize(len, Slot::Pad);
        }
        let (b, p, gw) = (windows.len(), self.dims.patch_dim, self.dims.grid_w);
        let n = b * len;
        let mut ids = vec![0usize; n];
        let mut hs = vec![0usize; n];
        let mut ws = vec![0usize; n];
        let mut tok_ind = vec![0f32; n];
        let mut pos_ind = vec![0f32; n];
        let mut mask_ind = vec![0f32; n];
        let mut proxy_ind = vec![0f32; n];
        let mut patches = vec![0f32; n * p];
        for (bi, (row, w)) in slots.iter().zip(windows).enumerate() {
            for (l, s) in row.iter().enumerate() {
                let i = bi * len + l;
                match *s {
                    Slot::Proxy => proxy_ind[i] = 1.0,
                    Slot::Visible(pos) | Slot::Masked(pos) => {
                        hs[i] = pos / gw;
                        ws[i] = pos % gw;
                        pos_ind[i] = 1.0;
                        if let Slot::Visible(_) = *s {
                            ids[i] = w.tokens[pos];
                            tok_ind[i] = 1.0;
                            patches[i * p..(i + 1) * p].copy_from_slice(&w.patches[pos * p..(pos + 1) * p]);
                        } else {
                            mask_ind[i] = 1.0;
                        }
                    }
                    Slot::Pad => {}
                }
            }
        }
        let col = |g: &mut G, v: Vec<f32>| -> Result<Var> { Ok(g.constant(Tensor::new(&[n, 1], v)?)) };
        let table = g.param(store, self.tok_table);
        let tok = g.index_select(table, &ids)?;
        let ti = col(g, tok_ind)?;
        let tok = g.mul(tok, ti)?;
        let pv = g.constant(Tensor::new(&[n, p], patches)?);
        let patch = self.patch_proj.forward(g, store, pv)?;
        let pf = g.param(store, self.pos_freq);
        let pf = g.index_select(pf, &hs)?;
        let pt = g.param(store, self.pos_time);
        let pt = g.index_select(pt, &ws)?;
        let pos = g.add(pf, pt)?;
        let pi = col(g, pos_ind)?;
        let pos = g.mul(pos, pi)?;
        let me = g.param(store, self.mask_emb);
        let mi = col(g, mask_ind)?;
        let mask = g.mul(mi, me)?;
        let px = g.param(store, self.proxy);
        let xi = col(g, proxy_ind)?;
        let proxy = g.mul(xi, px)?;
        let mut x = g.add(tok, patch)?;
        x = g.add(x, pos)?;
        x = g.add(x, mask)?;
        x = g.add(x, proxy)?;
        let x = g.reshape(x, &[b, len, self.dim])?;
        Ok((x, slots, len))
    }

    pub fn forward(&self, g: &mut G, store: &Store, windows: &[MimWindow], plans: &[MaskPlan], ctx: &mut Ctx) -> Result<EncOut> {
        let (x, slots, len) = self.embed(g, store, windows, plans)?;
        let key: Vec<bool> = slots.iter().flatten().map(|s| *s != Slot::Pad).collect();
        let hidden = self.body.forward(g, store, x, Some(&key), ctx)?;
        Ok(EncOut { hidden, slots, len })
    }

    /// Patient embedding: mean over valid kept tokens.
    pub fn pool(&self, g: &mut G, enc: &EncOut) -> Result<Var> {
        let mask = enc.pool_mask(self.proxy_in_pool);
        Ok(g.mean_pool_masked(enc.hidden, &mask)?)
    }

    /// Pooled embeddings of whole windows without masking or dropping.
    pub fn embed_windows(&self, store: &Store, windows: &[MimWindow]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(32) {
            let mut g = G::new();
            let plans = vec![MaskPlan::none(); chunk.len()];
            let enc = self.forward(&mut g, store, chunk, &plans, &mut Ctx::eval())?;
            let u = self.pool(&mut g, &enc)?;
            out.extend(g.value(u).data().chunks(self.dim).map(|r| r.to_vec()));
        }
        Ok(out)
    }
}

/// Full-grid decoder and weight-tied prediction head.
#[derive(Clone, Debug)]
pub struct MimDecoder {
    proj: Linear,
    pos: ParamId,
    body: Transformer,
    head_fc: Linear,
    head_ln: LayerNorm,
    head_bias: ParamId,
    dim: usize,
}

impl MimDecoder {
    pub fn new(store: &mut Store, dims: MimDims, cfg: &MimConfig, rng: &mut StageRng) -> Self {
        let dd = cfg.dec_dim;
        Self {
            proj: Linear::new(store, "dec.proj", cfg.dim, dd, true, rng),
            pos: embedding_table(store, "dec.pos", dims.tokens(), dd, 0.02, rng),
            body: Transformer::new(store, "dec.body", dd, cfg.dec_depth, cfg.dec_heads, cfg.mlp_ratio, cfg.dropout, rng),
            head_fc: Linear::new(store, "dec.head_fc", dd, cfg.dim, true, rng),
            head_ln: LayerNorm::new(store, "dec.head_ln", cfg.dim),
            head_bias: store.add("dec.head_bias", Tensor::zeros(&[dims.k])),
            dim: dd,
        }
    }

    /// Logits `[|M|, K]` over masked valid positions, in window then
    /// position order, with their target codes.
    pub fn forward(
        &self,
        g: &mut G,
        store: &Store,
        enc: &MimEncoder,
        out: &EncOut,
        windows: &[MimWindow],
        plans: &[MaskPlan],
        ctx: &mut Ctx,
    ) -> Result<(Var, Vec<usize>)> {
        let n = enc.dims.tokens();
        let b = windows.len();
        let flat = g.reshape(out.hidden, &[b * out.len, enc.dim])?;
        let proj = self.proj.forward(g, store, flat)?;
        let mut src = Vec::with_capacity(b * n);
        let mut key = Vec::with_capacity(b * n);
        for (bi, slots) in out.slots.iter().enumerate() {
            let mut at = vec![bi * out.len; n];
            for (l, s) in slots.iter().enumerate() {
                if let Slot::Visible(pos) = *s {
                    at[pos] = bi * out.len + l;
                }
            }
            src.extend(at);
            key.extend(&windows[bi].valid);
        }
        let full = g.index_select(proj, &src)?;
        let full = g.reshape(full, &[b, n, self.dim])?;
        let pos = g.param(store, self.pos);
        let full = g.add(full, pos)?;
        let h = self.body.forward(g, store, full, Some(&key), ctx)?;
        let h = g.reshape(h, &[b * n, self.dim])?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (bi, (w, p)) in windows.iter().zip(plans).enumerate() {
            for &pos in &p.masked {
                if w.valid[pos] {
                    rows.push(bi * n + pos);
                    targets.push(w.tokens[pos]);
                }
            }
        }
        if rows.is_empty() {
            return data("mask plan selects no valid position");
        }
        let hm = g.index_select(h, &rows)?;
        let hm = self.head_fc.forward(g, store, hm)?;
        let hm = g.gelu(hm);
        let hm = self.head_ln.forward(g, store, hm)?;
        let table = g.param(store, enc.tok_table);
        let logits = g.matmul_t(hm, table)?;
        let bias = g.param(store, self.head_bias);
        Ok((g.add(logits, bias)?, targets))
    }
}

/// Label-smoothed cross-entropy over masked positions.
pub fn mim_loss(g: &mut G, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
    Ok(g.cross_entropy(logits, targets, smoothing)?)
}

#[derive(Clone, Debug)]
pub struct MimModel {
    pub cfg: MimConfig,
    pub store: Store,
    pub enc: MimEncoder,
    pub dec: MimDecoder,
}

impl MimModel {
    pub fn new(cfg: &MimConfig, dims: MimDims, rng: &mut StageRng) -> Self {
        let mut store = Store::new();
        let enc = MimEncoder::new(&mut store, dims, cfg, rng);
        let dec = MimDecoder::new(&mut store, dims, cfg, rng);
        Self {
            cfg: cfg.clone(),
            store,
            enc,
            dec,
        }
    }

    /// `(hidden, u, logits, targets)` for a masked batch.
    pub fn forward(&self, g: &mut G, windows: &[MimWindow], plans: &[MaskPlan], ctx: &mut Ctx) -> Result<(EncOut, Var, Var, Vec<usize>)> {
        let out = self.enc.forward(g, &self.store, windows, plans, ctx)?;
        let u = self.enc.pool(g, &out)?;
        let (logits, targets) = self.dec.forward(g, &self.store, &self.enc, &out, windows, plans, ctx)?;
        Ok((out, u, logits, targets))
    }

    pub fn with_store(&self, store: Store) -> Self {
        Self {
            store,
            ..self.clone()
        }
    }

    pub fn plan(&self, w: &MimWindow, rng: &mut StageRng) -> MaskPlan {
        let c = &self.cfg;
        let valid: Vec<usize> = (0..w.valid.len()).filter(|&i| w.valid[i]).collect();
        let local = sample_mask_plan(valid.len(), c.mask_mu, c.mask_sigma, c.mask_bounds, c.r_drop, rng);
        MaskPlan {
            ratio: local.ratio,
            masked: local.masked.iter().map(|&i| valid[i]).collect(),
            dropped: local.dropped.iter().map(|&i| valid[i]).collect(),
        }
    }

    pub fn checkpoint(&self, ema: &Ema<f32>, adam: &Adam<f32>, profile_hash: &str, codebook_hash: &str) -> Checkpoint {
        let mut meta = CheckpointMeta {
            stage: "mim".into(),
            profile_hash: profile_hash.into(),
            discardable: vec!["dec.".into()],
            ..Default::default()
        };
        meta.notes.insert("dims".into(), serde_json::to_string(&self.enc.dims).expect("dims serialize"));
        meta.notes.insert("codebook_hash".into(), codebook_hash.into());
        Checkpoint::capture(&self.store, Some(ema), Some(adam), meta)
    }
}

/// Dimensions recorded in a Stage I checkpoint.
pub fn checkpoint_dims(ck: &Checkpoint) -> Result<MimDims> {
    let s = ck
        .meta
        .notes
        .get("dims")
        .ok_or_else(|| CoreError::Data("checkpoint lacks model dimensions".into()))?;
    serde_json::from_str(s).map_err(|e| CoreError::Data(format!("checkpoint dims: {e}")))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MimLog {
    pub step: u64,
    pub loss: f64,
    pub acc: f64,
    pub lr: f64,
}

impl MimLog {
    pub const HEADER: &'static str = "step\tloss\tacc\tlr";

    pub fn row(&self) -> String {
        format!("{}\t{:.6}\t{:.4}\t{:.3e}", self.step, self.loss, self.acc, self.lr)
    }
}

fn accuracy(logits: &Tensor<f32>, targets: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(k)
        .zip(targets)
        .filter(|(row, &t)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a })
                .0;
            best == t
        })
        .count();
    hits as f64 / targets.len().max(1) as f64
}

pub struct MimTrainer {
    pub model: MimModel,
    pub ema: Ema<f32>,
    pub opt: Adam<f32>,
    pub schedule: CosineSchedule,
    pub step: u64,
    rng: StageRng,
}

impl MimTrainer {
    pub fn new(cfg: &MimConfig, dims: MimDims, seed: u64, total_steps: u64) -> Self {
        let model = MimModel::new(cfg, dims, &mut stage_rng(seed, "mim.init"));
        let opt = Adam::new(&model.store, AdamConfig::adamw(cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay));
        Self {
            ema: Ema::new(&model.store, cfg.ema_decay),
            opt,
            schedule: CosineSchedule {
                base_lr: cfg.lr,
                min_lr: cfg.lr * 0.1,
                warmup_steps: cfg.warmup_steps,
                total_steps,
            },
            model,
            step: 0,
            rng: stage_rng(seed, "mim.train"),
        }
    }

    pub fn train_step(&mut self, windows: &[MimWindow]) -> Result<MimLog> {
        let plans: Vec<MaskPlan> = windows.iter().map(|w| self.model.plan(w, &mut self.rng)).collect();
        let mut g = G::new();
        let mut drop_rng = rng_from(derive_index(self.rng.random(), self.step));
        let mut ctx = Ctx::train(&mut drop_rng);
        let (_, _, logits, targets) = self.model.forward(&mut g, windows, &plans, &mut ctx)?;
        let loss = mim_loss(&mut g, logits, &targets, self.model.cfg.label_smoothing)?;
        let lv = g.scalar(loss);
        if !lv.is_finite() {
            return Err(CoreError::Numeric(format!("masked token loss at step {}", self.step)));
        }
        let acc = accuracy(g.value(logits), &targets);
        let mut grads = g.backward(loss)?.param_grads(&self.model.store);
        if self.model.cfg.grad_clip > 0.0 {
            clef_grad::clip_grad_norm(&mut grads, self.model.cfg.grad_clip);
        }
        let lr = self.schedule.lr(self.step);
        self.opt.step_lr(&mut self.model.store, &grads, lr)?;
        self.ema.update(&self.model.store);
        self.step += 1;
        Ok(MimLog {
            step: self.step - 1,
            loss: lv,
            acc,
            lr,
        })
    }

    pub fn ema_model(&self) -> MimModel {
        self.model.with_store(self.ema.to_store(&self.model.store))
    }
}

/// Steps implied by the config: `steps`, or whole epochs over `n` windows.
pub fn total_steps(cfg: &MimConfig, n: usize) -> u64 {
    if cfg.steps > 0 {
        cfg.steps
    } else {
        (cfg.epochs * n.div_ceil(cfg.batch.max(1))) as u64
    }
}

/// Stage I training over random batches from `source`.
pub fn train_mim<S: WindowSource + ?Sized>(
    cfg: &MimConfig,
    dims: MimDims,
    seed: u64,
    source: &S,
    mut progress: impl FnMut(&MimLog),
) -> Result<(MimTrainer, Vec<MimLog>)> {
    if source.is_empty() {
        return data("no windows to train on");
    }
    let steps = total_steps(cfg, source.len());
    let mut tr = MimTrainer::new(cfg, dims, seed, steps);
    let mut rng = stage_rng(seed, "mim.batches");
    let mut log = Vec::new();
    for _ in 0..steps {
        let batch: Result<Vec<MimWindow>> = (0..cfg.batch)
            .map(|_| source.window(rng.random_range(0..source.len())))
            .collect();
        let l = tr.train_step(&batch?)?;
        progress(&l);
        log.push(l);
    }
    Ok((tr, log))
}

/// Masked-token accuracy of `model` on `n` windows with fresh plans.
pub fn masked_accuracy<S: WindowSource + ?Sized>(model: &MimModel, source: &S, n: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let mut hits = 0.0;
    let mut total = 0usize;
    for chunk in (0..n).collect::<Vec<_>>().chunks(32) {
        let windows: Result<Vec<MimWindow>> = chunk
            .iter()
            .map(|_| source.window(rng.random_range(0..source.len())))
            .collect();
        let windows = windows?;
        let plans: Vec<MaskPlan> = windows.iter().map(|w| model.plan(w, &mut rng)).collect();
        let mut g = G::new();
        let (_, _, logits, targets) = model.forward(&mut g, &windows, &plans, &mut Ctx::eval())?;
        hits += accuracy(g.value(logits), &targets) * targets.len() as f64;
        total += targets.len();
    }
    Ok(hits / total.max(1) as f64)
}

/// Rebuilds the Stage I model from a checkpoint's inference weights.
pub fn load_mim(cfg: &MimConfig, ck: &Checkpoint) -> Result<MimModel> {
    if ck.meta.stage != "mim" {
        return data(format!("expected a Stage I checkpoint, found stage {:?}", ck.meta.stage));
    }
    let dims = checkpoint_dims(ck)?;
    let mut model = MimModel::new(cfg, dims, &mut rng_from(0));
    let table = if ck.table(TABLE_EMA).is_some() { TABLE_EMA } else { clef_grad::TABLE_PARAMS };
    let loaded = ck.load_into(table, &mut model.store, false)?;
    if loaded.len() != model.store.len() {
        return data(format!("Stage I checkpoint holds {} of {} parameters", loaded.len(), model.store.len()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> MimConfig {
        let mut c = Profile::desk().mim;
        c.dim = 16;
        c.heads = 2;
        c.dec_dim = 16;
        c.dec_heads = 2;
        c
    }

    fn dims() -> MimDims {
        MimDims {
            k: 8,
            grid_h: 2,
            grid_w: 3,
            patch_dim: 4,
        }
    }

    fn window(rng: &mut StageRng) -> MimWindow {
        let d = dims();
        MimWindow {
            tokens: (0..d.tokens()).map(|_| rng.random_range(0..d.k)).collect(),
            patches: (0..d.tokens() * d.patch_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            valid: vec![true; d.tokens()],
        }
    }

    #[test]
    fn degenerate_ratio_and_full_mask() {
        let mut rng = rng_from(1);
        for _ in 0..50 {
            assert_eq!(sample_mask_ratio(0.55, 0.0, [0.25, 1.0], &mut rng), 0.55);
        }
        let p = sample_mask_plan(20, 0.55, 0.15, [1.0, 1.0], 0.25, &mut rng);
        assert_eq!(p.masked, (0..20).collect::<Vec<_>>());
        assert_eq!(p.dropped.len(), 5);
        assert!(p.dropped.iter().all(|d| p.masked.contains(d)));
    }

    #[test]
    fn zero_tables_leave_token_row() {
        let mut rng = rng_from(2);
        let cfg = tiny_cfg();
        let mut m = MimModel::new(&cfg, dims(), &mut rng);
        for name in ["enc.pos_freq", "enc.pos_time", "enc.patch.w"] {
            let id = m.store.find(name).unwrap();
            let z = Tensor::zeros(m.store.get(id).shape());
            m.store.set(id, z).unwrap();
        }
        let w = window(&mut rng);
        let mut g = G::new();
        let (x, slots, len) = m.enc.embed(&mut g, &m.store, std::slice::from_ref(&w), &[MaskPlan::none()]).unwrap();
        assert_eq!(len, 7);
        let table = m.store.get(m.enc.tok_table);
        for (l, s) in slots[0].iter().enumerate() {
            if let Slot::Visible(pos) = *s {
                assert_eq!(&g.value(x).data()[l * 16..(l + 1) * 16], table.row(w.tokens[pos]));
            }
        }
    }

    #[test]
    fn positions_differ_by_time_table() {
        let mut rng = rng_from(3);
        let cfg = tiny_cfg();
        let m = MimModel::new(&cfg, dims(), &mut rng);
        let mut w = window(&mut rng);
        w.tokens = vec![5; 6];
        w.patches.fill(0.25);
        let mut g = G::new();
        let (x, _, _) = m.enc.embed(&mut g, &m.store, &[w], &[MaskPlan::none()]).unwrap();
        // slots 1.. are positions 0..6; positions 0 and 2 share h = 0
        let v = g.value(x).data();
        let pt = m.store.get(m.store.find("enc.pos_time").unwrap());
        for j in 0..16 {
            let got = v[3 * 16 + j] - v[16 + j];
            let want = pt.row(2)[j] - pt.row(0)[j];
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn logits_cover_masked_positions() {
        let mut rng = rng_from(4);
        let cfg = tiny_cfg();
        let m = MimModel::new(&cfg, dims(), &mut rng);
        let ws = vec![window(&mut rng), window(&mut rng)];
        let plans: Vec<MaskPlan> = ws.iter().map(|w| m.plan(w, &mut rng)).collect();
        let mut g = G::new();
        let (_, u, logits, targets) = m.forward(&mut g, &ws, &plans, &mut Ctx::eval()).unwrap();
        let nm: usize = plans.iter().map(|p| p.masked.len()).sum();
        assert_eq!(g.shape(logits), &[nm, 8]);
        assert_eq!(targets.len(), nm);
        assert_eq!(g.shape(u), &[2, 16]);
    }

    #[test]
    fn invalid_tail_does_not_move_embedding() {
        let mut rng = rng_from(5);
        let cfg = tiny_cfg();
        let m = MimModel::new(&cfg, dims(), &mut rng);
        let mut w = window(&mut rng);
        w.valid[4] = false;
        w.valid[5] = false;
        let a = m.enc.embed_windows(&m.store, std::slice::from_ref(&w)).unwrap();
        w.tokens.swap(4, 5);
        w.patches[16..].fill(9.0);
        let b = m.enc.embed_windows(&m.store, &[w]).unwrap();
        assert_eq!(a, b);
    }
}
